#!/usr/bin/env python3
"""A first walk through the gradient engine: record a computation on the
tape, run it backward, and spot-check one gradient against a finite
difference."""

import numpy as np

from protoscope import autodiff as ad

rng = np.random.default_rng(7)

# tensors are float32 arrays with an optional gradient slot
x = ad.Tensor(rng.uniform(0.2, 1.0, size=(2, 3, 8, 8)), requires_grad=True)
w = ad.Tensor(rng.uniform(-0.3, 0.3, size=(4, 3, 3, 3)), requires_grad=True)
gamma = ad.Tensor(np.ones(4), requires_grad=True)
beta = ad.Tensor(np.zeros(4), requires_grad=True)

# ops only hit the tape inside a record() block
with ad.record():
    h = ad.conv2d(x, w, stride=2, padding=1)
    h = ad.instance_norm(h, gamma, beta)
    h = ad.relu(h)
    pooled, locations = ad.spatial_max_pool(h)
    loss = ad.mean_all(pooled)
    ad.backward(loss)

print("loss:", loss.item())
print("grad shapes:", x.grad.shape, w.grad.shape)
print("where the pool looked (sample 0):")
print(locations[0])

# central finite difference on one weight entry, as a sanity check
idx = (1, 2, 0, 1)
h_step = 1e-3


def forward(weights):
    xp = np.pad(x.data.astype(np.float64), ((0, 0), (0, 0), (1, 1), (1, 1)))
    win = np.lib.stride_tricks.sliding_window_view(xp, (3, 3), axis=(2, 3))
    win = win[:, :, ::2, ::2]
    out = np.einsum("nchwij,ocij->nohw", win, weights)
    m = out.mean(axis=(2, 3), keepdims=True)
    v = out.var(axis=(2, 3), keepdims=True)
    out = (out - m) / np.sqrt(v + 1e-5)
    out = np.maximum(out, 0.0)
    return out.reshape(2, 4, -1).max(axis=2).mean()


bumped = w.data.astype(np.float64).copy()
bumped[idx] += h_step
up = forward(bumped)
bumped[idx] -= 2 * h_step
down = forward(bumped)
fd = (up - down) / (2 * h_step)
print(f"analytic dL/dw{list(idx)} = {w.grad[idx]:+.6f}")
print(f"finite difference       = {fd:+.6f}")

# gradients accumulate until cleared, so training loops zero them per step
ad.zero_grads([x, w, gamma, beta])
print("grads cleared:", x.grad is None)
