"""Part-prototype image classification with a sparse scoring sheet.

A small, fully inspectable stack: a reverse-mode autodiff core, a
prototype-based classifier with abstention, two-stage training
(self-supervised prototype pretraining, then sparse classifier training),
a synthetic confounded dataset, explanation and metric tooling, shortcut
detection with prototype disabling, a batch CLI, and an HTTP workbench.
"""

from protoscope.autodiff import Tensor, backward, record, zero_grads

__version__ = "0.1.0"

__all__ = ["Tensor", "backward", "record", "zero_grads", "__version__"]
