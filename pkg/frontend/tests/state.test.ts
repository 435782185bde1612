/** Session-state discipline: frozen baseline, server-confirmed mutations,
 * and job lifecycle bookkeeping. */

import { describe, expect, it } from "vitest";

import { WorkbenchApi } from "../src/api.js";
import { DashboardState, WorkbenchSession } from "../src/state.js";
import { Metrics, MutationAck } from "../src/types.js";

const metrics: Metrics = {
  accuracy: 0.9,
  f1: 0.8,
  sensitivity: 0.75,
  specificity: 0.95,
  sparsity: 0.5,
  global_size: 2,
  mean_local_size: 1.5,
  abstain_fraction: 0,
};

function unscripted(name: string) {
  return async () => {
    throw new Error(`unscripted call: ${name}`);
  };
}

function stubApi(overrides: Partial<WorkbenchApi> = {}): WorkbenchApi {
  return {
    session: async () => ({
      checkpoint: "ckpt",
      dataset: "data",
      version: 0,
      num_prototypes: 3,
      image_size: 32,
      disabled: [],
      subsets: { train: 4, test: 4 },
    }),
    prototypes: async () => ({
      version: 0,
      prototypes: [
        { prototype_id: 0, status: "active", class_weights: [1, 0], max_weight: 1 },
        { prototype_id: 1, status: "active", class_weights: [0, 0.4], max_weight: 0.4 },
        { prototype_id: 2, status: "active", class_weights: [0, 0], max_weight: 0 },
      ],
    }),
    metrics: async (subset: string) => ({ version: 0, subset, metrics }),
    patches: unscripted("patches"),
    disable: unscripted("disable"),
    enable: unscripted("enable"),
    evaluate: unscripted("evaluate"),
    job: unscripted("job"),
    shortcuts: unscripted("shortcuts"),
    counterfactual: unscripted("counterfactual"),
    predict: unscripted("predict"),
    log: unscripted("log"),
    ...overrides,
  };
}

function ackFor(id: number, disabled: number[]): MutationAck {
  return { version: 1, prototype_id: id, status: "disabled", disabled };
}

describe("DashboardState", () => {
  it("freezes the baseline and computes deltas against it", () => {
    const state = new DashboardState(metrics);
    expect(Object.isFrozen(state.baseline)).toBe(true);
    state.setCurrent({ ...metrics, accuracy: 0.85, global_size: 1 });
    expect(state.baseline.accuracy).toBe(0.9);
    const delta = state.delta();
    expect(delta.accuracy).toBeCloseTo(-0.05, 12);
    expect(delta.global_size).toBe(-1);
    expect(delta.sparsity).toBe(0);
  });

  it("starts with an all-zero delta", () => {
    const state = new DashboardState(metrics);
    for (const value of Object.values(state.delta())) {
      expect(value).toBe(0);
    }
  });
});

describe("WorkbenchSession mutations", () => {
  it("applies a disable only after the server acknowledges", async () => {
    let release: (ack: MutationAck) => void = () => {};
    const pending = new Promise<MutationAck>((resolve) => {
      release = resolve;
    });
    const api = stubApi({ disable: () => pending });
    const session = new WorkbenchSession(api);
    await session.start();

    const call = session.disablePrototype(0);
    // the ack has not arrived: nothing may change yet
    expect(session.prototypes[0].status).toBe("active");
    expect(session.mutationInFlight).toBe(true);

    release(ackFor(0, [0]));
    const ack = await call;
    expect(ack.disabled).toEqual([0]);
    expect(session.prototypes[0].status).toBe("disabled");
    expect(session.mutationInFlight).toBe(false);
  });

  it("leaves state untouched when the server rejects the mutation", async () => {
    const api = stubApi({
      disable: async () => {
        throw new Error("boom");
      },
    });
    const session = new WorkbenchSession(api);
    await session.start();
    await expect(session.disablePrototype(0)).rejects.toThrow("boom");
    expect(session.prototypes[0].status).toBe("active");
    expect(session.mutationInFlight).toBe(false);
    expect(session.dashboard!.history.length).toBe(0);
  });

  it("refuses overlapping mutations", async () => {
    let release: (ack: MutationAck) => void = () => {};
    const pending = new Promise<MutationAck>((resolve) => {
      release = resolve;
    });
    const api = stubApi({ disable: () => pending });
    const session = new WorkbenchSession(api);
    await session.start();

    const first = session.disablePrototype(0);
    await expect(session.disablePrototype(1)).rejects.toThrow("in flight");
    release(ackFor(0, [0]));
    await first;
  });

  it("counts disabled prototypes that carried weight at session start", async () => {
    const acks = [ackFor(1, [1]), ackFor(2, [1, 2])];
    const api = stubApi({ disable: async () => acks.shift()! });
    const session = new WorkbenchSession(api);
    await session.start();
    await session.disablePrototype(1);
    await session.disablePrototype(2);
    // p1 had weight 0.4, p2 had none: only p1 counts
    expect(session.relevantDisabledCount()).toBe(1);
    expect(session.dashboard!.history.map((h) => h.prototype_id)).toEqual([1, 2]);
  });
});

describe("WorkbenchSession evaluation", () => {
  it("tracks the pending job and lands its result in current metrics", async () => {
    const result = { ...metrics, accuracy: 0.7 };
    let observedPending = false;
    const api = stubApi({
      evaluate: async (subset: string) => ({
        job_id: "j1",
        status: "running",
        subset,
      }),
      job: async (jobId: string) => {
        observedPending = true;
        return {
          id: jobId,
          subset: "test",
          status: "done" as const,
          version: 1,
          result,
          error: null,
        };
      },
    });
    const session = new WorkbenchSession(api);
    await session.start();
    const status = await session.evaluate(0, 1000);
    expect(observedPending).toBe(true);
    expect(status.status).toBe("done");
    expect(session.dashboard!.pendingJob).toBeNull();
    expect(session.dashboard!.current.accuracy).toBe(0.7);
    expect(session.dashboard!.baseline.accuracy).toBe(0.9);
  });

  it("surfaces a failed job and clears the spinner", async () => {
    const api = stubApi({
      evaluate: async (subset: string) => ({
        job_id: "j2",
        status: "running",
        subset,
      }),
      job: async (jobId: string) => ({
        id: jobId,
        subset: "test",
        status: "failed" as const,
        version: 1,
        result: null,
        error: "subset vanished",
      }),
    });
    const session = new WorkbenchSession(api);
    await session.start();
    await expect(session.evaluate(0, 1000)).rejects.toThrow("subset vanished");
    expect(session.dashboard!.pendingJob).toBeNull();
  });
});
