/** Client-side session state. Numbers flow in from the API and are stored
 * untouched; the only arithmetic here is the baseline-vs-current delta on
 * already-reported metrics. */

import { WorkbenchApi } from "./api.js";
import {
  CounterfactualReport,
  JobStatus,
  JobTicket,
  Metrics,
  METRIC_KEYS,
  PrototypeRow,
  SessionInfo,
  ShortcutReport,
} from "./types.js";

export interface Intervention {
  prototype_id: number;
  action: "disable" | "enable";
  version: number;
}

export class DashboardState {
  /** Metrics at session start; never reassigned, deltas always refer here. */
  readonly baseline: Metrics;
  private current_: Metrics;
  pendingJob: JobTicket | null = null;
  history: Intervention[] = [];

  constructor(baseline: Metrics) {
    this.baseline = Object.freeze({ ...baseline });
    this.current_ = { ...baseline };
  }

  get current(): Metrics {
    return this.current_;
  }

  setCurrent(metrics: Metrics) {
    this.current_ = { ...metrics };
  }

  delta(): Record<string, number> {
    const out: Record<string, number> = {};
    for (const key of METRIC_KEYS) {
      out[key] = this.current_[key] - this.baseline[key];
    }
    return out;
  }
}

const sleep = (ms: number) => new Promise((r) => setTimeout(r, ms));

export class WorkbenchSession {
  info: SessionInfo | null = null;
  prototypes: PrototypeRow[] = [];
  version = 0;
  subset = "test";
  shortcuts: ShortcutReport | null = null;
  dashboard: DashboardState | null = null;
  counterfactual: CounterfactualReport | null = null;
  /** True while a disable/enable round-trip is outstanding; views render
   * their mutation buttons inert during that window. */
  mutationInFlight = false;

  private baselineRelevant = new Set<number>();

  constructor(private api: WorkbenchApi) {}

  async start(subset = "test") {
    this.subset = subset;
    this.info = await this.api.session();
    const list = await this.api.prototypes();
    this.prototypes = list.prototypes;
    this.version = list.version;
    for (const row of this.prototypes) {
      if (row.max_weight > 0) this.baselineRelevant.add(row.prototype_id);
    }
    const envelope = await this.api.metrics(subset);
    this.dashboard = new DashboardState(envelope.metrics);
  }

  async loadShortcuts(presenceThr: number, overlapThr: number) {
    this.shortcuts = await this.api.shortcuts(presenceThr, overlapThr);
    return this.shortcuts;
  }

  flaggedIds(): number[] {
    return this.shortcuts ? [...this.shortcuts.flagged] : [];
  }

  private requireStarted(): DashboardState {
    if (!this.dashboard) throw new Error("session not started");
    return this.dashboard;
  }

  /** Disable or enable one prototype. Local state is only touched after
   * the server acknowledges, so a failed call leaves the view truthful. */
  async setEnabled(prototypeId: number, enabled: boolean) {
    const dashboard = this.requireStarted();
    if (this.mutationInFlight) {
      throw new Error("another prototype mutation is still in flight");
    }
    this.mutationInFlight = true;
    try {
      const ack = enabled
        ? await this.api.enable(prototypeId)
        : await this.api.disable(prototypeId);
      this.version = ack.version;
      const disabled = new Set(ack.disabled);
      for (const row of this.prototypes) {
        row.status = disabled.has(row.prototype_id) ? "disabled" : "active";
      }
      dashboard.history.push({
        prototype_id: ack.prototype_id,
        action: enabled ? "enable" : "disable",
        version: ack.version,
      });
      return ack;
    } finally {
      this.mutationInFlight = false;
    }
  }

  disablePrototype(id: number) {
    return this.setEnabled(id, false);
  }

  enablePrototype(id: number) {
    return this.setEnabled(id, true);
  }

  /** Count of currently disabled prototypes that carried weight at session
   * start; the dashboard's global-size delta should mirror -count. */
  relevantDisabledCount(): number {
    return this.prototypes.filter(
      (row) =>
        row.status === "disabled" &&
        this.baselineRelevant.has(row.prototype_id),
    ).length;
  }

  async refreshMetrics() {
    const dashboard = this.requireStarted();
    const envelope = await this.api.metrics(this.subset);
    dashboard.setCurrent(envelope.metrics);
    return envelope;
  }

  /** Kick off a server-side evaluation and poll it to completion. */
  async evaluate(pollMs = 100, timeoutMs = 120000): Promise<JobStatus> {
    const dashboard = this.requireStarted();
    const ticket = await this.api.evaluate(this.subset);
    dashboard.pendingJob = ticket;
    try {
      const deadline = Date.now() + timeoutMs;
      let status = await this.api.job(ticket.job_id);
      while (status.status === "running") {
        if (Date.now() > deadline) {
          throw new Error(`evaluation job ${ticket.job_id} timed out`);
        }
        await sleep(pollMs);
        status = await this.api.job(ticket.job_id);
      }
      if (status.status === "failed" || !status.result) {
        throw new Error(
          `evaluation job ${ticket.job_id} failed: ${status.error}`,
        );
      }
      dashboard.setCurrent(status.result);
      return status;
    } finally {
      dashboard.pendingJob = null;
    }
  }

  async loadCounterfactual(targetClass = 1) {
    this.counterfactual = await this.api.counterfactual(targetClass);
    return this.counterfactual;
  }
}
