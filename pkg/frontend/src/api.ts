/** Typed client for the workbench HTTP API. */

import {
  CounterfactualReport,
  JobStatus,
  JobTicket,
  LogPayload,
  MetricsEnvelope,
  MutationAck,
  PatchCard,
  Prediction,
  PrototypeList,
  SessionInfo,
  ShortcutReport,
} from "./types.js";

export class ApiError extends Error {
  constructor(public status: number, public detail: string) {
    super(`API ${status}: ${detail}`);
  }
}

/** Everything a workbench view may ask of the server. */
export interface WorkbenchApi {
  session(): Promise<SessionInfo>;
  prototypes(): Promise<PrototypeList>;
  patches(prototypeId: number, k: number): Promise<PatchCard>;
  disable(prototypeId: number): Promise<MutationAck>;
  enable(prototypeId: number): Promise<MutationAck>;
  metrics(subset: string, positiveClass?: number): Promise<MetricsEnvelope>;
  evaluate(subset: string, positiveClass?: number): Promise<JobTicket>;
  job(jobId: string): Promise<JobStatus>;
  shortcuts(presenceThr: number, overlapThr: number): Promise<ShortcutReport>;
  counterfactual(targetClass: number): Promise<CounterfactualReport>;
  predict(file: Blob, filename: string): Promise<Prediction>;
  log(): Promise<LogPayload>;
}

async function asJson<T>(resp: Response): Promise<T> {
  if (!resp.ok) {
    let detail = resp.statusText;
    try {
      const body = await resp.json();
      if (body && typeof body.detail === "string") detail = body.detail;
    } catch {
      /* non-JSON error body; keep the status text */
    }
    throw new ApiError(resp.status, detail);
  }
  return (await resp.json()) as T;
}

export class HttpWorkbenchApi implements WorkbenchApi {
  constructor(private base: string = "") {}

  private get<T>(path: string): Promise<T> {
    return fetch(this.base + path).then((r) => asJson<T>(r));
  }

  private post<T>(path: string, body?: unknown): Promise<T> {
    const init: RequestInit = { method: "POST" };
    if (body !== undefined) {
      init.headers = { "content-type": "application/json" };
      init.body = JSON.stringify(body);
    }
    return fetch(this.base + path, init).then((r) => asJson<T>(r));
  }

  session() {
    return this.get<SessionInfo>("/session");
  }

  prototypes() {
    return this.get<PrototypeList>("/prototypes");
  }

  patches(prototypeId: number, k: number) {
    return this.get<PatchCard>(`/prototypes/${prototypeId}/patches?k=${k}`);
  }

  disable(prototypeId: number) {
    return this.post<MutationAck>(`/prototypes/${prototypeId}/disable`);
  }

  enable(prototypeId: number) {
    return this.post<MutationAck>(`/prototypes/${prototypeId}/enable`);
  }

  metrics(subset: string, positiveClass = 1) {
    return this.get<MetricsEnvelope>(
      `/metrics?subset=${encodeURIComponent(subset)}&positive_class=${positiveClass}`,
    );
  }

  evaluate(subset: string, positiveClass = 1) {
    return this.post<JobTicket>("/evaluate", {
      subset,
      positive_class: positiveClass,
    });
  }

  job(jobId: string) {
    return this.get<JobStatus>(`/jobs/${jobId}`);
  }

  shortcuts(presenceThr: number, overlapThr: number) {
    return this.get<ShortcutReport>(
      `/shortcuts?presence_thr=${presenceThr}&overlap_thr=${overlapThr}`,
    );
  }

  counterfactual(targetClass: number) {
    return this.post<CounterfactualReport>("/counterfactual", {
      target_class: targetClass,
    });
  }

  async predict(file: Blob, filename: string): Promise<Prediction> {
    const form = new FormData();
    form.append("file", file, filename);
    const resp = await fetch(this.base + "/predict", {
      method: "POST",
      body: form,
    });
    return asJson<Prediction>(resp);
  }

  log() {
    return this.get<LogPayload>("/log");
  }
}
