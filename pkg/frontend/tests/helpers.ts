/** Fixture loading, HTML attribute extraction, and a replay API that
 * serves the recorded payloads in scripted order. */

import { readFileSync } from "node:fs";
import path from "node:path";
import { fileURLToPath } from "node:url";

import { WorkbenchApi } from "../src/api.js";
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
} from "../src/types.js";

const here = path.dirname(fileURLToPath(import.meta.url));

export function fixture<T>(name: string): T {
  const raw = readFileSync(path.join(here, "fixtures", name), "utf8");
  return JSON.parse(raw) as T;
}

export interface ScriptMeta {
  subset: string;
  positive_class: number;
  presence_thr: number;
  overlap_thr: number;
  flagged: number[];
  patch_k: number;
  image_size: number;
}

/** Attribute maps of every tag whose class list contains `cls`. The
 * renderers emit double-quoted attributes only, which keeps this regex
 * parse exact. */
export function tagsWithClass(
  html: string,
  cls: string,
): Record<string, string>[] {
  const out: Record<string, string>[] = [];
  const tagRe = /<(\w+)((?:\s+[\w-]+(?:="[^"]*")?)*)\s*\/?>/g;
  for (const tag of html.matchAll(tagRe)) {
    const attrs: Record<string, string> = {};
    const attrRe = /([\w-]+)(?:="([^"]*)")?/g;
    for (const a of (tag[2] ?? "").matchAll(attrRe)) {
      attrs[a[1]] = a[2] ?? "";
    }
    const classes = (attrs["class"] ?? "").split(/\s+/);
    if (classes.includes(cls)) out.push(attrs);
  }
  return out;
}

/** Replays recorded payloads. Routes with a before/after pair hand out
 * the "before" copy first; mutations must arrive in the recorded order. */
export class FixtureApi implements WorkbenchApi {
  readonly script = fixture<ScriptMeta>("scripted_session.json");
  calls: string[] = [];

  private prototypeQueue = [
    fixture<PrototypeList>("prototypes_before.json"),
    fixture<PrototypeList>("prototypes_after.json"),
  ];
  private metricsQueue = [
    fixture<MetricsEnvelope>("metrics_baseline.json"),
    fixture<MetricsEnvelope>("metrics_after.json"),
  ];
  private ackQueue = fixture<MutationAck[]>("disable_acks.json");
  private predictQueue = [
    fixture<Prediction>("predict.json"),
    fixture<Prediction>("predict_abstain.json"),
  ];

  private take<T>(queue: T[]): T {
    if (queue.length === 0) throw new Error("fixture queue exhausted");
    return queue.length > 1 ? queue.shift()! : queue[0];
  }

  async session(): Promise<SessionInfo> {
    this.calls.push("GET /session");
    return fixture<SessionInfo>("session.json");
  }

  async prototypes(): Promise<PrototypeList> {
    this.calls.push("GET /prototypes");
    return this.take(this.prototypeQueue);
  }

  async patches(prototypeId: number, k: number): Promise<PatchCard> {
    this.calls.push(`GET /prototypes/${prototypeId}/patches?k=${k}`);
    if (prototypeId !== this.script.flagged[0] || k !== this.script.patch_k) {
      throw new Error(`unscripted patches request p${prototypeId} k=${k}`);
    }
    return fixture<PatchCard>("patches.json");
  }

  async disable(prototypeId: number): Promise<MutationAck> {
    this.calls.push(`POST /prototypes/${prototypeId}/disable`);
    const ack = this.ackQueue.shift();
    if (!ack || ack.prototype_id !== prototypeId) {
      throw new Error(`unscripted disable of p${prototypeId}`);
    }
    return ack;
  }

  async enable(prototypeId: number): Promise<MutationAck> {
    throw new Error(`unscripted enable of p${prototypeId}`);
  }

  async metrics(subset: string): Promise<MetricsEnvelope> {
    this.calls.push(`GET /metrics?subset=${subset}`);
    if (subset !== this.script.subset) {
      throw new Error(`unscripted metrics subset ${subset}`);
    }
    return this.take(this.metricsQueue);
  }

  async evaluate(subset: string): Promise<JobTicket> {
    this.calls.push(`POST /evaluate ${subset}`);
    return fixture<JobTicket>("evaluate_ticket.json");
  }

  async job(jobId: string): Promise<JobStatus> {
    this.calls.push(`GET /jobs/${jobId}`);
    const done = fixture<JobStatus>("job_done.json");
    if (done.id !== jobId) throw new Error(`unknown job ${jobId}`);
    return done;
  }

  async shortcuts(
    presenceThr: number,
    overlapThr: number,
  ): Promise<ShortcutReport> {
    this.calls.push(`GET /shortcuts?${presenceThr}&${overlapThr}`);
    if (
      presenceThr !== this.script.presence_thr ||
      overlapThr !== this.script.overlap_thr
    ) {
      throw new Error("unscripted shortcut thresholds");
    }
    return fixture<ShortcutReport>("shortcuts.json");
  }

  async counterfactual(targetClass: number): Promise<CounterfactualReport> {
    this.calls.push(`POST /counterfactual ${targetClass}`);
    return fixture<CounterfactualReport>("counterfactual.json");
  }

  async predict(): Promise<Prediction> {
    this.calls.push("POST /predict");
    return this.take(this.predictQueue);
  }

  async log(): Promise<LogPayload> {
    this.calls.push("GET /log");
    return fixture<LogPayload>("log.json");
  }
}
