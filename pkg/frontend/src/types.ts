/** JSON payload shapes served by the workbench API. The UI renders these
 * verbatim; it never derives model numbers of its own. */

export type PrototypeStatus = "active" | "disabled";

export interface SessionInfo {
  checkpoint: string;
  dataset: string;
  version: number;
  num_prototypes: number;
  image_size: number;
  disabled: number[];
  subsets: Record<string, number>;
}

export interface PrototypeRow {
  prototype_id: number;
  status: PrototypeStatus;
  class_weights: number[];
  max_weight: number;
}

export interface PrototypeList {
  version: number;
  prototypes: PrototypeRow[];
}

export interface PatchThumb {
  image_index: number;
  image_ref: string;
  rectangle: number[];
  score: number;
  asset: string;
}

export interface PatchCard {
  prototype_id: number;
  status: string;
  class_weights: number[];
  patches: PatchThumb[];
  version: number;
}

export interface MutationAck {
  version: number;
  prototype_id: number;
  status: PrototypeStatus;
  disabled: number[];
}

export interface Metrics {
  accuracy: number;
  f1: number;
  sensitivity: number;
  specificity: number;
  sparsity: number;
  global_size: number;
  mean_local_size: number;
  abstain_fraction: number;
}

export const METRIC_KEYS: (keyof Metrics)[] = [
  "accuracy", "f1", "sensitivity", "specificity",
  "sparsity", "global_size", "mean_local_size", "abstain_fraction",
];

export interface MetricsEnvelope {
  version: number;
  subset: string;
  metrics: Metrics;
}

export interface JobTicket {
  job_id: string;
  status: string;
  subset: string;
}

export interface JobStatus {
  id: string;
  subset: string;
  status: "running" | "done" | "failed";
  version: number;
  result: Metrics | null;
  error: string | null;
}

export interface ShortcutRow {
  prototype_id: number;
  activation_count: number;
  overlap_count: number;
  overlap_fraction: number;
  flagged: boolean;
}

export interface ShortcutReport {
  presence_thr: number;
  overlap_thr: number;
  flagged: number[];
  prototypes: ShortcutRow[];
}

export interface ExplanationEntry {
  prototype_id: number;
  presence: number;
  location: number[];
  rectangle: number[];
  contributions: number[];
}

export interface Explanation {
  scores: number[];
  label: number;
  abstained: boolean;
  entries: ExplanationEntry[];
}

export interface Prediction {
  version: number;
  label: number;
  abstained: boolean;
  scores: number[];
  explanation: Explanation;
}

export interface SubsetOutcome {
  accuracy: number;
  abstain_fraction: number;
}

export interface CounterfactualRow {
  subset: string;
  n: number;
  original: SubsetOutcome;
  adapted: SubsetOutcome;
}

export interface CounterfactualReport {
  target_class: number;
  flagged: number[];
  rows: CounterfactualRow[];
  version?: number;
}

export interface LogEntry {
  timestamp: string;
  prototype_id: number;
  action: string;
  actor: string;
  metrics_before: Record<string, number> | null;
  metrics_after: Record<string, number> | null;
}

export interface LogPayload {
  entries: LogEntry[];
}
