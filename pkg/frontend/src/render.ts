/** Pure HTML renderers. Every model number lands in a data-* attribute
 * exactly as the API reported it (String() of the JSON value), so contract
 * tests can check the rendered page against raw payloads; the visible text
 * is just a rounded copy for humans. */

import { DashboardState } from "./state.js";
import {
  CounterfactualReport,
  Metrics,
  METRIC_KEYS,
  PatchCard,
  Prediction,
  PrototypeRow,
  ShortcutReport,
} from "./types.js";

export function esc(text: string): string {
  return text
    .replace(/&/g, "&amp;")
    .replace(/</g, "&lt;")
    .replace(/>/g, "&gt;")
    .replace(/"/g, "&quot;");
}

const show = (v: number) => (Number.isInteger(v) ? String(v) : v.toFixed(3));

export type SortMode = "weight" | "overlap";

export interface BrowserOptions {
  sort?: SortMode;
  flaggedOnly?: boolean;
  shortcuts?: ShortcutReport | null;
  busy?: boolean;
}

function overlapOf(
  shortcuts: ShortcutReport | null | undefined,
  id: number,
): number {
  if (!shortcuts) return 0;
  const row = shortcuts.prototypes.find((r) => r.prototype_id === id);
  return row ? row.overlap_fraction : 0;
}

export function renderPrototypeCard(
  row: PrototypeRow,
  options: BrowserOptions = {},
): string {
  const flaggedSet = new Set(options.shortcuts?.flagged ?? []);
  const flagged = flaggedSet.has(row.prototype_id);
  const overlap = overlapOf(options.shortcuts, row.prototype_id);
  const disabled = row.status === "disabled";
  const action = disabled ? "enable" : "disable";
  const weights = row.class_weights
    .map((w, c) => `<span class="weight" data-class="${c}" data-weight="${w}">${show(w)}</span>`)
    .join(" ");
  const badge = flagged
    ? `<span class="flag-badge" data-overlap-fraction="${overlap}">` +
      `shortcut ${show(overlap)}</span>`
    : "";
  return (
    `<div class="proto-card${disabled ? " is-disabled" : ""}` +
    `${flagged ? " is-flagged" : ""}" ` +
    `data-prototype-id="${row.prototype_id}" data-status="${row.status}" ` +
    `data-max-weight="${row.max_weight}">` +
    `<header>p${row.prototype_id} ${badge}</header>` +
    `<div class="weights">${weights}</div>` +
    `<button class="toggle" data-action="${action}" ` +
    `data-prototype-id="${row.prototype_id}"` +
    `${options.busy ? " disabled" : ""}>${action}</button>` +
    `</div>`
  );
}

/** Card grid over all prototypes; weight sort mirrors the API's own
 * ordering of relevance, overlap sort is for debugging sessions. */
export function renderPrototypeBrowser(
  rows: PrototypeRow[],
  options: BrowserOptions = {},
): string {
  const sort: SortMode = options.sort ?? "weight";
  const flaggedSet = new Set(options.shortcuts?.flagged ?? []);
  let chosen = rows;
  if (options.flaggedOnly) {
    chosen = rows.filter((r) => flaggedSet.has(r.prototype_id));
  }
  const ordered = [...chosen].sort((a, b) => {
    const key =
      sort === "weight"
        ? b.max_weight - a.max_weight
        : overlapOf(options.shortcuts, b.prototype_id) -
          overlapOf(options.shortcuts, a.prototype_id);
    return key !== 0 ? key : a.prototype_id - b.prototype_id;
  });
  const cards = ordered.map((r) => renderPrototypeCard(r, options)).join("\n");
  return `<div class="proto-browser" data-count="${ordered.length}" data-sort="${sort}">\n${cards}\n</div>`;
}

export function renderPatchGrid(card: PatchCard): string {
  const cells = card.patches
    .map(
      (p, rank) =>
        `<figure class="patch" data-rank="${rank}" ` +
        `data-image-index="${p.image_index}" ` +
        `data-rectangle="${p.rectangle.join(",")}" data-score="${p.score}">` +
        `<img src="${esc(p.asset)}" alt="patch ${rank}">` +
        `<figcaption>${esc(p.image_ref)} · ${show(p.score)}</figcaption>` +
        `</figure>`,
    )
    .join("\n");
  return (
    `<div class="patch-grid" data-prototype-id="${card.prototype_id}" ` +
    `data-status="${card.status}">\n${cells}\n</div>`
  );
}

export interface DashboardOptions {
  counterfactual?: CounterfactualReport | null;
}

function metricsRows(baseline: Metrics, current: Metrics): string {
  return METRIC_KEYS.map((key) => {
    const b = baseline[key];
    const c = current[key];
    const d = c - b;
    return (
      `<tr class="metric-row" data-metric="${key}" data-baseline="${b}" ` +
      `data-current="${c}" data-delta="${d}">` +
      `<td>${key}</td><td>${show(b)}</td><td>${show(c)}</td>` +
      `<td>${d === 0 ? "0" : show(d)}</td></tr>`
    );
  }).join("\n");
}

function counterfactualRows(report: CounterfactualReport): string {
  const rows = report.rows
    .map(
      (r) =>
        `<tr class="cf-row" data-subset="${esc(r.subset)}" data-n="${r.n}" ` +
        `data-original-accuracy="${r.original.accuracy}" ` +
        `data-adapted-accuracy="${r.adapted.accuracy}" ` +
        `data-original-abstain="${r.original.abstain_fraction}" ` +
        `data-adapted-abstain="${r.adapted.abstain_fraction}">` +
        `<td>${esc(r.subset)}</td><td>${r.n}</td>` +
        `<td>${show(r.original.accuracy)}</td>` +
        `<td>${show(r.adapted.accuracy)}</td></tr>`,
    )
    .join("\n");
  return (
    `<table class="cf-table" data-flagged-count="${report.flagged.length}">` +
    `<thead><tr><th>subset</th><th>n</th><th>original</th>` +
    `<th>adapted</th></tr></thead><tbody>\n${rows}\n</tbody></table>`
  );
}

/** Baseline-vs-current panel; counterfactual rows appended when present. */
export function renderMetricsDashboard(
  state: DashboardState,
  options: DashboardOptions = {},
): string {
  const spinner = state.pendingJob
    ? `<div class="job-spinner" data-job-id="${esc(state.pendingJob.job_id)}">` +
      `evaluating ${esc(state.pendingJob.subset)}… ` +
      `(job ${esc(state.pendingJob.job_id)})</div>`
    : "";
  const table =
    `<table class="metrics-table">` +
    `<thead><tr><th>metric</th><th>baseline</th><th>current</th>` +
    `<th>delta</th></tr></thead><tbody>\n` +
    metricsRows(state.baseline, state.current) +
    `\n</tbody></table>`;
  const cf = options.counterfactual
    ? counterfactualRows(options.counterfactual)
    : "";
  return `<div class="dashboard">${spinner}${table}${cf}</div>`;
}

/** Prototype rectangles over an image, or an explicit empty-evidence
 * state when the classifier abstained. Coordinates come straight from the
 * API: (top, left, bottom, right) pixels, rendered as percentages of the
 * native image size so the overlay scales with the on-screen copy. */
export function renderImageInspector(
  prediction: Prediction,
  imageSize: number,
  imageUrl = "",
): string {
  const pct = (v: number) => (100 * v) / imageSize;
  const explanation = prediction.explanation;
  let overlays: string;
  if (prediction.abstained) {
    overlays = `<div class="abstain-badge">no evidence found</div>`;
  } else {
    overlays = explanation.entries
      .map((entry) => {
        const [top, left, bottom, right] = entry.rectangle;
        const contribution =
          prediction.label >= 0 ? entry.contributions[prediction.label] : 0;
        return (
          `<div class="proto-rect" data-prototype-id="${entry.prototype_id}" ` +
          `data-top="${top}" data-left="${left}" data-bottom="${bottom}" ` +
          `data-right="${right}" data-presence="${entry.presence}" ` +
          `data-contribution="${contribution}" ` +
          `style="top:${pct(top)}%;left:${pct(left)}%;` +
          `height:${pct(bottom - top)}%;width:${pct(right - left)}%;">` +
          `<span class="rect-label">p${entry.prototype_id} +${show(contribution)}</span>` +
          `</div>`
        );
      })
      .join("\n");
  }
  const img = imageUrl
    ? `<img class="inspected" src="${esc(imageUrl)}" alt="inspected image">`
    : "";
  const scores = prediction.scores
    .map((s, c) => `<span data-class="${c}" data-score="${s}">${show(s)}</span>`)
    .join(" ");
  return (
    `<div class="inspector" data-label="${prediction.label}" ` +
    `data-abstained="${prediction.abstained}">` +
    `<div class="stage">${img}${overlays}</div>` +
    `<div class="scores">${scores}</div>` +
    `</div>`
  );
}

export function renderBanner(message: string): string {
  return (
    `<div class="banner error" role="alert">${esc(message)} ` +
    `<button class="retry" data-action="retry">retry</button></div>`
  );
}
