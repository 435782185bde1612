/** Browser bootstrap: wires the pure renderers to the live API. All
 * interaction is event-delegated; views re-render from session state after
 * each confirmed server response. */

import { HttpWorkbenchApi } from "./api.js";
import {
  renderBanner,
  renderImageInspector,
  renderMetricsDashboard,
  renderPatchGrid,
  renderPrototypeBrowser,
  SortMode,
} from "./render.js";
import { WorkbenchSession } from "./state.js";
import { Prediction } from "./types.js";

const api = new HttpWorkbenchApi("");
const session = new WorkbenchSession(api);

const view = {
  sort: "weight" as SortMode,
  flaggedOnly: false,
  presenceThr: 0.1,
  overlapThr: 0.2,
  prediction: null as Prediction | null,
  predictionUrl: "",
};

const $ = (id: string) => document.getElementById(id) as HTMLElement;

function paintBrowser() {
  $("browser").innerHTML = renderPrototypeBrowser(session.prototypes, {
    sort: view.sort,
    flaggedOnly: view.flaggedOnly,
    shortcuts: session.shortcuts,
    busy: session.mutationInFlight,
  });
}

function paintDashboard() {
  if (!session.dashboard) return;
  $("dashboard").innerHTML = renderMetricsDashboard(session.dashboard, {
    counterfactual: session.counterfactual,
  });
}

function paintInspector() {
  if (!view.prediction || !session.info) return;
  $("inspector").innerHTML = renderImageInspector(
    view.prediction,
    session.info.image_size,
    view.predictionUrl,
  );
}

function paintAll() {
  paintBrowser();
  paintDashboard();
  paintInspector();
}

function showError(err: unknown) {
  $("banner").innerHTML = renderBanner(
    err instanceof Error ? err.message : String(err),
  );
}

function clearError() {
  $("banner").innerHTML = "";
}

async function boot() {
  try {
    await session.start("test");
    await session.loadShortcuts(view.presenceThr, view.overlapThr);
    clearError();
    paintAll();
  } catch (err) {
    showError(err);
  }
}

function wireEvents() {
  $("banner").addEventListener("click", (ev) => {
    const target = ev.target as HTMLElement;
    if (target.dataset.action === "retry") void boot();
  });

  ($("sort-mode") as HTMLSelectElement).addEventListener("change", (ev) => {
    view.sort = (ev.target as HTMLSelectElement).value as SortMode;
    paintBrowser();
  });

  ($("flagged-only") as HTMLInputElement).addEventListener("change", (ev) => {
    view.flaggedOnly = (ev.target as HTMLInputElement).checked;
    paintBrowser();
  });

  $("browser").addEventListener("click", async (ev) => {
    const target = ev.target as HTMLElement;
    const action = target.dataset.action;
    if (action === "disable" || action === "enable") {
      const id = Number(target.dataset.prototypeId);
      try {
        await session.setEnabled(id, action === "enable");
        clearError();
      } catch (err) {
        showError(err);
      }
      paintBrowser();
      return;
    }
    const card = (target.closest(".proto-card") as HTMLElement) ?? null;
    if (card) {
      const id = Number(card.dataset.prototypeId);
      try {
        const patches = await api.patches(id, 10);
        $("patches").innerHTML = renderPatchGrid(patches);
      } catch (err) {
        showError(err);
      }
    }
  });

  $("evaluate").addEventListener("click", async () => {
    try {
      paintDashboard();
      await session.evaluate();
      clearError();
    } catch (err) {
      showError(err);
    }
    paintDashboard();
  });

  $("counterfactual").addEventListener("click", async () => {
    try {
      await session.loadCounterfactual(1);
      clearError();
    } catch (err) {
      showError(err);
    }
    paintDashboard();
  });

  ($("upload") as HTMLInputElement).addEventListener("change", async (ev) => {
    const input = ev.target as HTMLInputElement;
    const file = input.files?.[0];
    if (!file) return;
    try {
      view.prediction = await api.predict(file, file.name);
      view.predictionUrl = URL.createObjectURL(file);
      clearError();
    } catch (err) {
      showError(err);
    }
    paintInspector();
  });
}

wireEvents();
void boot();
