/**
 * Coordinator app: create a session, request allocations, enter responses,
 * watch the posterior evolve.  Human-paced, so status is polled.
 */

import { ApiClient, ApiRequestError } from "./api.js";
import { SessionFlow } from "./state.js";
import { validateResponseValue, validateWizard } from "./validate.js";
import {
  allocationView,
  dashboardView,
  historyView,
  sessionHeaderView,
  show,
} from "./views.js";
import { clear, el, table } from "./dom.js";

const POLL_MS = 3000;

const api = new ApiClient("");
let flow: SessionFlow | null = null;
let pollTimer: number | undefined;

const wizardSection = document.getElementById("wizard")!;
const sessionSection = document.getElementById("session")!;
const wizardError = document.getElementById("wizard-error")!;
const headerBox = document.getElementById("session-header")!;
const actionBox = document.getElementById("action-panel")!;
const dashboardBox = document.getElementById("dashboard")!;
const historyBox = document.getElementById("history")!;

function readWizardForm(): unknown {
  const read = (id: string) => (document.getElementById(id) as HTMLInputElement).value;
  const policyKind = read("policy-kind") as "optimal" | "mab" | "randomized";
  const form: Record<string, unknown> = {
    family: read("family"),
    direction: read("direction"),
    n_patients: Number(read("n-patients")),
    n_cycles: Number(read("n-cycles")),
    policy: { kind: policyKind },
  };
  const seed = read("seed").trim();
  if (seed !== "") {
    form.seed = Number(seed);
  }
  return form;
}

async function onCreate(): Promise<void> {
  wizardError.textContent = "";
  const result = validateWizard(readWizardForm());
  if (!result.ok) {
    const [field, message] = Object.entries(result.errors)[0];
    wizardError.textContent = `${field}: ${message}`;
    return;
  }
  try {
    flow = await SessionFlow.create(api, result.value);
  } catch (err) {
    wizardError.textContent = err instanceof ApiRequestError
      ? `${err.error.code}: ${err.error.message}`
      : String(err);
    return;
  }
  wizardSection.hidden = true;
  sessionSection.hidden = false;
  render();
  schedulePoll();
}

function schedulePoll(): void {
  if (pollTimer !== undefined) {
    window.clearInterval(pollTimer);
  }
  pollTimer = window.setInterval(async () => {
    if (flow && flow.status !== "complete") {
      await flow.refresh();
      render();
    }
  }, POLL_MS);
}

function render(): void {
  if (!flow) {
    return;
  }
  renderHeader();
  renderAction();
  renderDashboard();
  renderHistory();
}

function renderHeader(): void {
  const view = sessionHeaderView(flow!.info);
  clear(headerBox);
  headerBox.appendChild(el("h2", undefined, view.title));
  headerBox.appendChild(el("span", `status status-${view.status}`, view.status));
  headerBox.appendChild(el("p", undefined, `${view.progress} — next: ${view.cursor}`));
}

function renderAction(): void {
  clear(actionBox);
  const actions = flow!.availableActions();
  if (actions.includes("allocate")) {
    const button = el("button", "primary", "Request next allocation") as HTMLButtonElement;
    button.onclick = async () => {
      await flow!.requestAllocation();
      render();
    };
    actionBox.appendChild(button);
    return;
  }
  if (actions.includes("submit") && flow!.allocation) {
    const view = allocationView(flow!.allocation, flow!.info.spec.policy.kind);
    actionBox.appendChild(el("h3", undefined, view.heading));
    const rec = el("p", "recommendation", `recommended: ${view.recommendedLabel}`);
    if (view.badge) {
      rec.appendChild(el("span", "badge", view.badge));
    }
    actionBox.appendChild(rec);
    for (const row of view.rows) {
      actionBox.appendChild(
        el("p", row.highlighted ? "diag highlighted" : "diag", `${row.label}: ${row.value}`));
    }
    if (view.barPair) {
      for (const bar of view.barPair) {
        const wrap = el("div", "bar-wrap");
        const fill = el("div", "bar-fill");
        fill.style.width = `${bar.percent}%`;
        wrap.appendChild(fill);
        wrap.appendChild(el("span", "bar-label", `${bar.label}: ${bar.value}`));
        actionBox.appendChild(wrap);
      }
    }
    const form = el("div", "response-form");
    const input = el("input") as HTMLInputElement;
    input.id = "response-value";
    input.placeholder = "observed response";
    const armSelect = el("select") as HTMLSelectElement;
    for (const arm of [0, 1]) {
      const opt = el("option", undefined, arm === 1 ? "treatment (1)" : "placebo (0)") as HTMLOptionElement;
      opt.value = String(arm);
      if (arm === flow!.allocation.recommended) {
        opt.selected = true;
      }
      armSelect.appendChild(opt);
    }
    const error = el("p", "error");
    const submit = el("button", "primary", "Submit response") as HTMLButtonElement;
    submit.onclick = async () => {
      error.textContent = "";
      const checked = validateResponseValue(input.value, flow!.info.spec.family);
      if (!checked.ok) {
        error.textContent = checked.error;
        return;
      }
      submit.disabled = true;
      try {
        await flow!.submitResponse(Number(armSelect.value) as 0 | 1, checked.value);
      } catch (err) {
        error.textContent = err instanceof ApiRequestError
          ? `${err.error.code}: ${err.error.message}`
          : String(err);
        return;
      } finally {
        submit.disabled = false;
      }
      render();
    };
    form.appendChild(input);
    form.appendChild(armSelect);
    form.appendChild(submit);
    form.appendChild(error);
    actionBox.appendChild(form);
    return;
  }
  actionBox.appendChild(el("p", undefined, "Trial complete."));
}

function renderDashboard(): void {
  clear(dashboardBox);
  if (!flow!.posterior) {
    return;
  }
  const view = dashboardView(flow!.posterior);
  dashboardBox.appendChild(el("h3", undefined, "Population parameters"));
  dashboardBox.appendChild(table(
    ["parameter", "mean", "sd", "95% interval"],
    view.population.map((row) => [row.name, row.mean, row.sd, row.interval]),
  ));
  dashboardBox.appendChild(el("h3", undefined, "Per-patient treatment effects"));
  dashboardBox.appendChild(table(
    ["patient", "effect mean", "sd", "95% interval", "preferred", "p(best=0)", "p(best=1)"],
    view.patients.map((row) => [
      row.patient, row.effect.mean, row.effect.sd, row.effect.interval,
      row.preferredLabel, row.pBest.arm0, row.pBest.arm1,
    ]),
    view.patients.map((row) => (row.flagged ? "flagged" : null)),
  ));
  dashboardBox.appendChild(el("h3", undefined, "Posterior log-determinant by cycle"));
  dashboardBox.appendChild(table(
    ["cycle", "log det"],
    view.logDetTrend.map((row) => [row.cycle, row.value]),
  ));
}

function renderHistory(): void {
  clear(historyBox);
  const rows = historyView(flow!.info.observations);
  historyBox.appendChild(el("h3", undefined, `History (${show(rows.length)})`));
  historyBox.appendChild(table(
    ["slot", "treatment", "response"],
    rows.map((row) => [row.label, row.treatment, row.response]),
  ));
}

document.getElementById("create-session")!.addEventListener("click", () => {
  void onCreate();
});
