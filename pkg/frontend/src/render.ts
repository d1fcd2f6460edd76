// DOM rendering for the four operator views. Rendering is a pure function
// of ConsoleState; actions are delegated back through the handler table.

import {
  ConsoleState,
  isSuppressed,
  resolvedAlarms,
  visibleAlarms,
} from "./state.js";
import { Alarm } from "./types.js";

export interface Actions {
  feedback(alarmId: string, action: "dismiss" | "confirm"): void;
  estop(): void;
  safeMode(action: "enter" | "exit"): void;
  inject(kind: string, magnitude: number | null, durationMs: number): void;
  scenarioStart(): void;
  scenarioStop(): void;
}

function el(tag: string, cls?: string, text?: string): HTMLElement {
  const node = document.createElement(tag);
  if (cls) node.className = cls;
  if (text !== undefined) node.textContent = text;
  return node;
}

function alarmRow(
  state: ConsoleState,
  alarm: Alarm,
  actions: Actions,
  actionable: boolean,
): HTMLElement {
  const row = el("div", `alarm sev-${alarm.severity}`);
  const head = el("div", "alarm-head");
  head.appendChild(el("span", "alarm-id", alarm.id));
  head.appendChild(el("span", "alarm-kind", alarm.signature.kind));
  head.appendChild(
    el("span", "alarm-target", `${alarm.signature.detector_id} · ${alarm.signature.target}`),
  );
  head.appendChild(el("span", "alarm-t", `t+${(alarm.t_ms / 1000).toFixed(1)}s`));
  if (isSuppressed(state, alarm)) {
    head.appendChild(el("span", "badge suppressed", "suppressed"));
  }
  if (alarm.state !== "presented") {
    head.appendChild(el("span", `badge state-${alarm.state}`, alarm.state));
  }
  row.appendChild(head);
  if (actionable) {
    const buttons = el("div", "alarm-actions");
    const dismiss = el("button", "btn dismiss", "dismiss") as HTMLButtonElement;
    const confirm = el("button", "btn confirm", "confirm") as HTMLButtonElement;
    dismiss.disabled = confirm.disabled = !state.connected;
    dismiss.onclick = () => actions.feedback(alarm.id, "dismiss");
    confirm.onclick = () => actions.feedback(alarm.id, "confirm");
    buttons.appendChild(dismiss);
    buttons.appendChild(confirm);
    row.appendChild(buttons);
  }
  return row;
}

function renderAlarms(state: ConsoleState, actions: Actions): HTMLElement {
  const view = el("div", "view");
  const active = visibleAlarms(state);
  view.appendChild(el("h2", undefined, `Triage (${active.length})`));
  if (!active.length) {
    view.appendChild(el("p", "empty", "no alarms awaiting triage"));
  }
  for (const alarm of active) {
    view.appendChild(alarmRow(state, alarm, actions, true));
  }
  const resolved = resolvedAlarms(state).slice(-12).reverse();
  view.appendChild(el("h2", undefined, "Recent resolved"));
  for (const alarm of resolved) {
    view.appendChild(alarmRow(state, alarm, actions, alarm.state === "suppressed"));
  }
  return view;
}

function renderSafety(state: ConsoleState, actions: Actions): HTMLElement {
  const view = el("div", "view");
  view.appendChild(el("h2", undefined, "Risk"));
  const risk = state.risk;
  const level = risk?.level ?? 0;
  const gauge = el("div", "gauge");
  const fill = el("div", "gauge-fill");
  fill.style.width = `${Math.min(100, level * 100)}%`;
  gauge.appendChild(fill);
  view.appendChild(gauge);
  view.appendChild(
    el("p", "risk-detail",
       `accumulated ${level === null ? "∞" : level.toFixed(3)} · ` +
       `excursions ${risk?.excursions_in_window ?? 0}`),
  );
  const dims = risk?.last_exceedances ?? {};
  const table = el("table", "dims");
  for (const [name, value] of Object.entries(dims)) {
    const tr = el("tr", value > 0 ? "exceeding" : "");
    tr.appendChild(el("td", undefined, name));
    tr.appendChild(el("td", undefined,
                      (risk?.last_values?.[name] ?? 0).toFixed(3)));
    tr.appendChild(el("td", undefined, value.toFixed(3)));
    table.appendChild(tr);
  }
  view.appendChild(table);

  const estop = el("button", "btn estop", "EMERGENCY STOP") as HTMLButtonElement;
  estop.disabled = !state.connected || state.mode === "safe";
  estop.onclick = () => actions.estop();
  view.appendChild(estop);

  const exit = el("button", "btn", "exit safe mode") as HTMLButtonElement;
  exit.disabled = !state.connected || state.mode === "full";
  exit.onclick = () => actions.safeMode("exit");
  view.appendChild(exit);
  return view;
}

function renderSystem(state: ConsoleState): HTMLElement {
  const view = el("div", "view");
  view.appendChild(el("h2", undefined, "System graph"));
  const graph = state.graph;
  if (!graph) {
    view.appendChild(el("p", "empty", "no graph yet"));
    return view;
  }
  const groupOf: Record<string, string> = {};
  for (const [group, members] of Object.entries(graph.grouping.groups)) {
    for (const member of members) groupOf[member] = group;
  }
  const nodes = el("div", "nodes");
  for (const node of graph.graph.nodes) {
    const chip = el("span", "node-chip",
                    groupOf[node.id] ? `${node.id} [${groupOf[node.id]}]` : node.id);
    nodes.appendChild(chip);
  }
  view.appendChild(nodes);
  const edges = el("ul", "edges");
  for (const edge of graph.graph.edges) {
    edges.appendChild(
      el("li", undefined, `${edge.from} → ${edge.to} (${edge.topics.join(", ")})`),
    );
  }
  view.appendChild(edges);
  if (state.lastFrame) {
    view.appendChild(el("h2", undefined, "Rates (last window)"));
    const table = el("table", "rates");
    for (const [topic, rate] of Object.entries(state.lastFrame.per_topic_rate)) {
      const tr = el("tr");
      tr.appendChild(el("td", undefined, topic));
      tr.appendChild(el("td", undefined, `${rate.toFixed(1)}/s`));
      table.appendChild(tr);
    }
    view.appendChild(table);
  }
  return view;
}

function renderScenario(state: ConsoleState, actions: Actions): HTMLElement {
  const view = el("div", "view");
  view.appendChild(el("h2", undefined, "Scenario"));
  view.appendChild(el("p", undefined,
                      state.scenarioRunning
                        ? `running · t = ${(state.tMs / 1000).toFixed(1)} s`
                        : "idle"));
  const start = el("button", "btn", "start") as HTMLButtonElement;
  start.disabled = !state.connected || state.scenarioRunning;
  start.onclick = () => actions.scenarioStart();
  const stop = el("button", "btn", "stop") as HTMLButtonElement;
  stop.disabled = !state.connected || !state.scenarioRunning;
  stop.onclick = () => actions.scenarioStop();
  view.appendChild(start);
  view.appendChild(stop);

  view.appendChild(el("h2", undefined, "Inject"));
  const form = el("div", "inject-form");
  const select = document.createElement("select");
  for (const kind of ["jerky_direction", "controller_disconnect",
                      "counterintuitive_path", "varying_speed", "sensor_splash"]) {
    const opt = document.createElement("option");
    opt.value = kind;
    opt.textContent = kind;
    select.appendChild(opt);
  }
  const duration = document.createElement("input");
  duration.type = "number";
  duration.value = "4000";
  const fire = el("button", "btn", "inject") as HTMLButtonElement;
  fire.disabled = !state.connected || !state.scenarioRunning;
  fire.onclick = () =>
    actions.inject(select.value, null, parseInt(duration.value, 10));
  form.appendChild(select);
  form.appendChild(duration);
  form.appendChild(fire);
  view.appendChild(form);
  return view;
}

export type ViewName = "alarms" | "safety" | "system" | "scenario";

export function render(
  root: HTMLElement,
  state: ConsoleState,
  active: ViewName,
  actions: Actions,
  notice: string | null,
): void {
  root.textContent = "";
  const banner = el("div", `banner mode-${state.mode}`);
  banner.appendChild(el("span", "mode-label",
                        state.mode === "safe" ? "SAFE" : "FULL"));
  banner.appendChild(el("span", "clock", `t+${(state.tMs / 1000).toFixed(1)}s`));
  if (!state.connected) {
    banner.appendChild(el("span", "disconnected", "DISCONNECTED — controls locked"));
  }
  if (notice) {
    banner.appendChild(el("span", "notice", notice));
  }
  root.appendChild(banner);

  const views: Record<ViewName, () => HTMLElement> = {
    alarms: () => renderAlarms(state, actions),
    safety: () => renderSafety(state, actions),
    system: () => renderSystem(state),
    scenario: () => renderScenario(state, actions),
  };
  root.appendChild(views[active]());
}
