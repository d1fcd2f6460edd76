// Console view state. The server is the single authority: everything here
// is rebuilt from gateway snapshots plus the stream cursor, and a reload
// must reconstruct the identical view. No suppression (or any other)
// decision logic lives on the client.

import {
  Alarm,
  ChannelName,
  FramePayload,
  GraphPayload,
  RiskPayload,
  StatusPayload,
  StreamEvent,
  signatureKey,
} from "./types.js";

export interface ConsoleState {
  connected: boolean;
  mode: "full" | "safe";
  scenarioRunning: boolean;
  tMs: number;
  alarms: Map<string, Alarm>;
  alarmOrder: string[]; // server stream/snapshot order
  suppressedSignatures: Set<string>;
  risk: RiskPayload | null;
  graph: GraphPayload | null;
  lastFrame: FramePayload | null;
  cursors: Record<ChannelName, number>;
}

export function initialState(): ConsoleState {
  return {
    connected: false,
    mode: "full",
    scenarioRunning: false,
    tMs: 0,
    alarms: new Map(),
    alarmOrder: [],
    suppressedSignatures: new Set(),
    risk: null,
    graph: null,
    lastFrame: null,
    cursors: { alarms: 0, risk: 0, frames: 0, graph: 0, status: 0 },
  };
}

export function upsertAlarm(state: ConsoleState, alarm: Alarm): void {
  if (!state.alarms.has(alarm.id)) {
    state.alarmOrder.push(alarm.id);
  }
  state.alarms.set(alarm.id, alarm);
  if (alarm.suppressed_signatures) {
    state.suppressedSignatures = new Set(alarm.suppressed_signatures);
  }
}

export function applyStreamEvent(state: ConsoleState, msg: StreamEvent): void {
  if (msg.cursor <= state.cursors[msg.channel]) {
    return; // duplicate or stale replay; cursors only move forward
  }
  state.cursors[msg.channel] = msg.cursor;
  switch (msg.channel) {
    case "alarms":
      upsertAlarm(state, msg.event as unknown as Alarm);
      break;
    case "status": {
      const status = msg.event as unknown as StatusPayload;
      state.mode = status.mode;
      state.scenarioRunning = status.scenario_running;
      state.tMs = status.t_ms;
      break;
    }
    case "risk":
      state.risk = msg.event as unknown as RiskPayload;
      break;
    case "graph":
      state.graph = msg.event as unknown as GraphPayload;
      break;
    case "frames":
      state.lastFrame = msg.event as unknown as FramePayload;
      break;
  }
}

export interface Snapshot {
  health: StatusPayload;
  alarms: Alarm[];
  suppressed: Alarm[];
  risk: RiskPayload;
  graph: GraphPayload;
}

export function loadSnapshot(state: ConsoleState, snap: Snapshot): void {
  state.mode = snap.health.mode;
  state.scenarioRunning = snap.health.scenario_running;
  state.tMs = snap.health.t_ms;
  state.alarms = new Map();
  state.alarmOrder = [];
  for (const alarm of snap.alarms) {
    upsertAlarm(state, alarm);
  }
  state.suppressedSignatures = new Set(
    snap.suppressed.map((a) => signatureKey(a.signature)),
  );
  state.risk = snap.risk;
  state.graph = snap.graph;
}

export function visibleAlarms(state: ConsoleState): Alarm[] {
  return state.alarmOrder
    .map((id) => state.alarms.get(id)!)
    .filter((a) => a.state === "presented" || a.state === "escalated");
}

export function resolvedAlarms(state: ConsoleState): Alarm[] {
  return state.alarmOrder
    .map((id) => state.alarms.get(id)!)
    .filter((a) => a.state !== "presented" && a.state !== "escalated");
}

export function isSuppressed(state: ConsoleState, alarm: Alarm): boolean {
  return state.suppressedSignatures.has(signatureKey(alarm.signature));
}

// Canonical fingerprint of everything the operator sees; two states with
// equal fingerprints render the same console.
export function viewFingerprint(state: ConsoleState): string {
  const alarms = state.alarmOrder.map((id) => {
    const a = state.alarms.get(id)!;
    return {
      id: a.id,
      state: a.state,
      severity: a.severity,
      signature: a.signature,
      suppressedBadge: isSuppressed(state, a),
    };
  });
  return JSON.stringify({
    mode: state.mode,
    scenarioRunning: state.scenarioRunning,
    alarms,
    suppressed: [...state.suppressedSignatures].sort(),
    riskLevel: state.risk?.level ?? null,
    graphEpoch: state.graph?.epoch ?? null,
  });
}
