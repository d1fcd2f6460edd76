// Wire types mirroring the gateway's /v1 JSON payloads.

export interface AlarmSignature {
  detector_id: string;
  target: string;
  kind: string;
}

export interface AlarmTransition {
  state: string;
  t_ms: number;
  reason: string | null;
}

export interface Alarm {
  id: string;
  t_ms: number;
  signature: AlarmSignature;
  severity: "info" | "warning" | "critical";
  state: string;
  score: number;
  reason: string | null;
  source: Record<string, unknown>;
  transitions: AlarmTransition[];
  suppressed_signatures?: string[];
}

export interface StatusPayload {
  status: string;
  mode: "full" | "safe";
  scenario_running: boolean;
  t_ms: number;
}

export interface RiskPayload {
  t_ms?: number;
  enabled: boolean;
  level: number | null;
  armed?: boolean;
  excursions_in_window?: number;
  total_excursions?: number;
  last_values?: Record<string, number>;
  last_exceedances?: Record<string, number>;
}

export interface GraphNode {
  id: string;
  tags: string[];
}

export interface GraphEdge {
  from: string;
  to: string;
  topics: string[];
}

export interface GraphPayload {
  graph: { nodes: GraphNode[]; edges: GraphEdge[] };
  grouping: {
    groups: Record<string, string[]>;
    ungrouped: string[];
    empty_groups: string[];
  };
  epoch: number;
}

export interface FramePayload {
  window: [number, number];
  per_topic_rate: Record<string, number>;
  total_rate: number;
  time_bucket: { hour: number; weekday: number; id: string };
}

export type ChannelName = "alarms" | "risk" | "frames" | "graph" | "status";

export interface StreamEvent {
  channel: ChannelName;
  cursor: number;
  event: Record<string, unknown>;
}

export function signatureKey(sig: AlarmSignature): string {
  return `${sig.detector_id}|${sig.target}|${sig.kind}`;
}
