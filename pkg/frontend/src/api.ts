// Thin typed wrappers over the gateway's /v1 endpoints. Every user action
// is exactly one gateway request; errors surface as ApiError with the
// server's message.

import { Alarm, GraphPayload, RiskPayload, StatusPayload } from "./types.js";
import { Snapshot } from "./state.js";

export class ApiError extends Error {
  constructor(
    public status: number,
    message: string,
  ) {
    super(message);
  }
}

export class GatewayClient {
  constructor(
    private base: string = "",
    private fetchFn: typeof fetch = fetch.bind(globalThis),
  ) {}

  private async request<T>(
    method: string,
    path: string,
    body?: unknown,
  ): Promise<T> {
    const resp = await this.fetchFn(this.base + path, {
      method,
      headers: body !== undefined ? { "content-type": "application/json" } : {},
      body: body !== undefined ? JSON.stringify(body) : undefined,
    });
    const payload = await resp.json().catch(() => ({}));
    if (!resp.ok) {
      const message =
        (payload as { error?: string }).error ?? `HTTP ${resp.status}`;
      throw new ApiError(resp.status, message);
    }
    return payload as T;
  }

  health(): Promise<StatusPayload> {
    return this.request("GET", "/v1/health");
  }

  metrics(): Promise<Record<string, unknown>> {
    return this.request("GET", "/v1/metrics");
  }

  alarms(state?: string): Promise<Alarm[]> {
    const query = state ? `?state=${encodeURIComponent(state)}` : "";
    return this.request("GET", `/v1/alarms${query}`);
  }

  risk(): Promise<RiskPayload> {
    return this.request("GET", "/v1/risk");
  }

  graph(): Promise<GraphPayload> {
    return this.request("GET", "/v1/graph");
  }

  feedback(alarmId: string, action: "dismiss" | "confirm"): Promise<Alarm> {
    return this.request("POST", `/v1/alarms/${alarmId}/feedback`, { action });
  }

  estop(): Promise<{ mode: string; t_ms: number }> {
    return this.request("POST", "/v1/estop");
  }

  safeMode(action: "enter" | "exit"): Promise<{ mode: string }> {
    return this.request("POST", "/v1/safe_mode", { action });
  }

  inject(
    kind: string,
    magnitude: number | null,
    durationMs: number,
  ): Promise<{ injection_id: string }> {
    return this.request("POST", "/v1/inject", {
      kind,
      magnitude,
      duration_ms: durationMs,
    });
  }

  scenarioStart(): Promise<{ status: string }> {
    return this.request("POST", "/v1/scenario/start");
  }

  scenarioStop(): Promise<{ status: string }> {
    return this.request("POST", "/v1/scenario/stop");
  }

  // One round of GETs sufficient to rebuild the whole view after a reload.
  async snapshot(): Promise<Snapshot> {
    const [health, alarms, suppressed, risk, graph] = await Promise.all([
      this.health(),
      this.alarms(),
      this.alarms("suppressed"),
      this.risk(),
      this.graph(),
    ]);
    return { health, alarms, suppressed, risk, graph };
  }
}
