// Console bootstrap: pull the snapshot, open the stream, wire the actions.
// All truth lives on the server; the client only mirrors it.

import { ApiError, GatewayClient } from "./api.js";
import { render, ViewName } from "./render.js";
import {
  ConsoleState,
  applyStreamEvent,
  initialState,
  loadSnapshot,
  upsertAlarm,
} from "./state.js";
import { StreamClient } from "./stream.js";
import { Alarm, ChannelName } from "./types.js";

const CHANNELS: ChannelName[] = ["alarms", "risk", "frames", "graph", "status"];

async function boot(): Promise<void> {
  const root = document.getElementById("app")!;
  const client = new GatewayClient("");
  const state: ConsoleState = initialState();
  let activeView: ViewName = "alarms";
  let notice: string | null = null;

  const redraw = () => render(root, state, activeView, actions, notice);

  const flash = (text: string) => {
    notice = text;
    redraw();
    setTimeout(() => {
      notice = null;
      redraw();
    }, 4000);
  };

  const guard = async (op: () => Promise<unknown>) => {
    try {
      await op();
    } catch (err) {
      // conflicts (stale alarm, double e-stop) surface inline, never retry
      flash(err instanceof ApiError ? `server: ${err.message}` : String(err));
    }
    redraw();
  };

  const actions = {
    feedback: (alarmId: string, action: "dismiss" | "confirm") =>
      guard(async () => {
        const alarm = (await client.feedback(alarmId, action)) as Alarm;
        upsertAlarm(state, alarm);
      }),
    // no optimistic UI for safety actions: the banner follows the ack/stream
    estop: () => guard(() => client.estop()),
    safeMode: (action: "enter" | "exit") => guard(() => client.safeMode(action)),
    inject: (kind: string, magnitude: number | null, durationMs: number) =>
      guard(() => client.inject(kind, magnitude, durationMs)),
    scenarioStart: () => guard(() => client.scenarioStart()),
    scenarioStop: () => guard(() => client.scenarioStop()),
  };

  for (const name of ["alarms", "safety", "system", "scenario"] as ViewName[]) {
    document.getElementById(`tab-${name}`)!.onclick = () => {
      activeView = name;
      document
        .querySelectorAll(".tab")
        .forEach((t) => t.classList.toggle("active", t.id === `tab-${name}`));
      redraw();
    };
  }

  loadSnapshot(state, await client.snapshot());
  redraw();

  const wsUrl = location.origin.replace(/^http/, "ws") + "/v1/stream";
  const stream = new StreamClient(
    wsUrl,
    CHANNELS,
    (msg) => {
      applyStreamEvent(state, msg);
      redraw();
    },
    (connected) => {
      state.connected = connected;
      redraw();
    },
  );
  stream.start(state.cursors);
}

boot().catch((err) => {
  document.getElementById("app")!.textContent = `console failed to start: ${err}`;
});
