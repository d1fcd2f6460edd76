// Single WebSocket to the gateway's stream endpoint. On reconnect the
// client resubscribes with the last seen cursor per channel, so no event
// is duplicated or lost across drops.

import { ChannelName, StreamEvent } from "./types.js";

type EventHandler = (msg: StreamEvent) => void;
type ConnectionHandler = (connected: boolean) => void;

const RECONNECT_DELAY_MS = 1000;

export class StreamClient {
  private ws: WebSocket | null = null;
  private closed = false;
  private cursors: Partial<Record<ChannelName, number>> = {};

  constructor(
    private url: string,
    private channels: ChannelName[],
    private onEvent: EventHandler,
    private onConnection: ConnectionHandler = () => {},
    private wsFactory: (url: string) => WebSocket = (u) => new WebSocket(u),
  ) {}

  start(cursors: Partial<Record<ChannelName, number>> = {}): void {
    this.cursors = { ...cursors };
    this.closed = false;
    this.connect();
  }

  private connect(): void {
    if (this.closed) return;
    const ws = this.wsFactory(this.url);
    this.ws = ws;
    ws.onopen = () => {
      ws.send(
        JSON.stringify({ subscribe: this.channels, cursor: this.cursors }),
      );
      this.onConnection(true);
    };
    ws.onmessage = (ev: MessageEvent) => {
      const msg = JSON.parse(String(ev.data)) as StreamEvent;
      this.cursors[msg.channel] = msg.cursor;
      this.onEvent(msg);
    };
    ws.onclose = () => {
      this.onConnection(false);
      if (!this.closed) {
        setTimeout(() => this.connect(), RECONNECT_DELAY_MS);
      }
    };
    ws.onerror = () => {
      ws.close();
    };
  }

  stop(): void {
    this.closed = true;
    this.ws?.close();
  }
}
