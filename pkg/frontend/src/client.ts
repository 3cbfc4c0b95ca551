/** Promise-based command client over any WebSocket-compatible transport. */

import {
  decodeFrame,
  encodeCommand,
  parseReply,
  type Frame,
} from "./protocol.js";

/** Structural subset of the browser WebSocket / the `ws` package socket. */
export interface SocketLike {
  binaryType: string;
  send(data: string): void;
  close(): void;
  addEventListener(type: string, listener: (event: any) => void): void;
}

export interface ModelInfo {
  name: string;
  lineage_id: string;
  parent_id: string | null;
  channels: number;
  layout: string;
  param_count: number;
}

export interface SessionInfo {
  mesh: string;
  n_vertices: number;
  model: string;
  graft_model: string | null;
  playing: boolean;
  speed: number;
  orientation: number;
  vis_mode: string;
  layout: string;
  step_counter: number;
}

export interface MeshData {
  name: string;
  positions: number[];
  normals: number[];
  triangles: number[];
  n_vertices: number;
}

export interface HelloData {
  models: ModelInfo[];
  meshes: string[];
  session: SessionInfo;
  mesh_data: MeshData;
}

interface PendingCommand {
  resolve: (data: Record<string, unknown>) => void;
  reject: (error: Error) => void;
}

export class ServiceClient {
  /** Latest decoded frame lands here; a render loop reads it at its own pace. */
  onFrame: ((frame: Frame) => void) | null = null;
  /** Errors the server did not tie to one of our commands. */
  onServiceError: ((message: string) => void) | null = null;

  private nextId = 1;
  private pending = new Map<string, PendingCommand>();

  constructor(private readonly socket: SocketLike) {
    socket.binaryType = "arraybuffer";
    socket.addEventListener("message", (event: { data: unknown }) => {
      this.handleMessage(event.data);
    });
    socket.addEventListener("close", () => {
      this.failAll("connection closed");
    });
    socket.addEventListener("error", () => {
      this.failAll("connection error");
    });
  }

  request(cmd: string, params: Record<string, unknown> = {}): Promise<Record<string, unknown>> {
    const id = `c${this.nextId++}`;
    return new Promise((resolve, reject) => {
      this.pending.set(id, { resolve, reject });
      try {
        this.socket.send(encodeCommand(id, cmd, params));
      } catch (error) {
        this.pending.delete(id);
        reject(error instanceof Error ? error : new Error(String(error)));
      }
    });
  }

  hello(): Promise<HelloData> {
    return this.request("hello") as Promise<unknown> as Promise<HelloData>;
  }

  close(): void {
    this.socket.close();
  }

  private handleMessage(data: unknown): void {
    if (typeof data === "string") {
      this.handleReply(data);
      return;
    }
    if (data instanceof ArrayBuffer) {
      this.onFrame?.(decodeFrame(data));
      return;
    }
    // some transports hand binary messages over as a view onto a buffer
    if (ArrayBuffer.isView(data)) {
      const view = data as ArrayBufferView;
      const copy = view.buffer.slice(view.byteOffset, view.byteOffset + view.byteLength);
      this.onFrame?.(decodeFrame(copy as ArrayBuffer));
      return;
    }
    throw new Error(`unsupported message payload: ${Object.prototype.toString.call(data)}`);
  }

  private handleReply(text: string): void {
    const reply = parseReply(text);
    const entry = reply.id === null ? undefined : this.pending.get(String(reply.id));
    if (!entry) {
      if (reply.type === "error") {
        this.onServiceError?.(reply.message);
      }
      return;
    }
    this.pending.delete(String(reply.id));
    if (reply.type === "ack") {
      entry.resolve(reply.data);
    } else {
      entry.reject(new Error(reply.message));
    }
  }

  private failAll(message: string): void {
    for (const entry of this.pending.values()) {
      entry.reject(new Error(message));
    }
    this.pending.clear();
  }
}
