/** Pointer-to-brush plumbing: screen coordinates to NDC, and a throttle that
 * coalesces stroke points so the command channel never floods. */

export interface BrushParams {
  mode: "regenerate" | "graft";
  radius: number;
  delta: number;
}

export type SendFn = (
  cmd: string,
  params: Record<string, unknown>,
) => Promise<Record<string, unknown>>;

export interface CanvasRect {
  left: number;
  top: number;
  width: number;
  height: number;
}

/** Pixel coordinates to normalized device coordinates, y up. */
export function pointerToNdc(x: number, y: number, rect: CanvasRect): [number, number] {
  return [
    ((x - rect.left) / rect.width) * 2 - 1,
    1 - ((y - rect.top) / rect.height) * 2,
  ];
}

/** Rate-limits brush commands to maxPerSec, always shipping the newest stroke
 * point: intermediate points within one interval collapse into the latest. */
export class BrushThrottle {
  sent = 0;

  private readonly minIntervalMs: number;
  private lastSentAt = Number.NEGATIVE_INFINITY;
  private queued: Record<string, unknown> | null = null;
  private timer: ReturnType<typeof setTimeout> | null = null;

  constructor(
    private readonly send: SendFn,
    maxPerSec = 20,
  ) {
    if (!(maxPerSec > 0)) {
      throw new Error(`maxPerSec must be positive, got ${maxPerSec}`);
    }
    this.minIntervalMs = 1000 / maxPerSec;
  }

  stroke(ndc: [number, number], viewProjection: number[], params: BrushParams): void {
    if (viewProjection.length !== 16) {
      throw new Error(`view projection needs 16 entries, got ${viewProjection.length}`);
    }
    this.queued = {
      mode: params.mode,
      ndc: [ndc[0], ndc[1]],
      radius: params.radius,
      delta: params.delta,
      view_projection: [...viewProjection],
    };
    this.pump();
  }

  /** True while a coalesced point is still waiting for its slot. */
  get hasQueued(): boolean {
    return this.queued !== null;
  }

  private pump(): void {
    if (this.queued === null) return;
    const wait = this.lastSentAt + this.minIntervalMs - Date.now();
    if (wait <= 0) {
      const params = this.queued;
      this.queued = null;
      this.lastSentAt = Date.now();
      this.sent += 1;
      void this.send("brush", params).catch(() => {
        // a rejected stroke must not break the stroke stream
      });
      return;
    }
    if (this.timer === null) {
      this.timer = setTimeout(() => {
        this.timer = null;
        this.pump();
      }, wait);
    }
  }
}
