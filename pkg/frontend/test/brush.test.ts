import { afterEach, beforeEach, describe, expect, it, vi } from "vitest";

import { BrushThrottle, pointerToNdc, type BrushParams } from "../src/brush.js";

const RECT = { left: 10, top: 20, width: 200, height: 100 };
const PARAMS: BrushParams = { mode: "regenerate", radius: 0.2, delta: 0.1 };
const IDENTITY = [1, 0, 0, 0, 0, 1, 0, 0, 0, 0, 1, 0, 0, 0, 0, 1];

describe("pointerToNdc", () => {
  it("maps the canvas center to the origin", () => {
    expect(pointerToNdc(110, 70, RECT)).toEqual([0, 0]);
  });

  it("maps corners to the NDC square with y pointing up", () => {
    expect(pointerToNdc(10, 20, RECT)).toEqual([-1, 1]);
    expect(pointerToNdc(210, 120, RECT)).toEqual([1, -1]);
  });
});

describe("BrushThrottle", () => {
  let sent: Record<string, unknown>[];
  let throttle: BrushThrottle;

  beforeEach(() => {
    vi.useFakeTimers();
    sent = [];
    throttle = new BrushThrottle(async (cmd, params) => {
      expect(cmd).toBe("brush");
      sent.push(params);
      return {};
    }, 20);
  });

  afterEach(() => {
    vi.useRealTimers();
  });

  it("sends the first stroke point immediately with full parameters", () => {
    throttle.stroke([0.25, -0.5], IDENTITY, PARAMS);
    expect(sent).toHaveLength(1);
    expect(sent[0]).toEqual({
      mode: "regenerate",
      ndc: [0.25, -0.5],
      radius: 0.2,
      delta: 0.1,
      view_projection: IDENTITY,
    });
  });

  it("caps a fast stroke at the configured command rate", () => {
    // 100 pointer events over one second, 10 ms apart
    for (let i = 0; i < 100; i++) {
      throttle.stroke([i / 100, 0], IDENTITY, PARAMS);
      vi.advanceTimersByTime(10);
    }
    vi.runAllTimers();
    expect(throttle.sent).toBeLessThanOrEqual(21);
    expect(throttle.sent).toBeGreaterThanOrEqual(19);
    expect(throttle.hasQueued).toBe(false);
  });

  it("always flushes the newest point", () => {
    throttle.stroke([0, 0], IDENTITY, PARAMS);
    throttle.stroke([0.1, 0], IDENTITY, PARAMS); // coalesced
    throttle.stroke([0.9, 0.9], IDENTITY, PARAMS); // replaces the queued one
    expect(sent).toHaveLength(1);
    vi.runAllTimers();
    expect(sent).toHaveLength(2);
    expect(sent[1].ndc).toEqual([0.9, 0.9]);
  });

  it("keeps painting after a rejected command", () => {
    const failing = new BrushThrottle(async () => {
      throw new Error("brush failed");
    }, 20);
    failing.stroke([0, 0], IDENTITY, PARAMS);
    vi.runAllTimers();
    failing.stroke([1, 1], IDENTITY, PARAMS);
    vi.runAllTimers();
    expect(failing.sent).toBe(2);
  });

  it("validates its inputs", () => {
    expect(() => new BrushThrottle(async () => ({}), 0)).toThrow(/maxPerSec/);
    expect(() => throttle.stroke([0, 0], [1, 2, 3], PARAMS)).toThrow(/16 entries/);
  });
});
