/** Pure per-vertex shading math: frame payload in, attribute arrays out.
 * Kept free of three.js so the render path is testable headlessly. */

import {
  blockView,
  hasGraftChannel,
  type Frame,
  type Layout,
  type VisMode,
} from "./protocol.js";

const GRAFT_HIGHLIGHT: readonly [number, number, number] = [1.0, 0.25, 0.05];

/** Vis modes that make sense for a frame of this shape. */
export function availableModes(layout: Layout, channelCount: number): VisMode[] {
  const graft = hasGraftChannel(layout, channelCount);
  const modes: VisMode[] =
    layout === "pbr"
      ? ["color", "albedo", "normal", "height", "roughness", "ao"]
      : ["color"];
  if (graft) modes.push("graft");
  return modes;
}

function rgbBlock(frame: Frame, layout: Layout): Float32Array {
  return blockView(frame, layout, layout === "pbr" ? "albedo" : "color");
}

/** Returns interleaved RGB (3N floats) for the requested visualization. */
export function vertexColors(
  frame: Frame,
  layout: Layout,
  mode: VisMode,
  out?: Float32Array,
): Float32Array {
  const n = frame.nVertices;
  const colors = out ?? new Float32Array(3 * n);
  if (colors.length !== 3 * n) {
    throw new Error(`output needs ${3 * n} floats, got ${colors.length}`);
  }
  if (!availableModes(layout, frame.channelCount).includes(mode)) {
    throw new Error(`vis mode "${mode}" is not available for this ${layout} frame`);
  }
  if (mode === "color" || mode === "albedo") {
    colors.set(rgbBlock(frame, layout));
    return colors;
  }
  if (mode === "normal") {
    const normals = blockView(frame, layout, "normal");
    for (let i = 0; i < 3 * n; i++) {
      colors[i] = 0.5 * (normals[i] + 1.0);
    }
    return colors;
  }
  if (mode === "graft") {
    const base = rgbBlock(frame, layout);
    const alpha = blockView(frame, layout, "graft");
    for (let v = 0; v < n; v++) {
      const a = alpha[v];
      for (let k = 0; k < 3; k++) {
        colors[3 * v + k] = (1.0 - a) * base[3 * v + k] + a * GRAFT_HIGHLIGHT[k];
      }
    }
    return colors;
  }
  const scalars = blockView(frame, layout, mode);
  for (let v = 0; v < n; v++) {
    const s = scalars[v];
    colors[3 * v] = s;
    colors[3 * v + 1] = s;
    colors[3 * v + 2] = s;
  }
  return colors;
}

/** base vertex positions offset along vertex normals by a scalar field. */
export function displacedPositions(
  base: Float32Array,
  normals: Float32Array,
  displacement: Float32Array,
  out?: Float32Array,
): Float32Array {
  const n = displacement.length;
  if (base.length !== 3 * n || normals.length !== 3 * n) {
    throw new Error(
      `positions/normals need ${3 * n} floats, got ${base.length}/${normals.length}`,
    );
  }
  const positions = out ?? new Float32Array(3 * n);
  for (let v = 0; v < n; v++) {
    const d = displacement[v];
    positions[3 * v] = base[3 * v] + d * normals[3 * v];
    positions[3 * v + 1] = base[3 * v + 1] + d * normals[3 * v + 1];
    positions[3 * v + 2] = base[3 * v + 2] + d * normals[3 * v + 2];
  }
  return positions;
}
