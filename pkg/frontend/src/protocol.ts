/** Wire protocol shared with the synthesis service: JSON commands that get
 * id-matched ack/error replies, and binary little-endian state frames. */

export const FRAME_MAGIC = 0x4d4e4341; // reads "ACNM" in byte order
export const FRAME_HEADER_BYTES = 20;

export type Layout = "pbr" | "colorgeo";

export const VIS_MODES = [
  "color",
  "albedo",
  "normal",
  "height",
  "roughness",
  "ao",
  "graft",
] as const;
export type VisMode = (typeof VIS_MODES)[number];

export interface Frame {
  stepCounter: number;
  stepsPerSec: number;
  nVertices: number;
  channelCount: number;
  /** Planar float32 blocks, one per extracted map, vertex-major per block. */
  payload: Float32Array;
}

export function decodeFrame(buffer: ArrayBuffer): Frame {
  if (buffer.byteLength < FRAME_HEADER_BYTES) {
    throw new Error(`frame shorter than header: ${buffer.byteLength} bytes`);
  }
  const view = new DataView(buffer);
  const magic = view.getUint32(0, true);
  if (magic !== FRAME_MAGIC) {
    throw new Error(`bad frame magic 0x${magic.toString(16)}`);
  }
  const stepCounter = view.getUint32(4, true);
  const stepsPerSec = view.getFloat32(8, true);
  const nVertices = view.getUint32(12, true);
  const channelCount = view.getUint32(16, true);
  const expected = FRAME_HEADER_BYTES + 4 * nVertices * channelCount;
  if (buffer.byteLength !== expected) {
    throw new Error(
      `frame payload length ${buffer.byteLength} != expected ${expected}`,
    );
  }
  const payload = new Float32Array(buffer, FRAME_HEADER_BYTES, nVertices * channelCount);
  return { stepCounter, stepsPerSec, nVertices, channelCount, payload };
}

export interface ChannelBlock {
  name: string;
  /** Offset into the payload in floats. */
  offset: number;
  /** Values per vertex in this block. */
  width: number;
}

const LAYOUT_BLOCKS: Record<Layout, ReadonlyArray<readonly [string, number]>> = {
  pbr: [
    ["albedo", 3],
    ["normal", 3],
    ["height", 1],
    ["roughness", 1],
    ["ao", 1],
  ],
  colorgeo: [
    ["color", 3],
    ["displacement", 1],
  ],
};

export function baseChannelCount(layout: Layout): number {
  return LAYOUT_BLOCKS[layout].reduce((sum, [, width]) => sum + width, 0);
}

export function hasGraftChannel(layout: Layout, channelCount: number): boolean {
  const base = baseChannelCount(layout);
  if (channelCount === base) return false;
  if (channelCount === base + 1) return true;
  throw new Error(
    `frame has ${channelCount} channels, expected ${base} or ${base + 1} for ${layout}`,
  );
}

/** Block table for one frame; includes a trailing "graft" block when the
 * channel count says one is present. */
export function channelBlocks(
  layout: Layout,
  channelCount: number,
  nVertices: number,
): ChannelBlock[] {
  const graft = hasGraftChannel(layout, channelCount);
  const blocks: ChannelBlock[] = [];
  let offset = 0;
  for (const [name, width] of LAYOUT_BLOCKS[layout]) {
    blocks.push({ name, offset, width });
    offset += width * nVertices;
  }
  if (graft) {
    blocks.push({ name: "graft", offset, width: 1 });
  }
  return blocks;
}

export function blockView(frame: Frame, layout: Layout, name: string): Float32Array {
  const blocks = channelBlocks(layout, frame.channelCount, frame.nVertices);
  const block = blocks.find((b) => b.name === name);
  if (!block) {
    throw new Error(`layout ${layout} has no "${name}" block in this frame`);
  }
  return frame.payload.subarray(block.offset, block.offset + block.width * frame.nVertices);
}

export type CommandId = string;

export interface AckReply {
  type: "ack";
  id: CommandId | null;
  cmd: string;
  data: Record<string, unknown>;
}

export interface ErrorReply {
  type: "error";
  id: CommandId | null;
  message: string;
}

export type Reply = AckReply | ErrorReply;

export function encodeCommand(
  id: CommandId,
  cmd: string,
  params: Record<string, unknown> = {},
): string {
  return JSON.stringify({ id, cmd, params });
}

export function parseReply(text: string): Reply {
  let parsed: unknown;
  try {
    parsed = JSON.parse(text);
  } catch {
    throw new Error(`reply is not JSON: ${text.slice(0, 80)}`);
  }
  if (typeof parsed !== "object" || parsed === null) {
    throw new Error("reply is not an object");
  }
  const reply = parsed as Record<string, unknown>;
  if (reply.type === "ack" && typeof reply.cmd === "string") {
    return reply as unknown as AckReply;
  }
  if (reply.type === "error" && typeof reply.message === "string") {
    return reply as unknown as ErrorReply;
  }
  throw new Error(`unrecognized reply shape: ${text.slice(0, 80)}`);
}
