/** three.js scene objects for one service mesh, updated in place per frame. */

import * as THREE from "three";

import { displacedPositions, vertexColors } from "./colors.js";
import type { MeshData } from "./client.js";
import { blockView, type Frame, type Layout, type VisMode } from "./protocol.js";

export class MeshView {
  readonly geometry: THREE.BufferGeometry;
  readonly material: THREE.MeshStandardMaterial;
  readonly mesh: THREE.Mesh;

  private readonly basePositions: Float32Array;
  private readonly baseNormals: Float32Array;
  private displaced = false;

  constructor(meshData: MeshData) {
    const n = meshData.n_vertices;
    this.basePositions = Float32Array.from(meshData.positions);
    this.baseNormals = Float32Array.from(meshData.normals);
    if (this.basePositions.length !== 3 * n || this.baseNormals.length !== 3 * n) {
      throw new Error(`mesh data arrays do not match ${n} vertices`);
    }

    this.geometry = new THREE.BufferGeometry();
    this.geometry.setAttribute(
      "position",
      new THREE.BufferAttribute(this.basePositions.slice(), 3),
    );
    this.geometry.setAttribute(
      "normal",
      new THREE.BufferAttribute(this.baseNormals.slice(), 3),
    );
    this.geometry.setAttribute(
      "color",
      new THREE.BufferAttribute(new Float32Array(3 * n).fill(0.5), 3),
    );
    this.geometry.setIndex(
      new THREE.BufferAttribute(Uint32Array.from(meshData.triangles), 1),
    );

    this.material = new THREE.MeshStandardMaterial({
      vertexColors: true,
      roughness: 0.85,
      metalness: 0.0,
    });
    this.mesh = new THREE.Mesh(this.geometry, this.material);
  }

  get nVertices(): number {
    return this.basePositions.length / 3;
  }

  /** Write one frame's maps into the vertex attributes. */
  applyFrame(frame: Frame, layout: Layout, mode: VisMode): void {
    if (frame.nVertices !== this.nVertices) {
      throw new Error(
        `frame carries ${frame.nVertices} vertices for a ${this.nVertices}-vertex mesh`,
      );
    }
    const colorAttr = this.geometry.getAttribute("color") as THREE.BufferAttribute;
    vertexColors(frame, layout, mode, colorAttr.array as Float32Array);
    colorAttr.needsUpdate = true;

    if (layout === "colorgeo") {
      const positionAttr = this.geometry.getAttribute("position") as THREE.BufferAttribute;
      displacedPositions(
        this.basePositions,
        this.baseNormals,
        blockView(frame, layout, "displacement"),
        positionAttr.array as Float32Array,
      );
      positionAttr.needsUpdate = true;
      this.displaced = true;
    } else if (this.displaced) {
      const positionAttr = this.geometry.getAttribute("position") as THREE.BufferAttribute;
      (positionAttr.array as Float32Array).set(this.basePositions);
      positionAttr.needsUpdate = true;
      this.displaced = false;
    }
    this.geometry.computeBoundingSphere();
  }

  dispose(): void {
    this.geometry.dispose();
    this.material.dispose();
  }
}

/** Row-major 16-entry view-projection matrix as the brush commands expect. */
export function viewProjectionRowMajor(camera: THREE.Camera): number[] {
  camera.updateMatrixWorld();
  const matrix = new THREE.Matrix4().multiplyMatrices(
    camera.projectionMatrix,
    camera.matrixWorldInverse,
  );
  // three stores column-major; transposing the elements yields row-major
  return matrix.transpose().elements.slice() as unknown as number[];
}
