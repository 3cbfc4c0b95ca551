/** Browser entry point: connects to the service, renders the streamed
 * texture on the mesh, and wires the control strip and paint brush. */

import * as THREE from "three";
import { OrbitControls } from "three/addons/controls/OrbitControls.js";

import { BrushThrottle, pointerToNdc, type BrushParams } from "./brush.js";
import { ServiceClient, type HelloData, type SessionInfo } from "./client.js";
import { availableModes } from "./colors.js";
import { MeshView, viewProjectionRowMajor } from "./renderer.js";
import type { Frame, Layout, VisMode } from "./protocol.js";

function element<T extends HTMLElement>(id: string): T {
  const node = document.getElementById(id);
  if (!node) throw new Error(`missing #${id}`);
  return node as T;
}

function fillSelect(select: HTMLSelectElement, options: string[], value: string): void {
  select.replaceChildren(
    ...options.map((name) => {
      const option = document.createElement("option");
      option.value = name;
      option.textContent = name;
      return option;
    }),
  );
  select.value = value;
}

class ViewerApp {
  private readonly canvas = element<HTMLCanvasElement>("viewport");
  private readonly renderer = new THREE.WebGLRenderer({
    canvas: this.canvas,
    antialias: true,
    preserveDrawingBuffer: true,
  });
  private readonly scene = new THREE.Scene();
  private readonly camera = new THREE.PerspectiveCamera(45, 1, 0.01, 100);
  private readonly controls = new OrbitControls(this.camera, this.canvas);

  private client!: ServiceClient;
  private view: MeshView | null = null;
  private session!: SessionInfo;
  private layout: Layout = "pbr";
  private visMode: VisMode = "color";
  private latestFrame: Frame | null = null;
  private frameDirty = false;
  private brush: BrushThrottle | null = null;
  private painting = false;

  constructor() {
    this.scene.background = new THREE.Color(0x10151c);
    this.scene.add(new THREE.AmbientLight(0xffffff, 0.55));
    const key = new THREE.DirectionalLight(0xffffff, 1.6);
    key.position.set(2.5, 2.0, 3.0);
    this.scene.add(key);
    this.camera.position.set(0, 0, 3);
    this.controls.enableDamping = true;
  }

  async connect(uri: string): Promise<void> {
    const socket = new WebSocket(uri);
    socket.binaryType = "arraybuffer";
    await new Promise<void>((resolve, reject) => {
      socket.addEventListener("open", () => resolve(), { once: true });
      socket.addEventListener("error", () => reject(new Error(`cannot reach ${uri}`)), {
        once: true,
      });
    });
    this.client = new ServiceClient(socket);
    this.client.onFrame = (frame) => {
      this.latestFrame = frame;
      this.frameDirty = true;
      element<HTMLSpanElement>("stat-step").textContent = String(frame.stepCounter);
      element<HTMLSpanElement>("stat-rate").textContent = frame.stepsPerSec.toFixed(1);
    };
    this.client.onServiceError = (message) => this.setStatus(`server: ${message}`);

    const hello = await this.client.hello();
    this.applyHello(hello);
    this.wireControls(hello);
    this.resize();
    window.addEventListener("resize", () => this.resize());
    this.renderer.setAnimationLoop(() => this.tick());
    this.setStatus(`connected to ${uri}`);
  }

  private applyHello(hello: HelloData): void {
    this.session = hello.session;
    this.layout = hello.session.layout as Layout;
    this.visMode = hello.session.vis_mode as VisMode;
    this.swapMesh(hello.mesh_data);
  }

  private swapMesh(meshData: HelloData["mesh_data"]): void {
    if (this.view) {
      this.scene.remove(this.view.mesh);
      this.view.dispose();
    }
    this.view = new MeshView(meshData);
    this.scene.add(this.view.mesh);
    this.latestFrame = null;
    element<HTMLSpanElement>("stat-verts").textContent = String(meshData.n_vertices);
  }

  private wireControls(hello: HelloData): void {
    const models = hello.models.map((m) => m.name);
    const modelSelect = element<HTMLSelectElement>("model");
    fillSelect(modelSelect, models, this.session.model);
    modelSelect.onchange = () => {
      void this.run(async () => {
        await this.client.request("set_model", { name: modelSelect.value });
        this.refreshVisModes();
      });
    };

    const graftSelect = element<HTMLSelectElement>("graft");
    fillSelect(graftSelect, ["(none)", ...models], this.session.graft_model ?? "(none)");
    graftSelect.onchange = () => {
      const name = graftSelect.value === "(none)" ? null : graftSelect.value;
      void this.run(async () => {
        await this.client.request("set_graft_model", { name });
        this.refreshVisModes();
      });
    };

    const meshSelect = element<HTMLSelectElement>("mesh");
    fillSelect(meshSelect, hello.meshes, this.session.mesh);
    meshSelect.onchange = () => {
      void this.run(async () => {
        const data = await this.client.request("set_mesh", { name: meshSelect.value });
        this.swapMesh(data.mesh_data as HelloData["mesh_data"]);
      });
    };

    const visSelect = element<HTMLSelectElement>("vis");
    this.refreshVisModes();
    visSelect.onchange = () => {
      void this.run(async () => {
        await this.client.request("set_vis_mode", { mode: visSelect.value });
        this.visMode = visSelect.value as VisMode;
        this.frameDirty = true;
      });
    };

    element<HTMLButtonElement>("play").onclick = () =>
      void this.run(() => this.client.request("play"));
    element<HTMLButtonElement>("pause").onclick = () =>
      void this.run(() => this.client.request("pause"));
    element<HTMLButtonElement>("reset").onclick = () =>
      void this.run(() => this.client.request("reset"));
    element<HTMLButtonElement>("screenshot").onclick = () => void this.screenshot();

    const speed = element<HTMLInputElement>("speed");
    speed.value = String(this.session.speed);
    speed.onchange = () =>
      void this.run(() =>
        this.client.request("set_speed", { steps_per_sec: Number(speed.value) }),
      );

    const orientation = element<HTMLInputElement>("orientation");
    orientation.value = String(this.session.orientation);
    orientation.oninput = () =>
      void this.run(() =>
        this.client.request("set_orientation", { radians: Number(orientation.value) }),
      );

    this.brush = new BrushThrottle((cmd, params) => this.client.request(cmd, params));
    this.canvas.addEventListener("pointerdown", (event) => {
      if (!event.shiftKey) return; // plain drag orbits; shift-drag paints
      this.painting = true;
      this.controls.enabled = false;
      this.paint(event);
    });
    this.canvas.addEventListener("pointermove", (event) => {
      if (this.painting) this.paint(event);
    });
    window.addEventListener("pointerup", () => {
      this.painting = false;
      this.controls.enabled = true;
    });
  }

  private refreshVisModes(): void {
    const modes =
      this.latestFrame !== null
        ? availableModes(this.layout, this.latestFrame.channelCount)
        : ["color" as VisMode];
    const visSelect = element<HTMLSelectElement>("vis");
    const current = modes.includes(this.visMode) ? this.visMode : "color";
    fillSelect(visSelect, modes, current);
    this.visMode = current;
  }

  private paint(event: PointerEvent): void {
    if (!this.brush) return;
    const params: BrushParams = {
      mode: element<HTMLSelectElement>("brush-mode").value as BrushParams["mode"],
      radius: Number(element<HTMLInputElement>("brush-radius").value),
      delta: 0.1,
    };
    const rect = this.canvas.getBoundingClientRect();
    const ndc = pointerToNdc(event.clientX, event.clientY, rect);
    this.brush.stroke(ndc, viewProjectionRowMajor(this.camera), params);
  }

  private async screenshot(): Promise<void> {
    await this.run(() => this.client.request("screenshot_request"));
    this.renderer.render(this.scene, this.camera);
    const link = document.createElement("a");
    link.download = `meshca-step-${this.latestFrame?.stepCounter ?? 0}.png`;
    link.href = this.canvas.toDataURL("image/png");
    link.click();
  }

  private async run(action: () => Promise<unknown>): Promise<void> {
    try {
      await action();
      this.setStatus("");
    } catch (error) {
      this.setStatus(error instanceof Error ? error.message : String(error));
    }
  }

  private setStatus(message: string): void {
    element<HTMLSpanElement>("status").textContent = message;
  }

  private resize(): void {
    const width = this.canvas.clientWidth || window.innerWidth;
    const height = this.canvas.clientHeight || window.innerHeight - 60;
    this.renderer.setSize(width, height, false);
    this.camera.aspect = width / height;
    this.camera.updateProjectionMatrix();
  }

  private tick(): void {
    this.controls.update();
    if (this.frameDirty && this.latestFrame && this.view) {
      this.view.applyFrame(this.latestFrame, this.layout, this.visMode);
      this.frameDirty = false;
    }
    this.renderer.render(this.scene, this.camera);
  }
}

const defaultUri = `ws://${location.hostname || "127.0.0.1"}:8765`;
const app = new ViewerApp();
void app.connect(new URLSearchParams(location.search).get("server") ?? defaultUri).catch(
  (error) => {
    element<HTMLSpanElement>("status").textContent =
      error instanceof Error ? error.message : String(error);
  },
);
