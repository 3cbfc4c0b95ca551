"""Cellular automaton update rule and runtime state on a mesh.

Every vertex carries a state vector. One step perceives neighbor messages,
feeds [state | perception | condition] through a small two-layer MLP and adds
the result to a random half of the cells. All randomness comes from the mask
scheme's own generator, so trajectories replay exactly from a seed.
"""

from __future__ import annotations

import dataclasses
import uuid
import warnings

import numpy as np

from .mesh import AdjacencyGraph, Mesh
from .perception import EdgeGeometry, ShBasisConfig, perceive

LAYOUTS = ("pbr", "colorgeo")

# Channel roles for the PBR layout.
PBR_ALBEDO = slice(0, 3)
PBR_NORMAL = slice(3, 6)
PBR_HEIGHT = 6
PBR_ROUGHNESS = 7
PBR_AO = 8
PBR_MIN_CHANNELS = 9

COLORGEO_COLOR = slice(0, 3)
COLORGEO_DISPLACEMENT = 3
COLORGEO_MIN_CHANNELS = 4

INPUT_ORDER = "s|z|h"


@dataclasses.dataclass(frozen=True)
class ModelConfig:
    channels: int = 16
    hidden: int = 128
    condition_dim: int = 0
    sh_degree: int = 1
    layout: str = "pbr"

    def __post_init__(self):
        if self.channels < 1:
            raise ValueError(f"channels must be >= 1, got {self.channels}")
        if self.hidden < 1:
            raise ValueError(f"hidden must be >= 1, got {self.hidden}")
        if self.condition_dim < 0:
            raise ValueError(f"condition_dim must be >= 0, got {self.condition_dim}")
        if self.layout not in LAYOUTS:
            raise ValueError(f"layout must be one of {LAYOUTS}, got {self.layout!r}")
        ShBasisConfig(self.sh_degree)

    @property
    def basis_config(self) -> ShBasisConfig:
        return ShBasisConfig(self.sh_degree)

    @property
    def basis_count(self) -> int:
        return (self.sh_degree + 1) ** 2

    @property
    def input_dim(self) -> int:
        return self.basis_count * self.channels + self.channels + self.condition_dim


def param_count(config: ModelConfig) -> int:
    """Total learnable scalars across W1, b1, W2, b2."""
    h = config.hidden
    c = config.channels
    return config.input_dim * h + h + h * c + c


@dataclasses.dataclass
class ModelWeights:
    """MLP parameters plus identity. W1 maps the concatenated
    [state | perception | condition] input to the hidden layer, W2 maps the
    hidden layer back to a per-channel residual."""

    config: ModelConfig
    w1: np.ndarray
    b1: np.ndarray
    w2: np.ndarray
    b2: np.ndarray
    lineage_id: str
    parent_id: str | None = None
    name: str = "model"

    def __post_init__(self):
        c, h, d_in = self.config.channels, self.config.hidden, self.config.input_dim
        expected = {"w1": (h, d_in), "b1": (h,), "w2": (c, h), "b2": (c,)}
        for field, shape in expected.items():
            arr = getattr(self, field)
            if arr.shape != shape:
                raise ValueError(f"{field} must have shape {shape}, got {arr.shape}")
            if not np.isfinite(arr).all():
                raise ValueError(f"{field} contains non-finite values")

    def astype(self, dtype) -> "ModelWeights":
        return dataclasses.replace(
            self,
            w1=self.w1.astype(dtype),
            b1=self.b1.astype(dtype),
            w2=self.w2.astype(dtype),
            b2=self.b2.astype(dtype),
        )

    def copy(self) -> "ModelWeights":
        return dataclasses.replace(
            self, w1=self.w1.copy(), b1=self.b1.copy(), w2=self.w2.copy(), b2=self.b2.copy()
        )


@dataclasses.dataclass
class CellStateBuffer:
    """Per-vertex state matrix (N, C) plus the number of steps taken."""

    values: np.ndarray
    step_counter: int = 0

    @classmethod
    def seed(cls, n_vertices: int, config: ModelConfig, dtype=np.float32) -> "CellStateBuffer":
        return cls(values=np.zeros((n_vertices, config.channels), dtype=dtype))

    @property
    def n_cells(self) -> int:
        return self.values.shape[0]

    @property
    def channels(self) -> int:
        return self.values.shape[1]

    def copy(self) -> "CellStateBuffer":
        return CellStateBuffer(values=self.values.copy(), step_counter=self.step_counter)


class BernoulliMask:
    """Each cell updates independently with probability one half."""

    kind = "bernoulli"

    def __init__(self, n_cells: int, seed: int = 0):
        self.n_cells = n_cells
        self.seed = seed
        self._rng = np.random.default_rng(seed)

    def draw(self) -> np.ndarray:
        return self._rng.random(self.n_cells) < 0.5


class ShuffleMapMask:
    """Fixed half of the cell indices, cyclically shifted by a fresh random
    offset every step, so exactly floor(N / 2) cells update."""

    kind = "shuffle"

    def __init__(self, n_cells: int, seed: int = 0):
        self.n_cells = n_cells
        self.seed = seed
        self._rng = np.random.default_rng(seed)
        self.base_indices = np.sort(
            self._rng.choice(n_cells, size=n_cells // 2, replace=False)
        )

    def draw(self) -> np.ndarray:
        offset = int(self._rng.integers(self.n_cells))
        mask = np.zeros(self.n_cells, dtype=bool)
        mask[(self.base_indices + offset) % self.n_cells] = True
        return mask


MASK_SCHEMES = ("bernoulli", "shuffle")


def make_mask_scheme(kind: str, n_cells: int, seed: int = 0):
    if kind == "bernoulli":
        return BernoulliMask(n_cells, seed)
    if kind == "shuffle":
        return ShuffleMapMask(n_cells, seed)
    raise ValueError(f"unknown mask scheme {kind!r}, expected one of {MASK_SCHEMES}")


@dataclasses.dataclass
class ConditionField:
    """Optional per-vertex conditioning input (N, condition_dim), appended to
    the MLP input after the perception block."""

    values: np.ndarray

    @classmethod
    def tangent(cls, values: np.ndarray, mesh: Mesh) -> "ConditionField":
        """Validated constructor for 3D fields meant to live in the tangent
        plane, such as motion-prior encodings."""
        values = np.asarray(values, dtype=np.float64)
        if values.shape != (mesh.n_vertices, 3):
            raise ValueError(f"tangent field must be (N, 3), got {values.shape}")
        normal_part = np.abs(np.sum(values * mesh.normals, axis=1))
        if normal_part.max() > 1e-6:
            raise ValueError(
                f"field is not tangent, max |v . n| = {normal_part.max():.3e}"
            )
        return cls(values=values)


@dataclasses.dataclass
class GraftField:
    """Per-vertex interpolation weight between a base model (alpha 0) and a
    grafted model (alpha 1). Both models see the same perception and the same
    update mask within a step."""

    alpha: np.ndarray
    model_s: ModelWeights
    model_t: ModelWeights

    @classmethod
    def create(
        cls, model_s: ModelWeights, model_t: ModelWeights, n_vertices: int
    ) -> "GraftField":
        if model_s.config != model_t.config:
            raise ValueError(
                "graft models must share a config, got "
                f"{model_s.config} vs {model_t.config}"
            )
        result = check_compatibility(model_s, model_t)
        if not result.compatible:
            warnings.warn(
                f"graft models {model_s.name!r} and {model_t.name!r} share no "
                "lineage ancestor; blending may produce unstable textures",
                stacklevel=2,
            )
        return cls(
            alpha=np.zeros(n_vertices, dtype=np.float64),
            model_s=model_s,
            model_t=model_t,
        )


@dataclasses.dataclass(frozen=True)
class CompatibilityResult:
    compatible: bool
    common_ancestor: str | None


def _ancestor_chain(weights: ModelWeights, by_id: dict[str, ModelWeights]) -> list[str]:
    chain = [weights.lineage_id]
    parent = weights.parent_id
    while parent is not None and parent not in chain:
        chain.append(parent)
        parent_weights = by_id.get(parent)
        parent = parent_weights.parent_id if parent_weights is not None else None
    return chain


def check_compatibility(
    a: ModelWeights, b: ModelWeights, registry=None
) -> CompatibilityResult:
    """Two models may be grafted when their lineage chains share an ancestor
    and their configs agree. Chains follow parent_id links; passing a registry
    of known models lets the walk continue past the immediate parent."""
    by_id: dict[str, ModelWeights] = {}
    if registry is not None:
        models = registry.values() if hasattr(registry, "values") else registry
        by_id = {m.lineage_id: m for m in models}
    chain_a = _ancestor_chain(a, by_id)
    chain_b = set(_ancestor_chain(b, by_id))
    common = next((anc for anc in chain_a if anc in chain_b), None)
    compatible = common is not None and a.config == b.config
    return CompatibilityResult(compatible=compatible, common_ancestor=common)


def _residual(weights: ModelWeights, x: np.ndarray) -> np.ndarray:
    """MLP forward on pre-gathered input rows."""
    a1 = x @ weights.w1.T + weights.b1
    hidden = np.maximum(a1, 0.0)
    return hidden @ weights.w2.T + weights.b2


def _gather_input(
    values: np.ndarray,
    perception_values: np.ndarray,
    condition: ConditionField | None,
    rows: np.ndarray,
    config: ModelConfig,
) -> np.ndarray:
    parts = [values[rows], perception_values[rows]]
    if config.condition_dim:
        if condition is None:
            raise ValueError(
                f"model expects condition_dim={config.condition_dim} but no condition given"
            )
        cond = condition.values
        if cond.shape != (values.shape[0], config.condition_dim):
            raise ValueError(
                f"condition must be (N, {config.condition_dim}), got {cond.shape}"
            )
        parts.append(cond[rows].astype(values.dtype, copy=False))
    elif condition is not None and condition.values.shape[1] != 0:
        raise ValueError("model takes no condition input but one was given")
    return np.concatenate(parts, axis=1)


def adapt(
    states: CellStateBuffer,
    perception,
    condition: ConditionField | None,
    weights: ModelWeights,
    mask: np.ndarray,
) -> CellStateBuffer:
    """Add the learned residual to every masked cell; unmasked cells pass
    through untouched. Input per cell is [state | perception | condition]."""
    values = states.values
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != (values.shape[0],):
        raise ValueError(f"mask must be (N,), got {mask.shape}")
    out = values.copy()
    rows = np.flatnonzero(mask)
    if len(rows):
        pvalues = perception.values if hasattr(perception, "values") else perception
        config = weights.config
        w = weights if weights.w1.dtype == values.dtype else weights.astype(values.dtype)
        x = _gather_input(values, pvalues, condition, rows, config)
        out[rows] += _residual(w, x)
    return CellStateBuffer(values=out, step_counter=states.step_counter + 1)


def step(
    states: CellStateBuffer,
    mesh: Mesh,
    graph: AdjacencyGraph,
    weights: ModelWeights,
    mask_scheme,
    orientation: float = 0.0,
    condition: ConditionField | None = None,
    graft: GraftField | None = None,
    geometry: EdgeGeometry | None = None,
) -> CellStateBuffer:
    """One synchronous update of all cells.

    With a graft field, both models are evaluated on the same perception and
    mask and their residuals are blended per vertex; alpha 0 and alpha 1
    reproduce the single-model updates exactly.
    """
    config = weights.config
    if states.channels != config.channels:
        raise ValueError(
            f"state has {states.channels} channels, model expects {config.channels}"
        )
    mask = mask_scheme.draw()
    z = perceive(
        states, mesh, graph, config.basis_config, orientation=orientation, geometry=geometry
    )
    if graft is None:
        return adapt(states, z, condition, weights, mask)

    if graft.model_s.config != config or graft.model_t.config != config:
        raise ValueError("graft models must match the active model config")
    values = states.values
    out = values.copy()
    rows = np.flatnonzero(mask)
    if len(rows):
        x = _gather_input(values, z.values, condition, rows, config)
        dtype = values.dtype
        model_s = graft.model_s if graft.model_s.w1.dtype == dtype else graft.model_s.astype(dtype)
        model_t = graft.model_t if graft.model_t.w1.dtype == dtype else graft.model_t.astype(dtype)
        u_s = _residual(model_s, x)
        u_t = _residual(model_t, x)
        alpha = graft.alpha[rows].astype(dtype)[:, None]
        blended = u_s + alpha * (u_t - u_s)
        # keep the interpolation endpoints bit-exact
        blended = np.where(alpha == 0.0, u_s, np.where(alpha == 1.0, u_t, blended))
        out[rows] += blended
    return CellStateBuffer(values=out, step_counter=states.step_counter + 1)


def run(
    states: CellStateBuffer | None,
    steps: int,
    mesh: Mesh,
    graph: AdjacencyGraph,
    weights: ModelWeights,
    mask_scheme,
    orientation: float = 0.0,
    condition: ConditionField | None = None,
    graft: GraftField | None = None,
    geometry: EdgeGeometry | None = None,
    dtype=np.float32,
) -> CellStateBuffer:
    """Advance the automaton a number of steps; None starts from the all-zero
    seed state. Because the mask scheme owns its generator, run(k1) followed
    by run(k2) matches a single run(k1 + k2)."""
    if steps < 0:
        raise ValueError(f"steps must be >= 0, got {steps}")
    if states is None:
        states = CellStateBuffer.seed(mesh.n_vertices, weights.config, dtype=dtype)
    if geometry is None:
        geometry = EdgeGeometry(mesh, graph)
    for _ in range(steps):
        states = step(
            states,
            mesh,
            graph,
            weights,
            mask_scheme,
            orientation=orientation,
            condition=condition,
            graft=graft,
            geometry=geometry,
        )
    return states


def _to_display(raw: np.ndarray) -> np.ndarray:
    """Map state range [-1, 1] to display range [0, 1], clamped."""
    return np.clip((raw + 1.0) * 0.5, 0.0, 1.0)


def extract_pbr(states: CellStateBuffer, config: ModelConfig) -> dict[str, np.ndarray]:
    """Interpret state channels as PBR texture maps.

    Channels 0-2 are albedo, 3-5 a shading normal, 6 height, 7 roughness and
    8 ambient occlusion. Scalars and albedo go through the display mapping;
    the normal is renormalized, with +z where its magnitude vanishes.
    """
    if config.layout != "pbr":
        raise ValueError(f"extract_pbr needs layout 'pbr', got {config.layout!r}")
    if states.channels < PBR_MIN_CHANNELS:
        raise ValueError(
            f"pbr extraction needs >= {PBR_MIN_CHANNELS} channels, got {states.channels}"
        )
    raw = states.values.astype(np.float64)
    normal = raw[:, PBR_NORMAL].copy()
    lengths = np.linalg.norm(normal, axis=1)
    weak = lengths < 1e-8
    normal[weak] = (0.0, 0.0, 1.0)
    lengths[weak] = 1.0
    normal /= lengths[:, None]
    return {
        "albedo": _to_display(raw[:, PBR_ALBEDO]),
        "normal": normal,
        "height": _to_display(raw[:, PBR_HEIGHT]),
        "roughness": _to_display(raw[:, PBR_ROUGHNESS]),
        "ao": _to_display(raw[:, PBR_AO]),
    }


def extract_color_geo(
    states: CellStateBuffer,
    mesh: Mesh,
    config: ModelConfig,
    max_displacement: float | None = None,
) -> dict[str, np.ndarray]:
    """Interpret state channels as vertex colors plus a normal displacement.

    Channel 3 is clamped to [-1, 1] and scaled by max_displacement (default
    5% of the bounding box diagonal) along the vertex normal.
    """
    if config.layout != "colorgeo":
        raise ValueError(f"extract_color_geo needs layout 'colorgeo', got {config.layout!r}")
    if states.channels < COLORGEO_MIN_CHANNELS:
        raise ValueError(
            f"colorgeo extraction needs >= {COLORGEO_MIN_CHANNELS} channels, "
            f"got {states.channels}"
        )
    if max_displacement is None:
        max_displacement = 0.05 * mesh.bbox_diagonal()
    raw = states.values.astype(np.float64)
    displacement = np.clip(raw[:, COLORGEO_DISPLACEMENT], -1.0, 1.0) * max_displacement
    return {
        "color": _to_display(raw[:, COLORGEO_COLOR]),
        "displacement": displacement,
        "positions": mesh.positions + displacement[:, None] * mesh.normals,
    }


BRUSH_MODES = ("regenerate", "graft")


def _brush_selection(
    mesh: Mesh, camera: np.ndarray, click: np.ndarray, radius: float
) -> np.ndarray:
    """Vertices whose screen projection falls inside the brush disc and whose
    normal faces the camera."""
    camera = np.asarray(camera, dtype=np.float64)
    click = np.asarray(click, dtype=np.float64)
    if camera.shape != (4, 4):
        raise ValueError(f"camera must be a 4x4 matrix, got {camera.shape}")
    if click.shape != (2,):
        raise ValueError(f"click must be a 2D point, got {click.shape}")
    if not radius > 0.0:
        raise ValueError(f"radius must be > 0, got {radius}")
    inverse = np.linalg.inv(camera)  # raises LinAlgError for singular cameras

    homo = np.concatenate([mesh.positions, np.ones((mesh.n_vertices, 1))], axis=1)
    clip = homo @ camera.T
    w = clip[:, 3]
    valid = np.abs(w) > 1e-12
    ndc = np.zeros((mesh.n_vertices, 2))
    ndc[valid] = clip[valid, :2] / w[valid, None]
    inside = valid & (np.linalg.norm(ndc - click, axis=1) <= radius)

    # view ray through the click: unproject the near and far NDC points
    near = inverse @ np.array([click[0], click[1], -1.0, 1.0])
    far = inverse @ np.array([click[0], click[1], 1.0, 1.0])
    if abs(near[3]) < 1e-12 or abs(far[3]) < 1e-12:
        raise ValueError("camera matrix does not define a view ray")
    view_dir = far[:3] / far[3] - near[:3] / near[3]
    norm = np.linalg.norm(view_dir)
    if norm < 1e-12:
        raise ValueError("camera matrix does not define a view ray")
    view_dir /= norm
    facing = mesh.normals @ view_dir < 0.0
    return inside & facing


def apply_brush(
    target: CellStateBuffer | GraftField,
    mesh: Mesh,
    camera: np.ndarray,
    click,
    radius: float,
    mode: str,
    delta: float = 0.1,
) -> int:
    """Apply a screen-space brush to the simulation.

    regenerate zeroes the state rows under the brush; graft raises the graft
    weight by delta, clamped to [0, 1]. Returns how many vertices were hit;
    an empty selection is valid and leaves the target untouched.
    """
    if mode not in BRUSH_MODES:
        raise ValueError(f"mode must be one of {BRUSH_MODES}, got {mode!r}")
    selected = _brush_selection(mesh, camera, np.asarray(click, dtype=np.float64), radius)
    count = int(selected.sum())
    if count == 0:
        return 0
    if mode == "regenerate":
        if not isinstance(target, CellStateBuffer):
            raise ValueError("regenerate brush needs a CellStateBuffer target")
        target.values[selected] = 0.0
    else:
        if not isinstance(target, GraftField):
            raise ValueError("graft brush needs a GraftField target")
        target.alpha[selected] = np.clip(target.alpha[selected] + delta, 0.0, 1.0)
    return count


def fresh_lineage_id() -> str:
    return uuid.uuid4().hex


class Simulation:
    """Convenience bundle of mesh, adjacency, model and state used by the CLI
    and the streaming service. Keeps the edge geometry cache warm across
    steps."""

    def __init__(
        self,
        mesh: Mesh,
        graph: AdjacencyGraph,
        weights: ModelWeights,
        mask_scheme=None,
        orientation: float = 0.0,
        condition: ConditionField | None = None,
        seed: int = 0,
        mask_kind: str = "bernoulli",
        dtype=np.float32,
    ):
        self.mesh = mesh
        self.graph = graph
        self.weights = weights.astype(dtype)
        self.geometry = EdgeGeometry(mesh, graph)
        self.orientation = float(orientation)
        self.condition = condition
        self.dtype = dtype
        self.seed = seed
        self.mask_kind = mask_kind
        self.mask_scheme = mask_scheme or make_mask_scheme(mask_kind, mesh.n_vertices, seed)
        self.graft: GraftField | None = None
        self.states = CellStateBuffer.seed(mesh.n_vertices, weights.config, dtype=dtype)

    @property
    def config(self) -> ModelConfig:
        return self.weights.config

    def reset(self) -> None:
        """Seed state, step counter zero, graft weights cleared."""
        self.states = CellStateBuffer.seed(self.mesh.n_vertices, self.config, dtype=self.dtype)
        if self.graft is not None:
            self.graft.alpha[:] = 0.0

    def set_model(self, weights: ModelWeights) -> bool:
        """Swap the update rule; returns True when the state had to reset
        because the channel count changed."""
        needs_reset = weights.config.channels != self.config.channels
        self.weights = weights.astype(self.dtype)
        if self.graft is not None:
            self.graft = None
            needs_reset = True
        if needs_reset:
            self.reset()
        return needs_reset

    def set_graft_model(self, weights: ModelWeights | None) -> None:
        if weights is None:
            self.graft = None
            return
        self.graft = GraftField.create(self.weights, weights.astype(self.dtype), self.mesh.n_vertices)

    def step_once(self) -> None:
        self.states = step(
            self.states,
            self.mesh,
            self.graph,
            self.weights,
            self.mask_scheme,
            orientation=self.orientation,
            condition=self.condition,
            graft=self.graft,
            geometry=self.geometry,
        )

    def run(self, steps: int) -> None:
        for _ in range(steps):
            self.step_once()

    def extract(self) -> dict[str, np.ndarray]:
        if self.config.layout == "pbr":
            return extract_pbr(self.states, self.config)
        return extract_color_geo(self.states, self.mesh, self.config)
