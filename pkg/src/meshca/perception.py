"""Message-passing perception over mesh neighborhoods.

Each vertex aggregates state differences from its neighbors, weighted by real
spherical harmonics evaluated on the unit direction toward each neighbor.
Edge length never enters, only direction, so the operator is scale free.
"""

from __future__ import annotations

import dataclasses

import numpy as np

from .mesh import AdjacencyGraph, Mesh

# Real spherical harmonics, physics normalization.
SH_C0 = 0.28209479177387814   # sqrt(1 / (4 pi))
SH_C1 = 0.4886025119029199    # sqrt(3 / (4 pi))
SH_C2 = (
    1.0925484305920792,       # sqrt(15 / (4 pi)),  xy / yz / xz terms
    0.31539156525252005,      # sqrt(5 / (16 pi)),  2z^2 - x^2 - y^2 term
    0.5462742152960396,       # sqrt(15 / (16 pi)), x^2 - y^2 term
)

BASIS_NAMES = (
    "Y00",
    "Y1m1", "Y10", "Y11",
    "Y2m2", "Y2m1", "Y20", "Y21", "Y22",
)

SUPPORTED_DEGREES = (0, 1, 2)


@dataclasses.dataclass(frozen=True)
class ShBasisConfig:
    """Spherical harmonics truncation degree; basis functions are all
    Y_l^m with l <= degree, ordered by (l, m) ascending."""

    degree: int = 1

    def __post_init__(self):
        if self.degree not in SUPPORTED_DEGREES:
            raise ValueError(
                f"sh degree must be one of {SUPPORTED_DEGREES}, got {self.degree}"
            )

    @property
    def basis_count(self) -> int:
        return (self.degree + 1) ** 2

    @property
    def basis_names(self) -> tuple[str, ...]:
        return BASIS_NAMES[: self.basis_count]


@dataclasses.dataclass
class PerceptionBuffer:
    """Perception output, (N, basis_count * C) basis-major: the block for
    basis b spans columns [b * C, (b + 1) * C).

    skipped_messages counts neighbor messages dropped because the two
    vertices coincide and no direction exists.
    """

    values: np.ndarray
    skipped_messages: int = 0


def _sh_basis(directions: np.ndarray, degree: int) -> np.ndarray:
    """Evaluate all basis functions for unit direction rows. (E, 3) -> (E, B)."""
    x = directions[..., 0]
    y = directions[..., 1]
    z = directions[..., 2]
    cols = [np.full(x.shape, SH_C0)]
    if degree >= 1:
        cols += [SH_C1 * y, SH_C1 * z, SH_C1 * x]
    if degree >= 2:
        cols += [
            SH_C2[0] * x * y,
            SH_C2[0] * y * z,
            -SH_C2[1] * (x * x + y * y - 2.0 * z * z),
            SH_C2[0] * x * z,
            SH_C2[2] * (x * x - y * y),
        ]
    return np.stack(cols, axis=-1)


def sh_eval(direction: np.ndarray, config: ShBasisConfig = ShBasisConfig()) -> np.ndarray:
    """Real spherical harmonics values for one unit 3-vector."""
    direction = np.asarray(direction, dtype=np.float64)
    if direction.shape != (3,):
        raise ValueError(f"direction must be a 3-vector, got shape {direction.shape}")
    norm = np.linalg.norm(direction)
    if abs(norm - 1.0) > 1e-6:
        raise ValueError(f"direction must be unit length, |d| = {norm}")
    return _sh_basis(direction, config.degree)


def rotate_about_normal(direction: np.ndarray, normal: np.ndarray, angle: float) -> np.ndarray:
    """Rotate a unit direction about a unit axis by angle (Rodrigues), then
    renormalize to erase accumulated rounding."""
    direction = np.asarray(direction, dtype=np.float64)
    normal = np.asarray(normal, dtype=np.float64)
    out = _rotate_many(direction[None, :], normal[None, :], angle)[0]
    return out


def _rotate_many(directions: np.ndarray, axes: np.ndarray, angle: float) -> np.ndarray:
    cos = np.cos(angle)
    sin = np.sin(angle)
    cross = np.cross(axes, directions)
    dot = np.sum(axes * directions, axis=-1, keepdims=True)
    rotated = directions * cos + cross * sin + axes * dot * (1.0 - cos)
    lengths = np.linalg.norm(rotated, axis=-1, keepdims=True)
    lengths[lengths == 0.0] = 1.0
    return rotated / lengths


def _build_pad_index(offsets: np.ndarray, n_values: int) -> np.ndarray:
    """(max_count, n_segments) gather index into a values array that carries
    one extra all-zero sentinel row at position n_values. Column j lists
    segment j's value rows in storage order, sentinel-padded at the tail."""
    counts = np.asarray(offsets[1:]) - np.asarray(offsets[:-1])
    starts = np.asarray(offsets[:-1], dtype=np.int64)
    max_count = int(counts.max()) if len(counts) else 0
    pad = np.full((max_count, len(counts)), n_values, dtype=np.int64)
    for k in range(max_count):
        inside = counts > k
        pad[k, inside] = starts[inside] + k
    return pad


def _padded_segment_sum(values_ext: np.ndarray, pad_idx: np.ndarray) -> np.ndarray:
    """Segment sum driven by a pad index; values_ext rows beyond the real data
    must be zero. Each segment accumulates its rows strictly left to right in
    storage order, so results are reproducible bit for bit."""
    n_segments = pad_idx.shape[1]
    if pad_idx.shape[0] == 0:
        return np.zeros((n_segments, values_ext.shape[1]), dtype=values_ext.dtype)
    out = values_ext[pad_idx[0]]
    for k in range(1, pad_idx.shape[0]):
        out += values_ext[pad_idx[k]]
    return out


class EdgeGeometry:
    """Precomputed directed-edge arrays for one (mesh, graph) pair.

    center_idx[e] owns the message, nbr_idx[e] sends it. Unit directions and
    basis weights depend only on geometry, so they are cached across steps;
    weights are recomputed per orientation angle with a small LRU.
    """

    _WEIGHT_CACHE_SIZE = 8

    def __init__(self, mesh: Mesh, graph: AdjacencyGraph):
        if mesh.n_vertices != graph.n_vertices:
            raise ValueError(
                f"mesh has {mesh.n_vertices} vertices but graph has {graph.n_vertices}"
            )
        self.mesh = mesh
        self.graph = graph
        counts = graph.counts
        self.offsets = graph.offsets
        self.nbr_idx = graph.neighbors
        self.center_idx = np.repeat(np.arange(graph.n_vertices, dtype=np.int64), counts)
        deltas = mesh.positions[self.nbr_idx] - mesh.positions[self.center_idx]
        lengths = np.linalg.norm(deltas, axis=1)
        self.degenerate = lengths < 1e-12
        safe = np.where(self.degenerate, 1.0, lengths)
        self.unit_dirs = deltas / safe[:, None]
        self.unit_dirs[self.degenerate] = 0.0
        self.skipped_messages = int(self.degenerate.sum())
        self.center_normals = mesh.normals[self.center_idx]
        self.pad_idx = _build_pad_index(self.offsets, len(self.nbr_idx))
        self._weight_cache: dict[tuple, np.ndarray] = {}
        self._reverse_perm: np.ndarray | None = None

    @classmethod
    def from_mesh_graph(cls, mesh: Mesh, graph: AdjacencyGraph) -> "EdgeGeometry":
        return cls(mesh, graph)

    @property
    def n_edges_directed(self) -> int:
        return len(self.nbr_idx)

    def weights(self, degree: int, orientation: float, dtype) -> np.ndarray:
        """(E, basis_count) message weights for a global orientation angle."""
        key = (degree, float(orientation), np.dtype(dtype).str)
        cached = self._weight_cache.get(key)
        if cached is not None:
            return cached
        if orientation == 0.0:
            dirs = self.unit_dirs
        else:
            dirs = _rotate_many(self.unit_dirs, self.center_normals, float(orientation))
        w = _sh_basis(dirs, degree)
        if self.skipped_messages:
            w[self.degenerate] = 0.0
        w = np.ascontiguousarray(w, dtype=dtype)
        if len(self._weight_cache) >= self._WEIGHT_CACHE_SIZE:
            # drop the oldest non-identity entry; orientation 0 stays hot
            for old in list(self._weight_cache):
                if old[1] != 0.0:
                    del self._weight_cache[old]
                    break
        self._weight_cache[key] = w
        return w

    def reverse_perm(self) -> np.ndarray:
        """Index of the opposite directed edge, used by the training adjoint."""
        if self._reverse_perm is None:
            n = np.int64(self.graph.n_vertices)
            keys = self.center_idx * n + self.nbr_idx
            rev_keys = self.nbr_idx * n + self.center_idx
            perm = np.searchsorted(keys, rev_keys)
            if (keys[perm] != rev_keys).any():
                raise ValueError("adjacency is not symmetric")
            self._reverse_perm = perm
        return self._reverse_perm


def perceive(
    states,
    mesh: Mesh,
    graph: AdjacencyGraph,
    config: ShBasisConfig = ShBasisConfig(),
    orientation: float = 0.0,
    geometry: EdgeGeometry | None = None,
) -> PerceptionBuffer:
    """Aggregate neighbor state differences under every basis function.

    Row i of the result is sum_j w_ij * (s_j - s_i) per basis, where w_ij is
    the basis evaluated at the unit direction from vertex i to neighbor j,
    optionally rotated about the vertex normal by the orientation angle.
    A constant state therefore maps to exact zeros.
    """
    values = states.values if hasattr(states, "values") else np.asarray(states)
    if values.ndim != 2:
        raise ValueError(f"states must be (N, C), got shape {values.shape}")
    if values.shape[0] != mesh.n_vertices:
        raise ValueError(
            f"states have {values.shape[0]} rows for {mesh.n_vertices} vertices"
        )
    if not np.isfinite(orientation):
        raise ValueError("orientation must be finite")
    geo = geometry if geometry is not None else EdgeGeometry(mesh, graph)
    w = geo.weights(config.degree, orientation, values.dtype)
    diff = values[geo.nbr_idx] - values[geo.center_idx]
    n, channels = values.shape
    basis_count = config.basis_count
    n_edges = geo.n_edges_directed
    contrib = np.empty((n_edges + 1, basis_count * channels), dtype=values.dtype)
    np.multiply(
        w[:, :, None],
        diff[:, None, :],
        out=contrib[:n_edges].reshape(n_edges, basis_count, channels),
    )
    contrib[n_edges] = 0.0
    z = _padded_segment_sum(contrib, geo.pad_idx)
    return PerceptionBuffer(values=z, skipped_messages=geo.skipped_messages)


def grid_sobel_x(phi: float, r: float) -> float:
    """Horizontal edge filter on polar grid offsets: 2 * sgn(cos phi) * cos^2 phi,
    zero at the center tap (r = 0)."""
    if r == 0.0:
        return 0.0
    c = np.cos(phi)
    return float(2.0 * np.sign(c) * c * c)


def grid_sobel_y(phi: float, r: float) -> float:
    """Vertical edge filter: the horizontal one rotated a quarter turn."""
    return grid_sobel_x(phi - np.pi / 2.0, r)


GRID_FILTERS = ("sobel_x", "sobel_y", "laplacian") + tuple(
    f"sh:{name}" for name in BASIS_NAMES
)


def grid_kernel_sample(filter_name: str, offsets) -> np.ndarray:
    """Sample a named filter on 2D integer grid offsets.

    Polar quantities are evaluated algebraically from the offsets
    (cos phi = dx / r), so axis and diagonal taps come out exact. The
    laplacian filter weighs every non-center tap 1. SH filters evaluate the
    basis on in-plane unit directions (dx, dy, 0) / r and are zero at the
    center, where a message has no direction.
    """
    offs = np.asarray(offsets, dtype=np.float64)
    if offs.ndim != 2 or offs.shape[1] != 2:
        raise ValueError(f"offsets must be (K, 2), got {offs.shape}")
    dx = offs[:, 0]
    dy = offs[:, 1]
    r2 = dx * dx + dy * dy
    center = r2 == 0.0
    safe_r2 = np.where(center, 1.0, r2)
    if filter_name == "sobel_x":
        out = 2.0 * np.sign(dx) * (dx * dx) / safe_r2
    elif filter_name == "sobel_y":
        out = 2.0 * np.sign(dy) * (dy * dy) / safe_r2
    elif filter_name == "laplacian":
        out = np.ones(len(offs))
    elif filter_name.startswith("sh:"):
        name = filter_name[3:]
        if name not in BASIS_NAMES:
            raise ValueError(f"unknown basis {name!r}")
        index = BASIS_NAMES.index(name)
        degree = 0 if index == 0 else (1 if index <= 3 else 2)
        r = np.sqrt(safe_r2)
        dirs = np.stack([dx / r, dy / r, np.zeros(len(offs))], axis=1)
        out = _sh_basis(dirs, degree)[:, index]
    else:
        raise ValueError(f"unknown filter {filter_name!r}, expected one of {GRID_FILTERS}")
    out = np.where(center, 0.0, out)
    return out
