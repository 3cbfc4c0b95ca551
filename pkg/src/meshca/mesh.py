"""Triangle mesh container, OBJ I/O, icosphere generation and vertex adjacency."""

from __future__ import annotations

import dataclasses

import numpy as np

MAX_ICOSPHERE_LEVEL = 8

GOLDEN_RATIO = (1.0 + np.sqrt(5.0)) / 2.0


class MeshError(Exception):
    """Raised for malformed mesh data or unparsable mesh files."""

    def __init__(self, message: str, path: str | None = None, line: int | None = None):
        self.path = path
        self.line = line
        prefix = ""
        if path is not None:
            prefix = f"{path}:"
            if line is not None:
                prefix += f"{line}:"
            prefix += " "
        super().__init__(prefix + message)


def compute_vertex_normals(positions: np.ndarray, triangles: np.ndarray) -> np.ndarray:
    """Area-weighted vertex normals.

    Each face contributes its unnormalized cross product (magnitude equals
    twice the face area) to its three corners. Vertices that accumulate a
    near-zero normal (isolated or degenerate geometry) fall back to +z.
    """
    normals = np.zeros_like(positions)
    if len(triangles):
        p0 = positions[triangles[:, 0]]
        p1 = positions[triangles[:, 1]]
        p2 = positions[triangles[:, 2]]
        face_normals = np.cross(p1 - p0, p2 - p0)
        for corner in range(3):
            np.add.at(normals, triangles[:, corner], face_normals)
    lengths = np.linalg.norm(normals, axis=1)
    degenerate = lengths < 1e-12
    normals[degenerate] = (0.0, 0.0, 1.0)
    lengths[degenerate] = 1.0
    return normals / lengths[:, None]


@dataclasses.dataclass(frozen=True)
class Mesh:
    """Immutable triangle mesh with per-vertex unit normals.

    positions: (N, 3) float64, triangles: (F, 3) int64 referencing vertices,
    normals: (N, 3) float64 unit vectors.
    """

    positions: np.ndarray
    triangles: np.ndarray
    normals: np.ndarray

    @classmethod
    def from_arrays(
        cls,
        positions: np.ndarray,
        triangles: np.ndarray,
        normals: np.ndarray | None = None,
    ) -> "Mesh":
        positions = np.asarray(positions, dtype=np.float64)
        triangles = np.asarray(triangles, dtype=np.int64)
        if triangles.size == 0:
            triangles = triangles.reshape(0, 3)
        if positions.ndim != 2 or positions.shape[1] != 3 or positions.shape[0] < 1:
            raise MeshError(f"positions must be (N, 3) with N >= 1, got {positions.shape}")
        if not np.isfinite(positions).all():
            raise MeshError("positions contain non-finite values")
        if triangles.ndim != 2 or triangles.shape[1] != 3:
            raise MeshError(f"triangles must be (F, 3), got {triangles.shape}")
        n = positions.shape[0]
        if triangles.size:
            if triangles.min() < 0 or triangles.max() >= n:
                raise MeshError("triangle index out of range")
            degenerate = (
                (triangles[:, 0] == triangles[:, 1])
                | (triangles[:, 1] == triangles[:, 2])
                | (triangles[:, 2] == triangles[:, 0])
            )
            if degenerate.any():
                raise MeshError(f"degenerate triangle at face {int(np.argmax(degenerate))}")
        if normals is None:
            normals = compute_vertex_normals(positions, triangles)
        else:
            normals = np.asarray(normals, dtype=np.float64)
            if normals.shape != positions.shape:
                raise MeshError("normals shape must match positions")
            lengths = np.linalg.norm(normals, axis=1)
            if np.abs(lengths - 1.0).max() > 1e-6:
                raise MeshError("normals must have unit length")
        return cls(positions=positions, triangles=triangles, normals=normals)

    @property
    def n_vertices(self) -> int:
        return self.positions.shape[0]

    @property
    def n_faces(self) -> int:
        return self.triangles.shape[0]

    def bbox_diagonal(self) -> float:
        extent = self.positions.max(axis=0) - self.positions.min(axis=0)
        return float(np.linalg.norm(extent))


@dataclasses.dataclass(frozen=True)
class AdjacencyGraph:
    """Symmetric vertex adjacency in CSR layout.

    neighbors of vertex i are neighbors[offsets[i]:offsets[i + 1]], sorted
    ascending, deduplicated, never containing i itself.
    """

    offsets: np.ndarray
    neighbors: np.ndarray

    @property
    def n_vertices(self) -> int:
        return len(self.offsets) - 1

    @property
    def n_edges(self) -> int:
        return len(self.neighbors) // 2

    @property
    def counts(self) -> np.ndarray:
        return self.offsets[1:] - self.offsets[:-1]

    def neighbors_of(self, i: int) -> np.ndarray:
        return self.neighbors[self.offsets[i]:self.offsets[i + 1]]

    def validate(self) -> None:
        if self.offsets[0] != 0 or self.offsets[-1] != len(self.neighbors):
            raise MeshError("adjacency offsets do not cover neighbor array")
        if (np.diff(self.offsets) < 0).any():
            raise MeshError("adjacency offsets must be non-decreasing")
        pairs = set()
        for i in range(self.n_vertices):
            nbrs = self.neighbors_of(i)
            if len(nbrs) and (np.diff(nbrs) <= 0).any():
                raise MeshError(f"neighbors of vertex {i} not sorted strictly ascending")
            if (nbrs == i).any():
                raise MeshError(f"vertex {i} has a self loop")
            for j in nbrs:
                pairs.add((i, int(j)))
        for i, j in pairs:
            if (j, i) not in pairs:
                raise MeshError(f"adjacency not symmetric: ({i}, {j}) has no reverse")


@dataclasses.dataclass(frozen=True)
class ValenceStats:
    min: int
    max: int
    mean: float


def build_adjacency(mesh: Mesh) -> AdjacencyGraph:
    """Vertex adjacency from shared triangle edges."""
    n = mesh.n_vertices
    t = mesh.triangles
    if len(t) == 0:
        return AdjacencyGraph(
            offsets=np.zeros(n + 1, dtype=np.int64),
            neighbors=np.zeros(0, dtype=np.int64),
        )
    halves = np.concatenate([t[:, [0, 1]], t[:, [1, 2]], t[:, [2, 0]]])
    directed = np.concatenate([halves, halves[:, ::-1]])
    # encode (i, j) as a single key so np.unique both dedups and sorts
    keys = directed[:, 0] * np.int64(n) + directed[:, 1]
    keys = np.unique(keys)
    centers = keys // n
    nbrs = keys % n
    counts = np.bincount(centers, minlength=n)
    offsets = np.zeros(n + 1, dtype=np.int64)
    np.cumsum(counts, out=offsets[1:])
    return AdjacencyGraph(offsets=offsets, neighbors=nbrs.astype(np.int64))


def valence_stats(graph: AdjacencyGraph) -> ValenceStats:
    """Exact min/max/mean of per-vertex neighbor counts."""
    counts = graph.counts
    if len(counts) == 0:
        raise MeshError("valence stats require at least one vertex")
    return ValenceStats(
        min=int(counts.min()),
        max=int(counts.max()),
        mean=float(counts.mean()),
    )


_ICOSAHEDRON_FACES = np.array(
    [
        (0, 11, 5), (0, 5, 1), (0, 1, 7), (0, 7, 10), (0, 10, 11),
        (1, 5, 9), (5, 11, 4), (11, 10, 2), (10, 7, 6), (7, 1, 8),
        (3, 9, 4), (3, 4, 2), (3, 2, 6), (3, 6, 8), (3, 8, 9),
        (4, 9, 5), (2, 4, 11), (6, 2, 10), (8, 6, 7), (9, 8, 1),
    ],
    dtype=np.int64,
)


def _icosahedron_vertices() -> np.ndarray:
    p = GOLDEN_RATIO
    verts = np.array(
        [
            (-1, p, 0), (1, p, 0), (-1, -p, 0), (1, -p, 0),
            (0, -1, p), (0, 1, p), (0, -1, -p), (0, 1, -p),
            (p, 0, -1), (p, 0, 1), (-p, 0, -1), (-p, 0, 1),
        ],
        dtype=np.float64,
    )
    return verts / np.linalg.norm(verts, axis=1)[:, None]


def generate_icosphere(level: int) -> Mesh:
    """Unit icosphere by repeated midpoint subdivision of an icosahedron.

    Midpoints are shared between adjacent faces, so the result has exactly
    10 * 4**level + 2 vertices and 20 * 4**level faces.
    """
    if not isinstance(level, (int, np.integer)) or isinstance(level, bool):
        raise MeshError(f"subdivision level must be an integer, got {level!r}")
    if level < 0 or level > MAX_ICOSPHERE_LEVEL:
        raise MeshError(
            f"subdivision level must be in [0, {MAX_ICOSPHERE_LEVEL}], got {level}"
        )
    positions = _icosahedron_vertices()
    faces = _ICOSAHEDRON_FACES
    for _ in range(level):
        n = len(positions)
        corner_pairs = np.concatenate([faces[:, [0, 1]], faces[:, [1, 2]], faces[:, [2, 0]]])
        lo = corner_pairs.min(axis=1)
        hi = corner_pairs.max(axis=1)
        keys = lo * np.int64(n) + hi
        unique_keys, inverse = np.unique(keys, return_inverse=True)
        mids = positions[unique_keys // n] + positions[unique_keys % n]
        mids /= np.linalg.norm(mids, axis=1)[:, None]
        positions = np.concatenate([positions, mids])
        f = len(faces)
        m01 = n + inverse[0:f]
        m12 = n + inverse[f:2 * f]
        m20 = n + inverse[2 * f:3 * f]
        a, b, c = faces[:, 0], faces[:, 1], faces[:, 2]
        faces = np.stack(
            [
                np.stack([a, m01, m20], axis=1),
                np.stack([b, m12, m01], axis=1),
                np.stack([c, m20, m12], axis=1),
                np.stack([m01, m12, m20], axis=1),
            ],
            axis=1,
        ).reshape(-1, 3)
    return Mesh.from_arrays(positions, faces)


def load_obj(path: str) -> Mesh:
    """Parse a Wavefront OBJ file.

    Supports v and f records; polygon faces are fan-triangulated; texture and
    normal indices in f entries are stripped; all other record types are
    ignored. Raises MeshError with the offending line number on bad input.
    """
    positions: list[tuple[float, float, float]] = []
    faces: list[tuple[int, int, int]] = []
    face_lines: list[int] = []
    with open(path, "r", encoding="utf-8") as fh:
        for line_no, raw in enumerate(fh, start=1):
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            fields = line.split()
            tag = fields[0]
            if tag == "v":
                if len(fields) < 4:
                    raise MeshError("v record needs 3 coordinates", path, line_no)
                try:
                    xyz = tuple(float(v) for v in fields[1:4])
                except ValueError:
                    raise MeshError(f"bad vertex coordinate in {line!r}", path, line_no)
                positions.append(xyz)
            elif tag == "f":
                if len(fields) < 4:
                    raise MeshError("f record needs at least 3 vertices", path, line_no)
                idx = []
                for entry in fields[1:]:
                    head = entry.split("/")[0]
                    try:
                        value = int(head)
                    except ValueError:
                        raise MeshError(f"bad face index in {entry!r}", path, line_no)
                    if value == 0:
                        raise MeshError("face index 0 is invalid in OBJ", path, line_no)
                    if value < 0:
                        value = len(positions) + value
                        if value < 0:
                            raise MeshError("relative face index out of range", path, line_no)
                        idx.append(value)
                    else:
                        idx.append(value - 1)
                for k in range(1, len(idx) - 1):
                    tri = (idx[0], idx[k], idx[k + 1])
                    if len(set(tri)) != 3:
                        raise MeshError("degenerate triangle (repeated index)", path, line_no)
                    faces.append(tri)
                    face_lines.append(line_no)
    if not positions:
        raise MeshError("no v records found (empty mesh)", path)
    if not faces:
        raise MeshError("no f records found (empty mesh)", path)
    triangles = np.array(faces, dtype=np.int64)
    out_of_range = (triangles < 0) | (triangles >= len(positions))
    if out_of_range.any():
        bad_face = int(np.argmax(out_of_range.any(axis=1)))
        raise MeshError("face index out of range", path, face_lines[bad_face])
    return Mesh.from_arrays(np.array(positions, dtype=np.float64), triangles)


def save_obj(mesh: Mesh, path: str) -> None:
    """Write v/f records. %.17g preserves float64 coordinates exactly."""
    with open(path, "w", encoding="utf-8") as fh:
        for x, y, z in mesh.positions:
            fh.write(f"v {x:.17g} {y:.17g} {z:.17g}\n")
        for a, b, c in mesh.triangles:
            fh.write(f"f {a + 1} {b + 1} {c + 1}\n")
