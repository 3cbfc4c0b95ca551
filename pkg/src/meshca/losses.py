"""Loss functions for appearance and motion supervision, plus the guidance
vector fields used as motion targets.

Everything here is a pure function of numpy arrays; training wires gradients
separately.
"""

from __future__ import annotations

import dataclasses
import enum

import numpy as np

from .mesh import AdjacencyGraph, Mesh

# Dynamic-texture defaults: lambda weighs motion against appearance; the
# image-driven and text-driven settings use different strength horizons T
# and direction weights gamma.
LAMBDA_MOTION = 0.67
T_IMAGE = 24.0
GAMMA_IMAGE = 1.5
T_TEXT = 10.0
GAMMA_TEXT = 0.15
HF_XI = 0.01
OVERFLOW_WEIGHT = 10000.0

_EPS_NORM = 1e-12


@dataclasses.dataclass(frozen=True)
class FeatureSet:
    """A bag of feature vectors (M, C); is_rgb marks raw color triples, which
    additionally get an L2 term inside the matching distance."""

    vectors: np.ndarray
    is_rgb: bool = False

    def __post_init__(self):
        v = self.vectors
        if v.ndim != 2 or v.shape[0] < 1:
            raise ValueError(f"vectors must be (M, C) with M >= 1, got {v.shape}")
        if not np.isfinite(v).all():
            raise ValueError("vectors contain non-finite values")


@dataclasses.dataclass(frozen=True)
class EmbeddingVector:
    values: np.ndarray

    def __post_init__(self):
        if self.values.ndim != 1:
            raise ValueError(f"embedding must be 1D, got shape {self.values.shape}")


@dataclasses.dataclass(frozen=True)
class FlowField:
    """Per-vertex 2D motion vectors with a visibility mask."""

    vectors: np.ndarray
    valid_mask: np.ndarray

    def __post_init__(self):
        if self.vectors.ndim != 2 or self.vectors.shape[1] != 2:
            raise ValueError(f"vectors must be (P, 2), got {self.vectors.shape}")
        if self.valid_mask.shape != (self.vectors.shape[0],):
            raise ValueError("valid_mask must have one entry per vector")


class VectorFieldKind(enum.Enum):
    POSITIVE_X = "positive_x"
    NEGATIVE_X = "negative_x"
    POSITIVE_Y = "positive_y"
    NEGATIVE_Y = "negative_y"
    GRAD_Y_UP = "grad_y_up"
    GRAD_Y_DOWN = "grad_y_down"
    CIRCULAR_X = "circular_x"
    CIRCULAR_Y = "circular_y"


def _as_embedding(v) -> np.ndarray:
    if isinstance(v, EmbeddingVector):
        return v.values.astype(np.float64)
    return np.asarray(v, dtype=np.float64)


def cosine_distance(u, v) -> float:
    """1 - cos(u, v); raises on zero-norm input."""
    u = _as_embedding(u)
    v = _as_embedding(v)
    nu = np.linalg.norm(u)
    nv = np.linalg.norm(v)
    if nu < _EPS_NORM or nv < _EPS_NORM:
        raise ValueError("cosine distance undefined for zero-norm vectors")
    return float(1.0 - (u @ v) / (nu * nv))


def pairwise_match_cost(a: FeatureSet, b: FeatureSet) -> np.ndarray:
    """(M_a, M_b) matrix of cosine distances, plus Euclidean distances when
    the sets carry raw colors."""
    if a.vectors.shape[1] != b.vectors.shape[1]:
        raise ValueError(
            f"feature width mismatch: {a.vectors.shape[1]} vs {b.vectors.shape[1]}"
        )
    if a.is_rgb != b.is_rgb:
        raise ValueError("both feature sets must agree on is_rgb")
    av = a.vectors.astype(np.float64)
    bv = b.vectors.astype(np.float64)
    na = np.linalg.norm(av, axis=1)
    nb = np.linalg.norm(bv, axis=1)
    if (na < _EPS_NORM).any() or (nb < _EPS_NORM).any():
        raise ValueError("cosine distance undefined for zero-norm feature rows")
    cost = 1.0 - (av @ bv.T) / np.outer(na, nb)
    if a.is_rgb:
        sq = (
            (av * av).sum(axis=1)[:, None]
            - 2.0 * (av @ bv.T)
            + (bv * bv).sum(axis=1)[None, :]
        )
        cost = cost + np.sqrt(np.maximum(sq, 0.0))
    return cost


def relaxed_w(a: FeatureSet, b: FeatureSet) -> float:
    """One-directional relaxed matching: each row of a pays its cheapest
    counterpart in b, averaged over a."""
    cost = pairwise_match_cost(a, b)
    return float(cost.min(axis=1).mean())


def l_w(a: FeatureSet, b: FeatureSet) -> float:
    """Symmetrized relaxed matching distance (worse direction wins)."""
    return max(relaxed_w(a, b), relaxed_w(b, a))


def _moments(vectors: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    m = vectors.mean(axis=0)
    count = vectors.shape[0]
    if count == 1:
        cov = np.zeros((vectors.shape[1], vectors.shape[1]))
    else:
        centered = vectors - m
        cov = centered.T @ centered / (count - 1)
    return m, cov


def l_m(a: FeatureSet, b: FeatureSet) -> float:
    """First and second moment mismatch: mean difference weighted 1/C,
    covariance difference weighted 1/C^2, both as summed absolute error."""
    if a.vectors.shape[1] != b.vectors.shape[1]:
        raise ValueError(
            f"feature width mismatch: {a.vectors.shape[1]} vs {b.vectors.shape[1]}"
        )
    c = a.vectors.shape[1]
    ma, ta = _moments(a.vectors.astype(np.float64))
    mb, tb = _moments(b.vectors.astype(np.float64))
    return float(np.abs(ma - mb).sum() / c + np.abs(ta - tb).sum() / (c * c))


def appearance_im(view_pairs) -> float:
    """Image-guided appearance loss: matching plus moment terms summed over
    feature layers, averaged over rendered views.

    view_pairs is a sequence with one entry per view, each a sequence of
    (generated FeatureSet, target FeatureSet) pairs, one per feature layer.
    """
    n_views = len(view_pairs)
    if n_views < 1:
        raise ValueError("appearance loss needs at least one view")
    total = 0.0
    for pairs in view_pairs:
        for gen, target in pairs:
            total += l_w(gen, target) + l_m(gen, target)
    return total / n_views


_DIRECTIONAL_BRANCHES = ("glo", "loc", "loc_geo")


def clip_directional(render_emb: dict, render_neg_emb: dict, text_emb, text_neg_emb) -> float:
    """Text-guided appearance loss: for the global, local and geometry-only
    render branches, the render embedding must move away from its negative in
    the same direction the text moves away from the negative prompt."""
    delta_text = _as_embedding(text_emb) - _as_embedding(text_neg_emb)
    total = 0.0
    for branch in _DIRECTIONAL_BRANCHES:
        if branch not in render_emb or branch not in render_neg_emb:
            raise ValueError(f"missing render branch {branch!r}")
        delta_render = _as_embedding(render_emb[branch]) - _as_embedding(render_neg_emb[branch])
        total += cosine_distance(delta_render, delta_text)
    return float(total)


def mes_dir_score(render_emb, render_neg_emb, text_emb, text_neg_emb, scaled: bool = True) -> float:
    """Directional alignment score between render and text embedding shifts:
    cosine similarity, conventionally reported x100."""
    delta_render = _as_embedding(render_emb) - _as_embedding(render_neg_emb)
    delta_text = _as_embedding(text_emb) - _as_embedding(text_neg_emb)
    sim = 1.0 - cosine_distance(delta_render, delta_text)
    return float(100.0 * sim) if scaled else float(sim)


def average_embeddings(embeddings) -> EmbeddingVector:
    """Plain mean of embedding vectors, no renormalization."""
    arrays = [_as_embedding(e) for e in embeddings]
    if not arrays:
        raise ValueError("cannot average zero embeddings")
    return EmbeddingVector(values=np.mean(arrays, axis=0))


def tangent_project(u: np.ndarray, normal: np.ndarray) -> np.ndarray:
    """Remove the normal component: u - (u . n) n. Accepts single vectors or
    matching (N, 3) batches."""
    u = np.asarray(u, dtype=np.float64)
    normal = np.asarray(normal, dtype=np.float64)
    lengths = np.linalg.norm(normal, axis=-1)
    if np.abs(lengths - 1.0).max() > 1e-6:
        raise ValueError("normals must have unit length")
    dot = np.sum(u * normal, axis=-1, keepdims=True)
    return u - dot * normal


def eval_vector_field(kind, mesh: Mesh) -> np.ndarray:
    """Evaluate a named guidance field on mesh vertices and normalize it so
    the mean vertex norm is exactly one.

    Circular fields are undefined at the origin; such vertices get a zero
    vector before normalization.
    """
    if not isinstance(kind, VectorFieldKind):
        kind = VectorFieldKind(kind)
    p = mesh.positions
    n = mesh.n_vertices
    x, y, z = p[:, 0], p[:, 1], p[:, 2]
    zeros = np.zeros(n)
    if kind == VectorFieldKind.POSITIVE_X:
        raw = np.stack([np.ones(n), zeros, zeros], axis=1)
    elif kind == VectorFieldKind.NEGATIVE_X:
        raw = np.stack([-np.ones(n), zeros, zeros], axis=1)
    elif kind == VectorFieldKind.POSITIVE_Y:
        raw = np.stack([zeros, np.ones(n), zeros], axis=1)
    elif kind == VectorFieldKind.NEGATIVE_Y:
        raw = np.stack([zeros, -np.ones(n), zeros], axis=1)
    elif kind == VectorFieldKind.GRAD_Y_UP:
        raw = np.stack([zeros, z + 1.0, zeros], axis=1)
    elif kind == VectorFieldKind.GRAD_Y_DOWN:
        raw = np.stack([zeros, -z - 1.0, zeros], axis=1)
    else:
        r = np.linalg.norm(p, axis=1)
        at_origin = r < 1e-9
        safe_r = np.where(at_origin, 1.0, r)
        if kind == VectorFieldKind.CIRCULAR_X:
            raw = np.stack([zeros, -z / safe_r, y / safe_r], axis=1)
        else:
            raw = np.stack([z / safe_r, zeros, -x / safe_r], axis=1)
        raw[at_origin] = 0.0
    mean_norm = np.linalg.norm(raw, axis=1).mean()
    if mean_norm < _EPS_NORM:
        raise ValueError(f"vector field {kind.value} vanishes on this mesh")
    return raw / mean_norm


def project_to_view(
    tangent_field: np.ndarray,
    camera: np.ndarray,
    normals: np.ndarray,
    view_dir: np.ndarray,
) -> FlowField:
    """Linear projection of per-vertex 3D directions into screen space (the
    first two camera-space components); vertices whose normals face away from
    the camera are masked invalid."""
    camera = np.asarray(camera, dtype=np.float64)
    if camera.shape != (4, 4):
        raise ValueError(f"camera must be a 4x4 matrix, got {camera.shape}")
    field = np.asarray(tangent_field, dtype=np.float64)
    vectors = (field @ camera[:3, :3].T)[:, :2]
    facing = np.asarray(normals, dtype=np.float64) @ np.asarray(view_dir, dtype=np.float64) < 0.0
    return FlowField(vectors=vectors, valid_mask=facing)


def _dir_distances(gen: FlowField, target: FlowField) -> tuple[np.ndarray, np.ndarray]:
    if gen.vectors.shape != target.vectors.shape:
        raise ValueError("flow fields must have matching shapes")
    tn = np.linalg.norm(target.vectors, axis=1)
    valid = gen.valid_mask & target.valid_mask & (tn > 1e-8)
    return valid, tn


def l_dir(gen: FlowField, target: FlowField) -> float:
    """Mean cosine distance between generated and target flow over entries
    visible in both fields. Zero-length generated vectors carry no direction
    and count as fully misaligned."""
    valid, tn = _dir_distances(gen, target)
    if not valid.any():
        raise ValueError("no valid entries shared by the two flow fields")
    gv = gen.vectors[valid]
    tv = target.vectors[valid]
    gn = np.linalg.norm(gv, axis=1)
    denom = np.maximum(gn * tn[valid], _EPS_NORM)
    cos = np.sum(gv * tv, axis=1) / denom
    return float(np.mean(1.0 - cos))


def l_str(gen: FlowField, target: FlowField, horizon: float, t1: float, t2: float) -> float:
    """Mean absolute mismatch between generated speed, rescaled from the
    sampled interval [t1, t2] to the horizon, and the target magnitude."""
    if t2 <= t1:
        raise ValueError(f"need t2 > t1, got [{t1}, {t2}]")
    valid, tn = _dir_distances(gen, target)
    if not valid.any():
        raise ValueError("no valid entries shared by the two flow fields")
    gn = np.linalg.norm(gen.vectors[valid], axis=1)
    return float(np.mean(np.abs(horizon * gn / (t2 - t1) - tn[valid])))


def l_mot(dir_term: float, str_term: float, gamma: float = GAMMA_IMAGE) -> float:
    """Motion loss: direction only while badly misaligned, then a blend of
    strength and direction."""
    if dir_term >= 1.0:
        return float(dir_term)
    return float((1.0 - dir_term) * str_term + gamma * dir_term)


def l_dyn(appearance_term: float, motion_term: float, weight: float = LAMBDA_MOTION) -> float:
    return float(appearance_term + weight * motion_term)


def overflow_loss(states) -> float:
    """Mean absolute excursion of the state outside [-1, 1]."""
    values = states.values if hasattr(states, "values") else np.asarray(states)
    overflow = np.abs(values - np.clip(values, -1.0, 1.0))
    return float(overflow.mean())


def hf_constraint(geo_channel: np.ndarray, graph: AdjacencyGraph, xi: float = HF_XI) -> float:
    """Hinge on the mean uniform Laplacian of a geometry channel: values above
    xi are penalized linearly."""
    geo = np.asarray(geo_channel, dtype=np.float64)
    if geo.shape != (graph.n_vertices,):
        raise ValueError(f"geo channel must be (N,), got {geo.shape}")
    # laplacian_i = sum_j (geo_j - geo_i) over neighbors j
    center = np.repeat(np.arange(graph.n_vertices), graph.counts)
    lap = np.zeros(graph.n_vertices)
    np.add.at(lap, center, geo[graph.neighbors] - geo[center])
    return float(max(0.0, lap.mean() - xi))
