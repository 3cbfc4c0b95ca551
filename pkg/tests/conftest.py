"""Shared fixtures: cached meshes, adjacency graphs and weight factories."""

from __future__ import annotations

import numpy as np
import pytest

from meshca import build_adjacency, generate_icosphere
from meshca.engine import ModelConfig, ModelWeights
from meshca.trainer import RandomInit, init_weights


@pytest.fixture(scope="session")
def sphere_meshes():
    """Icospheres by subdivision level, built once per run."""
    return {level: generate_icosphere(level) for level in (0, 1, 2, 3)}


@pytest.fixture(scope="session")
def sphere_graphs(sphere_meshes):
    return {level: build_adjacency(mesh) for level, mesh in sphere_meshes.items()}


@pytest.fixture
def sphere1(sphere_meshes, sphere_graphs):
    return sphere_meshes[1], sphere_graphs[1]


@pytest.fixture
def sphere2(sphere_meshes, sphere_graphs):
    return sphere_meshes[2], sphere_graphs[2]


class FullMask:
    """Every cell updates every step."""

    kind = "full"

    def __init__(self, n_cells: int):
        self.n_cells = n_cells

    def draw(self) -> np.ndarray:
        return np.ones(self.n_cells, dtype=bool)


class FixedMask:
    """Replays a predetermined mask sequence, cycling when exhausted."""

    kind = "fixed"

    def __init__(self, masks):
        self.masks = [np.asarray(m, dtype=bool) for m in masks]
        self.cursor = 0

    def draw(self) -> np.ndarray:
        mask = self.masks[self.cursor % len(self.masks)]
        self.cursor += 1
        return mask


def random_weights(config: ModelConfig, seed: int, scale: float = 0.3) -> ModelWeights:
    """Nonzero weights in all four tensors, for dynamics tests where the
    identity-rule init would hide bugs."""
    base = init_weights(config, RandomInit(seed))
    rng = np.random.default_rng(seed + 1)
    return ModelWeights(
        config=config,
        w1=rng.normal(0.0, scale, base.w1.shape).astype(np.float32),
        b1=rng.normal(0.0, scale * 0.1, base.b1.shape).astype(np.float32),
        w2=rng.normal(0.0, scale, base.w2.shape).astype(np.float32),
        b2=rng.normal(0.0, scale * 0.1, base.b2.shape).astype(np.float32),
        lineage_id=base.lineage_id,
        parent_id=None,
        name=f"random-{seed}",
    )


@pytest.fixture
def tiny_config():
    return ModelConfig(channels=4, hidden=8, sh_degree=1)
