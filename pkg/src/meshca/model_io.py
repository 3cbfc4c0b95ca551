"""Serialization: weight files and registries as JSON, state dumps as binary.

Weight matrices are stored as flat row-major lists of decimal floats; Python
prints shortest round-tripping representations, so float32 weights survive a
save/load cycle bit for bit.
"""

from __future__ import annotations

import json
import struct

import numpy as np

from .engine import ModelConfig, ModelWeights, CellStateBuffer, fresh_lineage_id
from .perception import BASIS_NAMES

WEIGHT_FORMAT_VERSION = 1
STATE_DUMP_MAGIC = b"MNCA"
STATE_DUMP_VERSION = 1


def _basis_order(sh_degree: int) -> list[str]:
    return list(BASIS_NAMES[: (sh_degree + 1) ** 2])


def weights_to_dict(weights: ModelWeights) -> dict:
    cfg = weights.config
    return {
        "format_version": WEIGHT_FORMAT_VERSION,
        "name": weights.name,
        "lineage_id": weights.lineage_id,
        "parent_id": weights.parent_id,
        "config": {
            "channels": cfg.channels,
            "hidden": cfg.hidden,
            "condition_dim": cfg.condition_dim,
            "sh_degree": cfg.sh_degree,
            "layout": cfg.layout,
            "basis_order": _basis_order(cfg.sh_degree),
            "input_order": "s|z|h",
        },
        "w1": [float(v) for v in weights.w1.ravel()],
        "b1": [float(v) for v in weights.b1.ravel()],
        "w2": [float(v) for v in weights.w2.ravel()],
        "b2": [float(v) for v in weights.b2.ravel()],
    }


def weights_from_dict(data: dict, dtype=np.float32) -> ModelWeights:
    version = data.get("format_version")
    if version != WEIGHT_FORMAT_VERSION:
        raise ValueError(f"unsupported weight format_version {version!r}")
    cfg_data = data["config"]
    config = ModelConfig(
        channels=int(cfg_data["channels"]),
        hidden=int(cfg_data["hidden"]),
        condition_dim=int(cfg_data["condition_dim"]),
        sh_degree=int(cfg_data["sh_degree"]),
        layout=str(cfg_data["layout"]),
    )
    expected_basis = _basis_order(config.sh_degree)
    if list(cfg_data.get("basis_order", [])) != expected_basis:
        raise ValueError(
            f"basis_order {cfg_data.get('basis_order')} does not match "
            f"sh_degree {config.sh_degree}, expected {expected_basis}"
        )
    if cfg_data.get("input_order") != "s|z|h":
        raise ValueError(f"unsupported input_order {cfg_data.get('input_order')!r}")
    h, d_in, c = config.hidden, config.input_dim, config.channels

    def take(key: str, shape: tuple[int, ...]) -> np.ndarray:
        flat = np.asarray(data[key], dtype=np.float64)
        count = int(np.prod(shape))
        if flat.shape != (count,):
            raise ValueError(f"{key} must hold {count} values, got {flat.shape}")
        return flat.reshape(shape).astype(dtype)

    return ModelWeights(
        config=config,
        w1=take("w1", (h, d_in)),
        b1=take("b1", (h,)),
        w2=take("w2", (c, h)),
        b2=take("b2", (c,)),
        lineage_id=str(data["lineage_id"]),
        parent_id=None if data.get("parent_id") is None else str(data["parent_id"]),
        name=str(data.get("name", "model")),
    )


def save_weights(weights: ModelWeights, path: str) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(weights_to_dict(weights), fh)
        fh.write("\n")


def load_weights(path: str, dtype=np.float32) -> ModelWeights:
    with open(path, "r", encoding="utf-8") as fh:
        return weights_from_dict(json.load(fh), dtype=dtype)


def save_registry(models, path: str) -> None:
    """Bundle many models into one file: {"models": [weight dicts]}."""
    entries = models.values() if hasattr(models, "values") else models
    payload = {"models": [weights_to_dict(m) for m in entries]}
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(payload, fh)
        fh.write("\n")


def load_registry(path: str, dtype=np.float32) -> dict[str, ModelWeights]:
    """Name-keyed models, preserving file order."""
    with open(path, "r", encoding="utf-8") as fh:
        payload = json.load(fh)
    if not isinstance(payload, dict) or "models" not in payload:
        raise ValueError("registry file must be an object with a 'models' list")
    registry: dict[str, ModelWeights] = {}
    for entry in payload["models"]:
        weights = weights_from_dict(entry, dtype=dtype)
        if weights.name in registry:
            raise ValueError(f"duplicate model name {weights.name!r} in registry")
        registry[weights.name] = weights
    return registry


def write_state_dump(states: CellStateBuffer, path: str) -> None:
    """Binary snapshot: magic, version, N, C as little-endian u32, then the
    row-major float32 state matrix."""
    values = np.ascontiguousarray(states.values, dtype="<f4")
    n, c = values.shape
    with open(path, "wb") as fh:
        fh.write(STATE_DUMP_MAGIC)
        fh.write(struct.pack("<III", STATE_DUMP_VERSION, n, c))
        fh.write(values.tobytes())


def read_state_dump(path: str) -> CellStateBuffer:
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < 16 or blob[:4] != STATE_DUMP_MAGIC:
        raise ValueError("not a state dump (bad magic)")
    version, n, c = struct.unpack("<III", blob[4:16])
    if version != STATE_DUMP_VERSION:
        raise ValueError(f"unsupported state dump version {version}")
    expected = 16 + 4 * n * c
    if len(blob) != expected:
        raise ValueError(f"state dump truncated: expected {expected} bytes, got {len(blob)}")
    values = np.frombuffer(blob, dtype="<f4", offset=16).reshape(n, c).copy()
    return CellStateBuffer(values=values)


def make_model_weights(
    config: ModelConfig,
    w1: np.ndarray,
    b1: np.ndarray,
    w2: np.ndarray,
    b2: np.ndarray,
    name: str = "model",
    parent_id: str | None = None,
) -> ModelWeights:
    return ModelWeights(
        config=config,
        w1=w1,
        b1=b1,
        w2=w2,
        b2=b2,
        lineage_id=fresh_lineage_id(),
        parent_id=parent_id,
        name=name,
    )
