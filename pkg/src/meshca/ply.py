"""ASCII PLY export of synthesized textures.

Vertices carry position, normal and an 8-bit color; PBR output adds float
height, roughness and ambient occlusion columns. Formatting is fixed-width
decimal, so identical inputs produce byte-identical files.
"""

from __future__ import annotations

import numpy as np

from .engine import CellStateBuffer, ModelConfig, extract_color_geo, extract_pbr
from .mesh import Mesh


def write_ply(
    path: str,
    positions: np.ndarray,
    normals: np.ndarray,
    colors: np.ndarray,
    faces: np.ndarray,
    extras: dict[str, np.ndarray] | None = None,
) -> None:
    """colors are floats in [0, 1], quantized here to uchar."""
    n = len(positions)
    extras = extras or {}
    rgb = np.clip(np.rint(np.asarray(colors) * 255.0), 0, 255).astype(np.uint8)
    lines = ["ply", "format ascii 1.0", f"element vertex {n}"]
    lines += [f"property float {axis}" for axis in ("x", "y", "z")]
    lines += [f"property float {axis}" for axis in ("nx", "ny", "nz")]
    lines += [f"property uchar {chan}" for chan in ("red", "green", "blue")]
    lines += [f"property float {name}" for name in extras]
    lines += [
        f"element face {len(faces)}",
        "property list uchar int vertex_indices",
        "end_header",
    ]
    extra_cols = [np.asarray(v, dtype=np.float64) for v in extras.values()]
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines) + "\n")
        for i in range(n):
            px, py, pz = positions[i]
            nx, ny, nz = normals[i]
            row = (
                f"{px:.9g} {py:.9g} {pz:.9g} {nx:.9g} {ny:.9g} {nz:.9g} "
                f"{rgb[i, 0]} {rgb[i, 1]} {rgb[i, 2]}"
            )
            for col in extra_cols:
                row += f" {col[i]:.9g}"
            fh.write(row + "\n")
        for a, b, c in faces:
            fh.write(f"3 {a} {b} {c}\n")


def export_states_ply(
    path: str, mesh: Mesh, states: CellStateBuffer, config: ModelConfig
) -> None:
    """Write the current texture as a viewable mesh snapshot."""
    if config.layout == "pbr":
        maps = extract_pbr(states, config)
        write_ply(
            path,
            mesh.positions,
            mesh.normals,
            maps["albedo"],
            mesh.triangles,
            extras={
                "height": maps["height"],
                "roughness": maps["roughness"],
                "ao": maps["ao"],
            },
        )
    else:
        maps = extract_color_geo(states, mesh, config)
        write_ply(path, maps["positions"], mesh.normals, maps["color"], mesh.triangles)
