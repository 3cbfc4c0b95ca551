"""Command line entry points, invoked in-process through main(argv)."""

from __future__ import annotations

import json

import numpy as np
import pytest

from meshca import load_weights, read_state_dump, save_weights
from meshca.cli import main, resolve_mesh, run_bench
from meshca.engine import ModelConfig, Simulation
from meshca.mesh import MeshError

from conftest import random_weights


@pytest.fixture
def tiny_weights_file(tmp_path):
    # colorgeo is the smallest exportable layout, so tiny models use it
    config = ModelConfig(channels=4, hidden=8, layout="colorgeo")
    weights = random_weights(config, seed=2)
    path = tmp_path / "weights.json"
    save_weights(weights, str(path))
    return str(path)


def test_resolve_mesh_specs(tmp_path):
    mesh = resolve_mesh("icosphere:2")
    assert mesh.n_vertices == 162
    with pytest.raises(MeshError):
        resolve_mesh("icosphere:abc")
    obj = tmp_path / "tri.obj"
    obj.write_text("v 0 0 0\nv 1 0 0\nv 0 1 0\nf 1 2 3\n")
    assert resolve_mesh(str(obj)).n_faces == 1


def test_synth_zero_steps_writes_gray_ply(tmp_path, tiny_weights_file, capsys):
    out = tmp_path / "out.ply"
    code = main([
        "synth", "--mesh", "icosphere:1", "--weights", tiny_weights_file,
        "--steps", "0", "--output", str(out),
    ])
    assert code == 0
    assert "synth:" in capsys.readouterr().out
    lines = out.read_text().splitlines()
    body = lines[lines.index("end_header") + 1:]
    vertex_rows = [row for row in body if not row.startswith("3 ")]
    # zero seed maps to mid-gray: uchar round(0.5 * 255) = 128
    assert all(row.split()[6:9] == ["128", "128", "128"] for row in vertex_rows)


def test_synth_same_seed_byte_identical(tmp_path, tiny_weights_file):
    outputs = []
    for name in ("a.ply", "b.ply"):
        out = tmp_path / name
        code = main([
            "synth", "--mesh", "icosphere:1", "--weights", tiny_weights_file,
            "--steps", "40", "--output", str(out), "--seed", "5",
        ])
        assert code == 0
        outputs.append(out.read_bytes())
    assert outputs[0] == outputs[1]


def test_synth_state_dump_round_trip(tmp_path, tiny_weights_file):
    out = tmp_path / "out.ply"
    dump = tmp_path / "states.mnca"
    code = main([
        "synth", "--mesh", "icosphere:1", "--weights", tiny_weights_file,
        "--steps", "25", "--output", str(out), "--state-dump", str(dump),
        "--mask-scheme", "shuffle",
    ])
    assert code == 0
    states = read_state_dump(str(dump))
    assert states.values.shape == (42, 4)
    assert np.isfinite(states.values).all()
    assert (states.values != 0.0).any()


def test_synth_missing_weights_is_cli_error(tmp_path, capsys):
    code = main([
        "synth", "--mesh", "icosphere:0", "--weights", str(tmp_path / "nope.json"),
        "--output", str(tmp_path / "out.ply"),
    ])
    assert code == 1
    assert "error:" in capsys.readouterr().err


def test_train_echoes_defaults_and_writes_weights(tmp_path, capsys):
    out = tmp_path / "model.json"
    history = tmp_path / "history.csv"
    code = main([
        "train", "--mesh", "icosphere:0", "--target", "stripes:2",
        "--output", str(out), "--history", str(history),
        "--model-channels", "4", "--hidden", "8", "--epochs", "8",
        "--pool-size", "8", "--batch-size", "2", "--step-range", "2,4",
        "--name", "striped", "--log-every", "0",
    ])
    assert code == 0
    captured = capsys.readouterr().out
    config_line = next(
        line for line in captured.splitlines() if line.startswith("train config: ")
    )
    echo = json.loads(config_line.removeprefix("train config: "))
    assert echo["lr"] == 0.001
    assert echo["lr_decay_epochs"] == [1000, 2000]
    assert echo["lr_decay"] == 0.3
    assert echo["overflow_weight"] == 10000.0
    assert echo["seed_inject_every"] == 16
    assert echo["epochs"] == 8
    # channels 4, hidden 8, degree 1: input 20 -> (20*8+8) + (8*4+4)
    assert echo["param_count"] == 204
    weights = load_weights(str(out))
    assert weights.name == "striped"
    assert history.read_text().startswith("epoch,loss,lr,k_steps")
    assert len(history.read_text().splitlines()) == 9


def test_train_from_npy_target_and_parent(tmp_path, tiny_config):
    parent = random_weights(tiny_config, seed=1)
    parent_path = tmp_path / "parent.json"
    save_weights(parent, str(parent_path))
    mesh = resolve_mesh("icosphere:0")
    values = np.zeros((mesh.n_vertices, 2), dtype=np.float64)
    npy = tmp_path / "target.npy"
    np.save(npy, values)
    out = tmp_path / "child.json"
    code = main([
        "train", "--mesh", "icosphere:0", "--target", str(npy),
        "--channels", "0,2", "--output", str(out),
        "--model-channels", "4", "--hidden", "8", "--epochs", "3",
        "--pool-size", "4", "--batch-size", "2", "--step-range", "2,3",
        "--init-from", str(parent_path), "--log-every", "0",
    ])
    assert code == 0
    child = load_weights(str(out))
    assert child.parent_id == parent.lineage_id


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_train_divergence_exits_nonzero(tmp_path, capsys):
    out = tmp_path / "model.json"
    code = main([
        "train", "--mesh", "icosphere:0", "--target", "stripes:2",
        "--output", str(out), "--model-channels", "4", "--hidden", "8",
        "--epochs", "60", "--pool-size", "4", "--batch-size", "2",
        "--step-range", "2,3", "--lr", "1e9", "--log-every", "0",
    ])
    assert code == 1
    assert "training diverged" in capsys.readouterr().err
    assert not out.exists()


def test_bench_reports_rates(capsys):
    code = main(["bench", "--mesh", "icosphere:1", "--duration", "0.2", "--channels", "4"])
    assert code == 0
    out = capsys.readouterr().out
    assert "bench: mesh=icosphere:1 vertices=42" in out
    assert "steps_per_sec=" in out


def test_bench_rejects_zero_duration(capsys):
    code = main(["bench", "--mesh", "icosphere:0", "--duration", "0"])
    assert code == 1
    assert "error:" in capsys.readouterr().err


def test_run_bench_stats_shape(sphere1, tiny_config):
    from meshca import RandomInit, init_weights

    mesh, graph = sphere1
    sim = Simulation(mesh, graph, init_weights(tiny_config, RandomInit(1)))
    stats = run_bench(mesh, sim, 0.1)
    assert stats["steps"] > 0
    assert stats["mean_steps_per_sec"] > 0.0
    assert stats["p5_steps_per_sec"] > 0.0
    assert stats["mean_ms_per_step"] > 0.0
    with pytest.raises(ValueError):
        run_bench(mesh, sim, 0.0)


def test_inspect_prints_metadata(capsys, tmp_path):
    config = ModelConfig(channels=16, hidden=128)
    weights = random_weights(config, seed=0)
    path = tmp_path / "model.json"
    save_weights(weights, str(path))
    code = main(["inspect", str(path)])
    assert code == 0
    info = json.loads(capsys.readouterr().out)
    assert info["param_count"] == 12432
    assert info["channels"] == 16
    assert info["lineage_id"] == weights.lineage_id
