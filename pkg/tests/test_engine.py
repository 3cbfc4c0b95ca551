"""Automaton update rule: masking, grafting, determinism, extraction, brush."""

from __future__ import annotations

import subprocess
import sys

import numpy as np
import pytest

from meshca import (
    CellStateBuffer,
    ConditionField,
    GraftField,
    ModelConfig,
    Simulation,
    adapt,
    apply_brush,
    check_compatibility,
    extract_color_geo,
    extract_pbr,
    make_mask_scheme,
    param_count,
    perceive,
    run,
    step,
)
from meshca.engine import BernoulliMask, ModelWeights, ShuffleMapMask, fresh_lineage_id
from meshca.trainer import FromParent, RandomInit, init_weights

from conftest import FixedMask, FullMask, random_weights


def test_param_count_reference_configs():
    assert param_count(ModelConfig(channels=16, hidden=128, condition_dim=0)) == 12432
    assert param_count(ModelConfig(channels=32, hidden=128, condition_dim=3)) == 25120


def test_param_count_formula(tiny_config):
    cfg = tiny_config
    d_in = cfg.basis_count * cfg.channels + cfg.channels + cfg.condition_dim
    expected = d_in * cfg.hidden + cfg.hidden + cfg.hidden * cfg.channels + cfg.channels
    assert param_count(cfg) == expected


def test_model_config_validation():
    with pytest.raises(ValueError):
        ModelConfig(channels=0)
    with pytest.raises(ValueError):
        ModelConfig(hidden=0)
    with pytest.raises(ValueError):
        ModelConfig(condition_dim=-1)
    with pytest.raises(ValueError):
        ModelConfig(layout="voxels")
    with pytest.raises(ValueError):
        ModelConfig(sh_degree=5)


def test_model_weights_shape_validation(tiny_config):
    good = init_weights(tiny_config, RandomInit(0))
    with pytest.raises(ValueError):
        ModelWeights(
            config=tiny_config,
            w1=good.w1[:, :-1],
            b1=good.b1,
            w2=good.w2,
            b2=good.b2,
            lineage_id="x",
        )
    bad_b2 = good.b2.copy()
    bad_b2[0] = np.nan
    with pytest.raises(ValueError):
        ModelWeights(
            config=tiny_config,
            w1=good.w1,
            b1=good.b1,
            w2=good.w2,
            b2=bad_b2,
            lineage_id="x",
        )


def test_seed_state_is_zero(tiny_config):
    states = CellStateBuffer.seed(10, tiny_config)
    assert states.values.shape == (10, 4)
    assert (states.values == 0.0).all()
    assert states.step_counter == 0


def test_identity_init_keeps_seed_at_zero(sphere1, tiny_config):
    """RandomInit zeroes the output layer, so the rule is the identity and a
    zero seed stays zero for any number of steps."""
    mesh, graph = sphere1
    weights = init_weights(tiny_config, RandomInit(3))
    out = run(None, 20, mesh, graph, weights, BernoulliMask(mesh.n_vertices, 0))
    assert (out.values == 0.0).all()
    assert out.step_counter == 20


def test_adapt_matches_scalar_reference(sphere1, tiny_config):
    """Oracle: per-cell Python loop over the MLP."""
    mesh, graph = sphere1
    n = mesh.n_vertices
    rng = np.random.default_rng(2)
    weights = random_weights(tiny_config, seed=4).astype(np.float64)
    states = CellStateBuffer(values=rng.normal(size=(n, 4)))
    z = perceive(states, mesh, graph, tiny_config.basis_config)
    mask = rng.random(n) < 0.5
    out = adapt(states, z, None, weights, mask)
    for i in range(n):
        if not mask[i]:
            assert (out.values[i] == states.values[i]).all()
            continue
        x = np.concatenate([states.values[i], z.values[i]])
        hidden = np.maximum(x @ weights.w1.T + weights.b1, 0.0)
        expected = states.values[i] + hidden @ weights.w2.T + weights.b2
        np.testing.assert_allclose(out.values[i], expected, atol=1e-12)


def test_adapt_mask_honesty(sphere1, tiny_config):
    mesh, graph = sphere1
    n = mesh.n_vertices
    rng = np.random.default_rng(9)
    weights = random_weights(tiny_config, seed=1)
    states = CellStateBuffer(values=rng.normal(size=(n, 4)).astype(np.float32))
    mask = rng.random(n) < 0.5
    scheme = FixedMask([mask])
    out = step(states, mesh, graph, weights, scheme)
    assert (out.values[~mask] == states.values[~mask]).all()
    assert (out.values[mask] != states.values[mask]).any()


def test_step_locality_one_ring(sphere2, tiny_config):
    """Perturbing one vertex changes, after one full-mask step, only that
    vertex and its direct neighbors."""
    mesh, graph = sphere2
    n = mesh.n_vertices
    weights = random_weights(tiny_config, seed=8)
    rng = np.random.default_rng(1)
    base = CellStateBuffer(values=rng.normal(size=(n, 4)).astype(np.float32))
    poked = base.copy()
    v = 37
    poked.values[v] += 0.5
    out_a = step(base, mesh, graph, weights, FullMask(n))
    out_b = step(poked, mesh, graph, weights, FullMask(n))
    changed = np.flatnonzero(np.any(out_a.values != out_b.values, axis=1))
    allowed = set(graph.neighbors_of(v).tolist()) | {v}
    assert set(changed.tolist()) <= allowed
    assert v in changed


def test_run_is_deterministic(sphere1, tiny_config):
    mesh, graph = sphere1
    weights = random_weights(tiny_config, seed=5)
    a = run(None, 30, mesh, graph, weights, BernoulliMask(mesh.n_vertices, 7))
    b = run(None, 30, mesh, graph, weights, BernoulliMask(mesh.n_vertices, 7))
    assert (a.values == b.values).all()


def test_run_split_equals_single_run(sphere1, tiny_config):
    """The mask scheme owns the rng, so 10+20 steps replay 30 exactly."""
    mesh, graph = sphere1
    weights = random_weights(tiny_config, seed=5)
    scheme = BernoulliMask(mesh.n_vertices, 11)
    mid = run(None, 10, mesh, graph, weights, scheme)
    end = run(mid, 20, mesh, graph, weights, scheme)
    single = run(None, 30, mesh, graph, weights, BernoulliMask(mesh.n_vertices, 11))
    assert (end.values == single.values).all()
    assert end.step_counter == 30


def test_run_rejects_negative_steps(sphere1, tiny_config):
    mesh, graph = sphere1
    weights = init_weights(tiny_config, RandomInit(0))
    with pytest.raises(ValueError):
        run(None, -1, mesh, graph, weights, BernoulliMask(mesh.n_vertices, 0))


def test_determinism_across_thread_counts(tmp_path, sphere1, tiny_config):
    """Fixed seed must give bit-identical trajectories regardless of the
    numerical backend's thread count."""
    script = tmp_path / "probe.py"
    script.write_text(
        "import numpy as np\n"
        "from meshca import generate_icosphere, build_adjacency, run\n"
        "from meshca.engine import BernoulliMask, ModelConfig, ModelWeights\n"
        "cfg = ModelConfig(channels=4, hidden=8)\n"
        "rng = np.random.default_rng(5)\n"
        "w = ModelWeights(config=cfg, w1=rng.normal(0, .3, (8, cfg.input_dim)).astype(np.float32),\n"
        "                 b1=rng.normal(0, .03, 8).astype(np.float32),\n"
        "                 w2=rng.normal(0, .3, (4, 8)).astype(np.float32),\n"
        "                 b2=rng.normal(0, .03, 4).astype(np.float32), lineage_id='t')\n"
        "mesh = generate_icosphere(1)\n"
        "graph = build_adjacency(mesh)\n"
        "out = run(None, 40, mesh, graph, w, BernoulliMask(mesh.n_vertices, 3))\n"
        "print(out.values.tobytes().hex())\n",
        encoding="utf-8",
    )
    digests = []
    for threads in ("1", "4"):
        env = {"OMP_NUM_THREADS": threads, "OPENBLAS_NUM_THREADS": threads,
               "MKL_NUM_THREADS": threads, "PATH": "/usr/bin:/bin:/usr/local/bin"}
        proc = subprocess.run(
            [sys.executable, str(script)], capture_output=True, text=True, env=env
        )
        assert proc.returncode == 0, proc.stderr
        digests.append(proc.stdout.strip())
    assert digests[0] == digests[1]


def test_shuffle_map_updates_exact_half():
    for n in (10, 11, 101):
        scheme = ShuffleMapMask(n, seed=2)
        for _ in range(25):
            assert int(scheme.draw().sum()) == n // 2


def test_bernoulli_mask_near_half():
    scheme = BernoulliMask(10_000, seed=0)
    frac = scheme.draw().mean()
    sigma = 0.5 / np.sqrt(10_000)
    assert abs(frac - 0.5) < 5 * sigma


def test_make_mask_scheme_rejects_unknown():
    with pytest.raises(ValueError):
        make_mask_scheme("checkerboard", 10)


def test_mask_schemes_replay_from_seed():
    for kind in ("bernoulli", "shuffle"):
        a = make_mask_scheme(kind, 50, seed=9)
        b = make_mask_scheme(kind, 50, seed=9)
        for _ in range(5):
            assert (a.draw() == b.draw()).all()


def graft_pair(config, n_vertices):
    parent = random_weights(config, seed=21)
    child = init_weights(config, FromParent(parent))
    child.w2 = child.w2 + np.float32(0.05)
    return GraftField.create(parent, child, n_vertices), parent, child


def test_graft_endpoints_bit_exact(sphere1, tiny_config):
    mesh, graph = sphere1
    n = mesh.n_vertices
    graft, parent, child = graft_pair(tiny_config, n)

    graft.alpha[:] = 0.0
    a = run(None, 60, mesh, graph, parent, BernoulliMask(n, 3), graft=graft)
    plain_parent = run(None, 60, mesh, graph, parent, BernoulliMask(n, 3))
    assert (a.values == plain_parent.values).all()

    graft.alpha[:] = 1.0
    b = run(None, 60, mesh, graph, parent, BernoulliMask(n, 3), graft=graft)
    plain_child = run(None, 60, mesh, graph, child, BernoulliMask(n, 3))
    assert (b.values == plain_child.values).all()


def test_graft_midpoint_differs_from_both(sphere1, tiny_config):
    mesh, graph = sphere1
    n = mesh.n_vertices
    graft, parent, child = graft_pair(tiny_config, n)
    graft.alpha[:] = 0.5
    mid = run(None, 40, mesh, graph, parent, BernoulliMask(n, 3), graft=graft)
    a = run(None, 40, mesh, graph, parent, BernoulliMask(n, 3))
    b = run(None, 40, mesh, graph, child, BernoulliMask(n, 3))
    assert (mid.values != a.values).any()
    assert (mid.values != b.values).any()


def test_graft_requires_matching_config(tiny_config):
    a = random_weights(tiny_config, seed=1)
    other = ModelConfig(channels=6, hidden=8)
    b = random_weights(other, seed=2)
    with pytest.raises(ValueError):
        GraftField.create(a, b, 10)


def test_graft_unrelated_lineage_warns(tiny_config):
    a = random_weights(tiny_config, seed=1)
    b = random_weights(tiny_config, seed=2)
    with pytest.warns(UserWarning):
        GraftField.create(a, b, 10)


def test_check_compatibility_parent_child(tiny_config):
    parent = random_weights(tiny_config, seed=1)
    child = init_weights(tiny_config, FromParent(parent))
    result = check_compatibility(parent, child)
    assert result.compatible
    assert result.common_ancestor == parent.lineage_id


def test_check_compatibility_siblings_via_registry(tiny_config):
    root = random_weights(tiny_config, seed=1)
    a = init_weights(tiny_config, FromParent(root))
    b = init_weights(tiny_config, FromParent(root))
    # siblings name the same parent id, so no registry is needed
    assert check_compatibility(a, b).compatible
    ga = init_weights(tiny_config, FromParent(a))
    gb = init_weights(tiny_config, FromParent(b))
    # grandchildren only connect through models the walk has to look up
    assert not check_compatibility(ga, gb).compatible
    result = check_compatibility(ga, gb, [root, a, b, ga, gb])
    assert result.compatible
    assert result.common_ancestor == root.lineage_id


def test_check_compatibility_unrelated(tiny_config):
    a = random_weights(tiny_config, seed=1)
    b = random_weights(tiny_config, seed=2)
    result = check_compatibility(a, b)
    assert not result.compatible
    assert result.common_ancestor is None


def test_check_compatibility_needs_matching_config():
    parent = random_weights(ModelConfig(channels=4, hidden=8), seed=1)
    wider = ModelConfig(channels=4, hidden=16)
    mismatched = ModelWeights(
        config=wider,
        w1=np.zeros((16, wider.input_dim), dtype=np.float32),
        b1=np.zeros(16, dtype=np.float32),
        w2=np.zeros((4, 16), dtype=np.float32),
        b2=np.zeros(4, dtype=np.float32),
        lineage_id=fresh_lineage_id(),
        parent_id=parent.lineage_id,
    )
    result = check_compatibility(mismatched, parent)
    assert result.common_ancestor == parent.lineage_id
    assert not result.compatible


def test_condition_field_tangent_validation(sphere1):
    mesh, _ = sphere1
    tangents = np.cross(mesh.normals, np.array([0.0, 0.0, 1.0]))
    ConditionField.tangent(tangents, mesh)
    with pytest.raises(ValueError):
        ConditionField.tangent(mesh.normals.copy(), mesh)


def test_condition_dim_enforcement(sphere1):
    mesh, graph = sphere1
    n = mesh.n_vertices
    cfg = ModelConfig(channels=4, hidden=8, condition_dim=3)
    weights = random_weights(cfg, seed=3)
    states = CellStateBuffer.seed(n, cfg)
    with pytest.raises(ValueError):
        step(states, mesh, graph, weights, FullMask(n))
    cond = ConditionField(values=np.zeros((n, 3)))
    out = step(states, mesh, graph, weights, FullMask(n), condition=cond)
    assert out.step_counter == 1
    plain = random_weights(ModelConfig(channels=4, hidden=8), seed=3)
    with pytest.raises(ValueError):
        step(CellStateBuffer.seed(n, plain.config), mesh, graph, plain, FullMask(n), condition=cond)


def test_extract_pbr_maps(sphere1):
    mesh, _ = sphere1
    n = mesh.n_vertices
    cfg = ModelConfig(channels=9, hidden=8)
    values = np.zeros((n, 9), dtype=np.float32)
    values[:, 0] = 1.0   # red saturates high
    values[:, 1] = -3.0  # green clamps low
    values[:, 3:6] = [0.0, 2.0, 0.0]
    values[0, 3:6] = 0.0  # degenerate normal falls back to +z
    values[:, 6] = 0.5
    maps = extract_pbr(CellStateBuffer(values=values), cfg)
    np.testing.assert_allclose(maps["albedo"][:, 0], 1.0)
    np.testing.assert_allclose(maps["albedo"][:, 1], 0.0)
    np.testing.assert_allclose(maps["albedo"][:, 2], 0.5)
    np.testing.assert_allclose(maps["normal"][1:], [[0.0, 1.0, 0.0]] * (n - 1))
    np.testing.assert_allclose(maps["normal"][0], [0.0, 0.0, 1.0])
    np.testing.assert_allclose(maps["height"], 0.75)
    assert maps["albedo"].shape == (n, 3)


def test_extract_pbr_needs_enough_channels():
    cfg = ModelConfig(channels=8, hidden=8)
    with pytest.raises(ValueError):
        extract_pbr(CellStateBuffer(values=np.zeros((5, 8), dtype=np.float32)), cfg)


def test_extract_color_geo_displacement(sphere1):
    mesh, _ = sphere1
    n = mesh.n_vertices
    cfg = ModelConfig(channels=4, hidden=8, layout="colorgeo")
    values = np.zeros((n, 4), dtype=np.float32)
    values[:, 3] = 2.0  # clamps to 1.0 before scaling
    maps = extract_color_geo(CellStateBuffer(values=values), mesh, cfg)
    max_disp = 0.05 * mesh.bbox_diagonal()
    np.testing.assert_allclose(maps["displacement"], max_disp, atol=1e-12)
    np.testing.assert_allclose(
        maps["positions"], mesh.positions + max_disp * mesh.normals, atol=1e-12
    )
    maps2 = extract_color_geo(
        CellStateBuffer(values=values), mesh, cfg, max_displacement=0.5
    )
    np.testing.assert_allclose(maps2["displacement"], 0.5, atol=1e-12)


def identity_camera():
    return np.eye(4)


def test_brush_regenerate_zeroes_selection(sphere2, tiny_config):
    mesh, graph = sphere2
    n = mesh.n_vertices
    weights = random_weights(tiny_config, seed=6)
    states = run(None, 25, mesh, graph, weights, BernoulliMask(n, 2))
    before = states.values.copy()
    count = apply_brush(
        states, mesh, identity_camera(), click=(0.0, 0.0), radius=0.4, mode="regenerate"
    )
    assert count > 0
    # identity camera looks along +z, so the brush hits z-negative normals
    selected = np.flatnonzero(np.all(states.values == 0.0, axis=1) & np.any(before != 0.0, axis=1))
    assert len(selected) == count
    assert (mesh.normals[selected][:, 2] < 0.0).all()
    untouched = np.setdiff1d(np.arange(n), selected)
    assert (states.values[untouched] == before[untouched]).all()


def test_brush_graft_accumulates_and_clamps(sphere2, tiny_config):
    mesh, _ = sphere2
    graft, _, _ = graft_pair(tiny_config, mesh.n_vertices)
    for _ in range(15):
        count = apply_brush(
            graft, mesh, identity_camera(), click=(0.0, 0.0), radius=0.4,
            mode="graft", delta=0.1,
        )
    assert count > 0
    assert graft.alpha.max() == 1.0
    assert graft.alpha.min() == 0.0


def test_brush_miss_returns_zero(sphere1, tiny_config):
    mesh, _ = sphere1
    states = CellStateBuffer.seed(mesh.n_vertices, tiny_config)
    count = apply_brush(
        states, mesh, identity_camera(), click=(9.0, 9.0), radius=0.05, mode="regenerate"
    )
    assert count == 0


def test_brush_validates_inputs(sphere1, tiny_config):
    mesh, _ = sphere1
    states = CellStateBuffer.seed(mesh.n_vertices, tiny_config)
    with pytest.raises(ValueError):
        apply_brush(states, mesh, identity_camera(), (0, 0), 0.5, mode="erase")
    with pytest.raises(ValueError):
        apply_brush(states, mesh, identity_camera(), (0, 0), -1.0, mode="regenerate")
    with pytest.raises(np.linalg.LinAlgError):
        apply_brush(states, mesh, np.zeros((4, 4)), (0, 0), 0.5, mode="regenerate")


def test_simulation_set_model_reset_rules(sphere1, tiny_config):
    mesh, graph = sphere1
    weights = random_weights(tiny_config, seed=1)
    sim = Simulation(mesh, graph, weights)
    sim.run(10)
    assert sim.states.step_counter == 10

    same_channels = random_weights(tiny_config, seed=2)
    assert sim.set_model(same_channels) is False
    assert sim.states.step_counter == 10

    wider = random_weights(ModelConfig(channels=6, hidden=8), seed=3)
    assert sim.set_model(wider) is True
    assert sim.states.step_counter == 0
    assert (sim.states.values == 0.0).all()


def test_simulation_graft_clears_on_model_swap(sphere1, tiny_config):
    mesh, graph = sphere1
    parent = random_weights(tiny_config, seed=1)
    child = init_weights(tiny_config, FromParent(parent))
    sim = Simulation(mesh, graph, parent)
    sim.set_graft_model(child)
    assert sim.graft is not None
    sim.graft.alpha[:] = 0.7
    sim.reset()
    assert (sim.graft.alpha == 0.0).all()
    assert sim.set_model(random_weights(tiny_config, seed=9)) is True
    assert sim.graft is None
