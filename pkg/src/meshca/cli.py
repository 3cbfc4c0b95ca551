"""Command line interface: synthesize textures, train models, benchmark the
engine, serve the streaming protocol and inspect weight files."""

from __future__ import annotations

import argparse
import asyncio
import json
import sys
import time

import numpy as np

from . import mesh as mesh_mod
from .engine import ModelConfig, Simulation, make_mask_scheme, param_count
from .model_io import (
    load_weights,
    read_state_dump,
    save_weights,
    write_state_dump,
)
from .ply import export_states_ply
from .trainer import (
    FromParent,
    RandomInit,
    TrainConfig,
    TargetField,
    TrainingDiverged,
    init_weights,
    make_stripes_target,
    save_history_csv,
    train,
)


def resolve_mesh(spec: str) -> mesh_mod.Mesh:
    """A mesh argument is either icosphere:<level> or an OBJ path."""
    if spec.startswith("icosphere:"):
        level_text = spec.split(":", 1)[1]
        try:
            level = int(level_text)
        except ValueError:
            raise mesh_mod.MeshError(f"bad icosphere level {level_text!r}")
        return mesh_mod.generate_icosphere(level)
    return mesh_mod.load_obj(spec)


def _add_common(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--seed", type=int, default=0, help="rng seed")
    parser.add_argument(
        "--mask-scheme", choices=("bernoulli", "shuffle"), default="bernoulli",
        help="which half of the cells updates each step",
    )
    parser.add_argument("--sh-degree", type=int, default=1, choices=(0, 1, 2))
    parser.add_argument("--orientation", type=float, default=0.0,
                        help="texture orientation angle in radians")


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="meshca",
        description="Neural cellular automata texture synthesis on meshes",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p_synth = sub.add_parser("synth", help="run a trained model and export the result")
    p_synth.add_argument("--mesh", required=True, help="icosphere:<level> or OBJ path")
    p_synth.add_argument("--weights", required=True, help="weight file")
    p_synth.add_argument("--steps", type=int, default=200)
    p_synth.add_argument("--output", required=True, help="output PLY path")
    p_synth.add_argument("--state-dump", default=None, help="also write a raw state dump")
    _add_common(p_synth)

    p_train = sub.add_parser("train", help="train a model against a target field")
    p_train.add_argument("--mesh", required=True)
    p_train.add_argument("--target", required=True,
                         help="stripes[:bands] or a .npy file of per-vertex values")
    p_train.add_argument("--channels", default="0,1,2",
                         help="state channels the target supervises")
    p_train.add_argument("--output", required=True, help="output weight file")
    p_train.add_argument("--name", default="model")
    p_train.add_argument("--epochs", type=int, default=None)
    p_train.add_argument("--lr", type=float, default=None)
    p_train.add_argument("--pool-size", type=int, default=None)
    p_train.add_argument("--batch-size", type=int, default=None)
    p_train.add_argument("--step-range", default=None, help="lo,hi")
    p_train.add_argument("--seed-inject-every", type=int, default=None)
    p_train.add_argument("--overflow-weight", type=float, default=None)
    p_train.add_argument("--loss", choices=("mse", "set_ot"), default=None)
    p_train.add_argument("--model-channels", type=int, default=16)
    p_train.add_argument("--hidden", type=int, default=128)
    p_train.add_argument("--layout", choices=("pbr", "colorgeo"), default="pbr")
    p_train.add_argument("--init-from", default=None,
                         help="weight file to continue from (lineage child)")
    p_train.add_argument("--history", default=None, help="loss history CSV path")
    p_train.add_argument("--checkpoint-dir", default=None)
    p_train.add_argument("--log-every", type=int, default=100)
    _add_common(p_train)

    p_bench = sub.add_parser("bench", help="measure raw steps per second")
    p_bench.add_argument("--mesh", default="icosphere:5")
    p_bench.add_argument("--weights", default=None,
                         help="weight file; default is a fresh random init")
    p_bench.add_argument("--duration", type=float, default=5.0, help="seconds")
    p_bench.add_argument("--channels", type=int, default=16)
    _add_common(p_bench)

    p_serve = sub.add_parser("serve", help="stream simulations over websockets")
    p_serve.add_argument("--host", default="127.0.0.1")
    p_serve.add_argument("--port", type=int, default=8765)
    p_serve.add_argument("--registry", required=True, help="registry JSON of models")
    p_serve.add_argument("--mesh-dir", default=None, help="directory of OBJ meshes")

    p_inspect = sub.add_parser("inspect", help="print weight file metadata")
    p_inspect.add_argument("weights")

    return parser


def cli_synth(args) -> int:
    mesh = resolve_mesh(args.mesh)
    graph = mesh_mod.build_adjacency(mesh)
    weights = load_weights(args.weights)
    if weights.config.sh_degree != args.sh_degree and args.sh_degree != 1:
        print(
            f"note: weight file fixes sh degree {weights.config.sh_degree}, "
            f"ignoring --sh-degree {args.sh_degree}",
            file=sys.stderr,
        )
    sim = Simulation(
        mesh,
        graph,
        weights,
        mask_scheme=make_mask_scheme(args.mask_scheme, mesh.n_vertices, args.seed),
        orientation=args.orientation,
        seed=args.seed,
        mask_kind=args.mask_scheme,
    )
    start = time.perf_counter()
    sim.run(args.steps)
    elapsed = time.perf_counter() - start
    export_states_ply(args.output, mesh, sim.states, weights.config)
    if args.state_dump:
        write_state_dump(sim.states, args.state_dump)
    rate = args.steps / elapsed if elapsed > 0 and args.steps else 0.0
    print(
        f"synth: mesh={args.mesh} vertices={mesh.n_vertices} steps={args.steps} "
        f"steps_per_sec={rate:.1f} output={args.output}"
    )
    return 0


def _parse_target(args, mesh: mesh_mod.Mesh) -> TargetField:
    channel_map = tuple(int(c) for c in args.channels.split(","))
    if args.target.startswith("stripes"):
        bands = 6
        if ":" in args.target:
            bands = int(args.target.split(":", 1)[1])
        return make_stripes_target(mesh, bands=bands, channel_map=channel_map)
    values = np.load(args.target)
    return TargetField(values=values, channel_map=channel_map)


def cli_train(args) -> int:
    mesh = resolve_mesh(args.mesh)
    graph = mesh_mod.build_adjacency(mesh)
    target = _parse_target(args, mesh)
    model_cfg = ModelConfig(
        channels=args.model_channels,
        hidden=args.hidden,
        sh_degree=args.sh_degree,
        layout=args.layout,
    )
    config = TrainConfig(model=model_cfg, rng_seed=args.seed)
    overrides = {
        "epochs": args.epochs,
        "lr": args.lr,
        "pool_size": args.pool_size,
        "batch_size": args.batch_size,
        "seed_inject_every": args.seed_inject_every,
        "overflow_weight": args.overflow_weight,
        "loss": args.loss,
    }
    for key, value in overrides.items():
        if value is not None:
            setattr(config, key, value)
    if args.step_range is not None:
        lo, hi = (int(v) for v in args.step_range.split(","))
        config.step_range = (lo, hi)
    if args.init_from:
        config.init = FromParent(load_weights(args.init_from))
    else:
        config.init = RandomInit(args.seed)
    echo = {
        "mesh": args.mesh,
        "n_vertices": mesh.n_vertices,
        "epochs": config.epochs,
        "lr": config.lr,
        "lr_decay_epochs": list(config.lr_decay_epochs),
        "lr_decay": config.lr_decay,
        "pool_size": config.pool_size,
        "seed_inject_every": config.seed_inject_every,
        "step_range": list(config.step_range),
        "batch_size": config.batch_size,
        "overflow_weight": config.overflow_weight,
        "loss": config.loss,
        "rng_seed": config.rng_seed,
        "channels": model_cfg.channels,
        "hidden": model_cfg.hidden,
        "sh_degree": model_cfg.sh_degree,
        "param_count": param_count(model_cfg),
    }
    print("train config: " + json.dumps(echo))
    try:
        result = train(
            mesh,
            graph,
            target,
            config,
            checkpoint_dir=args.checkpoint_dir,
            log_every=args.log_every,
        )
    except TrainingDiverged as exc:
        print(f"training diverged: {exc}", file=sys.stderr)
        if args.history:
            save_history_csv(exc.history, args.history)
        return 1
    result.weights.name = args.name
    save_weights(result.weights, args.output)
    if args.history:
        save_history_csv(result.history, args.history)
    final_loss = result.history[-1]["loss"] if result.history else float("nan")
    print(f"train: epochs={config.epochs} final_loss={final_loss:.6f} output={args.output}")
    return 0


def run_bench(mesh: mesh_mod.Mesh, sim: Simulation, duration: float) -> dict:
    if duration <= 0:
        raise ValueError(f"bench duration must be > 0 seconds, got {duration}")
    # warmup fills caches so the measured loop sees steady state
    sim.run(3)
    times = []
    start = time.perf_counter()
    deadline = start + duration
    while True:
        t0 = time.perf_counter()
        if t0 >= deadline:
            break
        sim.step_once()
        times.append(time.perf_counter() - t0)
    total = sum(times)
    steps = len(times)
    rates = np.array([1.0 / t for t in times if t > 0.0])
    return {
        "steps": steps,
        "mean_steps_per_sec": steps / total if total > 0 else 0.0,
        "p5_steps_per_sec": float(np.percentile(rates, 5.0)) if len(rates) else 0.0,
        "mean_ms_per_step": 1000.0 * total / steps if steps else 0.0,
    }


def cli_bench(args) -> int:
    mesh = resolve_mesh(args.mesh)
    graph = mesh_mod.build_adjacency(mesh)
    if args.weights:
        weights = load_weights(args.weights)
    else:
        config = ModelConfig(channels=args.channels, sh_degree=args.sh_degree)
        weights = init_weights(config, RandomInit(args.seed))
    sim = Simulation(
        mesh,
        graph,
        weights,
        mask_scheme=make_mask_scheme(args.mask_scheme, mesh.n_vertices, args.seed),
        orientation=args.orientation,
        seed=args.seed,
    )
    stats = run_bench(mesh, sim, args.duration)
    print(
        f"bench: mesh={args.mesh} vertices={mesh.n_vertices} "
        f"channels={weights.config.channels} steps={stats['steps']} "
        f"steps_per_sec={stats['mean_steps_per_sec']:.1f} "
        f"p5_steps_per_sec={stats['p5_steps_per_sec']:.1f} "
        f"ms_per_step={stats['mean_ms_per_step']:.2f}"
    )
    return 0


def cli_serve(args) -> int:
    from .service import serve_forever

    try:
        asyncio.run(serve_forever(args.host, args.port, args.registry, args.mesh_dir))
    except KeyboardInterrupt:
        print("shutting down")
    return 0


def cli_inspect(args) -> int:
    weights = load_weights(args.weights)
    cfg = weights.config
    info = {
        "name": weights.name,
        "lineage_id": weights.lineage_id,
        "parent_id": weights.parent_id,
        "channels": cfg.channels,
        "hidden": cfg.hidden,
        "condition_dim": cfg.condition_dim,
        "sh_degree": cfg.sh_degree,
        "layout": cfg.layout,
        "param_count": param_count(cfg),
    }
    print(json.dumps(info, indent=2))
    return 0


def main(argv=None) -> int:
    args = _build_parser().parse_args(argv)
    handlers = {
        "synth": cli_synth,
        "train": cli_train,
        "bench": cli_bench,
        "serve": cli_serve,
        "inspect": cli_inspect,
    }
    try:
        return handlers[args.command](args)
    except (mesh_mod.MeshError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
