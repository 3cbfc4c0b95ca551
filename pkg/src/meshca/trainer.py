"""Training: backprop through time over automaton rollouts with a state pool.

The rollout gradient is computed by hand in reverse mode. Batch elements are
stacked into one block-diagonal super-graph (disjoint copies of the mesh
adjacency), so a single forward/backward pass covers the whole batch while
staying numerically identical to per-element evaluation.
"""

from __future__ import annotations

import csv
import dataclasses
import os

import numpy as np

from .engine import ConditionField, CellStateBuffer, ModelConfig, ModelWeights, fresh_lineage_id
from .mesh import AdjacencyGraph, Mesh
from .perception import EdgeGeometry, _build_pad_index, _padded_segment_sum

LOSS_KINDS = ("mse", "set_ot")


@dataclasses.dataclass(frozen=True)
class RandomInit:
    """Uniform Xavier W1, zero b1, zero W2/b2 so the initial model is the
    identity rule and the seed state stays put until training moves it."""

    seed: int = 0


@dataclasses.dataclass(frozen=True)
class FromParent:
    parent: ModelWeights


@dataclasses.dataclass
class TargetField:
    """Per-vertex supervision (N, A) in state range [-1, 1]; channel_map names
    the state channels being supervised."""

    values: np.ndarray
    channel_map: tuple[int, ...]

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        self.channel_map = tuple(int(c) for c in self.channel_map)
        if self.values.ndim != 2:
            raise ValueError(f"target values must be (N, A), got {self.values.shape}")
        if self.values.shape[1] != len(self.channel_map):
            raise ValueError(
                f"target has {self.values.shape[1]} columns for "
                f"{len(self.channel_map)} mapped channels"
            )
        if not np.isfinite(self.values).all():
            raise ValueError("target contains non-finite values")
        if len(set(self.channel_map)) != len(self.channel_map):
            raise ValueError("channel_map must not repeat channels")


@dataclasses.dataclass
class TrainConfig:
    model: ModelConfig = dataclasses.field(default_factory=ModelConfig)
    epochs: int = 3000
    lr: float = 1e-3
    lr_decay_epochs: tuple[int, ...] = (1000, 2000)
    lr_decay: float = 0.3
    pool_size: int = 256
    seed_inject_every: int = 16
    step_range: tuple[int, int] = (15, 25)
    batch_size: int = 4
    overflow_weight: float = 10000.0
    loss: str = "mse"
    rng_seed: int = 0
    init: RandomInit | FromParent | None = None
    dtype: str = "float32"

    def __post_init__(self):
        if self.loss not in LOSS_KINDS:
            raise ValueError(f"loss must be one of {LOSS_KINDS}, got {self.loss!r}")
        lo, hi = self.step_range
        if not (1 <= lo <= hi):
            raise ValueError(f"step_range must satisfy 1 <= lo <= hi, got {self.step_range}")
        if self.batch_size < 1 or self.pool_size < self.batch_size:
            raise ValueError("need pool_size >= batch_size >= 1")

    @property
    def np_dtype(self):
        return np.dtype(self.dtype)


@dataclasses.dataclass
class WeightGrads:
    w1: np.ndarray
    b1: np.ndarray
    w2: np.ndarray
    b2: np.ndarray


@dataclasses.dataclass
class ForwardBackwardResult:
    loss: float
    grads: WeightGrads
    final_states: CellStateBuffer


@dataclasses.dataclass
class TrainResult:
    weights: ModelWeights
    history: list[dict]


class TrainingDiverged(RuntimeError):
    def __init__(self, message: str, history: list[dict]):
        super().__init__(message)
        self.history = history


def init_weights(config: ModelConfig, scheme: RandomInit | FromParent, name: str | None = None) -> ModelWeights:
    """Create trainable weights either fresh or as a lineage child of an
    existing model (bit-equal copy pointing back at its parent)."""
    if isinstance(scheme, FromParent):
        parent = scheme.parent
        if parent.config != config:
            raise ValueError("parent config does not match requested config")
        child = parent.copy()
        child.parent_id = parent.lineage_id
        child.lineage_id = fresh_lineage_id()
        if name is not None:
            child.name = name
        return child
    rng = np.random.default_rng(scheme.seed)
    h, d_in, c = config.hidden, config.input_dim, config.channels
    bound = np.sqrt(6.0 / (d_in + h))
    return ModelWeights(
        config=config,
        w1=rng.uniform(-bound, bound, size=(h, d_in)).astype(np.float32),
        b1=np.zeros(h, dtype=np.float32),
        w2=np.zeros((c, h), dtype=np.float32),
        b2=np.zeros(c, dtype=np.float32),
        lineage_id=fresh_lineage_id(),
        parent_id=None,
        name=name or "model",
    )


class _RolloutContext:
    """Edge arrays for `batch` disjoint copies of one mesh graph."""

    def __init__(self, mesh: Mesh, graph: AdjacencyGraph, model: ModelConfig, batch: int, dtype):
        geo = EdgeGeometry(mesh, graph)
        n = mesh.n_vertices
        e = geo.n_edges_directed
        self.n_vertices = n
        self.batch = batch
        self.dtype = np.dtype(dtype)
        self.model = model
        reps = np.arange(batch, dtype=np.int64)
        self.center_idx = (geo.center_idx[None, :] + reps[:, None] * n).ravel()
        self.nbr_idx = (geo.nbr_idx[None, :] + reps[:, None] * n).ravel()
        base_counts = graph.counts
        counts = np.tile(base_counts, batch)
        self.offsets = np.zeros(batch * n + 1, dtype=np.int64)
        np.cumsum(counts, out=self.offsets[1:])
        base_w = geo.weights(model.sh_degree, 0.0, self.dtype)
        self.w = np.tile(base_w, (batch, 1))
        self.n_edges = batch * e
        self.pad_idx = _build_pad_index(self.offsets, self.n_edges)
        rev = (geo.reverse_perm()[None, :] + reps[:, None] * e).ravel()
        # sentinel row maps to itself so padded gathers stay zero
        self.reverse_perm_ext = np.concatenate([rev, [self.n_edges]])

    def perceive(self, values: np.ndarray) -> np.ndarray:
        diff = values[self.nbr_idx] - values[self.center_idx]
        basis = self.w.shape[1]
        channels = values.shape[1]
        contrib = np.empty((self.n_edges + 1, basis * channels), dtype=self.dtype)
        np.multiply(
            self.w[:, :, None],
            diff[:, None, :],
            out=contrib[: self.n_edges].reshape(self.n_edges, basis, channels),
        )
        contrib[self.n_edges] = 0.0
        return _padded_segment_sum(contrib, self.pad_idx)

    def perceive_adjoint(self, g_z: np.ndarray) -> np.ndarray:
        """Gradient of the perception operator: for edge (i -> j), the message
        weight scatters +w to the sender j and -w to the receiver i."""
        channels = self.model.channels
        basis = self.w.shape[1]
        gz_center = g_z[self.center_idx]
        g_edge = np.empty((self.n_edges + 1, channels), dtype=self.dtype)
        np.multiply(self.w[:, 0, None], gz_center[:, :channels], out=g_edge[: self.n_edges])
        for b in range(1, basis):
            g_edge[: self.n_edges] += (
                self.w[:, b, None] * gz_center[:, b * channels : (b + 1) * channels]
            )
        g_edge[self.n_edges] = 0.0
        minus = _padded_segment_sum(g_edge, self.pad_idx)
        plus = _padded_segment_sum(g_edge[self.reverse_perm_ext], self.pad_idx)
        return plus - minus


def _mse_value_grad(block: np.ndarray, target: np.ndarray) -> tuple[float, np.ndarray]:
    diff = block - target
    count = diff.size
    return float((diff * diff).mean()), (2.0 / count) * diff


def _set_ot_value_grad(a: np.ndarray, b: np.ndarray, is_rgb: bool) -> tuple[float, np.ndarray]:
    """Value and dValue/dA of the relaxed matching plus moment loss between
    row sets A (generated) and B (target).

    Unlike the pure loss function, zero-norm generated rows are tolerated:
    they pay the maximal cosine distance with zero gradient, which keeps the
    all-zero seed state trainable.
    """
    eps = 1e-12
    m_a, m_b = len(a), len(b)
    c = a.shape[1]
    na = np.linalg.norm(a, axis=1)
    nb = np.linalg.norm(b, axis=1)
    dot = a @ b.T
    denom = np.maximum(np.outer(na, nb), eps)
    cost = 1.0 - dot / denom
    if is_rgb:
        sq = (a * a).sum(axis=1)[:, None] - 2.0 * dot + (b * b).sum(axis=1)[None, :]
        dist = np.sqrt(np.maximum(sq, 0.0))
        cost = cost + dist

    def cos_grad_u(u, v, nu, nv):
        if nu < eps or nv < eps:
            return np.zeros_like(u)
        return -(v / (nu * nv)) + (u @ v) * u / (nu ** 3 * nv)

    grad = np.zeros_like(a)
    j_star = np.argmin(cost, axis=1)
    w_ab = float(cost[np.arange(m_a), j_star].mean())
    i_star = np.argmin(cost, axis=0)
    w_ba = float(cost[i_star, np.arange(m_b)].mean())
    if w_ab >= w_ba:
        for i in range(m_a):
            j = j_star[i]
            g = cos_grad_u(a[i], b[j], na[i], nb[j])
            if is_rgb:
                d = dist[i, j]
                if d > eps:
                    g = g + (a[i] - b[j]) / d
            grad[i] += g / m_a
        w_val = w_ab
    else:
        for j in range(m_b):
            i = i_star[j]
            g = cos_grad_u(a[i], b[j], na[i], nb[j])
            if is_rgb:
                d = dist[i, j]
                if d > eps:
                    g = g + (a[i] - b[j]) / d
            grad[i] += g / m_b
        w_val = w_ba

    # moment terms: 1/C * |mean diff| + 1/C^2 * |cov diff|
    mu_a = a.mean(axis=0)
    mu_b = b.mean(axis=0)
    grad += np.sign(mu_a - mu_b) / (c * m_a)
    ca = a - mu_a
    cb = b - mu_b
    if m_a > 1:
        cov_a = ca.T @ ca / (m_a - 1)
    else:
        cov_a = np.zeros((c, c))
    if m_b > 1:
        cov_b = cb.T @ cb / (m_b - 1)
    else:
        cov_b = np.zeros((c, c))
    sign_cov = np.sign(cov_a - cov_b)
    if m_a > 1:
        grad += ca @ (sign_cov + sign_cov.T) / ((m_a - 1) * c * c)
    m_val = float(np.abs(mu_a - mu_b).sum() / c + np.abs(cov_a - cov_b).sum() / (c * c))
    return w_val + m_val, grad


def _rollout_forward_backward(
    ctx: _RolloutContext,
    weights: ModelWeights,
    init_values: np.ndarray,
    masks: np.ndarray,
    target: TargetField,
    config: TrainConfig,
    condition: ConditionField | None,
) -> tuple[np.ndarray, np.ndarray, WeightGrads]:
    """Run k steps forward, then reverse. Returns (per-element losses,
    final values, gradients of the batch-mean objective)."""
    dtype = ctx.dtype
    n, batch = ctx.n_vertices, ctx.batch
    rows_total = batch * n
    channels = ctx.model.channels
    w1 = weights.w1.astype(dtype, copy=False)
    b1 = weights.b1.astype(dtype, copy=False)
    w2 = weights.w2.astype(dtype, copy=False)
    b2 = weights.b2.astype(dtype, copy=False)
    cond_tiled = None
    if ctx.model.condition_dim:
        if condition is None:
            raise ValueError("model expects a condition field")
        cond_tiled = np.tile(condition.values.astype(dtype), (batch, 1))

    states = init_values.astype(dtype, copy=True)
    tape = []
    for t in range(masks.shape[0]):
        z = ctx.perceive(states)
        rows = np.flatnonzero(masks[t])
        if len(rows):
            parts = [states[rows], z[rows]]
            if cond_tiled is not None:
                parts.append(cond_tiled[rows])
            x = np.concatenate(parts, axis=1)
            a1 = x @ w1.T + b1
            hidden = np.maximum(a1, 0.0)
            update = hidden @ w2.T + b2
            tape.append((states, z, rows, a1))
            states = states.copy()
            states[rows] += update
        else:
            tape.append((states, z, rows, None))

    # objective = mean over batch elements of (data + overflow_weight * overflow)
    channel_map = list(target.channel_map)
    target_block = target.values.astype(dtype)
    grad_final = np.zeros_like(states)
    losses = np.zeros(batch)
    for e in range(batch):
        sl = slice(e * n, (e + 1) * n)
        block = states[sl]
        supervised = block[:, channel_map]
        if config.loss == "mse":
            data_val, data_grad = _mse_value_grad(
                supervised.astype(np.float64), target.values
            )
        else:
            data_val, data_grad = _set_ot_value_grad(
                supervised.astype(np.float64), target.values, is_rgb=len(channel_map) == 3
            )
        outside = block - np.clip(block, -1.0, 1.0)
        overflow_val = float(np.abs(outside.astype(np.float64)).mean())
        losses[e] = data_val + config.overflow_weight * overflow_val
        grad_block = np.zeros_like(block)
        grad_block[:, channel_map] = data_grad.astype(dtype)
        grad_block += (config.overflow_weight / outside.size) * np.sign(outside)
        grad_final[sl] = grad_block / batch

    g_w1 = np.zeros_like(w1)
    g_b1 = np.zeros_like(b1)
    g_w2 = np.zeros_like(w2)
    g_b2 = np.zeros_like(b2)
    g_states = grad_final
    for t in range(masks.shape[0] - 1, -1, -1):
        s_pre, z, rows, a1 = tape[t]
        if len(rows) == 0:
            continue
        g_y = g_states[rows]
        hidden = np.maximum(a1, 0.0)
        g_w2 += g_y.T @ hidden
        g_b2 += g_y.sum(axis=0)
        g_a1 = (g_y @ w2) * (a1 > 0.0)
        parts = [s_pre[rows], z[rows]]
        if cond_tiled is not None:
            parts.append(cond_tiled[rows])
        x = np.concatenate(parts, axis=1)
        g_w1 += g_a1.T @ x
        g_b1 += g_a1.sum(axis=0)
        g_x = g_a1 @ w1
        g_z = np.zeros((rows_total, z.shape[1]), dtype=dtype)
        g_z[rows] = g_x[:, channels:channels + z.shape[1]]
        g_states = g_states.copy()
        g_states[rows] += g_x[:, :channels]
        g_states += ctx.perceive_adjoint(g_z)

    grads = WeightGrads(w1=g_w1, b1=g_b1, w2=g_w2, b2=g_b2)
    return losses, states, grads


def forward_backward(
    weights: ModelWeights,
    mesh: Mesh,
    graph: AdjacencyGraph,
    initial_states: CellStateBuffer,
    k_steps: int,
    target: TargetField,
    config: TrainConfig,
    masks: np.ndarray | None = None,
    rng: np.random.Generator | None = None,
    condition: ConditionField | None = None,
) -> ForwardBackwardResult:
    """Loss, exact reverse-mode weight gradients and final state for one
    rollout. Masks are drawn once up front (or passed in) and recorded, so the
    backward pass differentiates exactly the computation that ran."""
    lo, hi = config.step_range
    if not (lo <= k_steps <= hi):
        raise ValueError(f"k_steps {k_steps} outside configured range [{lo}, {hi}]")
    n = mesh.n_vertices
    if masks is None:
        rng = rng or np.random.default_rng(config.rng_seed)
        masks = rng.random((k_steps, n)) < 0.5
    masks = np.asarray(masks, dtype=bool)
    if masks.shape != (k_steps, n):
        raise ValueError(f"masks must be ({k_steps}, {n}), got {masks.shape}")
    ctx = _RolloutContext(mesh, graph, weights.config, 1, config.np_dtype)
    losses, final, grads = _rollout_forward_backward(
        ctx, weights, initial_states.values, masks, target, config, condition
    )
    return ForwardBackwardResult(
        loss=float(losses[0]),
        grads=grads,
        final_states=CellStateBuffer(
            values=final, step_counter=initial_states.step_counter + k_steps
        ),
    )


def _unit_grads(grads: WeightGrads) -> dict[str, np.ndarray]:
    """Per-tensor L2 gradient normalization before the optimizer step, the
    standard stabilizer for automata training: the update keeps its direction
    but a fixed scale, so hinge spikes from the overflow term cannot distort
    the optimizer's moment estimates and late plateau signals still move at
    full step size."""
    return {
        key: g / (np.linalg.norm(g) + 1e-8)
        for key, g in
        (("w1", grads.w1), ("b1", grads.b1), ("w2", grads.w2), ("b2", grads.b2))
    }


class Adam:
    def __init__(self, params: dict[str, np.ndarray], beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8):
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}

    def step(self, params: dict[str, np.ndarray], grads: dict[str, np.ndarray], lr: float) -> None:
        self.t += 1
        correction1 = 1.0 - self.beta1 ** self.t
        correction2 = 1.0 - self.beta2 ** self.t
        for key, p in params.items():
            g = grads[key]
            m = self.m[key]
            v = self.v[key]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * (g * g)
            p -= lr * (m / correction1) / (np.sqrt(v / correction2) + self.eps)


def train(
    mesh: Mesh,
    graph: AdjacencyGraph,
    target: TargetField,
    config: TrainConfig,
    condition: ConditionField | None = None,
    checkpoint_dir: str | None = None,
    log_every: int = 0,
) -> TrainResult:
    """Pool-based training loop.

    Every epoch samples a batch of pool states, rolls each out a shared
    random number of steps, applies one Adam update from the batch-mean
    gradient and writes the final states back to their slots. Periodically
    the worst batch element's slot is re-seeded so the rule keeps practicing
    growth from scratch. All randomness flows from config.rng_seed.
    """
    model_cfg = config.model
    n = mesh.n_vertices
    bad_channels = [c for c in target.channel_map if c >= model_cfg.channels]
    if bad_channels:
        raise ValueError(f"target channels {bad_channels} outside model range")
    rng = np.random.default_rng(config.rng_seed)
    scheme = config.init if config.init is not None else RandomInit(config.rng_seed)
    weights = init_weights(model_cfg, scheme)
    dtype = config.np_dtype
    params = {
        "w1": weights.w1.astype(dtype),
        "b1": weights.b1.astype(dtype),
        "w2": weights.w2.astype(dtype),
        "b2": weights.b2.astype(dtype),
    }
    adam = Adam(params)
    ctx = _RolloutContext(mesh, graph, model_cfg, config.batch_size, dtype)
    pool = np.zeros((config.pool_size, n, model_cfg.channels), dtype=dtype)
    history: list[dict] = []
    lr = config.lr
    lo, hi = config.step_range
    consecutive_bad = 0

    current = dataclasses.replace(
        weights, w1=params["w1"], b1=params["b1"], w2=params["w2"], b2=params["b2"]
    )
    for epoch in range(config.epochs):
        if epoch in config.lr_decay_epochs:
            lr *= config.lr_decay
        batch_idx = rng.choice(config.pool_size, size=config.batch_size, replace=False)
        k_steps = int(rng.integers(lo, hi + 1))
        masks = rng.random((k_steps, config.batch_size * n)) < 0.5
        init_values = pool[batch_idx].reshape(config.batch_size * n, -1)
        losses, final, grads = _rollout_forward_backward(
            ctx, current, init_values, masks, target, config, condition
        )
        adam.step(params, _unit_grads(grads), lr)
        pool[batch_idx] = final.reshape(config.batch_size, n, -1)
        if config.seed_inject_every > 0 and epoch % config.seed_inject_every == 0:
            worst = batch_idx[int(np.argmax(losses))]
            pool[worst] = 0.0
        mean_loss = float(losses.mean())
        history.append({"epoch": epoch, "loss": mean_loss, "lr": lr, "k_steps": k_steps})
        if log_every and (epoch % log_every == 0 or epoch == config.epochs - 1):
            print(f"epoch {epoch:5d}  loss {mean_loss:.6f}  lr {lr:.2e}  k {k_steps}")
        if not np.isfinite(mean_loss) or mean_loss > 1e6:
            consecutive_bad += 1
            if consecutive_bad >= 10:
                raise TrainingDiverged(
                    f"loss stayed non-finite or above 1e6 for {consecutive_bad} "
                    f"consecutive epochs (last {mean_loss})",
                    history,
                )
        else:
            consecutive_bad = 0
        if checkpoint_dir and (epoch + 1) % 500 == 0:
            from .model_io import save_weights

            os.makedirs(checkpoint_dir, exist_ok=True)
            save_weights(current, os.path.join(checkpoint_dir, f"checkpoint_{epoch + 1:06d}.json"))

    final_weights = dataclasses.replace(
        weights,
        w1=params["w1"].astype(np.float32),
        b1=params["b1"].astype(np.float32),
        w2=params["w2"].astype(np.float32),
        b2=params["b2"].astype(np.float32),
    )
    return TrainResult(weights=final_weights, history=history)


def save_history_csv(history: list[dict], path: str) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["epoch", "loss", "lr", "k_steps"])
        for row in history:
            writer.writerow([row["epoch"], row["loss"], row["lr"], row["k_steps"]])


def make_stripes_target(
    mesh: Mesh,
    bands: int = 6,
    amplitude: float = 0.6,
    channel_map: tuple[int, ...] = (0, 1, 2),
    axis: int = 2,
) -> TargetField:
    """Alternating two-color bands along a coordinate axis, a compact
    self-contained appearance target for regression tests and demos."""
    coord = mesh.positions[:, axis]
    span = coord.max() - coord.min()
    if span < 1e-12:
        raise ValueError("mesh is flat along the requested axis")
    t = (coord - coord.min()) / span
    band = np.minimum((t * bands).astype(np.int64), bands - 1)
    even = band % 2 == 0
    color_a = np.array([amplitude, -amplitude, -amplitude])
    color_b = np.array([-amplitude, -amplitude, amplitude])
    values = np.where(even[:, None], color_a, color_b)
    if len(channel_map) != 3:
        values = values[:, : len(channel_map)]
    return TargetField(values=values, channel_map=channel_map)
