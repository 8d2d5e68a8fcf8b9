"""Continual training loop and its ablation modes.

Per task: expand fresh factors, train them against the frozen shared
space, sort and energy-prune the singular values, append.  The shared
space is never touched after append, which is what makes backward
transfer exactly zero.

Gradient routing follows the per-group split of the training
pseudo-code: U and V take the gradient of task loss + orthogonality
term, sigma takes the gradient of task loss + sparsity term.  Both are
descent steps; the split is realized as two backward passes over one
shared tape.
"""

from __future__ import annotations

import logging
import time
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from . import autodiff as ad
from . import compression as cp
from . import factorized as fz
from . import regularizers as reg
from .datasets import TaskDataset
from .errors import ConfigError, TrainingError
from .metrics import MetricsReport, compute_metrics

log = logging.getLogger(__name__)

MODES = ("full", "fixed", "st", "baseline_ub")


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 200
    batch_size: int = 32
    base_lr: float = 1e-3
    lr_drop_epochs: tuple[int, ...] = (80, 120, 180)
    lr_drop_factor: float = 10.0
    lambda_orth: float = 1.0
    lambda_sparse: float = 0.1
    energy_e: float = 1e-5
    mode: str = "full"
    seed: int = 0
    min_rank: int = 1
    prune_rule: str = "energy_ratio"
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    dropout_rates: tuple[float, ...] | None = None

    def __post_init__(self):
        if self.epochs < 1 or self.batch_size < 1:
            raise ConfigError("epochs and batch_size must be positive")
        drops = tuple(self.lr_drop_epochs)
        if any(b <= a for a, b in zip(drops, drops[1:])) or any(
            d >= self.epochs or d < 0 for d in drops
        ):
            raise ConfigError(
                f"lr_drop_epochs must be strictly increasing and < epochs, got {drops}"
            )
        if self.mode not in MODES:
            raise ConfigError(f"mode must be one of {MODES}, got {self.mode!r}")
        reg.LossWeights(self.lambda_orth, self.lambda_sparse)  # validates
        cp.PruneConfig(self.energy_e, self.min_rank, self.prune_rule)  # validates

    def prune_config(self) -> cp.PruneConfig:
        return cp.PruneConfig(self.energy_e, self.min_rank, self.prune_rule)


def lr_schedule(epoch: int, cfg: TrainConfig) -> float:
    drops = sum(1 for d in cfg.lr_drop_epochs if epoch >= d)
    return cfg.base_lr / cfg.lr_drop_factor**drops


class Adam:
    """Adaptive-moment descent over a dict of named float32 parameters."""

    def __init__(self, params: dict[str, np.ndarray], beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8):
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.step_count = 0
        self.m = {k: np.zeros_like(p) for k, p in params.items()}
        self.v = {k: np.zeros_like(p) for k, p in params.items()}

    def step(self, params: dict[str, np.ndarray], grads: dict[str, np.ndarray], lr: float):
        self.step_count += 1
        bc1 = 1.0 - self.beta1**self.step_count
        bc2 = 1.0 - self.beta2**self.step_count
        for key, grad in grads.items():
            m = self.m[key] = self.beta1 * self.m[key] + (1.0 - self.beta1) * grad
            v = self.v[key] = self.beta2 * self.v[key] + (1.0 - self.beta2) * grad * grad
            params[key] -= lr * (m / bc1) / (np.sqrt(v / bc2) + self.eps)


def _epoch_order(cfg: TrainConfig, task: int, epoch: int, n: int) -> np.ndarray:
    rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, task, epoch]))
    return rng.permutation(n)


def _dropout_seed(cfg: TrainConfig, task: int, epoch: int, start: int) -> int:
    return int(np.random.SeedSequence([cfg.seed, task, epoch, start]).generate_state(1)[0])


def accuracy(logits: np.ndarray, labels: np.ndarray) -> float:
    return float((logits.argmax(axis=1) == labels).mean())


def train_task(
    data: TaskDataset,
    shared: fz.SharedSpace | None,
    fresh: fz.TaskFactors,
    head: fz.TaskHead,
    cfg: TrainConfig,
    spec: fz.NetworkSpec | None = None,
) -> tuple[fz.TaskFactors, fz.TaskHead]:
    """Compression-aware training of one task's residual factors and head.

    ``shared`` (may be None for isolated training) is read-only; only
    the fresh factors and head are updated.
    """
    if shared is not None:
        spec = shared.spec
    if spec is None:
        raise ValueError("need a NetworkSpec when training without a shared space")
    if cfg.dropout_rates is not None:
        spec = replace(spec, dropout_rates=tuple(cfg.dropout_rates))
    n_layers = spec.num_layers
    task = fresh.task
    upto = shared.num_tasks if shared is not None else 0

    params: dict[str, np.ndarray] = {}
    for l in range(n_layers):
        params[f"u{l}"] = fresh.u[l].copy()
        params[f"sigma{l}"] = fresh.sigma[l].copy()
        params[f"v{l}"] = fresh.v[l].copy()
    params["head_w"] = head.weight.copy()
    params["head_b"] = head.bias.copy()
    adam = Adam(params, cfg.beta1, cfg.beta2, cfg.eps)

    use_dropout = any(r > 0 for r in spec.dropout_rates)
    n = data.train_x.shape[0]
    for epoch in range(cfg.epochs):
        lr = lr_schedule(epoch, cfg)
        order = _epoch_order(cfg, task, epoch, n)
        for step, start in enumerate(range(0, n, cfg.batch_size)):
            batch = order[start : start + cfg.batch_size]
            x, y = data.train_x[batch], data.train_y[batch]

            g = ad.Graph()
            residual = fz.TaskFactors(
                task=task,
                u=[params[f"u{l}"] for l in range(n_layers)],
                sigma=[params[f"sigma{l}"] for l in range(n_layers)],
                v=[params[f"v{l}"] for l in range(n_layers)],
            )
            composed = fz.compose_weights(g, shared, upto, residual)
            seed = _dropout_seed(cfg, task, epoch, start) if use_dropout else 0
            feats = fz.graph_forward(
                g, composed.weights, spec, g.leaf(x), train=True, dropout_seed=seed
            )
            hw = g.leaf(params["head_w"], trainable=True, name="head_w")
            hb = g.leaf(params["head_b"], trainable=True, name="head_b")
            task_loss = g.softmax_cross_entropy(g.linear(feats, hw, hb), y)
            if not np.isfinite(float(g.value(task_loss))):
                raise TrainingError("non-finite task loss", task=task, epoch=epoch, step=step)

            loss_uv = task_loss
            if cfg.lambda_orth > 0:
                orth = reg.l_orth_graph(g, composed.u_leaves, composed.v_leaves)
                loss_uv = g.add(task_loss, g.scale(orth, cfg.lambda_orth))
            loss_sigma = task_loss
            if cfg.lambda_sparse > 0:
                sparse = reg.l_sparse_graph(g, composed.sigma_leaves)
                loss_sigma = g.add(task_loss, g.scale(sparse, cfg.lambda_sparse))

            grads_uv = g.backward(loss_uv)
            grads_sigma = grads_uv if loss_sigma is loss_uv else g.backward(loss_sigma)
            grads = {"head_w": grads_uv[hw], "head_b": grads_uv[hb]}
            for l in range(n_layers):
                grads[f"u{l}"] = grads_uv[composed.u_leaves[l]]
                grads[f"v{l}"] = grads_uv[composed.v_leaves[l]]
                grads[f"sigma{l}"] = grads_sigma[composed.sigma_leaves[l]]
            adam.step(params, grads, lr)

    trained = fz.TaskFactors(
        task=task,
        u=[params[f"u{l}"] for l in range(n_layers)],
        sigma=[params[f"sigma{l}"] for l in range(n_layers)],
        v=[params[f"v{l}"] for l in range(n_layers)],
    )
    trained_head = fz.TaskHead(weight=params["head_w"], bias=params["head_b"])
    return trained, trained_head


# -- dense reference models -------------------------------------------------------


@dataclass
class DenseTaskModels:
    """Independent unfactorized per-task models (upper-bound reference)."""

    spec: fz.NetworkSpec
    weights: list[list[np.ndarray]] = field(default_factory=list)
    heads: list[fz.TaskHead] = field(default_factory=list)

    @property
    def num_tasks(self) -> int:
        return len(self.heads)

    def predict_logits(self, t: int, x: np.ndarray) -> np.ndarray:
        if not 1 <= t <= self.num_tasks:
            raise ValueError(f"task {t} out of range 1..{self.num_tasks}")
        return fz.run_network(self.weights[t - 1], self.heads[t - 1], self.spec, x)

    def param_count(self) -> int:
        total = sum(w.size for ws in self.weights for w in ws)
        return total + sum(h.param_count for h in self.heads)

    def size_bytes(self) -> int:
        return 4 * self.param_count()


def train_dense_task(
    data: TaskDataset, spec: fz.NetworkSpec, cfg: TrainConfig, task: int
) -> tuple[list[np.ndarray], fz.TaskHead]:
    """Plain dense conv training, no factorization or regularizers."""
    if cfg.dropout_rates is not None:
        spec = replace(spec, dropout_rates=tuple(cfg.dropout_rates))
    states = np.random.SeedSequence([cfg.seed, task, 7919]).generate_state(spec.num_layers + 1)
    params: dict[str, np.ndarray] = {}
    for l, shape in enumerate(spec.layers):
        rng = np.random.default_rng(int(states[l]))
        scale = np.sqrt(2.0 / shape.q)
        params[f"w{l}"] = (rng.normal(size=(shape.c, shape.q)) * scale).astype(ad.DTYPE)
    head_rng = np.random.default_rng(int(states[-1]))
    head_scale = 1.0 / np.sqrt(spec.head_input_dim)
    params["head_w"] = (
        head_rng.normal(size=(spec.head_input_dim, data.classes)) * head_scale
    ).astype(ad.DTYPE)
    params["head_b"] = np.zeros(data.classes, dtype=ad.DTYPE)
    adam = Adam(params, cfg.beta1, cfg.beta2, cfg.eps)

    use_dropout = any(r > 0 for r in spec.dropout_rates)
    n = data.train_x.shape[0]
    for epoch in range(cfg.epochs):
        lr = lr_schedule(epoch, cfg)
        order = _epoch_order(cfg, task, epoch, n)
        for step, start in enumerate(range(0, n, cfg.batch_size)):
            batch = order[start : start + cfg.batch_size]
            x, y = data.train_x[batch], data.train_y[batch]
            g = ad.Graph()
            weight_nodes = [
                g.leaf(params[f"w{l}"], trainable=True, name=f"w{l}")
                for l in range(spec.num_layers)
            ]
            seed = _dropout_seed(cfg, task, epoch, start) if use_dropout else 0
            feats = fz.graph_forward(g, weight_nodes, spec, g.leaf(x), train=True, dropout_seed=seed)
            hw = g.leaf(params["head_w"], trainable=True, name="head_w")
            hb = g.leaf(params["head_b"], trainable=True, name="head_b")
            loss = g.softmax_cross_entropy(g.linear(feats, hw, hb), y)
            if not np.isfinite(float(g.value(loss))):
                raise TrainingError("non-finite task loss", task=task, epoch=epoch, step=step)
            grads_nodes = g.backward(loss)
            grads = {g.nodes[nid].name: grads_nodes[nid] for nid in grads_nodes}
            adam.step(params, grads, lr)

    weights = [params[f"w{l}"] for l in range(spec.num_layers)]
    return weights, fz.TaskHead(weight=params["head_w"], bias=params["head_b"])


# -- the continual loop --------------------------------------------------------------


def _eval_task(model, i: int, data: TaskDataset) -> float:
    return accuracy(model.predict_logits(i, data.test_x), data.test_y)


class _SpaceEval:
    def __init__(self, space: fz.SharedSpace):
        self.space = space

    def predict_logits(self, t, x):
        return fz.predict_logits(self.space, t, x)


def run_continual(
    stream: list[TaskDataset], spec: fz.NetworkSpec, cfg: TrainConfig, raw_sink: list | None = None
):
    """Train the stream under cfg.mode; returns (model, MetricsReport).

    The model is a SharedSpace for factorized modes and DenseTaskModels
    for the dense upper-bound mode.  Task i is always evaluated through
    its extracted sub-network, so the accuracy matrix has constant
    columns below the diagonal by construction.

    ``raw_sink``, if given, receives each task's trained-but-unpruned
    (factors, head) pair; dense mode leaves it empty.
    """
    if not stream:
        raise ConfigError("task stream is empty")
    acc_rows: list[list[float]] = []
    wall: list[float] = []

    if cfg.mode == "baseline_ub":
        models = DenseTaskModels(spec=spec)
        for t, data in enumerate(stream, 1):
            begin = time.perf_counter()
            weights, head = train_dense_task(data, spec, cfg, t)
            models.weights.append(weights)
            models.heads.append(head)
            wall.append(time.perf_counter() - begin)
            acc_rows.append([_eval_task(models, i, stream[i - 1]) for i in range(1, t + 1)])
        report = compute_metrics(
            acc_rows, models.size_bytes(),
            rank_allocation=[], wall_clock=wall, config=asdict(cfg),
        )
        return models, report

    space = fz.empty_space(spec, isolated=(cfg.mode == "st"))
    caps = [s.expansion_rank() for s in spec.layers] if cfg.mode == "fixed" else None
    for t, data in enumerate(stream, 1):
        begin = time.perf_counter()
        fresh, head = fz.expand(spec, t, cfg.seed, data.classes)
        use_shared = cfg.mode in ("full", "fixed") and space.num_tasks > 0
        trained, trained_head = train_task(
            data, space if use_shared else None, fresh, head, cfg, spec=spec
        )
        if raw_sink is not None:
            raw_sink.append((trained.copy(), trained_head.copy()))
        pruned = cp.compress(trained, cfg.prune_config())
        if caps is not None:
            remaining = [caps[l] - space.total_width(l) for l in range(spec.num_layers)]
            pruned = cp.cap_ranks(pruned, remaining)
        for l, shape in enumerate(spec.layers):
            width = space.total_width(l) + pruned.ranks()[l]
            if width > shape.expansion_rank():
                log.warning(
                    "layer %d cumulative rank %d exceeds factorized-parity width %d; "
                    "stored factors now cost more than a dense layer",
                    l, width, shape.expansion_rank(),
                )
        space = fz.append(space, pruned, trained_head)
        wall.append(time.perf_counter() - begin)
        ev = _SpaceEval(space)
        acc_rows.append([_eval_task(ev, i, stream[i - 1]) for i in range(1, t + 1)])

    rank_alloc = []
    for l in range(spec.num_layers):
        row, prev = [], 0
        for t in range(1, space.num_tasks + 1):
            row.append(space.rank_upto(l, t) - prev)
            prev = space.rank_upto(l, t)
        rank_alloc.append(row)
    report = compute_metrics(
        acc_rows, fz.size_bytes(space),
        rank_allocation=rank_alloc, wall_clock=wall, config=asdict(cfg),
    )
    return space, report
