"""SVD-parameterized continual network.

Each conv layer's weight lives as factor triples (U, sigma, V) over the
2-D reshaped weight matrix.  Completed tasks occupy a frozen, append-only
shared space; the current task trains a residual triple on top:

    W_l = U_shared diag(sigma_shared) V_shared^T + U_t diag(sigma_t) V_t^T

Per-task cumulative ranks recorded at append time act as task
identifiers: extracting the first R_{l,t} columns reproduces task t's
weights bitwise no matter how many tasks were added afterwards.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .errors import ShapeError
from .linalg import DTYPE, random_orthonormal


@dataclass(frozen=True)
class LayerShape:
    """Conv weight dimensions: c output channels, (n, h, w) kernel volume."""

    c: int
    n: int
    h: int
    w: int

    def __post_init__(self):
        if min(self.c, self.n, self.h, self.w) < 1:
            raise ValueError(f"layer dimensions must be positive, got {self}")

    @property
    def q(self) -> int:
        return self.n * self.h * self.w

    @property
    def dense_params(self) -> int:
        return self.c * self.q

    def expansion_rank(self) -> int:
        # width at which factorized params (c*r + q*r + r) stay below dense c*q
        return max(1, (self.c * self.q) // (self.c + self.q + 1))


@dataclass(frozen=True)
class NetworkSpec:
    """Static architecture: conv stack geometry plus the head input width."""

    layers: tuple[LayerShape, ...]
    input_hw: tuple[int, int]
    head_input_dim: int
    strides: tuple[int, ...]
    paddings: tuple[int, ...]
    dropout_rates: tuple[float, ...]

    def __post_init__(self):
        n_layers = len(self.layers)
        if n_layers == 0:
            raise ValueError("network needs at least one layer")
        for name in ("strides", "paddings", "dropout_rates"):
            if len(getattr(self, name)) != n_layers:
                raise ValueError(f"{name} must have one entry per layer")
        for prev, nxt in zip(self.layers, self.layers[1:]):
            if nxt.n != prev.c:
                raise ValueError(
                    f"layer input channels {nxt.n} do not match previous output {prev.c}"
                )
        if self.head_input_dim != self._feature_dim():
            raise ValueError(
                f"head_input_dim {self.head_input_dim} does not match "
                f"flattened conv output {self._feature_dim()}"
            )

    def feature_map_sizes(self) -> list[tuple[int, int]]:
        h, w = self.input_hw
        sizes = []
        for shape, stride, pad in zip(self.layers, self.strides, self.paddings):
            h, w = ad.conv_output_size(h, w, shape.h, shape.w, stride, pad)
            if h < 1 or w < 1:
                raise ValueError("feature map collapsed to zero size")
            sizes.append((h, w))
        return sizes

    def _feature_dim(self) -> int:
        h, w = self.feature_map_sizes()[-1]
        return self.layers[-1].c * h * w

    @property
    def num_layers(self) -> int:
        return len(self.layers)

    @classmethod
    def build(
        cls,
        channels,
        in_channels: int,
        input_hw: tuple[int, int],
        kernel: int = 3,
        stride=1,
        padding=1,
        dropout: float = 0.0,
    ) -> "NetworkSpec":
        """Conv stack helper; head width inferred from geometry.

        ``stride`` and ``padding`` may be scalars (shared by all layers)
        or one value per layer.
        """
        layers = []
        prev = in_channels
        for c in channels:
            layers.append(LayerShape(c=c, n=prev, h=kernel, w=kernel))
            prev = c
        n = len(layers)

        def per_layer(value):
            if isinstance(value, (tuple, list)):
                return tuple(int(v) for v in value)
            return (int(value),) * n

        strides, paddings = per_layer(stride), per_layer(padding)
        probe = cls.__new__(cls)
        object.__setattr__(probe, "layers", tuple(layers))
        object.__setattr__(probe, "input_hw", tuple(input_hw))
        object.__setattr__(probe, "strides", strides)
        object.__setattr__(probe, "paddings", paddings)
        object.__setattr__(probe, "dropout_rates", (dropout,) * n)
        object.__setattr__(probe, "head_input_dim", 0)
        head_dim = probe._feature_dim()
        return cls(
            layers=tuple(layers),
            input_hw=tuple(input_hw),
            head_input_dim=head_dim,
            strides=strides,
            paddings=paddings,
            dropout_rates=(dropout,) * n,
        )


@dataclass
class TaskHead:
    """Per-task linear classifier; trainable only while its task is active."""

    weight: np.ndarray  # (head_input_dim, classes)
    bias: np.ndarray  # (classes,)

    @property
    def classes(self) -> int:
        return self.weight.shape[1]

    @property
    def param_count(self) -> int:
        return self.weight.size + self.bias.size

    def copy(self) -> "TaskHead":
        return TaskHead(weight=self.weight.copy(), bias=self.bias.copy())


@dataclass
class TaskFactors:
    """One task's per-layer factor triples (U, sigma, V)."""

    task: int
    u: list[np.ndarray]
    sigma: list[np.ndarray]
    v: list[np.ndarray]

    def ranks(self) -> tuple[int, ...]:
        return tuple(s.shape[0] for s in self.sigma)

    def copy(self) -> "TaskFactors":
        return TaskFactors(
            task=self.task,
            u=[a.copy() for a in self.u],
            sigma=[a.copy() for a in self.sigma],
            v=[a.copy() for a in self.v],
        )


@dataclass(frozen=True)
class SharedSpace:
    """Append-only store of compressed task factors plus task identifiers.

    ``rank_table[l][t-1]`` is the cumulative rank R_{l,t} after task t.
    With ``isolated`` set, tasks share nothing and extraction reads each
    task's own column segment instead of the full prefix.
    """

    spec: NetworkSpec
    u: tuple[np.ndarray, ...]
    sigma: tuple[np.ndarray, ...]
    v: tuple[np.ndarray, ...]
    rank_table: tuple[tuple[int, ...], ...]
    heads: tuple[TaskHead, ...]
    isolated: bool = False

    @property
    def num_tasks(self) -> int:
        return len(self.heads)

    def rank_upto(self, layer: int, t: int) -> int:
        """Cumulative rank R_{layer,t}; R_{layer,0} = 0."""
        if t == 0:
            return 0
        return self.rank_table[layer][t - 1]

    def total_width(self, layer: int) -> int:
        return self.u[layer].shape[1]


def empty_space(spec: NetworkSpec, isolated: bool = False) -> SharedSpace:
    return SharedSpace(
        spec=spec,
        u=tuple(np.zeros((s.c, 0), dtype=DTYPE) for s in spec.layers),
        sigma=tuple(np.zeros(0, dtype=DTYPE) for _ in spec.layers),
        v=tuple(np.zeros((s.q, 0), dtype=DTYPE) for s in spec.layers),
        rank_table=tuple(() for _ in spec.layers),
        heads=(),
        isolated=isolated,
    )


def expand(
    spec: NetworkSpec, t: int, seed: int, classes: int, max_rank: tuple[int, ...] | None = None
) -> tuple[TaskFactors, TaskHead]:
    """Fresh trainable factors and head for task ``t``.

    Per layer r = floor(c*q / (c + q + 1)) clamped to >= 1, so factorized
    storage never exceeds the dense weight.  U, V start column-orthonormal;
    sigma starts in (0.5, 1.0]: graded so pruning order is meaningful, but
    bounded away from zero so the sparsity penalty (whose gradient blows up
    as ||sigma|| -> 0) cannot erase a direction before the task has produced
    any gradient signal for it.  ``max_rank`` optionally caps each layer's
    width (fixed-capacity mode).
    """
    states = np.random.SeedSequence([seed, t]).generate_state(3 * spec.num_layers + 2)
    u, sigma, v = [], [], []
    for l, shape in enumerate(spec.layers):
        r = shape.expansion_rank()
        if max_rank is not None:
            r = min(r, max_rank[l])
        u.append(random_orthonormal(shape.c, r, seed=int(states[3 * l])))
        v.append(random_orthonormal(shape.q, r, seed=int(states[3 * l + 1])))
        rng = np.random.default_rng(int(states[3 * l + 2]))
        sigma.append((0.5 + 0.5 * (1.0 - rng.random(r))).astype(DTYPE))
    head_rng = np.random.default_rng(int(states[-2]))
    scale = 1.0 / np.sqrt(spec.head_input_dim)
    head = TaskHead(
        weight=(head_rng.normal(size=(spec.head_input_dim, classes)) * scale).astype(DTYPE),
        bias=np.zeros(classes, dtype=DTYPE),
    )
    return TaskFactors(task=t, u=u, sigma=sigma, v=v), head


def _dense_from_cols(u: np.ndarray, sigma: np.ndarray, v: np.ndarray, lo: int, hi: int) -> np.ndarray:
    # contiguous copies pin the exact gemm inputs, keeping prefix
    # extraction bitwise stable after later columns are appended
    uc = np.ascontiguousarray(u[:, lo:hi])
    sc = np.ascontiguousarray(sigma[lo:hi])
    vc = np.ascontiguousarray(v[:, lo:hi])
    out = (uc * sc) @ vc.T
    if lo == hi:
        out = np.zeros((u.shape[0], v.shape[0]), dtype=u.dtype)
    return np.ascontiguousarray(out)


def _check_residual(spec: NetworkSpec, factors: TaskFactors) -> None:
    for l, shape in enumerate(spec.layers):
        r = factors.sigma[l].shape[0]
        if factors.u[l].shape != (shape.c, r) or factors.v[l].shape != (shape.q, r):
            raise ShapeError(
                f"layer {l}: factors U{factors.u[l].shape} / sigma({r},) / "
                f"V{factors.v[l].shape} do not fit weight {shape.c}x{shape.q}"
            )


def compose_dense(
    shared: SharedSpace | None,
    upto_t: int,
    residual: TaskFactors | None,
) -> list[np.ndarray]:
    """Per-layer dense weights: frozen prefix reconstruction plus residual."""
    if shared is None and residual is None:
        raise ValueError("need at least one of shared space or residual factors")
    if shared is not None and residual is not None:
        _check_residual(shared.spec, residual)
    n_layers = len(shared.u) if shared is not None else len(residual.u)
    out = []
    for l in range(n_layers):
        w = None
        if shared is not None and upto_t > 0:
            lo = shared.rank_upto(l, upto_t - 1) if shared.isolated else 0
            hi = shared.rank_upto(l, min(upto_t, shared.num_tasks))
            w = _dense_from_cols(shared.u[l], shared.sigma[l], shared.v[l], lo, hi)
        if residual is not None:
            wr = (residual.u[l] * residual.sigma[l]) @ residual.v[l].T
            w = wr if w is None else w + wr
        if w is None:
            shape = shared.spec.layers[l]
            w = np.zeros((shape.c, shape.q), dtype=DTYPE)
        out.append(np.ascontiguousarray(w.astype(DTYPE, copy=False)))
    return out


@dataclass
class ComposedWeights:
    """Graph nodes for Eq-style additive weights plus the trainable leaf ids."""

    weights: list[int]
    u_leaves: list[int]
    sigma_leaves: list[int]
    v_leaves: list[int]


def compose_weights(
    g: ad.Graph,
    shared: SharedSpace | None,
    upto_t: int,
    residual: TaskFactors,
) -> ComposedWeights:
    """Build the per-layer additive weight graph.

    The shared prefix enters as frozen leaves (no gradient ever reaches
    it); the residual triple enters as trainable leaves.  With an empty
    or absent shared space the weight is the residual term alone.
    """
    if shared is not None:
        _check_residual(shared.spec, residual)
    weights, u_ids, s_ids, v_ids = [], [], [], []
    n_layers = len(residual.u)
    for l in range(n_layers):
        w_node = None
        if shared is not None and upto_t > 0:
            lo = shared.rank_upto(l, upto_t - 1) if shared.isolated else 0
            hi = shared.rank_upto(l, upto_t)
            if hi > lo:
                fu = g.leaf(np.ascontiguousarray(shared.u[l][:, lo:hi]), name=f"shared_u{l}")
                fs = g.leaf(np.ascontiguousarray(shared.sigma[l][lo:hi]), name=f"shared_sigma{l}")
                fv = g.leaf(np.ascontiguousarray(shared.v[l][:, lo:hi]), name=f"shared_v{l}")
                w_node = g.matmul(g.matmul(fu, g.diag_embed(fs)), g.transpose(fv))
        u = g.leaf(residual.u[l], trainable=True, name=f"u{l}")
        s = g.leaf(residual.sigma[l], trainable=True, name=f"sigma{l}")
        v = g.leaf(residual.v[l], trainable=True, name=f"v{l}")
        w_res = g.matmul(g.matmul(u, g.diag_embed(s)), g.transpose(v))
        weights.append(w_res if w_node is None else g.add(w_node, w_res))
        u_ids.append(u)
        s_ids.append(s)
        v_ids.append(v)
    return ComposedWeights(weights=weights, u_leaves=u_ids, sigma_leaves=s_ids, v_leaves=v_ids)


def graph_forward(
    g: ad.Graph,
    weights: list[int],
    spec: NetworkSpec,
    x_node: int,
    train: bool = False,
    dropout_seed: int = 0,
) -> int:
    """Conv stack forward on graph nodes; returns flattened feature node."""
    h = x_node
    batch = g.value(x_node).shape[0]
    for l, shape in enumerate(spec.layers):
        h = g.conv2d(
            weights[l], h, kernel=(shape.n, shape.h, shape.w),
            stride=spec.strides[l], padding=spec.paddings[l],
        )
        h = g.relu(h)
        rate = spec.dropout_rates[l]
        if rate > 0.0:
            h = g.dropout(h, rate=rate, seed=dropout_seed + l, train=train)
    return g.reshape(h, (batch, spec.head_input_dim))


def forward_features(weights, spec: NetworkSpec, x: np.ndarray) -> np.ndarray:
    """Inference-mode conv stack on plain arrays (no dropout)."""
    h = np.ascontiguousarray(np.asarray(x, dtype=DTYPE))
    for l, shape in enumerate(spec.layers):
        h = ad.conv2d_forward(
            weights[l], h, kernel=(shape.n, shape.h, shape.w),
            stride=spec.strides[l], padding=spec.paddings[l],
        )
        h = np.maximum(h, 0)
    return h.reshape(h.shape[0], spec.head_input_dim)


def run_network(weights, head: TaskHead, spec: NetworkSpec, x: np.ndarray) -> np.ndarray:
    """Dense-weight inference: conv features then task head logits."""
    return forward_features(weights, spec, x) @ head.weight + head.bias


def extract_subnetwork(shared: SharedSpace, t: int) -> tuple[list[np.ndarray], TaskHead]:
    """Task t's frozen dense weights and head, via its rank identifiers.

    Uses only the first R_{l,t} stored columns (or task t's own segment
    in isolated mode), so the result is bitwise stable across all later
    appends.
    """
    if not 1 <= t <= shared.num_tasks:
        raise ValueError(f"task {t} out of range 1..{shared.num_tasks}")
    weights = []
    for l in range(shared.spec.num_layers):
        lo = shared.rank_upto(l, t - 1) if shared.isolated else 0
        hi = shared.rank_upto(l, t)
        weights.append(_dense_from_cols(shared.u[l], shared.sigma[l], shared.v[l], lo, hi))
    return weights, shared.heads[t - 1]


def predict_logits(shared: SharedSpace, t: int, x: np.ndarray) -> np.ndarray:
    weights, head = extract_subnetwork(shared, t)
    return run_network(weights, head, shared.spec, x)


def append(shared: SharedSpace, pruned: TaskFactors, head: TaskHead) -> SharedSpace:
    """New SharedSpace with task columns concatenated after existing ones.

    Existing arrays are never mutated; earlier extraction results stay
    bitwise identical.
    """
    _check_residual(shared.spec, pruned)
    for l in range(shared.spec.num_layers):
        s = pruned.sigma[l]
        if s.size and (np.any(s < 0) or np.any(np.diff(s) > 0)):
            raise ValueError(f"layer {l}: appended sigma must be sorted non-negative")
    new_u, new_s, new_v, new_table = [], [], [], []
    for l in range(shared.spec.num_layers):
        new_u.append(np.ascontiguousarray(
            np.concatenate([shared.u[l], pruned.u[l].astype(DTYPE, copy=False)], axis=1)))
        new_s.append(np.ascontiguousarray(
            np.concatenate([shared.sigma[l], pruned.sigma[l].astype(DTYPE, copy=False)])))
        new_v.append(np.ascontiguousarray(
            np.concatenate([shared.v[l], pruned.v[l].astype(DTYPE, copy=False)], axis=1)))
        prev = shared.rank_table[l][-1] if shared.rank_table[l] else 0
        new_table.append(shared.rank_table[l] + (prev + pruned.sigma[l].shape[0],))
    return SharedSpace(
        spec=shared.spec,
        u=tuple(new_u),
        sigma=tuple(new_s),
        v=tuple(new_v),
        rank_table=tuple(new_table),
        heads=shared.heads + (head.copy(),),
        isolated=shared.isolated,
    )


def param_count(shared: SharedSpace) -> int:
    """Stored reals: per layer (c + q + 1) * R_total, plus all head params."""
    total = 0
    for l, shape in enumerate(shared.spec.layers):
        width = shared.total_width(l)
        total += (shape.c + shape.q + 1) * width
    total += sum(h.param_count for h in shared.heads)
    return total


def size_bytes(shared: SharedSpace) -> int:
    return 4 * param_count(shared)
