"""CFAG forward computation and its analytic reverse pass.

Embeddings are stored one row per node: ``E`` is ``(n_users + n_groups +
n_items, d)`` with users first, then groups, then items. Contextual tables
``C_g`` and ``C_i`` are ``(n_groups, d)`` and ``(n_items, d)``.

Each node embedding is partitioned into two half-width branches, one per
neighbor type it sends messages to:

    user  -> (group branch, item branch)
    group -> (user branch,  item branch)
    item  -> (user branch,  group branch)

A convolution layer aggregates, for every center node, the matching branch of
each neighbor and merges the two resulting messages back to width ``d``. The
propagation-augmentation (PA) stage adds attention-weighted group/item
information to the user branches consumed by the first layer.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field, replace
from enum import Enum
from typing import Mapping, Sequence

import numpy as np
import scipy.sparse as sp

from .graph import TripartiteGraph
from .numeric import check_finite, make_rng

NODE_TYPES = ("user", "group", "item")
BRANCHES = {"user": ("group", "item"), "group": ("user", "item"), "item": ("user", "group")}


class Partition(str, Enum):
    SPLIT = "split"
    LINEAR = "linear"


class Merge(str, Enum):
    CONCAT = "concat"
    FC_BEFORE = "fc_before"
    FC_AFTER = "fc_after"


class Aggregation(str, Enum):
    MEAN = "mean"
    SUM = "sum"
    SYM_NORM = "sym_norm"


class PAMode(str, Enum):
    FULL = "full"
    NO_PA = "no_pa"
    NO_ITEM = "no_item"
    NO_GROUP = "no_group"

    @property
    def uses_groups(self) -> bool:
        return self in (PAMode.FULL, PAMode.NO_ITEM)

    @property
    def uses_items(self) -> bool:
        return self in (PAMode.FULL, PAMode.NO_GROUP)


@dataclass(frozen=True)
class HyperParams:
    d: int = 64
    n_layers: int = 1
    beta: float = 0.5
    reg: float = 1e-5
    lr: float = 1e-3
    batch_size: int = 2048
    leaky_slope: float = 0.2
    partition: Partition = Partition.SPLIT
    merge: Merge = Merge.CONCAT
    aggregation: Aggregation = Aggregation.MEAN
    pa_mode: PAMode = PAMode.FULL
    # False: R[m, g] normalizes over m for each g (column softmax of the Gram
    # matrix). True: normalize over g for each m.
    relatedness_transpose: bool = False
    init_std: float = 0.1

    def __post_init__(self):
        object.__setattr__(self, "partition", Partition(self.partition))
        object.__setattr__(self, "merge", Merge(self.merge))
        object.__setattr__(self, "aggregation", Aggregation(self.aggregation))
        object.__setattr__(self, "pa_mode", PAMode(self.pa_mode))
        if self.d < 2 or self.d % 2:
            raise ValueError(f"embedding size d must be even and >= 2, got {self.d}")
        if self.n_layers < 1:
            raise ValueError("n_layers must be >= 1")
        if not 0.0 <= self.beta <= 1.0:
            raise ValueError(f"beta must lie in [0, 1], got {self.beta}")
        if self.reg < 0 or self.lr <= 0 or self.batch_size < 1:
            raise ValueError("reg must be >= 0, lr > 0 and batch_size >= 1")

    def to_dict(self) -> dict:
        out = asdict(self)
        for k, v in out.items():
            if isinstance(v, Enum):
                out[k] = v.value
        return out

    def with_(self, **changes) -> "HyperParams":
        return replace(self, **changes)


@dataclass
class ModelParams:
    E: np.ndarray
    C_g: np.ndarray
    C_i: np.ndarray
    n_users: int
    n_groups: int
    n_items: int
    weights: dict[str, np.ndarray] = field(default_factory=dict)

    @property
    def d(self) -> int:
        return self.E.shape[1]

    def node_slices(self) -> dict[str, slice]:
        u, g = self.n_users, self.n_groups
        return {"user": slice(0, u), "group": slice(u, u + g), "item": slice(u + g, u + g + self.n_items)}

    def arrays(self) -> dict[str, np.ndarray]:
        out = {"E": self.E, "C_g": self.C_g, "C_i": self.C_i}
        out.update((k, self.weights[k]) for k in sorted(self.weights))
        return out

    def copy(self) -> "ModelParams":
        return ModelParams(
            self.E.copy(), self.C_g.copy(), self.C_i.copy(), self.n_users, self.n_groups, self.n_items,
            {k: v.copy() for k, v in self.weights.items()},
        )

    @classmethod
    def from_arrays(cls, arrays: Mapping[str, np.ndarray], n_users: int, n_groups: int, n_items: int) -> "ModelParams":
        E = np.asarray(arrays["E"], dtype=np.float64)
        if E.shape[0] != n_users + n_groups + n_items:
            raise ValueError(f"E has {E.shape[0]} rows, expected {n_users + n_groups + n_items}")
        C_g, C_i = np.asarray(arrays["C_g"]), np.asarray(arrays["C_i"])
        if C_g.shape != (n_groups, E.shape[1]) or C_i.shape != (n_items, E.shape[1]):
            raise ValueError("contextual table shapes do not match the graph")
        weights = {k: np.asarray(v, dtype=np.float64).copy() for k, v in arrays.items() if k not in ("E", "C_g", "C_i")}
        return cls(E.copy(), C_g.astype(np.float64), C_i.astype(np.float64), n_users, n_groups, n_items, weights)


def variant_weight_shapes(hp: HyperParams) -> dict[str, tuple[int, int]]:
    """Names and shapes of the extra matrices used by the P1/M1/M2 variants."""
    d, h = hp.d, hp.d // 2
    shapes: dict[str, tuple[int, int]] = {}
    for layer in range(1, hp.n_layers + 1):
        for t in NODE_TYPES:
            if hp.partition is Partition.LINEAR:
                for b in BRANCHES[t]:
                    shapes[f"part{layer}_{t}_{b}"] = (h, d)
            if hp.merge is Merge.FC_BEFORE:
                shapes[f"merge{layer}_{t}"] = (d, d)
            elif hp.merge is Merge.FC_AFTER:
                shapes[f"merge{layer}_{t}_a"] = (h, h)
                shapes[f"merge{layer}_{t}_b"] = (h, h)
    return shapes


def init_params(hp: HyperParams, n_users: int, n_groups: int, n_items: int, seed: int | np.random.Generator) -> ModelParams:
    """Draw embeddings i.i.d. normal(0, init_std); variant weights use std 1/sqrt(fan_in)."""
    if min(n_users, n_groups, n_items) <= 0:
        raise ValueError("node counts must be positive")
    rng = make_rng(seed)
    d = hp.d
    E = rng.normal(0.0, hp.init_std, size=(n_users + n_groups + n_items, d))
    C_g = rng.normal(0.0, hp.init_std, size=(n_groups, d))
    C_i = rng.normal(0.0, hp.init_std, size=(n_items, d))
    weights = {name: rng.normal(0.0, 1.0 / np.sqrt(shape[1]), size=shape) for name, shape in variant_weight_shapes(hp).items()}
    return ModelParams(E, C_g, C_i, n_users, n_groups, n_items, weights)


def active_parameter_names(params: ModelParams, hp: HyperParams) -> list[str]:
    """Trainable matrices that the forward pass actually reads."""
    names = ["E"]
    if hp.pa_mode.uses_groups:
        names.append("C_g")
    if hp.pa_mode.uses_items:
        names.append("C_i")
    names.extend(sorted(variant_weight_shapes(hp)))
    return names


# ---------------------------------------------------------------------------
# single-node building blocks


def partition(e: np.ndarray, variant: Partition | str = Partition.SPLIT, weights: Sequence[np.ndarray] | None = None):
    """Split embeddings (last axis) into two branches."""
    variant = Partition(variant)
    e = np.asarray(e, dtype=np.float64)
    if variant is Partition.SPLIT:
        d = e.shape[-1]
        if d % 2:
            raise ValueError(f"cannot split odd dimension {d}")
        return e[..., : d // 2], e[..., d // 2 :]
    if weights is None:
        raise ValueError("linear partition needs two weight matrices")
    w_a, w_b = weights
    if w_a.shape[1] != e.shape[-1] or w_b.shape[1] != e.shape[-1]:
        raise ValueError("partition weight / embedding dimension mismatch")
    return e @ w_a.T, e @ w_b.T


def aggregate(
    vectors,
    variant: Aggregation | str = Aggregation.MEAN,
    dim: int | None = None,
    center_degree: int | None = None,
    neighbor_degrees: Sequence[int] | None = None,
) -> np.ndarray:
    """Combine neighbor branch vectors into one message.

    ``SYM_NORM`` weights neighbor ``j`` by ``1/sqrt(deg(center) * deg(j))``;
    ``center_degree`` defaults to the number of vectors and
    ``neighbor_degrees`` to all ones.
    """
    variant = Aggregation(variant)
    vecs = np.asarray(vectors, dtype=np.float64)
    if vecs.size == 0:
        if dim is None:
            raise ValueError("dim is required for an empty neighbor list")
        return np.zeros(dim)
    vecs = vecs.reshape(len(vecs), -1)
    if dim is not None and vecs.shape[1] != dim:
        raise ValueError(f"expected vectors of dim {dim}, got {vecs.shape[1]}")
    if variant is Aggregation.SUM:
        return vecs.sum(axis=0)
    if variant is Aggregation.MEAN:
        return vecs.mean(axis=0)
    deg_c = len(vecs) if center_degree is None else center_degree
    deg_n = np.ones(len(vecs)) if neighbor_degrees is None else np.asarray(neighbor_degrees, dtype=np.float64)
    return (vecs / np.sqrt(deg_c * deg_n)[:, None]).sum(axis=0)


def merge(h_a: np.ndarray, h_b: np.ndarray, variant: Merge | str = Merge.CONCAT, weights: Sequence[np.ndarray] | None = None):
    """Recombine two half-width messages into a full-width embedding."""
    variant = Merge(variant)
    h_a, h_b = np.asarray(h_a, dtype=np.float64), np.asarray(h_b, dtype=np.float64)
    if h_a.shape != h_b.shape:
        raise ValueError(f"branch shape mismatch {h_a.shape} vs {h_b.shape}")
    cat = np.concatenate([h_a, h_b], axis=-1)
    if variant is Merge.CONCAT:
        return cat
    if variant is Merge.FC_BEFORE:
        (w,) = weights
        return cat @ w.T
    w_a, w_b = weights
    return np.concatenate([h_a @ w_a.T, h_b @ w_b.T], axis=-1)


def score(e_u: np.ndarray, e_g: np.ndarray) -> float:
    e_u, e_g = np.asarray(e_u, dtype=np.float64), np.asarray(e_g, dtype=np.float64)
    if e_u.shape != e_g.shape:
        raise ValueError(f"dimension mismatch {e_u.shape} vs {e_g.shape}")
    return float(e_u @ e_g)


# ---------------------------------------------------------------------------
# factorized attention


def softmax(x: np.ndarray, axis: int) -> np.ndarray:
    z = x - x.max(axis=axis, keepdims=True)
    np.exp(z, out=z)
    z /= z.sum(axis=axis, keepdims=True)
    return z


def _softmax_backward(y: np.ndarray, dy: np.ndarray, axis: int) -> np.ndarray:
    return y * (dy - (dy * y).sum(axis=axis, keepdims=True))


def leaky_relu(x: np.ndarray, slope: float) -> np.ndarray:
    return np.where(x > 0, x, slope * x)


def relatedness_matrix(C: np.ndarray, transpose: bool = False) -> np.ndarray:
    """Softmax-normalized Gram matrix of contextual embeddings (rows of ``C``).

    By default ``R[m, g] = exp(c_m.c_g) / sum_k exp(c_k.c_g)``, so every
    column sums to one. With ``transpose`` every row sums to one instead.
    """
    C = np.asarray(C, dtype=np.float64)
    gram = C @ C.T
    R = softmax(gram, axis=1 if transpose else 0)
    check_finite("relatedness matrix", R)
    return R


def attention_from_adjacency(adj, R: np.ndarray, slope: float = 0.2) -> tuple[np.ndarray, np.ndarray]:
    """Row-softmax of LeakyReLU(adj @ R); also returns the pre-activation."""
    pre = np.asarray(adj @ R)
    return softmax(leaky_relu(pre, slope), axis=1), pre


def attention_weights(graph: TripartiteGraph, R: np.ndarray, kind: str = "group", slope: float = 0.2) -> np.ndarray:
    """User-to-target attention; row ``u`` sums to one over all targets."""
    adj = {"group": graph.X, "item": graph.Y}[kind]
    if R.shape != (adj.shape[1], adj.shape[1]):
        raise ValueError(f"relatedness matrix must be {adj.shape[1]}x{adj.shape[1]}")
    return attention_from_adjacency(adj, R, slope)[0]


def propagation_augmentation(
    user_group_part: np.ndarray,
    user_item_part: np.ndarray,
    group_user_part: np.ndarray,
    item_user_part: np.ndarray,
    A_g: np.ndarray | None,
    A_i: np.ndarray | None,
    beta: float,
    pa_mode: PAMode | str = PAMode.FULL,
) -> tuple[np.ndarray, np.ndarray]:
    """Add ``beta * A @ partition`` to the user branches selected by ``pa_mode``."""
    pa_mode = PAMode(pa_mode)
    if not 0.0 <= beta <= 1.0:
        raise ValueError(f"beta must lie in [0, 1], got {beta}")
    ug, ui = user_group_part, user_item_part
    if pa_mode.uses_groups:
        ug = ug + beta * (A_g @ group_user_part)
    if pa_mode.uses_items:
        ui = ui + beta * (A_i @ item_user_part)
    return ug, ui


# ---------------------------------------------------------------------------
# whole-graph propagation


def _normalize(adj: sp.csr_matrix, variant: Aggregation) -> sp.csr_matrix:
    if variant is Aggregation.SUM:
        return adj.tocsr()
    deg_c = np.asarray(adj.sum(axis=1)).ravel()
    with np.errstate(divide="ignore"):
        if variant is Aggregation.MEAN:
            inv_c = np.where(deg_c > 0, 1.0 / deg_c, 0.0)
            return sp.diags(inv_c) @ adj
        deg_n = np.asarray(adj.sum(axis=0)).ravel()
        inv_c = np.where(deg_c > 0, deg_c ** -0.5, 0.0)
        inv_n = np.where(deg_n > 0, deg_n ** -0.5, 0.0)
    return (sp.diags(inv_c) @ adj @ sp.diags(inv_n)).tocsr()


class GraphOperators:
    """Normalized aggregation operators for one graph and aggregation mode.

    ``ops[(center, neighbor)]`` maps the neighbor-side branch matrix to the
    center-side message matrix; ``ops_t`` holds the transposes for backprop.
    """

    def __init__(self, graph: TripartiteGraph, variant: Aggregation | str = Aggregation.MEAN):
        variant = Aggregation(variant)
        self.graph = graph
        self.variant = variant
        adj = {
            ("user", "group"): graph.X, ("user", "item"): graph.Y,
            ("group", "user"): graph.Xt, ("group", "item"): graph.Z,
            ("item", "user"): graph.Yt, ("item", "group"): graph.Zt,
        }
        self.ops = {k: _normalize(a, variant).tocsr() for k, a in adj.items()}
        self.ops_t = {k: m.T.tocsr() for k, m in self.ops.items()}


@dataclass
class ForwardTrace:
    hp: HyperParams
    layers: list[dict] = field(default_factory=list)
    pa: dict = field(default_factory=dict)
    params_id: int = 0
    params_version: tuple = ()
    ops: "GraphOperators | None" = None


def _fingerprint(params: ModelParams) -> tuple:
    return tuple((k, v.ctypes.data, float(v.reshape(-1)[0]) if v.size else 0.0) for k, v in params.arrays().items())


def split_nodes(params: ModelParams, H: np.ndarray) -> dict[str, np.ndarray]:
    return {t: H[s] for t, s in params.node_slices().items()}


def _part_weights(params: ModelParams, hp: HyperParams, layer: int, t: str):
    if hp.partition is Partition.SPLIT:
        return None
    a, b = BRANCHES[t]
    return params.weights[f"part{layer}_{t}_{a}"], params.weights[f"part{layer}_{t}_{b}"]


def _merge_weights(params: ModelParams, hp: HyperParams, layer: int, t: str):
    if hp.merge is Merge.CONCAT:
        return None
    if hp.merge is Merge.FC_BEFORE:
        return (params.weights[f"merge{layer}_{t}"],)
    return params.weights[f"merge{layer}_{t}_a"], params.weights[f"merge{layer}_{t}_b"]


def compute_attention(params: ModelParams, graph: TripartiteGraph, hp: HyperParams) -> dict:
    """R and A matrices for the PA branches enabled by ``hp.pa_mode``."""
    out: dict = {}
    if hp.pa_mode.uses_groups:
        R = relatedness_matrix(params.C_g, hp.relatedness_transpose)
        A, pre = attention_from_adjacency(graph.X, R, hp.leaky_slope)
        out["group"] = {"R": R, "A": A, "pre": pre}
    if hp.pa_mode.uses_items:
        R = relatedness_matrix(params.C_i, hp.relatedness_transpose)
        A, pre = attention_from_adjacency(graph.Y, R, hp.leaky_slope)
        out["item"] = {"R": R, "A": A, "pre": pre}
    return out


def conv_layer(
    H: Mapping[str, np.ndarray],
    ops: GraphOperators,
    hp: HyperParams,
    params: ModelParams,
    layer: int,
    attention: Mapping | None = None,
) -> tuple[dict[str, np.ndarray], dict]:
    """One partition -> aggregate -> merge step over every node.

    When ``attention`` is given, the user branches are PA-augmented before
    aggregation (first layer only).
    """
    parts = {}
    for t in NODE_TYPES:
        a, b = BRANCHES[t]
        pa_, pb_ = partition(H[t], hp.partition, _part_weights(params, hp, layer, t))
        parts[(t, a)], parts[(t, b)] = pa_, pb_
    sent = dict(parts)
    if attention is not None:
        sent[("user", "group")], sent[("user", "item")] = propagation_augmentation(
            parts[("user", "group")], parts[("user", "item")],
            parts[("group", "user")], parts[("item", "user")],
            attention.get("group", {}).get("A"), attention.get("item", {}).get("A"),
            hp.beta, hp.pa_mode,
        )
    msgs, out = {}, {}
    for t in NODE_TYPES:
        a, b = BRANCHES[t]
        # center t receives neighbor a's branch addressed to t
        msgs[(t, a)] = ops.ops[(t, a)] @ sent[(a, t)]
        msgs[(t, b)] = ops.ops[(t, b)] @ sent[(b, t)]
        out[t] = merge(msgs[(t, a)], msgs[(t, b)], hp.merge, _merge_weights(params, hp, layer, t))
    cache = {"H_in": dict(H), "parts": parts, "sent": sent, "msgs": msgs}
    return out, cache


def forward(
    params: ModelParams,
    graph: TripartiteGraph,
    hp: HyperParams,
    ops: GraphOperators | None = None,
) -> tuple[dict[str, np.ndarray], ForwardTrace]:
    """PA once on the layer-0 user branches, then ``hp.n_layers`` convolutions.

    Returns the final-layer embeddings keyed by node type plus the trace
    needed by :func:`backward`.
    """
    if ops is None or ops.graph is not graph or ops.variant is not hp.aggregation:
        ops = GraphOperators(graph, hp.aggregation)
    if params.d != hp.d:
        raise ValueError(f"params have d={params.d}, hyperparameters say d={hp.d}")
    trace = ForwardTrace(hp=hp, params_id=id(params), params_version=_fingerprint(params))
    attention = compute_attention(params, graph, hp) if hp.pa_mode is not PAMode.NO_PA else None
    trace.pa = attention or {}
    H = split_nodes(params, params.E)
    for layer in range(1, hp.n_layers + 1):
        H, cache = conv_layer(H, ops, hp, params, layer, attention if layer == 1 else None)
        trace.layers.append(cache)
    trace.ops = ops
    return H, trace


def backward(
    params: ModelParams,
    trace: ForwardTrace,
    d_user: np.ndarray,
    d_group: np.ndarray,
    d_item: np.ndarray | None = None,
) -> dict[str, np.ndarray]:
    """Gradients of a scalar loss w.r.t. every parameter matrix.

    ``d_user``/``d_group``/``d_item`` are the loss gradients w.r.t. the
    final-layer embeddings returned by :func:`forward`.
    """
    if trace.params_id != id(params) or trace.params_version != _fingerprint(params):
        raise ValueError("stale trace: parameters changed since the forward pass")
    hp = trace.hp
    ops: GraphOperators = trace.ops
    grads = {name: np.zeros_like(arr) for name, arr in params.arrays().items()}
    if d_item is None:
        d_item = np.zeros((params.n_items, params.d))
    dH = {"user": d_user, "group": d_group, "item": d_item}
    h = hp.d // 2

    for layer in range(hp.n_layers, 0, -1):
        cache = trace.layers[layer - 1]
        d_msgs = {}
        for t in NODE_TYPES:
            a, b = BRANCHES[t]
            ma, mb = cache["msgs"][(t, a)], cache["msgs"][(t, b)]
            g = dH[t]
            if hp.merge is Merge.CONCAT:
                d_msgs[(t, a)], d_msgs[(t, b)] = g[:, :h], g[:, h:]
            elif hp.merge is Merge.FC_BEFORE:
                name = f"merge{layer}_{t}"
                w = params.weights[name]
                grads[name] += g.T @ np.concatenate([ma, mb], axis=1)
                dcat = g @ w
                d_msgs[(t, a)], d_msgs[(t, b)] = dcat[:, :h], dcat[:, h:]
            else:
                wa, wb = params.weights[f"merge{layer}_{t}_a"], params.weights[f"merge{layer}_{t}_b"]
                grads[f"merge{layer}_{t}_a"] += g[:, :h].T @ ma
                grads[f"merge{layer}_{t}_b"] += g[:, h:].T @ mb
                d_msgs[(t, a)], d_msgs[(t, b)] = g[:, :h] @ wa, g[:, h:] @ wb

        # message for (center t, neighbor n) was ops[(t, n)] @ sent[(n, t)]
        d_sent = {}
        for (t, n), dm in d_msgs.items():
            d_sent[(n, t)] = ops.ops_t[(t, n)] @ dm
        d_parts = dict(d_sent)

        if layer == 1 and trace.pa:
            for kind, src in (("group", "group"), ("item", "item")):
                if kind not in trace.pa:
                    continue
                pa = trace.pa[kind]
                d_aug = d_sent[("user", kind)]
                target_part = cache["parts"][(src, "user")]
                d_parts[(src, "user")] = d_parts[(src, "user")] + hp.beta * (pa["A"].T @ d_aug)
                dA = hp.beta * (d_aug @ target_part.T)
                d_pre = _softmax_backward(pa["A"], dA, axis=1)
                d_pre *= np.where(pa["pre"] > 0, 1.0, hp.leaky_slope)
                adj = ops.graph.X if kind == "group" else ops.graph.Y
                dR = np.asarray(adj.T @ d_pre)
                dS = _softmax_backward(pa["R"], dR, axis=1 if hp.relatedness_transpose else 0)
                C = params.C_g if kind == "group" else params.C_i
                grads["C_g" if kind == "group" else "C_i"] += (dS + dS.T) @ C

        new_dH = {}
        for t in NODE_TYPES:
            a, b = BRANCHES[t]
            da, db = d_parts[(t, a)], d_parts[(t, b)]
            if hp.partition is Partition.SPLIT:
                new_dH[t] = np.concatenate([da, db], axis=1)
            else:
                wa = params.weights[f"part{layer}_{t}_{a}"]
                wb = params.weights[f"part{layer}_{t}_{b}"]
                x = cache["H_in"][t]
                grads[f"part{layer}_{t}_{a}"] += da.T @ x
                grads[f"part{layer}_{t}_{b}"] += db.T @ x
                new_dH[t] = da @ wa + db @ wb
        dH = new_dH

    sl = params.node_slices()
    for t in NODE_TYPES:
        grads["E"][sl[t]] += dH[t]
    return grads
