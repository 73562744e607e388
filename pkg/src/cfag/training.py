"""BPR training loop with Adam and validation-based early stopping."""

from __future__ import annotations

import csv
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator

import numpy as np

from .evaluation import evaluate
from .graph import DatasetSplit, TripartiteGraph
from .model import (
    GraphOperators,
    HyperParams,
    ModelParams,
    active_parameter_names,
    backward,
    forward,
    init_params,
)
from .numeric import AdamState, NumericError, adam_step, check_finite, make_rng

logger = logging.getLogger(__name__)

LOG_FIELDS = ("epoch", "loss", "val_recall@10", "val_ndcg@10", "wall_ms")


@dataclass(frozen=True)
class BprTriple:
    user_id: int
    pos_group_id: int
    neg_group_id: int


@dataclass
class BprBatch:
    users: np.ndarray
    pos: np.ndarray
    neg: np.ndarray

    def __len__(self) -> int:
        return len(self.users)

    def __iter__(self) -> Iterator[BprTriple]:
        for u, p, n in zip(self.users, self.pos, self.neg):
            yield BprTriple(int(u), int(p), int(n))


@dataclass(frozen=True)
class TrainConfig:
    epochs_max: int = 500
    patience: int = 10
    eval_every: int = 1
    seed: int = 2023
    monitor_k: int = 10
    threads: int = 1

    def __post_init__(self):
        if self.patience < 1 or self.eval_every < 1 or self.epochs_max < 1:
            raise ValueError("patience, eval_every and epochs_max must be >= 1")


def sample_triples(train: TripartiteGraph, batch_size: int, rng) -> BprBatch:
    """Uniform positive edges, one uniform non-member negative each.

    Users who already belong to every group cannot yield a negative and are
    never drawn.
    """
    rng = make_rng(rng)
    n_g = train.n_groups
    deg = train.user_group_degree()
    edges = train.ug[deg[train.ug[:, 0]] < n_g]
    if len(edges) == 0:
        raise ValueError("no user has both a training group and a non-member group")
    picked = edges[rng.integers(0, len(edges), size=batch_size)]
    users, pos = picked[:, 0].copy(), picked[:, 1].copy()
    known = train.ug[:, 0] * n_g + train.ug[:, 1]  # sorted: ug is lexicographically unique
    neg = rng.integers(0, n_g, size=batch_size)
    bad = np.isin(users * n_g + neg, known, assume_unique=False)
    while bad.any():
        neg[bad] = rng.integers(0, n_g, size=int(bad.sum()))
        bad[bad] = np.isin(users[bad] * n_g + neg[bad], known)
    return BprBatch(users, pos, neg)


def squared_norm(params: ModelParams, names) -> float:
    arrays = params.arrays()
    return float(sum(np.sum(arrays[n] * arrays[n]) for n in names))


def bpr_loss(scores_pos: np.ndarray, scores_neg: np.ndarray, params: ModelParams | None = None, reg: float = 0.0, names=None) -> float:
    """Mean ``-log sigmoid(pos - neg)`` plus ``reg`` times the squared L2 norm.

    ``names`` selects which parameter matrices are regularized (all by
    default).
    """
    scores_pos, scores_neg = np.asarray(scores_pos, dtype=np.float64), np.asarray(scores_neg, dtype=np.float64)
    if scores_pos.shape != scores_neg.shape:
        raise ValueError("positive and negative score arrays differ in length")
    check_finite("scores", scores_pos)
    check_finite("scores", scores_neg)
    loss = float(np.mean(np.logaddexp(0.0, -(scores_pos - scores_neg))))
    if reg and params is not None:
        loss += reg * squared_norm(params, names if names is not None else list(params.arrays()))
    return loss


def loss_and_grads(
    params: ModelParams,
    graph: TripartiteGraph,
    hp: HyperParams,
    batch: BprBatch,
    ops: GraphOperators | None = None,
    upstream: float = 1.0,
) -> tuple[float, dict[str, np.ndarray]]:
    """BPR loss on ``batch`` and its gradient for every active parameter."""
    H, trace = forward(params, graph, hp, ops)
    eu, eg = H["user"], H["group"]
    u_emb = eu[batch.users]
    diff_emb = eg[batch.pos] - eg[batch.neg]
    margin = np.einsum("bd,bd->b", u_emb, diff_emb)
    names = active_parameter_names(params, hp)
    loss = bpr_loss(margin, np.zeros_like(margin), params, hp.reg, names)

    # d/dx of mean softplus(-x) is -sigmoid(-x) / B
    coef = -upstream * 0.5 * (1.0 - np.tanh(0.5 * margin)) / len(batch)
    d_user = np.zeros_like(eu)
    d_group = np.zeros_like(eg)
    np.add.at(d_user, batch.users, coef[:, None] * diff_emb)
    np.add.at(d_group, batch.pos, coef[:, None] * u_emb)
    np.add.at(d_group, batch.neg, -coef[:, None] * u_emb)
    grads = backward(params, trace, d_user, d_group)
    arrays = params.arrays()
    out = {}
    for n in names:
        g = grads[n]
        if hp.reg:
            g = g + upstream * 2.0 * hp.reg * arrays[n]
        out[n] = g
    return loss, out


def train_step(
    params: ModelParams,
    batch: BprBatch,
    graph: TripartiteGraph,
    hp: HyperParams,
    adam_states: dict[str, AdamState],
    ops: GraphOperators | None = None,
) -> float:
    """One forward/backward pass and one Adam update per active matrix.

    Returns the loss before the update.
    """
    loss, grads = loss_and_grads(params, graph, hp, batch, ops)
    if not math.isfinite(loss):
        raise NumericError("training loss is not finite")
    arrays = params.arrays()
    for name, g in grads.items():
        if name not in adam_states:
            adam_states[name] = AdamState.zeros_like(arrays[name])
        adam_step(arrays[name], g, adam_states[name], hp.lr)
    return loss


@dataclass
class FitResult:
    params: ModelParams
    log: list[dict] = field(default_factory=list)
    best_epoch: int = 0
    best_metric: float = float("nan")


def fit(
    split: DatasetSplit,
    hp: HyperParams,
    config: TrainConfig,
    params: ModelParams | None = None,
) -> FitResult:
    """Train with early stopping on validation NDCG@``monitor_k``.

    Without validation edges training runs for ``epochs_max`` epochs and the
    final parameters are returned.
    """
    graph = split.train
    rng = make_rng(config.seed)
    if params is None:
        params = init_params(hp, graph.n_users, graph.n_groups, graph.n_items, rng)
    ops = GraphOperators(graph, hp.aggregation)
    adam: dict[str, AdamState] = {}
    has_val = len(split.validation_ug) > 0
    n_edges = len(graph.ug)
    k = config.monitor_k

    best = FitResult(params.copy())
    best_metric = -math.inf
    bad_evals = 0
    log: list[dict] = []
    for epoch in range(1, config.epochs_max + 1):
        start = time.perf_counter()
        losses, sizes = [], []
        remaining = n_edges
        while remaining > 0:
            size = min(hp.batch_size, remaining)
            batch = sample_triples(graph, size, rng)
            losses.append(train_step(params, batch, graph, hp, adam, ops))
            sizes.append(size)
            remaining -= size
        row = {"epoch": epoch, "loss": float(np.average(losses, weights=sizes)), "val_recall@10": "", "val_ndcg@10": ""}
        stop = False
        if has_val and epoch % config.eval_every == 0:
            report = evaluate(params, split, hp, cutoffs=sorted({10, k}), on="validation", threads=config.threads, ops=ops)
            row["val_recall@10"] = report.metrics["recall@10"]
            row["val_ndcg@10"] = report.metrics["ndcg@10"]
            metric = report.metrics[f"ndcg@{k}"]
            if metric > best_metric:
                best_metric = metric
                best = FitResult(params.copy(), best_epoch=epoch, best_metric=metric)
                bad_evals = 0
            else:
                bad_evals += 1
                stop = bad_evals >= config.patience
        row["wall_ms"] = round((time.perf_counter() - start) * 1000.0, 3)
        log.append(row)
        logger.info("epoch %d loss %.5f val_ndcg@10 %s", epoch, row["loss"], row["val_ndcg@10"])
        if stop:
            break
    if not has_val:
        best = FitResult(params.copy(), best_epoch=len(log))
    best.log = log
    return best


def write_log(log: list[dict], path: str | Path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.DictWriter(fh, fieldnames=LOG_FIELDS, lineterminator="\n")
        writer.writeheader()
        for row in log:
            writer.writerow({k: row.get(k, "") for k in LOG_FIELDS})
