"""Full-ranking top-K evaluation: Recall@K and binary-relevance NDCG@K."""

from __future__ import annotations

import csv
import json
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .graph import DatasetSplit
from .model import GraphOperators, HyperParams, ModelParams, forward
from .numeric import NumericError

DEFAULT_CUTOFFS = (10, 20)


def rank_groups(user_emb: np.ndarray, group_embs: np.ndarray, exclude=()) -> np.ndarray:
    """Candidate group ids by descending inner-product score.

    Groups in ``exclude`` are dropped; ties go to the lower id.
    """
    scores = np.asarray(group_embs, dtype=np.float64) @ np.asarray(user_emb, dtype=np.float64)
    return rank_from_scores(scores, exclude)


def rank_from_scores(scores: np.ndarray, exclude=()) -> np.ndarray:
    scores = np.asarray(scores, dtype=np.float64)
    keep = np.ones(len(scores), dtype=bool)
    keep[np.fromiter(exclude, dtype=np.int64)] = False
    candidates = np.flatnonzero(keep)
    if len(candidates) == 0:
        raise ValueError("no candidate groups left after exclusion")
    # stable sort on negated scores keeps ascending ids within ties
    return candidates[np.argsort(-scores[candidates], kind="stable")]


def recall_at_k(ranked: Sequence[int], test: Sequence[int], k: int) -> float:
    test = set(int(t) for t in test)
    if not test:
        raise ValueError("recall is undefined for an empty test set")
    hits = sum(1 for g in list(ranked)[:k] if int(g) in test)
    return hits / len(test)


def ndcg_at_k(ranked: Sequence[int], test: Sequence[int], k: int) -> float:
    test = set(int(t) for t in test)
    if not test:
        raise ValueError("NDCG is undefined for an empty test set")
    dcg = sum(1.0 / math.log2(r + 2) for r, g in enumerate(list(ranked)[:k]) if int(g) in test)
    idcg = sum(1.0 / math.log2(r + 2) for r in range(min(len(test), k)))
    return dcg / idcg


@dataclass
class EvalReport:
    cutoffs: tuple[int, ...]
    metrics: dict[str, float]
    users: list[dict] = field(default_factory=list)

    @property
    def n_users(self) -> int:
        return len(self.users)

    def summary(self) -> dict:
        return {"n_users": self.n_users, "cutoffs": list(self.cutoffs), "metrics": self.metrics}

    def to_json(self) -> str:
        return json.dumps(self.summary(), indent=2, sort_keys=True) + "\n"

    def write(self, path: str | Path, per_user_csv: str | Path | None = None) -> None:
        Path(path).write_text(self.to_json(), encoding="utf-8")
        if per_user_csv is not None:
            names = metric_names(self.cutoffs)
            with open(per_user_csv, "w", newline="", encoding="utf-8") as fh:
                writer = csv.writer(fh, lineterminator="\n")
                writer.writerow(["user_id", *names, "n_test"])
                for row in self.users:
                    writer.writerow([row["user_id"], *(repr(row[n]) for n in names), row["n_test"]])


def metric_names(cutoffs: Sequence[int]) -> list[str]:
    return [f"recall@{k}" for k in cutoffs] + [f"ndcg@{k}" for k in cutoffs]


def _user_rows(scores, users, targets, excludes, cutoffs) -> list[dict]:
    k_max = max(cutoffs)
    rows = []
    for u in users:
        ranked = rank_from_scores(scores[u], excludes[u])[:k_max]
        row = {"user_id": int(u), "n_test": int(len(targets[u]))}
        for k in cutoffs:
            row[f"recall@{k}"] = recall_at_k(ranked, targets[u], k)
        for k in cutoffs:
            row[f"ndcg@{k}"] = ndcg_at_k(ranked, targets[u], k)
        rows.append(row)
    return rows


def evaluate_scores(
    scores: np.ndarray,
    targets: Sequence[np.ndarray],
    excludes: Sequence[np.ndarray],
    cutoffs: Sequence[int] = DEFAULT_CUTOFFS,
    threads: int = 1,
) -> EvalReport:
    """Rank every user's candidates from a dense ``(n_users, n_groups)`` score matrix.

    Users with no targets are skipped. Workers split the user list into
    contiguous chunks and results are concatenated in user order.
    """
    scores = np.asarray(scores, dtype=np.float64)
    if np.isnan(scores).any():
        raise NumericError("NaN in score matrix")
    cutoffs = tuple(int(k) for k in cutoffs)
    users = [u for u in range(len(targets)) if len(targets[u])]
    if not users:
        raise ValueError("no users with a non-empty target set")
    threads = max(1, int(threads))
    if threads == 1:
        rows = _user_rows(scores, users, targets, excludes, cutoffs)
    else:
        chunks = [c.tolist() for c in np.array_split(np.array(users), threads) if len(c)]
        with ThreadPoolExecutor(max_workers=threads) as pool:
            parts = pool.map(lambda c: _user_rows(scores, c, targets, excludes, cutoffs), chunks)
        rows = [r for part in parts for r in part]
    metrics = {name: float(np.mean([r[name] for r in rows])) for name in metric_names(cutoffs)}
    return EvalReport(cutoffs, metrics, rows)


def _merge_excludes(*lists: Sequence[np.ndarray]) -> list[np.ndarray]:
    return [np.unique(np.concatenate(parts)).astype(np.int64) for parts in zip(*lists)]


def final_scores(params: ModelParams, split: DatasetSplit, hp: HyperParams, ops: GraphOperators | None = None) -> np.ndarray:
    H, _ = forward(params, split.train, hp, ops)
    return H["user"] @ H["group"].T


def evaluate(
    params: ModelParams,
    split: DatasetSplit,
    hp: HyperParams,
    cutoffs: Sequence[int] = DEFAULT_CUTOFFS,
    on: str = "test",
    threads: int = 1,
    ops: GraphOperators | None = None,
    scores: np.ndarray | None = None,
) -> EvalReport:
    """Evaluate on the ``"test"`` or ``"validation"`` user-group edges.

    Train groups are always excluded from the candidates; for test
    evaluation the validation groups are excluded as well.
    """
    if scores is None:
        scores = final_scores(params, split, hp, ops)
    train = [split.train.groups_of_user(u) for u in range(split.train.n_users)]
    if on == "test":
        return evaluate_scores(scores, split.test_by_user(), _merge_excludes(train, split.validation_by_user()), cutoffs, threads)
    if on == "validation":
        return evaluate_scores(scores, split.validation_by_user(), train, cutoffs, threads)
    raise ValueError(f"unknown evaluation target {on!r}")
