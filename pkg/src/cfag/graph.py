"""Social tripartite graph over users, groups and items.

Edge lists are TAB-separated dense integer id pairs, one edge per line::

    # n_src=1269 n_dst=972
    0	17
    0	203

Lines starting with ``#`` are comments; a comment of the form
``n_src=<int> n_dst=<int>`` overrides the id-space sizes that would otherwise
be inferred as ``max id + 1``.
"""

from __future__ import annotations

import json
import math
import re
from dataclasses import dataclass
from enum import Enum
from pathlib import Path

import numpy as np
import scipy.sparse as sp

from .numeric import make_rng

MAX_ID = 2**31 - 1
_HEADER_RE = re.compile(r"n_src\s*=\s*(\d+)\s+n_dst\s*=\s*(\d+)")


class DataError(ValueError):
    """Malformed or inconsistent input data."""


class Relation(str, Enum):
    UG = "UG"
    UI = "UI"
    GI = "GI"


@dataclass(frozen=True)
class EdgeList:
    edges: np.ndarray  # (n, 2) int64, sorted, unique
    n_src: int
    n_dst: int

    def __len__(self) -> int:
        return len(self.edges)

    def as_set(self) -> set[tuple[int, int]]:
        return {(int(a), int(b)) for a, b in self.edges}


def _dedup(edges: np.ndarray) -> np.ndarray:
    edges = np.asarray(edges, dtype=np.int64).reshape(-1, 2)
    if len(edges) == 0:
        return edges
    return np.unique(edges, axis=0)


def load_edge_list(path: str | Path, relation: Relation | str = Relation.UG) -> EdgeList:
    """Read a TAB-separated edge list, deduplicating repeated edges."""
    relation = Relation(relation)
    path = Path(path)
    header: tuple[int, int] | None = None
    rows: list[tuple[int, int]] = []
    with path.open("r", encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.strip()
            if not line:
                continue
            if line.startswith("#"):
                m = _HEADER_RE.search(line)
                if m:
                    header = (int(m.group(1)), int(m.group(2)))
                continue
            fields = line.split("\t")
            if len(fields) != 2 or not (fields[0].isdigit() and fields[1].isdigit()):
                raise DataError(f"{path}:{lineno}: expected '<src>\\t<dst>' non-negative integers, got {raw.rstrip()!r}")
            src, dst = int(fields[0]), int(fields[1])
            if src > MAX_ID or dst > MAX_ID:
                raise DataError(f"{path}:{lineno}: id overflow")
            rows.append((src, dst))
    if not rows:
        raise DataError(f"{path}: no edges ({relation.value})")
    edges = _dedup(np.array(rows, dtype=np.int64))
    n_src = int(edges[:, 0].max()) + 1
    n_dst = int(edges[:, 1].max()) + 1
    if header is not None:
        if header[0] < n_src or header[1] < n_dst:
            raise DataError(f"{path}: id overflow, header declares n_src={header[0]} n_dst={header[1]}")
        n_src, n_dst = header
    return EdgeList(edges, n_src, n_dst)


def write_edge_list(path: str | Path, edges: np.ndarray, n_src: int | None = None, n_dst: int | None = None) -> None:
    lines = []
    if n_src is not None and n_dst is not None:
        lines.append(f"# n_src={n_src} n_dst={n_dst}")
    lines.extend(f"{a}\t{b}" for a, b in np.asarray(edges, dtype=np.int64).reshape(-1, 2))
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def load_vocabulary(path: str | Path) -> dict[str, int]:
    """Read an ``<original_id>\\t<dense_id>`` vocabulary file."""
    vocab: dict[str, int] = {}
    with Path(path).open("r", encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.rstrip("\n")
            if not line.strip() or line.startswith("#"):
                continue
            fields = line.split("\t")
            if len(fields) != 2 or not fields[1].isdigit():
                raise DataError(f"{path}:{lineno}: expected '<original_id>\\t<dense_id>'")
            vocab[fields[0]] = int(fields[1])
    if sorted(vocab.values()) != list(range(len(vocab))):
        raise DataError(f"{path}: dense ids must cover 0..{len(vocab) - 1} exactly once")
    return vocab


def _adjacency(edges: np.ndarray, n_rows: int, n_cols: int) -> sp.csr_matrix:
    data = np.ones(len(edges), dtype=np.float64)
    return sp.csr_matrix((data, (edges[:, 0], edges[:, 1])), shape=(n_rows, n_cols))


class TripartiteGraph:
    """Immutable user/group/item graph with CSR neighbor indexes.

    ``X`` (users x groups), ``Y`` (users x items) and ``Z`` (groups x items)
    are 0/1 CSR matrices; their transposes are kept in CSR form as well so
    that neighbor lookup is O(degree) from either side.
    """

    def __init__(self, n_users: int, n_groups: int, n_items: int, ug, ui, gi):
        self.n_users = int(n_users)
        self.n_groups = int(n_groups)
        self.n_items = int(n_items)
        self.ug = _dedup(ug)
        self.ui = _dedup(ui)
        self.gi = _dedup(gi)
        for name, edges, n_a, n_b in (
            ("user-group", self.ug, self.n_users, self.n_groups),
            ("user-item", self.ui, self.n_users, self.n_items),
            ("group-item", self.gi, self.n_groups, self.n_items),
        ):
            if len(edges) and (edges.min() < 0 or edges[:, 0].max() >= n_a or edges[:, 1].max() >= n_b):
                raise DataError(f"{name} edge id out of range ({n_a} x {n_b})")
            edges.setflags(write=False)
        self.X = _adjacency(self.ug, self.n_users, self.n_groups)
        self.Y = _adjacency(self.ui, self.n_users, self.n_items)
        self.Z = _adjacency(self.gi, self.n_groups, self.n_items)
        self.Xt = self.X.T.tocsr()
        self.Yt = self.Y.T.tocsr()
        self.Zt = self.Z.T.tocsr()

    @property
    def ug_edges(self) -> set[tuple[int, int]]:
        return {(int(a), int(b)) for a, b in self.ug}

    @property
    def ui_edges(self) -> set[tuple[int, int]]:
        return {(int(a), int(b)) for a, b in self.ui}

    @property
    def gi_edges(self) -> set[tuple[int, int]]:
        return {(int(a), int(b)) for a, b in self.gi}

    def _lookup(self, mat: sp.csr_matrix, idx: int) -> np.ndarray:
        return mat.indices[mat.indptr[idx] : mat.indptr[idx + 1]]

    def groups_of_user(self, u: int) -> np.ndarray:
        return self._lookup(self.X, u)

    def items_of_user(self, u: int) -> np.ndarray:
        return self._lookup(self.Y, u)

    def users_of_group(self, g: int) -> np.ndarray:
        return self._lookup(self.Xt, g)

    def items_of_group(self, g: int) -> np.ndarray:
        return self._lookup(self.Z, g)

    def users_of_item(self, i: int) -> np.ndarray:
        return self._lookup(self.Yt, i)

    def groups_of_item(self, i: int) -> np.ndarray:
        return self._lookup(self.Zt, i)

    def user_group_degree(self) -> np.ndarray:
        return np.diff(self.X.indptr)

    def with_ug(self, ug: np.ndarray) -> "TripartiteGraph":
        """Same node sets and UI/GI edges, different user-group edges."""
        return TripartiteGraph(self.n_users, self.n_groups, self.n_items, ug, self.ui, self.gi)

    def summary(self) -> dict[str, int]:
        return {
            "n_users": self.n_users,
            "n_groups": self.n_groups,
            "n_items": self.n_items,
            "n_ug_edges": len(self.ug),
            "n_ui_edges": len(self.ui),
            "n_gi_edges": len(self.gi),
        }

    def __repr__(self) -> str:
        s = self.summary()
        return "TripartiteGraph(" + ", ".join(f"{k}={v}" for k, v in s.items()) + ")"


def load_dataset(
    ug_path: str | Path,
    ui_path: str | Path,
    gi_path: str | Path,
    n_users: int | None = None,
    n_groups: int | None = None,
    n_items: int | None = None,
) -> TripartiteGraph:
    """Assemble a graph from three edge-list files, reconciling id spaces."""
    ug = load_edge_list(ug_path, Relation.UG)
    ui = load_edge_list(ui_path, Relation.UI)
    gi = load_edge_list(gi_path, Relation.GI)
    sizes = {
        "n_users": max(ug.n_src, ui.n_src),
        "n_groups": max(ug.n_dst, gi.n_src),
        "n_items": max(ui.n_dst, gi.n_dst),
    }
    for key, given in (("n_users", n_users), ("n_groups", n_groups), ("n_items", n_items)):
        if given is not None:
            if given < sizes[key]:
                raise DataError(f"{key}={given} is smaller than the ids present in the edge lists ({sizes[key]})")
            sizes[key] = given
    return TripartiteGraph(sizes["n_users"], sizes["n_groups"], sizes["n_items"], ug.edges, ui.edges, gi.edges)


@dataclass(frozen=True)
class DatasetSplit:
    train: TripartiteGraph
    validation_ug: np.ndarray
    test_ug: np.ndarray
    meta: dict

    def _by_user(self, edges: np.ndarray) -> list[np.ndarray]:
        n = self.train.n_users
        order = np.lexsort((edges[:, 1], edges[:, 0])) if len(edges) else np.zeros(0, dtype=np.int64)
        edges = edges[order]
        bounds = np.searchsorted(edges[:, 0], np.arange(n + 1)) if len(edges) else np.zeros(n + 1, dtype=np.int64)
        return [edges[bounds[u] : bounds[u + 1], 1] for u in range(n)]

    def validation_by_user(self) -> list[np.ndarray]:
        return self._by_user(self.validation_ug)

    def test_by_user(self) -> list[np.ndarray]:
        return self._by_user(self.test_ug)

    def all_ug(self) -> np.ndarray:
        return _dedup(np.vstack([self.train.ug, self.validation_ug, self.test_ug]))


def split_per_user(
    graph: TripartiteGraph,
    train_ratio: float = 0.7,
    valid_ratio: float = 0.1,
    seed: int = 0,
) -> DatasetSplit:
    """Split each user's groups into train / validation / test.

    A uniform permutation of the user's groups is cut after
    ``n_block = ceil(deg * train_ratio)`` entries; everything after the cut is
    test. ``valid_ratio`` is the share of that block moved to validation,
    ``floor(n_block * valid_ratio)``, taken from the end of the block. Every
    user therefore keeps at least one training group. UI and GI edges are
    never split.
    """
    if not 0.0 < train_ratio <= 1.0:
        raise ValueError(f"train_ratio must lie in (0, 1], got {train_ratio}")
    if not 0.0 <= valid_ratio < 1.0:
        raise ValueError(f"valid_ratio must lie in [0, 1), got {valid_ratio}")
    if len(graph.ug) == 0:
        raise DataError("graph has no user-group edges to split")
    rng = make_rng(seed)
    train, valid, test = [], [], []
    for u in range(graph.n_users):
        groups = graph.groups_of_user(u)
        deg = len(groups)
        if deg == 0:
            continue
        perm = groups[rng.permutation(deg)]
        n_block = min(deg, math.ceil(deg * train_ratio - 1e-9))
        n_valid = math.floor(n_block * valid_ratio + 1e-9)
        n_train = n_block - n_valid
        train.extend((u, int(g)) for g in perm[:n_train])
        valid.extend((u, int(g)) for g in perm[n_train:n_block])
        test.extend((u, int(g)) for g in perm[n_block:])
    meta = {
        "train_ratio": train_ratio,
        "valid_ratio": valid_ratio,
        "seed": seed,
        "n_train_ug": len(train),
        "n_validation_ug": len(valid),
        "n_test_ug": len(test),
        **{k: v for k, v in graph.summary().items() if k != "n_ug_edges"},
    }
    as_arr = lambda rows: _dedup(np.array(rows, dtype=np.int64))  # noqa: E731
    return DatasetSplit(graph.with_ug(as_arr(train)), as_arr(valid), as_arr(test), meta)


def cap_user_groups(split: DatasetSplit, k: int, seed: int = 0) -> DatasetSplit:
    """Keep a uniform random subset of at most ``k`` training groups per user."""
    if k < 1:
        raise ValueError(f"k must be >= 1, got {k}")
    rng = make_rng(seed)
    g = split.train
    kept = []
    for u in range(g.n_users):
        groups = g.groups_of_user(u)
        if len(groups) > k:
            groups = np.sort(rng.choice(groups, size=k, replace=False))
        kept.extend((u, int(x)) for x in groups)
    ug = _dedup(np.array(kept, dtype=np.int64))
    meta = dict(split.meta, cap_k=k, cap_seed=seed, n_train_ug=len(ug))
    return DatasetSplit(g.with_ug(ug), split.validation_ug, split.test_ug, meta)


def write_split(split: DatasetSplit, out_dir: str | Path) -> None:
    """Write train/validation/test UG edge lists plus a JSON metadata file."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    n_u, n_g = split.train.n_users, split.train.n_groups
    write_edge_list(out / "train_ug.tsv", split.train.ug, n_u, n_g)
    write_edge_list(out / "validation_ug.tsv", split.validation_ug, n_u, n_g)
    write_edge_list(out / "test_ug.tsv", split.test_ug, n_u, n_g)
    (out / "split.json").write_text(json.dumps(split.meta, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def read_split(out_dir: str | Path, graph: TripartiteGraph) -> DatasetSplit:
    """Inverse of :func:`write_split`; ``graph`` supplies the UI/GI edges."""
    out = Path(out_dir)

    def read(name: str) -> np.ndarray:
        text = (out / name).read_text(encoding="utf-8").split("\n")
        rows = [tuple(map(int, ln.split("\t"))) for ln in text if ln and not ln.startswith("#")]
        return _dedup(np.array(rows, dtype=np.int64))

    meta = json.loads((out / "split.json").read_text(encoding="utf-8"))
    return DatasetSplit(graph.with_ug(read("train_ug.tsv")), read("validation_ug.tsv"), read("test_ug.tsv"), meta)
