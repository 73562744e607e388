"""Planted-community tripartite graphs for smoke tests and demos.

Every node belongs to one of ``n_communities`` latent communities. Each edge
picks its endpoint inside the source's community with probability
``affinity`` and uniformly at random otherwise, with Zipf-like popularity
inside a community. Degrees follow a shifted geometric law so that most
users are sparse, as in real group-membership data.
"""

from __future__ import annotations

import argparse
from pathlib import Path

import numpy as np

from .graph import TripartiteGraph, write_edge_list
from .numeric import make_rng

# node and edge counts of the Mafengwo group-travel dataset
MAFENGWO_SHAPE = dict(n_users=1269, n_groups=972, n_items=999, n_ug=5574, n_ui=8676, n_gi=2540)


def _degrees(rng, n: int, total: int) -> np.ndarray:
    mean = max(total / n, 1.0)
    deg = 1 + rng.geometric(1.0 / mean, size=n) - 1
    deg = np.maximum(1, np.round(deg * total / max(deg.sum(), 1))).astype(np.int64)
    return deg


def _edges(rng, src_comm, dst_comm, n_dst, degrees, affinity, popularity):
    by_comm = {}
    for c in np.unique(dst_comm):
        members = np.flatnonzero(dst_comm == c)
        w = popularity[members]
        by_comm[c] = (members, w / w.sum())
    rows = []
    for s, deg in enumerate(degrees):
        members, w = by_comm.get(src_comm[s], (np.arange(n_dst), np.full(n_dst, 1.0 / n_dst)))
        k = int(min(deg, n_dst))
        inside = rng.random(k) < affinity
        picks = set()
        n_in = int(min(inside.sum(), len(members)))
        if n_in:
            picks.update(rng.choice(members, size=n_in, replace=False, p=w).tolist())
        while len(picks) < k:
            picks.add(int(rng.integers(0, n_dst)))
        rows.extend((s, d) for d in picks)
    return np.array(rows, dtype=np.int64).reshape(-1, 2)


def planted_tripartite(
    n_users: int = 300,
    n_groups: int = 200,
    n_items: int = 200,
    n_ug: int = 1300,
    n_ui: int = 2000,
    n_gi: int = 600,
    n_communities: int = 20,
    affinity: float = 0.85,
    seed: int = 0,
) -> TripartiteGraph:
    rng = make_rng(seed)
    cu = rng.integers(0, n_communities, size=n_users)
    cg = rng.integers(0, n_communities, size=n_groups)
    ci = rng.integers(0, n_communities, size=n_items)
    pop_g = 1.0 / (1.0 + rng.permutation(n_groups)) ** 0.5
    pop_i = 1.0 / (1.0 + rng.permutation(n_items)) ** 0.5
    ug = _edges(rng, cu, cg, n_groups, _degrees(rng, n_users, n_ug), affinity, pop_g)
    ui = _edges(rng, cu, ci, n_items, _degrees(rng, n_users, n_ui), affinity, pop_i)
    gi = _edges(rng, cg, ci, n_items, _degrees(rng, n_groups, n_gi), affinity, pop_i)
    return TripartiteGraph(n_users, n_groups, n_items, ug, ui, gi)


def circular_overlap_dataset(
    n_users: int = 400,
    n_groups: int = 40,
    width: float = 0.6,
    scale: float = 1.0,
    seed: int = 0,
) -> tuple[TripartiteGraph, np.ndarray]:
    """Groups on a circle whose member overlap shrinks with angular distance.

    Users sit at uniform random angles and join every group within ``width``
    radians. The returned contextual table is fit to the overlap itself:
    ``C @ C.T == scale * J`` where ``J`` is the groups' Jaccard matrix
    (which is positive semi-definite), so relatedness grows with overlap by
    construction. One dummy item keeps the graph well formed.
    """
    rng = make_rng(seed)
    theta = 2 * np.pi * np.arange(n_groups) / n_groups
    phi = rng.uniform(0, 2 * np.pi, size=n_users)
    dist = np.abs(np.angle(np.exp(1j * (phi[:, None] - theta[None, :]))))
    ug = np.argwhere(dist < width)
    graph = TripartiteGraph(n_users, n_groups, 1, ug, [(0, 0)], [(0, 0)])
    inter = (graph.X.T @ graph.X).toarray()
    size = np.diag(inter)
    union = size[:, None] + size[None, :] - inter
    J = np.divide(inter, union, out=np.zeros_like(inter), where=union > 0)
    lam, V = np.linalg.eigh(J)
    C = V * np.sqrt(scale * np.clip(lam, 0.0, None))
    return graph, C


def write_dataset(graph: TripartiteGraph, out_dir: str | Path) -> dict[str, Path]:
    """Write ``ug.tsv``, ``ui.tsv`` and ``gi.tsv`` with size headers."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = {"ug": out / "ug.tsv", "ui": out / "ui.tsv", "gi": out / "gi.tsv"}
    write_edge_list(paths["ug"], graph.ug, graph.n_users, graph.n_groups)
    write_edge_list(paths["ui"], graph.ui, graph.n_users, graph.n_items)
    write_edge_list(paths["gi"], graph.gi, graph.n_groups, graph.n_items)
    return paths


def main(argv=None) -> None:
    parser = argparse.ArgumentParser(description="Write a planted-community tripartite dataset.")
    parser.add_argument("out_dir")
    parser.add_argument("--seed", type=int, default=0)
    parser.add_argument("--mafengwo-shape", action="store_true", help="match the Mafengwo node/edge counts")
    args = parser.parse_args(argv)
    kwargs = dict(MAFENGWO_SHAPE) if args.mafengwo_shape else {}
    graph = planted_tripartite(seed=args.seed, **kwargs)
    write_dataset(graph, args.out_dir)
    print(graph)


if __name__ == "__main__":
    main()
