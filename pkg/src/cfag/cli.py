"""Command-line entry point: ``cfag {train,evaluate,ablate,cold-start,analyze}``.

Exit codes: 0 success, 1 configuration error, 2 data error, 3 numeric
failure (NaN/Inf detected).
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
import time
from pathlib import Path

import numpy as np

from .analysis import dot_product_distribution, relatedness_vs_ratio
from .config import ConfigError, ExperimentConfig
from .evaluation import EvalReport, evaluate
from .graph import DataError, DatasetSplit, cap_user_groups, load_dataset, split_per_user, write_split
from .model import HyperParams, ModelParams, init_params
from .numeric import NumericError, load_checkpoint, save_checkpoint
from .training import fit, write_log

logger = logging.getLogger("cfag")

EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 1, 2, 3


# ---------------------------------------------------------------------------
# building blocks shared by the subcommands


def load_split(cfg: ExperimentConfig) -> DatasetSplit:
    paths = cfg.data_paths()
    for key, p in paths.items():
        if not p.exists():
            raise DataError(f"data.{key}: file not found: {p}")
    d = cfg.raw["data"]
    graph = load_dataset(paths["ug"], paths["ui"], paths["gi"], d["n_users"], d["n_groups"], d["n_items"])
    logger.info("loaded %r", graph)
    s = cfg.raw["split"]
    return split_per_user(graph, s["train_ratio"], s["valid_ratio"], cfg.split_seed)


def train_and_evaluate(cfg: ExperimentConfig, split: DatasetSplit, hp: HyperParams):
    result = fit(split, hp, cfg.train_config())
    report = evaluate(result.params, split, hp, cfg.cutoffs, on="test", threads=cfg.threads)
    return result, report


def save_model(params: ModelParams, hp: HyperParams, out: Path, extra: dict | None = None) -> None:
    save_checkpoint(out / "model.ckpt", params.arrays())
    sidecar = {
        "hyper_params": hp.to_dict(),
        "n_users": params.n_users,
        "n_groups": params.n_groups,
        "n_items": params.n_items,
        **(extra or {}),
    }
    (out / "model.json").write_text(json.dumps(sidecar, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def load_model(path: Path, split: DatasetSplit) -> tuple[ModelParams, HyperParams]:
    path = Path(path)
    sidecar_path = path.with_suffix(".json")
    if not path.exists() or not sidecar_path.exists():
        raise DataError(f"checkpoint {path} or its sidecar {sidecar_path} is missing")
    sidecar = json.loads(sidecar_path.read_text(encoding="utf-8"))
    hp = HyperParams(**sidecar["hyper_params"])
    g = split.train
    try:
        params = ModelParams.from_arrays(load_checkpoint(path), g.n_users, g.n_groups, g.n_items)
    except (KeyError, ValueError) as exc:
        raise DataError(f"checkpoint {path} does not match the dataset: {exc}") from exc
    return params, hp


def _write_table(path: Path, header: list[str], rows: list[list]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)


def _fmt(x) -> str:
    return repr(float(x)) if isinstance(x, (float, np.floating)) else str(x)


# ---------------------------------------------------------------------------
# subcommands


def run_train(cfg: ExperimentConfig) -> EvalReport:
    out = cfg.output_dir
    out.mkdir(parents=True, exist_ok=True)
    split = load_split(cfg)
    write_split(split, out / "split")
    hp = cfg.hyper_params()
    result, report = train_and_evaluate(cfg, split, hp)
    save_model(result.params, hp, out, {"best_epoch": result.best_epoch, "seed": cfg.seed})
    write_log(result.log, out / "train_log.csv")
    report.write(out / "eval_report.json", out / "eval_users.csv" if cfg.raw["eval"]["per_user_csv"] else None)
    logger.info("test %s", json.dumps(report.metrics, sort_keys=True))
    return report


def run_evaluate(cfg: ExperimentConfig, checkpoint: Path) -> EvalReport:
    out = cfg.output_dir
    out.mkdir(parents=True, exist_ok=True)
    split = load_split(cfg)
    params, hp = load_model(checkpoint, split)
    report = evaluate(params, split, hp, cfg.cutoffs, on="test", threads=cfg.threads)
    report.write(out / "eval_report.json", out / "eval_users.csv" if cfg.raw["eval"]["per_user_csv"] else None)
    return report


def run_ablation(cfg: ExperimentConfig, variants: list[dict] | None = None) -> list[dict]:
    """Train every variant on the same split and seed; failures are recorded, not fatal."""
    variants = variants if variants is not None else cfg.ablation_variants()
    if not variants:
        raise ConfigError("ablation needs at least one variant")
    out = cfg.output_dir
    out.mkdir(parents=True, exist_ok=True)
    split = load_split(cfg)
    names = [f"recall@{k}" for k in cfg.cutoffs] + [f"ndcg@{k}" for k in cfg.cutoffs]
    rows = []
    for v in variants:
        overrides = {k: x for k, x in v.items() if k != "name"}
        row = {"variant": v["name"], "status": "ok", "best_epoch": ""}
        try:
            hp = cfg.hyper_params(**overrides)
            result, report = train_and_evaluate(cfg, split, hp)
            row.update(report.metrics, best_epoch=result.best_epoch)
        except (NumericError, ValueError) as exc:
            logger.error("variant %s failed: %s", v["name"], exc)
            row.update({n: "" for n in names}, status=f"failed: {exc}")
        rows.append(row)
    header = ["variant", *names, "best_epoch", "status"]
    _write_table(out / "ablation.csv", header, [[_fmt(r.get(h, "")) for h in header] for r in rows])
    return rows


def run_cold_start(cfg: ExperimentConfig, ks: list[int | None] | None = None) -> list[dict]:
    """Cap each user's training groups at ``k``, retrain and evaluate, per ``k``.

    ``None`` in ``ks`` means no cap.
    """
    ks = ks if ks is not None else cfg.raw["cold_start"]["k"]
    if any(k is not None and k < 1 for k in ks):
        raise ConfigError("cold-start thresholds must be >= 1")
    out = cfg.output_dir
    out.mkdir(parents=True, exist_ok=True)
    split = load_split(cfg)
    hp = cfg.hyper_params()
    names = [f"recall@{k}" for k in cfg.cutoffs] + [f"ndcg@{k}" for k in cfg.cutoffs]
    rows = []
    for k in ks:
        capped = split if k is None else cap_user_groups(split, k, cfg.cap_seed)
        _, report = train_and_evaluate(cfg, capped, hp)
        rows.append({"k": "inf" if k is None else k, "n_train_ug": len(capped.train.ug), **report.metrics})
    header = ["k", "n_train_ug", *names]
    _write_table(out / "cold_start.csv", header, [[_fmt(r[h]) for h in header] for r in rows])
    return rows


def run_analyze(cfg: ExperimentConfig, checkpoint: Path | None) -> dict[str, Path]:
    """Dot-product histogram and relatedness/overlap CSVs for contextual tables.

    Without a checkpoint the freshly initialized parameters are analyzed.
    """
    out = cfg.output_dir / "analysis"
    out.mkdir(parents=True, exist_ok=True)
    split = load_split(cfg)
    g = split.train
    if checkpoint is None:
        hp = cfg.hyper_params()
        params = init_params(hp, g.n_users, g.n_groups, g.n_items, cfg.train_seed)
    else:
        params, hp = load_model(checkpoint, split)
    bins = cfg.raw["analysis"]["bins"]
    kinds = [("group", params.C_g)] + ([("item", params.C_i)] if cfg.raw["analysis"]["items"] else [])
    written = {}
    for kind, C in kinds:
        hist = dot_product_distribution(C, bins)
        hist.write_csv(out / f"{kind}_dot_hist.csv")
        corr = relatedness_vs_ratio(g, C, hp.relatedness_transpose, kind)
        corr.write_pairs_csv(out / f"{kind}_pairs.csv")
        corr.write_summary_csv(out / f"{kind}_correlation.csv")
        written.update({
            f"{kind}_dot_hist": out / f"{kind}_dot_hist.csv",
            f"{kind}_pairs": out / f"{kind}_pairs.csv",
            f"{kind}_correlation": out / f"{kind}_correlation.csv",
        })
    return written


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="cfag", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", required=True, type=Path, help="YAML experiment config")
        p.add_argument("--seed", type=int, help="override the top-level seed")
        p.add_argument("--threads", type=int, help="evaluation worker threads (default: available cores)")
        p.add_argument("--out", type=Path, help="override output_dir")
        p.add_argument("--data-dir", type=Path, help="override data.dir")
        p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                       help="override any config key, e.g. --set model.d=256 (repeatable)")
        p.add_argument("-v", "--verbose", action="store_true")
        return p

    common(sub.add_parser("train", help="split, train, evaluate and checkpoint"))
    p = common(sub.add_parser("evaluate", help="evaluate a checkpoint on the test split"))
    p.add_argument("--checkpoint", required=True, type=Path)
    p = common(sub.add_parser("ablate", help="train several model variants on one split"))
    p.add_argument("--preset", choices=["pa", "layers"], help="built-in variant list")
    p = common(sub.add_parser("cold-start", help="cap training groups per user and retrain"))
    p.add_argument("--k", type=int, nargs="+", help="thresholds (default from config)")
    p = common(sub.add_parser("analyze", help="contextual-embedding diagnostics"))
    p.add_argument("--checkpoint", type=Path, help="omit to analyze a fresh initialization")
    p.add_argument("--items", action="store_true", help="also analyze item contextual embeddings")
    return parser


def _load_config(args) -> ExperimentConfig:
    overrides = list(args.set)
    if args.seed is not None:
        overrides.append(f"seed={args.seed}")
    threads = args.threads if args.threads is not None else (os.cpu_count() or 1)
    overrides.append(f"threads={threads}")
    if args.out is not None:
        overrides.append(f"output_dir={args.out.resolve()}")
    if args.data_dir is not None:
        overrides.append(f"data.dir={args.data_dir.resolve()}")
    if getattr(args, "preset", None):
        overrides.append(f"ablation.preset={args.preset}")
    if getattr(args, "items", False):
        overrides.append("analysis.items=true")
    return ExperimentConfig.load(args.config, overrides)


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s",
        stream=sys.stderr,
    )
    logger.info("started %s", time.strftime("%Y-%m-%d %H:%M:%S"))
    try:
        cfg = _load_config(args)
        if args.command == "train":
            report = run_train(cfg)
            print(report.to_json(), end="")
        elif args.command == "evaluate":
            print(run_evaluate(cfg, args.checkpoint).to_json(), end="")
        elif args.command == "ablate":
            for row in run_ablation(cfg):
                print(row["variant"], row.get("recall@10", ""), row.get("ndcg@10", ""), row["status"], sep="\t")
        elif args.command == "cold-start":
            for row in run_cold_start(cfg, args.k):
                print(row["k"], row["n_train_ug"], row.get("recall@10", ""), row.get("ndcg@10", ""), sep="\t")
        elif args.command == "analyze":
            for name, path in run_analyze(cfg, args.checkpoint).items():
                print(name, path, sep="\t")
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except DataError as exc:
        where = f" (config {args.config})"
        print(f"data error: {exc}{where}", file=sys.stderr)
        return EXIT_DATA
    except NumericError as exc:
        print(f"numeric failure: {exc} (config {args.config})", file=sys.stderr)
        return EXIT_NUMERIC
    return 0


if __name__ == "__main__":
    sys.exit(main())
