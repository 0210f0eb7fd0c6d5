"""
Command-line front end.

    python main.py train DATASET_DIR [--config F] [--out D] [--seed N] [--missing-ratio R] [--k K]
    python main.py eval (--embeddings F | --checkpoint F) DATASET_DIR [--k K] [--seed N]
    python main.py sweep DATASET_DIR (--alphas L --betas L | --dims L | --missing-ratios L) [--config F] [--out D] [--jobs N]
    python main.py ablate DATASET_DIR [--config F] [--out D] [--jobs N]
    python main.py project EMBEDDINGS [--method pca] [--dataset D] --out F
    python main.py synth --out D [--seed N] [--per-cluster N]
    python main.py mask DATASET_DIR --missing-ratio R --out D [--seed N]

Exit codes: 0 ok, 1 config error, 2 ingestion/protocol error, 3 training error.
"""

import argparse
import os
import sys
import time
from concurrent.futures import ThreadPoolExecutor
from typing import Any, Callable, Dict, List, Optional, Sequence, Tuple

from clustering import evaluate, pca_2d
from config import TrainConfig, load_train_config, settings
from data import (
    MissingSpec,
    ViewSet,
    apply_missing,
    content_hash,
    generate_synthetic3d,
    load_viewset,
    read_matrix,
    save_viewset,
)
from errors import ConfigError, DimensionError, GmaeError, IngestionError
from logger import emit_record, log
from networks import load_checkpoint, save_checkpoint
from run_store import (
    CHECKPOINT_FILE,
    MANIFEST_FILE,
    RunManifest,
    now_iso,
    write_embeddings,
    write_manifest,
    write_projection,
    write_result,
    write_summary,
    write_train_log,
)
from trainer import fit, forward_embeddings, prepare_viewset

PROGRESS_EVERY = 50

ABLATIONS: List[Tuple[str, Dict[str, Any]]] = [
    ("rec", {"use_cor_dis": False, "use_ent": False}),
    ("rec+cor+dis", {"use_cor_dis": True, "use_ent": False}),
    ("rec+ent", {"use_cor_dis": False, "use_ent": True}),
    ("rec+cor+dis+ent", {"use_cor_dis": True, "use_ent": True}),
]


# ---------- HELPERS ----------


def parse_list(text: str, cast: Callable[[str], Any] = float) -> List[Any]:
    """'0.01,0.02' or an inclusive range 'start:stop:step'."""
    text = (text or "").strip()
    if not text:
        raise ConfigError("empty grid")
    if ":" in text:
        parts = text.split(":")
        if len(parts) != 3:
            raise ConfigError(f"range {text!r} must be start:stop:step")
        try:
            start, stop, step = (float(p) for p in parts)
        except ValueError as e:
            raise ConfigError(f"bad range {text!r}: {e}") from e
        if step <= 0 or stop < start:
            raise ConfigError(f"range {text!r} is empty")
        count = int(round((stop - start) / step)) + 1
        # rounding keeps 0.01 + 6*0.01 at 0.07 instead of 0.07000000000000001
        return [cast(round(start + i * step, 10)) for i in range(count)]
    try:
        values = [cast(item) for item in text.split(",") if item.strip()]
    except ValueError as e:
        raise ConfigError(f"bad list {text!r}: {e}") from e
    if not values:
        raise ConfigError("empty grid")
    return values


def _int(text: Any) -> int:
    value = float(text)
    if value != int(value):
        raise ValueError(f"{text} is not an integer")
    return int(value)


def _base_config(path: Optional[str]) -> TrainConfig:
    return load_train_config(path) if path else TrainConfig().validate()


def _out_dir(requested: Optional[str], *parts: str) -> str:
    return requested or os.path.join(settings.out_root, *parts)


def _resolve_k(config: TrainConfig, data: ViewSet) -> int:
    k = config.n_clusters or data.n_clusters
    if k == 0:
        raise ConfigError("number of clusters unknown: set n_clusters or provide labels.csv")
    return k


# ---------- TRAIN ----------


def train_run(raw: ViewSet, config: TrainConfig, out_dir: str) -> Dict[str, Any]:
    """fit + k-means on Q; writes every artifact of one run into out_dir."""
    started_at = now_iso()
    start = time.perf_counter()

    data = prepare_viewset(raw, config)
    k = _resolve_k(config, data)

    def progress(epoch: int, record: Dict[str, Any]) -> None:
        if (epoch + 1) % PROGRESS_EVERY == 0:
            log("info", "cli_progress", out=out_dir, epoch=epoch + 1, total=record["total"], align=record["align"])

    result = fit(data, config, progress=progress)
    cluster = evaluate(
        result.embeddings.q,
        data.labels,
        k,
        seed=config.seed,
        max_iters=config.kmeans_max_iters,
        restarts=config.kmeans_restarts,
    )

    os.makedirs(out_dir, exist_ok=True)
    outputs = {"checkpoint": os.path.join(out_dir, CHECKPOINT_FILE)}
    save_checkpoint(outputs["checkpoint"], result.params, config)
    outputs["train_log"] = write_train_log(out_dir, result.log)
    outputs.update(write_embeddings(out_dir, result.embeddings))

    record = {
        "command": "train",
        "dataset": raw.name,
        "k": k,
        "seed": config.seed,
        "epochs": config.epochs,
        "final_loss": result.log[-1]["total"] if result.log else None,
        **cluster.metrics(),
    }
    outputs["result"] = write_result(out_dir, record)

    manifest = RunManifest(
        config=config.to_dict(),
        dataset_name=raw.name,
        dataset_hash=content_hash(raw),
        code_version=settings.code_version,
        outputs=dict(outputs, manifest=os.path.join(out_dir, MANIFEST_FILE)),
        started_at=started_at,
        duration_seconds=time.perf_counter() - start,
        metrics=cluster.metrics(),
    )
    write_manifest(out_dir, manifest)
    return record


def cmd_train(args: argparse.Namespace) -> int:
    config = _base_config(args.config)
    overrides: Dict[str, Any] = {}
    if args.seed is not None:
        overrides["seed"] = args.seed
    if args.missing_ratio is not None:
        overrides["missing_ratio"] = args.missing_ratio
    if args.k is not None:
        overrides["n_clusters"] = args.k
    if overrides:
        config = config.with_overrides(**overrides)

    raw = load_viewset(args.dataset_dir)
    out_dir = _out_dir(args.out, "train", raw.name)
    emit_record(train_run(raw, config, out_dir))
    return 0


# ---------- EVAL ----------


def cmd_eval(args: argparse.Namespace) -> int:
    raw = load_viewset(args.dataset_dir)
    if raw.labels is None:
        raise IngestionError(f"{args.dataset_dir} has no labels.csv; eval needs ground truth")

    config = TrainConfig()
    if args.checkpoint:
        params, config = load_checkpoint(args.checkpoint)
        q = forward_embeddings(params, prepare_viewset(raw, config)).q
    else:
        q = read_matrix(args.embeddings)
        if q.shape[0] != raw.n_samples:
            raise IngestionError(f"{args.embeddings} has {q.shape[0]} rows, dataset has {raw.n_samples}")

    seed = config.seed if args.seed is None else args.seed
    k = raw.n_clusters if args.k is None else args.k
    if k != raw.n_clusters:
        log("warning", "cli_k_mismatch", k=k, n_labels=raw.n_clusters)
        emit_record({"command": "eval", "warning": "k_mismatch", "k": k, "n_labels": raw.n_clusters})

    cluster = evaluate(q, raw.labels, k, seed, config.kmeans_max_iters, config.kmeans_restarts)
    emit_record({"command": "eval", "dataset": raw.name, "k": k, "seed": seed, **cluster.metrics()})
    return 0


# ---------- SWEEP / ABLATE ----------


def _cell_name(label: str, overrides: Dict[str, Any]) -> str:
    if label:
        return label
    return "_".join(f"{key}={value}" for key, value in overrides.items())


def run_grid(
    raw: ViewSet,
    base: TrainConfig,
    cells: Sequence[Tuple[str, Dict[str, Any]]],
    out_dir: str,
    jobs: int,
) -> List[Dict[str, Any]]:
    """Train every cell (in parallel up to `jobs`); a failing cell becomes a failed row."""
    if not cells:
        raise ConfigError("empty grid")
    if jobs < 1:
        raise ConfigError(f"--jobs must be >= 1, got {jobs}")
    os.makedirs(out_dir, exist_ok=True)

    def run_cell(cell: Tuple[str, Dict[str, Any]]) -> Dict[str, Any]:
        label, overrides = cell
        name = _cell_name(label, overrides)
        row: Dict[str, Any] = {"cell": name, **overrides}
        try:
            config = base.with_overrides(**overrides)
            record = train_run(raw, config, os.path.join(out_dir, name))
            row.update(status="ok", acc=record["acc"], nmi=record["nmi"], pur=record["pur"],
                       final_loss=record["final_loss"], error="")
        except Exception as e:
            log("error", "cli_sweep_cell_error", cell=name, error=str(e))
            row.update(status="failed", acc=None, nmi=None, pur=None, final_loss=None, error=str(e))
        return row

    with ThreadPoolExecutor(max_workers=jobs) as pool:
        rows = list(pool.map(run_cell, cells))
    return rows


def _finish_grid(command: str, rows: List[Dict[str, Any]], out_dir: str) -> int:
    path = write_summary(out_dir, rows)
    failed = sum(1 for row in rows if row["status"] != "ok")
    emit_record({"command": command, "cells": len(rows), "failed": failed, "summary": path})
    return 0


def sweep_cells(args: argparse.Namespace) -> List[Tuple[str, Dict[str, Any]]]:
    grids = [args.alphas is not None or args.betas is not None, args.dims is not None, args.missing_ratios is not None]
    if sum(grids) != 1:
        raise ConfigError("give exactly one grid: --alphas/--betas, --dims or --missing-ratios")
    if args.dims is not None:
        return [("", {"dim_z": d, "dim_c": d}) for d in parse_list(args.dims, _int)]
    if args.missing_ratios is not None:
        return [("", {"missing_ratio": r}) for r in parse_list(args.missing_ratios, float)]
    if args.alphas is None or args.betas is None:
        raise ConfigError("--alphas and --betas go together")
    alphas = parse_list(args.alphas, float)
    betas = parse_list(args.betas, float)
    return [("", {"alpha": a, "beta": b}) for a in alphas for b in betas]


def cmd_sweep(args: argparse.Namespace) -> int:
    base = _base_config(args.config)
    cells = sweep_cells(args)
    raw = load_viewset(args.dataset_dir)
    out_dir = _out_dir(args.out, "sweep", raw.name)
    log("info", "cli_sweep_start", cells=len(cells), jobs=args.jobs, out=out_dir)
    return _finish_grid("sweep", run_grid(raw, base, cells, out_dir, args.jobs), out_dir)


def cmd_ablate(args: argparse.Namespace) -> int:
    base = _base_config(args.config)
    raw = load_viewset(args.dataset_dir)
    out_dir = _out_dir(args.out, "ablate", raw.name)
    cells = [(label, dict(overrides)) for label, overrides in ABLATIONS]
    return _finish_grid("ablate", run_grid(raw, base, cells, out_dir, args.jobs), out_dir)


# ---------- PROJECT / SYNTH / MASK ----------


def cmd_project(args: argparse.Namespace) -> int:
    points = read_matrix(args.embeddings)
    labels = None
    if args.dataset:
        labels = load_viewset(args.dataset).labels
        if labels is not None and labels.shape[0] != points.shape[0]:
            raise IngestionError(f"{args.dataset} has {labels.shape[0]} labels for {points.shape[0]} rows")
    try:
        coords = pca_2d(points)
    except DimensionError as e:
        raise IngestionError(str(e)) from e
    path = write_projection(args.out, coords, labels)
    emit_record({"command": "project", "method": args.method, "rows": int(points.shape[0]), "out": path})
    return 0


def cmd_synth(args: argparse.Namespace) -> int:
    if args.per_cluster < 1:
        raise ConfigError(f"--per-cluster must be >= 1, got {args.per_cluster}")
    data = generate_synthetic3d(seed=args.seed, n_per_cluster=args.per_cluster)
    save_viewset(data, args.out)
    emit_record({"command": "synth", "n": data.n_samples, "dims": data.dims, "hash": content_hash(data)})
    return 0


def cmd_mask(args: argparse.Namespace) -> int:
    spec = MissingSpec(args.missing_ratio, args.seed)
    data = apply_missing(load_viewset(args.dataset_dir), spec)
    save_viewset(data, args.out)
    incomplete = int((~data.mask.all(axis=1)).sum())
    emit_record({"command": "mask", "n": data.n_samples, "incomplete": incomplete, "hash": content_hash(data)})
    return 0


# ---------- ENTRY ----------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="gmae", description="Multi-view clustering with disentangled autoencoders")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="fit a model and cluster its representation")
    p.add_argument("dataset_dir")
    p.add_argument("--config")
    p.add_argument("--out")
    p.add_argument("--seed", type=int)
    p.add_argument("--missing-ratio", type=float)
    p.add_argument("--k", type=int)
    p.set_defaults(handler=cmd_train)

    p = sub.add_parser("eval", help="k-means + ACC/NMI/PUR on saved embeddings or a checkpoint")
    source = p.add_mutually_exclusive_group(required=True)
    source.add_argument("--embeddings")
    source.add_argument("--checkpoint")
    p.add_argument("dataset_dir")
    p.add_argument("--k", type=int)
    p.add_argument("--seed", type=int)
    p.set_defaults(handler=cmd_eval)

    for name, handler in (("sweep", cmd_sweep), ("ablate", cmd_ablate)):
        p = sub.add_parser(name)
        p.add_argument("dataset_dir")
        p.add_argument("--config")
        p.add_argument("--out")
        p.add_argument("--jobs", type=int, default=settings.jobs)
        if name == "sweep":
            p.add_argument("--alphas")
            p.add_argument("--betas")
            p.add_argument("--dims")
            p.add_argument("--missing-ratios")
        p.set_defaults(handler=handler)

    p = sub.add_parser("project", help="2-D PCA export for plotting")
    p.add_argument("embeddings")
    p.add_argument("--method", choices=["pca"], default="pca")
    p.add_argument("--dataset", help="dataset directory to take the label column from")
    p.add_argument("--out", required=True)
    p.set_defaults(handler=cmd_project)

    p = sub.add_parser("synth", help="write a synthetic3d-like dataset directory")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=42)
    p.add_argument("--per-cluster", type=int, default=200)
    p.set_defaults(handler=cmd_synth)

    p = sub.add_parser("mask", help="hide views with the missing-view protocol")
    p.add_argument("dataset_dir")
    p.add_argument("--missing-ratio", type=float, required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=42)
    p.set_defaults(handler=cmd_mask)

    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.handler(args)
    except GmaeError as e:
        log("error", "cli_error", command=args.command, kind=type(e).__name__, error=str(e))
        print(f"error: {e}", file=sys.stderr)
        return e.exit_code
    except Exception as e:
        log("error", "cli_unexpected_error", command=args.command, kind=type(e).__name__, error=str(e))
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
