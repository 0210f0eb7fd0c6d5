"""
On-disk artifacts of a run: manifest, result record, training log,
embedding CSVs and sweep summaries. Every writer stays inside the
directory it is handed.
"""

import json
import os
from dataclasses import asdict, dataclass, field
from datetime import datetime, timezone
from typing import Any, Dict, List, Optional, Sequence

import numpy as np
import pandas as pd

from logger import format_record, log
from trainer import Embeddings


MANIFEST_FILE = "manifest.json"
RESULT_FILE = "result.json"
TRAIN_LOG_FILE = "train_log.jsonl"
CHECKPOINT_FILE = "checkpoint.bin"
SUMMARY_FILE = "summary.csv"


def now_iso() -> str:
    return datetime.now(timezone.utc).isoformat()


@dataclass
class RunManifest:
    config: Dict[str, Any]
    dataset_name: str
    dataset_hash: str
    code_version: str
    outputs: Dict[str, str] = field(default_factory=dict)
    started_at: str = field(default_factory=now_iso)
    duration_seconds: float = 0.0
    metrics: Dict[str, Any] = field(default_factory=dict)

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)


def _write_json(path: str, payload: Dict[str, Any]) -> str:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(json.dumps(payload, sort_keys=True, indent=2, default=str))
        fh.write("\n")
    return path


def write_manifest(out_dir: str, manifest: RunManifest) -> str:
    path = _write_json(os.path.join(out_dir, MANIFEST_FILE), manifest.to_dict())
    log("info", "rs_manifest_written", path=path, dataset=manifest.dataset_name)
    return path


def read_manifest(out_dir: str) -> Dict[str, Any]:
    with open(os.path.join(out_dir, MANIFEST_FILE), "r", encoding="utf-8") as fh:
        return json.load(fh)


def write_result(out_dir: str, record: Dict[str, Any]) -> str:
    # same serialisation as the stdout record, so the two stay byte-comparable
    path = os.path.join(out_dir, RESULT_FILE)
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(format_record(record))
        fh.write("\n")
    return path


def write_train_log(out_dir: str, records: Sequence[Dict[str, Any]]) -> str:
    """One sorted-key JSON object per epoch."""
    path = os.path.join(out_dir, TRAIN_LOG_FILE)
    with open(path, "w", encoding="utf-8") as fh:
        for record in records:
            fh.write(format_record(record))
            fh.write("\n")
    return path


def read_train_log(path: str) -> List[Dict[str, Any]]:
    with open(path, "r", encoding="utf-8") as fh:
        return [json.loads(line) for line in fh if line.strip()]


def write_matrix_csv(path: str, matrix: np.ndarray, prefix: str) -> str:
    """17 significant digits, so a reread matrix is bit-identical."""
    frame = pd.DataFrame(matrix, columns=[f"{prefix}{j}" for j in range(matrix.shape[1])])
    frame.to_csv(path, index=False, float_format="%.17g")
    return path


def write_embeddings(out_dir: str, embeddings: Embeddings) -> Dict[str, str]:
    """q.csv, c_star.csv and z_<v>.csv (views numbered from 1)."""
    outputs = {
        "q": write_matrix_csv(os.path.join(out_dir, "q.csv"), embeddings.q, "q"),
        "c_star": write_matrix_csv(os.path.join(out_dir, "c_star.csv"), embeddings.c_star, "c"),
    }
    for v, z in enumerate(embeddings.z, start=1):
        outputs[f"z_{v}"] = write_matrix_csv(os.path.join(out_dir, f"z_{v}.csv"), z, "z")
    return outputs


def write_projection(path: str, coords: np.ndarray, labels: Optional[np.ndarray]) -> str:
    frame = pd.DataFrame({"x": coords[:, 0], "y": coords[:, 1]})
    frame["label"] = -1 if labels is None else np.asarray(labels, dtype=int)
    parent = os.path.dirname(path)
    if parent:
        os.makedirs(parent, exist_ok=True)
    frame.to_csv(path, index=False, float_format="%.17g")
    return path


def write_summary(out_dir: str, rows: Sequence[Dict[str, Any]]) -> str:
    """
    Sweep summary, one row per grid cell in grid order. Failed cells keep
    their grid coordinates with status=failed and the error message.
    """
    path = os.path.join(out_dir, SUMMARY_FILE)
    pd.DataFrame(list(rows)).to_csv(path, index=False)
    log("info", "rs_summary_written", path=path, rows=len(rows))
    return path
