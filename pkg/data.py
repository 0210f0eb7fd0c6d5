"""
Multi-view datasets: CSV ingestion/export, normalization, the
synthetic3d-like generator and the incomplete-view masking protocol.

Dataset directory layout:
  view_1.csv ... view_V.csv   numeric, comma separated, one header row
  labels.csv                  optional, one integer column (header optional)
  mask.csv                    optional, N × V of 0/1 (header optional)
"""

import hashlib
import math
import os
from dataclasses import dataclass, replace
from fractions import Fraction
from typing import List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
from scipy.stats import special_ortho_group

from errors import ConfigError, IngestionError, ParseError, ProtocolError, ValidationError
from logger import log


@dataclass(frozen=True, eq=False)
class ViewSet:
    views: Tuple[np.ndarray, ...]
    labels: Optional[np.ndarray]
    mask: np.ndarray
    name: str = "dataset"

    def __post_init__(self):
        if not self.views:
            raise ValidationError("a ViewSet needs at least one view")
        rows = [v.shape[0] for v in self.views]
        if len(set(rows)) != 1:
            raise ValidationError(f"views disagree on sample count: {rows}")
        n = rows[0]
        if self.mask.shape != (n, len(self.views)):
            raise ValidationError(f"mask shape {self.mask.shape} != ({n}, {len(self.views)})")
        empty = np.flatnonzero(~self.mask.any(axis=1))
        if empty.size:
            raise ValidationError(f"{empty.size} samples have no present view (first: row {empty[0]})")
        if self.labels is not None:
            if self.labels.shape != (n,):
                raise ValidationError(f"labels have shape {self.labels.shape}, expected ({n},)")
            k = len(np.unique(self.labels))
            if self.labels.min() != 0 or self.labels.max() != k - 1:
                raise ValidationError(f"labels must be dense in [0, {k}), got range [{self.labels.min()}, {self.labels.max()}]")

    @property
    def n_samples(self) -> int:
        return self.views[0].shape[0]

    @property
    def n_views(self) -> int:
        return len(self.views)

    @property
    def dims(self) -> List[int]:
        return [v.shape[1] for v in self.views]

    @property
    def n_clusters(self) -> int:
        return 0 if self.labels is None else int(len(np.unique(self.labels)))


def make_viewset(
    views: Sequence[np.ndarray],
    labels: Optional[Sequence[int]] = None,
    mask: Optional[np.ndarray] = None,
    name: str = "dataset",
) -> ViewSet:
    arrays = tuple(np.asarray(v, dtype=np.float64).reshape(len(v), -1) for v in views)
    n = arrays[0].shape[0] if arrays else 0
    mask_arr = np.ones((n, len(arrays)), dtype=bool) if mask is None else np.asarray(mask, dtype=bool)
    label_arr = None if labels is None else np.asarray(labels, dtype=int)
    return ViewSet(arrays, label_arr, mask_arr, name)


def content_hash(data: ViewSet) -> str:
    h = hashlib.sha256()
    for view in data.views:
        h.update(np.ascontiguousarray(view, dtype="<f8").tobytes())
    h.update(np.ascontiguousarray(data.mask, dtype=np.uint8).tobytes())
    if data.labels is not None:
        h.update(np.ascontiguousarray(data.labels, dtype="<i8").tobytes())
    return h.hexdigest()


# ---------- CSV INGESTION ----------


def _first_line_is_header(path: str) -> bool:
    with open(path, "r", encoding="utf-8") as fh:
        first = fh.readline().strip()
    if not first:
        return False
    try:
        float(first.split(",")[0])
        return False
    except ValueError:
        return True


def _read_numeric(path: str, header: bool) -> np.ndarray:
    try:
        frame = pd.read_csv(path, header=0 if header else None, float_precision="round_trip")
    except (OSError, pd.errors.ParserError, pd.errors.EmptyDataError) as e:
        raise IngestionError(f"cannot read {path}: {e}") from e

    bad = [col for col in frame.columns if not pd.api.types.is_numeric_dtype(frame[col])]
    if not bad and not frame.isna().any().any():
        return frame.to_numpy(dtype=np.float64)

    # locate the first offending cell for the error message
    for col in frame.columns:
        coerced = pd.to_numeric(frame[col], errors="coerce")
        broken = coerced.isna()
        if broken.any():
            row = int(np.flatnonzero(broken.to_numpy())[0])
            # +1 for 1-based rows, +1 more when a header line precedes the data
            raise ParseError(path, row + 1 + int(header), str(col), str(frame[col].iloc[row]))
    raise ParseError(path, 0, "?", "?")


def read_matrix(path: str) -> np.ndarray:
    """A numeric CSV (header row optional) as an N × d float64 matrix."""
    if not os.path.isfile(path):
        raise IngestionError(f"file {path} does not exist")
    return _read_numeric(path, _first_line_is_header(path))


def _view_paths(path: str) -> List[str]:
    paths = []
    v = 1
    while os.path.exists(os.path.join(path, f"view_{v}.csv")):
        paths.append(os.path.join(path, f"view_{v}.csv"))
        v += 1
    return paths


def load_viewset(path: str) -> ViewSet:
    """
    Read a dataset directory. Raw labels are remapped to dense ids
    0..K-1 in sorted order of their original values.
    """
    if not os.path.isdir(path):
        raise IngestionError(f"dataset directory {path} does not exist")
    view_paths = _view_paths(path)
    if not view_paths:
        raise IngestionError(f"no view_1.csv in {path}")

    views = [_read_numeric(p, header=True) for p in view_paths]
    n = views[0].shape[0]
    for p, view in zip(view_paths[1:], views[1:]):
        if view.shape[0] != n:
            raise IngestionError(
                f"row-count mismatch: {view_paths[0]} has {n} rows, {p} has {view.shape[0]}"
            )

    labels = None
    labels_path = os.path.join(path, "labels.csv")
    if os.path.exists(labels_path):
        raw = _read_numeric(labels_path, _first_line_is_header(labels_path))
        if raw.shape != (n, 1):
            raise IngestionError(f"{labels_path} must hold one column of {n} rows, got {raw.shape}")
        if not np.all(raw == np.round(raw)):
            raise IngestionError(f"{labels_path} holds non-integer labels")
        _, labels = np.unique(raw[:, 0].astype(np.int64), return_inverse=True)

    mask = np.ones((n, len(views)), dtype=bool)
    mask_path = os.path.join(path, "mask.csv")
    if os.path.exists(mask_path):
        raw = _read_numeric(mask_path, _first_line_is_header(mask_path))
        if raw.shape != (n, len(views)):
            raise IngestionError(f"{mask_path} must be {n}x{len(views)}, got {raw.shape}")
        if not np.all((raw == 0) | (raw == 1)):
            raise IngestionError(f"{mask_path} must hold only 0/1")
        mask = raw.astype(bool)

    data = make_viewset(views, labels, mask, name=os.path.basename(os.path.normpath(path)))
    log("info", "ds_loaded", path=path, n=data.n_samples, dims=data.dims, k=data.n_clusters)
    return data


def save_viewset(data: ViewSet, path: str) -> None:
    """Write the directory layout read by load_viewset (17 significant digits)."""
    os.makedirs(path, exist_ok=True)
    for v, view in enumerate(data.views, start=1):
        frame = pd.DataFrame(view, columns=[f"f{j}" for j in range(view.shape[1])])
        frame.to_csv(os.path.join(path, f"view_{v}.csv"), index=False, float_format="%.17g")
    if data.labels is not None:
        pd.DataFrame({"label": data.labels}).to_csv(os.path.join(path, "labels.csv"), index=False)
    mask_path = os.path.join(path, "mask.csv")
    if not data.mask.all():
        frame = pd.DataFrame(
            data.mask.astype(int), columns=[f"view_{v}" for v in range(1, data.n_views + 1)]
        )
        frame.to_csv(mask_path, index=False)
    elif os.path.exists(mask_path):
        os.remove(mask_path)
    log("info", "ds_saved", path=path, n=data.n_samples, dims=data.dims)


# ---------- NORMALIZATION ----------


def normalize(data: ViewSet, mode: str = "minmax") -> ViewSet:
    """
    Per-view, per-dimension scaling with statistics over present samples
    only. Constant dimensions map to 0; hidden entries are zeroed in
    every mode, "none" included.
    """
    if mode == "none":
        if data.mask.all():
            return data
        views = tuple(np.where(data.mask[:, [v]], view, 0.0) for v, view in enumerate(data.views))
        return replace(data, views=views)
    if mode not in ("minmax", "zscore"):
        raise ConfigError(f"unknown normalization mode {mode!r}")

    out = []
    for v, view in enumerate(data.views):
        present = data.mask[:, v]
        scaled = np.zeros_like(view)
        if present.any():
            rows = view[present]
            if mode == "minmax":
                lo = rows.min(axis=0)
                span = rows.max(axis=0) - lo
                safe = np.where(span > 0, span, 1.0)
                scaled = np.where(span > 0, (view - lo) / safe, 0.0)
            else:
                mean = rows.mean(axis=0)
                std = rows.std(axis=0)
                safe = np.where(std > 0, std, 1.0)
                scaled = np.where(std > 0, (view - mean) / safe, 0.0)
            scaled[~present] = 0.0
        out.append(scaled)
    return replace(data, views=tuple(out))


# ---------- SYNTHETIC DATA ----------


def generate_synthetic3d(seed: int = 42, n_per_cluster: int = 200) -> ViewSet:
    """
    synthetic3d-like data: 3 balanced clusters, 3 views of 3 dimensions.

    Each view places the cluster means on scaled axes (pairwise distance
    5·√2 ≈ 7.1 standard deviations), adds unit Gaussian noise drawn
    independently per view, then applies a view-specific random rotation
    and offset.
    """
    rng = np.random.default_rng(seed)
    k, n_views, dim = 3, 3, 3
    spacing = 5.0
    labels = np.repeat(np.arange(k), n_per_cluster)
    labels = labels[rng.permutation(labels.size)]

    views = []
    for _ in range(n_views):
        means = spacing * np.eye(k, dim)
        rotation = special_ortho_group.rvs(dim, random_state=rng)
        offset = rng.uniform(-2.0, 2.0, size=dim)
        points = means[labels] + rng.standard_normal((labels.size, dim))
        views.append(points @ rotation.T + offset)

    return make_viewset(views, labels, name="synthetic3d")


# ---------- MISSING VIEWS ----------


@dataclass(frozen=True)
class MissingSpec:
    ratio: float
    seed: int = 42

    def __post_init__(self):
        if not 0.0 <= self.ratio < 1.0:
            raise ConfigError(f"missing ratio must lie in [0, 1), got {self.ratio}")


def apply_missing(data: ViewSet, spec: MissingSpec) -> ViewSet:
    """
    Pick floor(ratio·N) samples; for each hide between 1 and (present - 1)
    of its present views, chosen uniformly. Hidden entries are zero-filled
    and flagged false in the mask. Every sample keeps at least one view.
    """
    if data.n_views < 2:
        raise ProtocolError("cannot hide views of a single-view dataset")
    # exact decimal product: 0.29 * 100 is 28.999... in floating point
    count = math.floor(Fraction(str(spec.ratio)) * data.n_samples)
    if count == 0:
        return data

    rng = np.random.default_rng(spec.seed)
    chosen = np.sort(rng.choice(data.n_samples, size=count, replace=False))
    mask = data.mask.copy()
    for i in chosen:
        present = np.flatnonzero(mask[i])
        if present.size < 2:
            continue
        n_hide = int(rng.integers(1, present.size))
        hidden = rng.choice(present, size=n_hide, replace=False)
        mask[i, hidden] = False

    views = tuple(np.where(mask[:, [v]], view, 0.0) for v, view in enumerate(data.views))
    log("info", "ds_missing_applied", ratio=spec.ratio, seed=spec.seed, incomplete=count)
    return replace(data, views=views, mask=mask)
