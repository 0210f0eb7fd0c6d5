import warnings
from dataclasses import dataclass
from typing import Any, Dict, Optional, Sequence, Tuple

import numpy as np
from scipy.optimize import linear_sum_assignment
from sklearn.cluster import KMeans
from sklearn.decomposition import PCA
from sklearn.exceptions import ConvergenceWarning
from sklearn.metrics import normalized_mutual_info_score
from sklearn.metrics.cluster import contingency_matrix

from errors import ConfigError, ContractError, DimensionError
from logger import log


@dataclass
class ClusterResult:
    assignments: np.ndarray
    centroids: np.ndarray
    inertia: float
    acc: Optional[float] = None
    nmi: Optional[float] = None
    pur: Optional[float] = None

    def metrics(self) -> Dict[str, Any]:
        return {"acc": self.acc, "nmi": self.nmi, "pur": self.pur, "inertia": self.inertia}


def kmeans(
    points: np.ndarray,
    k: int,
    seed: int = 42,
    max_iters: int = 300,
    restarts: int = 10,
) -> Tuple[np.ndarray, np.ndarray, float]:
    """
    k-means++ seeding, Lloyd iterations until the assignment stops changing
    (or max_iters), best-inertia restart kept. Empty clusters are reseeded
    at the points farthest from their centroids.
    """
    points = np.asarray(points, dtype=np.float64)
    n = points.shape[0]
    if k < 1 or k > n:
        raise ConfigError(f"kmeans: need 1 <= K <= N, got K={k}, N={n}")

    model = KMeans(
        n_clusters=k,
        init="k-means++",
        n_init=restarts,
        max_iter=max_iters,
        tol=0.0,
        algorithm="lloyd",
        random_state=seed,
    )
    with warnings.catch_warnings():
        # fewer distinct points than K is legal input here
        warnings.simplefilter("ignore", ConvergenceWarning)
        assignments = model.fit_predict(points)

    log("debug", "cl_kmeans_done", k=k, n=n, inertia=float(model.inertia_), iters=int(model.n_iter_))
    return assignments.astype(int), model.cluster_centers_, float(model.inertia_)


def _check_labels(pred: Sequence[int], truth: Sequence[int]) -> Tuple[np.ndarray, np.ndarray]:
    pred = np.asarray(pred, dtype=int).reshape(-1)
    truth = np.asarray(truth, dtype=int).reshape(-1)
    if pred.shape != truth.shape:
        raise ContractError(f"label lists differ in length: {pred.size} vs {truth.size}")
    if pred.size == 0:
        raise ContractError("label lists are empty")
    return pred, truth


def hungarian_accuracy(pred: Sequence[int], truth: Sequence[int]) -> float:
    """Best one-to-one matching of clusters to classes on the confusion matrix, in percent."""
    pred, truth = _check_labels(pred, truth)
    confusion = contingency_matrix(truth, pred)
    rows, cols = linear_sum_assignment(confusion, maximize=True)
    return float(confusion[rows, cols].sum() / pred.size * 100.0)


def nmi(pred: Sequence[int], truth: Sequence[int]) -> float:
    """
    I(pred; truth) / sqrt(H(pred) H(truth)) in percent.

    Both sides a single cluster: 100 (the partitions are identical).
    One side a single cluster: 0.
    """
    pred, truth = _check_labels(pred, truth)
    score = normalized_mutual_info_score(truth, pred, average_method="geometric")
    return float(np.clip(score, 0.0, 1.0) * 100.0)


def purity(pred: Sequence[int], truth: Sequence[int]) -> float:
    pred, truth = _check_labels(pred, truth)
    confusion = contingency_matrix(truth, pred)
    return float(confusion.max(axis=0).sum() / pred.size * 100.0)


def pca_2d(points: np.ndarray) -> np.ndarray:
    """First two principal-component scores of the centered points."""
    points = np.asarray(points, dtype=np.float64)
    if points.ndim != 2 or points.shape[1] < 2:
        raise DimensionError(f"pca_2d: need at least 2 columns, got shape {points.shape}")
    if points.shape[0] < 2:
        raise DimensionError(f"pca_2d: need at least 2 rows, got {points.shape[0]}")
    return PCA(n_components=2, svd_solver="full").fit_transform(points)


def evaluate(
    points: np.ndarray,
    labels: Optional[Sequence[int]],
    k: int,
    seed: int = 42,
    max_iters: int = 300,
    restarts: int = 10,
) -> ClusterResult:
    """k-means on `points`, then ACC/NMI/PUR when ground-truth labels are given."""
    assignments, centroids, inertia = kmeans(points, k, seed, max_iters, restarts)
    result = ClusterResult(assignments, centroids, inertia)
    if labels is not None:
        result.acc = hungarian_accuracy(assignments, labels)
        result.nmi = nmi(assignments, labels)
        result.pur = purity(assignments, labels)
        log("info", "cl_evaluated", k=k, acc=result.acc, nmi=result.nmi, pur=result.pur)
    return result
