"""One-class nearest-neighbor authentication.

A test vector x is accepted when the mean distance to its j nearest training
points, divided by the mean distance of those points to their own k nearest
training neighbors, stays below theta_d.
"""

import json
import time
from dataclasses import dataclass
try:
    from enum import StrEnum
except ImportError:  # Python < 3.11
    from enum import Enum

    class StrEnum(str, Enum):
        __str__ = str.__str__
        __format__ = str.__format__
from pathlib import Path

import faiss
import numpy as np
from loguru import logger

from authsim.channel_model import SystemParams, setup_estimate
from authsim.stats_core import RandomStream, parallel_map

MODEL_FORMAT = "authsim-ocnn"
MODEL_VERSION = 1
NEIGHBOR_GRID = (1, 2, 3, 5, 7, 9)
_SEARCH_MARGIN = 8
# float32 candidate distances are only trusted to this relative precision
_TIE_RTOL = 1e-6
_QUERY_CHUNK = 16384


class OcnnVariant(StrEnum):
    V11NN = "11NN"
    V1KNN = "1KNN"
    VJ1NN = "J1NN"
    VJKNN = "JKNN"

    @property
    def tunes_j(self) -> bool:
        return self in (OcnnVariant.VJ1NN, OcnnVariant.VJKNN)

    @property
    def tunes_k(self) -> bool:
        return self in (OcnnVariant.V1KNN, OcnnVariant.VJKNN)


def featurize(estimate: np.ndarray) -> np.ndarray:
    """Interleave real and imaginary parts: (Re h_1, Im h_1, ..., Re h_N, Im h_N)."""
    estimate = np.asarray(estimate)
    features = np.empty(estimate.shape[:-1] + (2 * estimate.shape[-1],))
    features[..., 0::2] = estimate.real
    features[..., 1::2] = estimate.imag
    return features


def unfeaturize(features: np.ndarray) -> np.ndarray:
    features = np.asarray(features, dtype=float)
    if features.shape[-1] % 2:
        raise ValueError(f"feature length must be even, got {features.shape[-1]}")
    return features[..., 0::2] + 1j * features[..., 1::2]


def distance(a: np.ndarray, b: np.ndarray) -> float:
    a, b = np.asarray(a, dtype=float), np.asarray(b, dtype=float)
    if a.shape != b.shape:
        raise ValueError(f"feature vectors differ in length: {a.shape} vs {b.shape}")
    return float(np.sqrt(np.sum((a - b) ** 2)))


def _build_index(training: np.ndarray) -> faiss.IndexFlatL2:
    index = faiss.IndexFlatL2(training.shape[1])
    index.add(np.ascontiguousarray(training, dtype=np.float32))
    return index


def _ranked(
    index: faiss.IndexFlatL2,
    training: np.ndarray,
    queries: np.ndarray,
    width: int,
    own: np.ndarray | None,
) -> tuple[np.ndarray, np.ndarray]:
    """``width`` faiss candidates per query, re-measured in float64 and sorted by (distance, index)."""
    _, idx = index.search(np.ascontiguousarray(queries, dtype=np.float32), width)
    diff = queries[:, None, :] - training[idx]
    dist = np.sqrt(np.sum(diff**2, axis=-1))
    if own is not None:
        dist = np.where(idx == own[:, None], np.inf, dist)
    order = np.lexsort((idx, dist), axis=-1)
    return np.take_along_axis(dist, order, axis=-1), np.take_along_axis(idx, order, axis=-1)


def _crowded(dist: np.ndarray, count: int) -> np.ndarray:
    """Rows whose farthest candidate ties the count-th one; points faiss left out may tie as well."""
    farthest = np.max(np.where(np.isfinite(dist), dist, -np.inf), axis=-1)
    return farthest <= dist[:, count - 1] * (1.0 + _TIE_RTOL)


def nearest(
    training: np.ndarray,
    queries: np.ndarray,
    count: int,
    exclude_self: bool = False,
    index: faiss.IndexFlatL2 | None = None,
) -> tuple[np.ndarray, np.ndarray]:
    """Exact ``count`` nearest training points of every query, ordered by (distance, index).

    faiss proposes candidates with a margin; distances are then recomputed in
    float64. Rows where every candidate ties the count-th distance are searched
    again with doubled width until the tie is closed or the whole set is in.
    With ``exclude_self`` the queries are the training rows themselves and each
    row's own index is skipped.
    """
    n = training.shape[0]
    available = n - 1 if exclude_self else n
    if not 1 <= count <= available:
        raise ValueError(f"cannot take {count} neighbors among {available} training points")
    if index is None:
        index = _build_index(training)
    base_width = min(n, count + _SEARCH_MARGIN + int(exclude_self))

    dist_parts, idx_parts = [], []
    for start in range(0, queries.shape[0], _QUERY_CHUNK):
        chunk = queries[start : start + _QUERY_CHUNK]
        own = np.arange(start, start + chunk.shape[0]) if exclude_self else None
        wide_dist, wide_idx = _ranked(index, training, chunk, base_width, own)
        dist, idx = wide_dist[:, :count].copy(), wide_idx[:, :count].copy()

        width = base_width
        rows = np.flatnonzero(_crowded(wide_dist, count))
        while rows.size and width < n:
            width = min(n, 2 * width)
            wide_dist, wide_idx = _ranked(index, training, chunk[rows], width, None if own is None else own[rows])
            dist[rows], idx[rows] = wide_dist[:, :count], wide_idx[:, :count]
            rows = rows[_crowded(wide_dist, count)]

        dist_parts.append(dist)
        idx_parts.append(idx)
    return np.concatenate(dist_parts), np.concatenate(idx_parts)


def _ratio(query_dist: np.ndarray, query_idx: np.ndarray, train_mean: np.ndarray) -> np.ndarray:
    """D_xy / D_yz per query; 0 when both are zero, inf when only D_yz is."""
    d_xy = query_dist.mean(axis=-1)
    d_yz = train_mean[query_idx].mean(axis=-1)
    with np.errstate(divide="ignore", invalid="ignore"):
        score = d_xy / d_yz
    score = np.where(d_yz == 0, np.where(d_xy == 0, 0.0, np.inf), score)
    return score


def _check_parameters(variant: OcnnVariant, j: int, k: int, size: int) -> None:
    if j < 1 or k < 1:
        raise ValueError(f"j and k must be positive, got j={j}, k={k}")
    if not variant.tunes_j and j != 1:
        raise ValueError(f"variant {variant} fixes j = 1, got {j}")
    if not variant.tunes_k and k != 1:
        raise ValueError(f"variant {variant} fixes k = 1, got {k}")
    if j >= size or k >= size:
        raise ValueError(f"j={j} and k={k} must be smaller than the training size {size}")


class OcnnModel:
    def __init__(self, variant: OcnnVariant | str, j: int, k: int, theta_d: float, training: np.ndarray):
        self.variant = OcnnVariant(variant)
        self.j = int(j)
        self.k = int(k)
        self.theta_d = float(theta_d)
        self.training = np.asarray(training, dtype=float)
        if self.training.ndim != 2 or not np.all(np.isfinite(self.training)):
            raise ValueError("training must be a finite 2-D feature matrix")
        if not self.theta_d > 0:
            raise ValueError(f"theta_d must be positive, got {self.theta_d}")
        _check_parameters(self.variant, self.j, self.k, self.training.shape[0])
        self._index: faiss.IndexFlatL2 | None = None
        self._train_mean: np.ndarray | None = None

    def __getstate__(self):
        state = self.__dict__.copy()
        state["_index"] = None
        return state

    @property
    def index(self) -> faiss.IndexFlatL2:
        if self._index is None:
            self._index = _build_index(self.training)
        return self._index

    @property
    def train_mean(self) -> np.ndarray:
        """Mean distance of every training point to its k nearest other training points."""
        if self._train_mean is None:
            dist, _ = nearest(self.training, self.training, self.k, exclude_self=True, index=self.index)
            self._train_mean = dist.mean(axis=-1)
        return self._train_mean

    def scores(self, features: np.ndarray) -> np.ndarray:
        features = np.atleast_2d(np.asarray(features, dtype=float))
        if features.shape[-1] != self.training.shape[1]:
            raise ValueError(
                f"features have {features.shape[-1]} attributes, model expects {self.training.shape[1]}"
            )
        dist, idx = nearest(self.training, features, self.j, index=self.index)
        return _ratio(dist, idx, self.train_mean)

    def accepts(self, features: np.ndarray) -> np.ndarray:
        return self.scores(features) < self.theta_d


def ocnn_score(x: np.ndarray, model: OcnnModel) -> float:
    return float(model.scores(x)[0])


def training_set(h_ab: np.ndarray, params: SystemParams, size: int, stream: RandomStream) -> np.ndarray:
    """Phase-I estimates of one channel realization, as a feature matrix."""
    h_ab = np.broadcast_to(np.asarray(h_ab), (size, params.n_channels))
    return featurize(setup_estimate(h_ab, params, stream))


@dataclass(frozen=True)
class _FoldTask:
    training: np.ndarray
    held_out: np.ndarray
    max_j: int
    max_k: int


@dataclass
class _FoldNeighbors:
    query_dist: np.ndarray
    query_idx: np.ndarray
    train_dist: np.ndarray

    def scores(self, j: int, k: int) -> np.ndarray:
        return _ratio(self.query_dist[:, :j], self.query_idx[:, :j], self.train_dist[:, :k].mean(axis=-1))


def _fold_neighbors(task: _FoldTask) -> _FoldNeighbors:
    index = _build_index(task.training)
    query_dist, query_idx = nearest(task.training, task.held_out, task.max_j, index=index)
    train_dist, _ = nearest(task.training, task.training, task.max_k, exclude_self=True, index=index)
    return _FoldNeighbors(query_dist, query_idx, train_dist)


def _theta_for(scores: np.ndarray, target_pfa: float) -> float:
    """Smallest threshold rejecting at most ``target_pfa`` of ``scores``.

    The higher order statistic is picked directly: np.quantile interpolates
    and turns a run of infinite scores (duplicated training points) into nan.
    The result is +inf when that order statistic is itself infinite.
    """
    ordered = np.sort(scores)
    value = float(ordered[int(np.ceil((1.0 - target_pfa) * (ordered.size - 1)))])
    return float(np.nextafter(value, np.inf))


def tune(
    training: np.ndarray,
    variant: OcnnVariant | str,
    target_pfa: float,
    g_folds: int = 10,
    grid: tuple[int, ...] = NEIGHBOR_GRID,
    workers: int = 1,
) -> OcnnModel:
    """Fit j, k and theta_d by g-fold cross-validation on target-class data only.

    Each candidate's theta_d is the held-out score quantile pooled across folds;
    the candidate whose per-fold false-alarm rates deviate least from the target
    wins, ties going to smaller j + k and then smaller j.
    """
    variant = OcnnVariant(variant)
    training = np.asarray(training, dtype=float)
    n = training.shape[0]
    if g_folds < 2:
        raise ValueError(f"g_folds must be at least 2, got {g_folds}")
    if n < 10 * g_folds:
        raise ValueError(f"{n} training points are too few for {g_folds} folds")
    if not 0.0 < target_pfa < 1.0:
        raise ValueError(f"target_pfa must lie in (0, 1), got {target_pfa}")
    started = time.perf_counter()

    folds = np.array_split(np.arange(n), g_folds)
    fit_size = n - max(len(f) for f in folds)
    js = [j for j in grid if j < fit_size] if variant.tunes_j else [1]
    ks = [k for k in grid if k < fit_size] if variant.tunes_k else [1]

    tasks = [
        _FoldTask(np.delete(training, fold, axis=0), training[fold], max(js), max(ks))
        for fold in folds
    ]
    neighbors = parallel_map(_fold_neighbors, tasks, workers)

    best: tuple[float, int, int, int, float] | None = None
    for j in js:
        for k in ks:
            fold_scores = [nb.scores(j, k) for nb in neighbors]
            theta_d = _theta_for(np.concatenate(fold_scores), target_pfa)
            deviation = float(
                np.mean([abs(np.mean(s >= theta_d) - target_pfa) for s in fold_scores])
            )
            key = (deviation, j + k, j, k, theta_d)
            if best is None or key[:3] < best[:3]:
                best = key

    deviation, _, j, k, theta_d = best
    logger.bind(
        variant=str(variant),
        j=j,
        k=k,
        theta_d=theta_d,
        deviation=deviation,
        duration_ms=int((time.perf_counter() - started) * 1000),
    ).info("ocnn_tuned")
    return OcnnModel(variant, j, k, theta_d, training)


def save_model(model: OcnnModel, path: str | Path) -> None:
    document = {
        "format": MODEL_FORMAT,
        "version": MODEL_VERSION,
        "variant": str(model.variant),
        "j": model.j,
        "k": model.k,
        "theta_d": model.theta_d,
        "n_features": int(model.training.shape[1]),
        "training": model.training.tolist(),
    }
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(document))


def load_model(path: str | Path) -> OcnnModel:
    document = json.loads(Path(path).read_text())
    if document.get("format") != MODEL_FORMAT:
        raise ValueError(f"{path} is not an OCNN model document")
    if document.get("version") != MODEL_VERSION:
        raise ValueError(f"unsupported OCNN model version {document.get('version')!r}")
    training = np.asarray(document["training"], dtype=float).reshape(-1, document["n_features"])
    return OcnnModel(document["variant"], document["j"], document["k"], document["theta_d"], training)
