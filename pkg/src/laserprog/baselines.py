"""Reference detectors: a deterministic GRU autoencoder and Local Outlier Factor."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass

import numpy as np

from .datagen import NormStats, PowerWindow, WindowSet
from .scvae import ScvaeConfig, ScvaeModel, train
from .anomaly import anomaly_score, score_windows

DIST_FLOOR = 1e-12

# The autoencoder is the SCVAE network with the sampling step removed, so it
# shares the model container, persistence and scoring path.
GruAeModel = ScvaeModel


def gru_ae_config(base: ScvaeConfig | None = None, **overrides) -> ScvaeConfig:
    """Deterministic-code variant of ``base``; the code size stays ``latent_dim``."""
    base = base or ScvaeConfig()
    return dataclasses.replace(base, variational=False, kl_weight=0.0, **overrides)


def gru_ae_train(data: WindowSet, config: ScvaeConfig, norm: NormStats):
    """Train on normal windows with a pure sum-of-squares loss."""
    if config.variational:
        config = gru_ae_config(config)
    return train(data, config, norm)


def gru_ae_score(model: GruAeModel, window: PowerWindow) -> float:
    return anomaly_score(model, window)


def gru_ae_scores(model: GruAeModel, windows: WindowSet) -> np.ndarray:
    return score_windows(model, windows)


# ---------------------------------------------------------------------------
# Local Outlier Factor


@dataclass(frozen=True)
class LofConfig:
    k: int = 100
    contamination: float = 0.5

    def __post_init__(self):
        if self.k < 1:
            raise ValueError("k must be >= 1")
        if not 0.0 < self.contamination <= 0.5:
            raise ValueError("contamination must lie in (0, 0.5]")

    def effective_k(self, n: int) -> int:
        if n < 2:
            raise ValueError("LOF needs at least two points")
        return min(self.k, n - 1)


def lof_features(windows: WindowSet, norm: NormStats) -> np.ndarray:
    """Normalized power window concatenated with normalized (T, I)."""
    x, oc = windows.normalized(norm)
    return np.hstack([x, oc])


def _distances(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    diff = a[:, None, :] - b[None, :, :]
    return np.maximum(np.sqrt(np.sum(diff * diff, axis=-1)), DIST_FLOOR)


def _neighbourhoods(d: np.ndarray, k: int) -> tuple[np.ndarray, np.ndarray]:
    """k-distance per row and the (tie-inclusive) k-distance neighbourhood mask."""
    kdist = np.partition(d, k - 1, axis=1)[:, k - 1]
    return kdist, d <= kdist[:, None]


def _lrd(d: np.ndarray, mask: np.ndarray, kdist_ref: np.ndarray) -> np.ndarray:
    reach = np.maximum(d, kdist_ref[None, :])
    return mask.sum(axis=1) / np.where(mask, reach, 0.0).sum(axis=1)


def lof_scores(points: np.ndarray, k: int) -> np.ndarray:
    """LOF of every point with respect to the rest of the set.

    Neighbourhoods include every point tied at the k-distance, and distances
    are floored at ``DIST_FLOOR`` so duplicates keep a finite density.
    """
    points = np.asarray(points, dtype=float)
    if points.ndim == 1:
        points = points[:, None]
    n = points.shape[0]
    if not 1 <= k < n:
        raise ValueError(f"LOF needs 1 <= k < n, got k={k}, n={n}")
    d = _distances(points, points)
    np.fill_diagonal(d, np.inf)
    kdist, mask = _neighbourhoods(d, k)
    lrd = _lrd(d, mask, kdist)
    return (np.where(mask, lrd[None, :], 0.0).sum(axis=1) / mask.sum(axis=1)) / lrd


@dataclass
class LofModel:
    config: LofConfig
    reference: np.ndarray
    k: int
    kdist: np.ndarray
    lrd: np.ndarray
    train_scores: np.ndarray
    threshold: float

    def score(self, points: np.ndarray) -> np.ndarray:
        """LOF of new points against the reference set (novelty scoring)."""
        points = np.atleast_2d(np.asarray(points, dtype=float))
        out = np.empty(points.shape[0])
        # chunked to bound the distance matrix size
        for s in range(0, points.shape[0], 512):
            d = _distances(points[s : s + 512], self.reference)
            _, mask = _neighbourhoods(d, self.k)
            lrd_q = _lrd(d, mask, self.kdist)
            out[s : s + 512] = (np.where(mask, self.lrd[None, :], 0.0).sum(axis=1) / mask.sum(axis=1)) / lrd_q
        return out

    def predict(self, points: np.ndarray) -> np.ndarray:
        """True where a point is flagged degraded by the contamination threshold."""
        return self.score(points) > self.threshold


def lof_fit(points: np.ndarray, config: LofConfig = LofConfig()) -> LofModel:
    points = np.asarray(points, dtype=float)
    k = config.effective_k(points.shape[0])
    d = _distances(points, points)
    np.fill_diagonal(d, np.inf)
    kdist, mask = _neighbourhoods(d, k)
    lrd = _lrd(d, mask, kdist)
    train_scores = (np.where(mask, lrd[None, :], 0.0).sum(axis=1) / mask.sum(axis=1)) / lrd
    threshold = float(np.quantile(train_scores, 1.0 - config.contamination))
    return LofModel(config, points, k, kdist, lrd, train_scores, threshold)
