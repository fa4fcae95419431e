"""PCA monitoring baseline with T2 and SPE (Q) statistics.

The retained subspace keeps the smallest number of leading principal
components whose eigenvalue sum reaches the requested variance fraction;
alarm thresholds are empirical training quantiles of both statistics, the
same decision contract as the contrastive detector.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, UsageError
from .outlier import quantile_threshold


@dataclass
class PcaModel:
    mean: np.ndarray  # (D,)
    loadings: np.ndarray  # (D, r), orthonormal columns
    eigenvalues: np.ndarray  # (r,), descending, > 0
    variance_target: float
    retained_fraction: float
    t2_threshold: float
    spe_threshold: float
    quantile: float

    @property
    def r(self) -> int:
        return self.loadings.shape[1]

    def to_json(self) -> dict:
        return {
            "mean": self.mean.tolist(),
            "loadings": self.loadings.ravel().tolist(),
            "eigenvalues": self.eigenvalues.tolist(),
            "r": self.r,
            "variance_target": self.variance_target,
            "retained_fraction": self.retained_fraction,
            "thresholds": {"t2": self.t2_threshold, "spe": self.spe_threshold},
            "quantile": self.quantile,
        }

    @classmethod
    def from_json(cls, meta: dict) -> "PcaModel":
        mean = np.array(meta["mean"], dtype=float)
        r = int(meta["r"])
        return cls(
            mean=mean,
            loadings=np.array(meta["loadings"], dtype=float).reshape(mean.size, r),
            eigenvalues=np.array(meta["eigenvalues"], dtype=float),
            variance_target=float(meta["variance_target"]),
            retained_fraction=float(meta["retained_fraction"]),
            t2_threshold=float(meta["thresholds"]["t2"]),
            spe_threshold=float(meta["thresholds"]["spe"]),
            quantile=float(meta["quantile"]),
        )

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.to_json(), fh, indent=2, sort_keys=True)
            fh.write("\n")

    @classmethod
    def load(cls, path) -> "PcaModel":
        with open(path, "r", encoding="utf-8") as fh:
            return cls.from_json(json.load(fh))


def fit_pca(train: np.ndarray, variance_target: float = 0.9, q: float = 98.0) -> PcaModel:
    X = np.asarray(train, dtype=float)
    if X.ndim != 2 or X.shape[0] < 2:
        raise UsageError("fit_pca needs an n x D matrix with n >= 2")
    if not 0.0 < variance_target <= 1.0:
        raise ConfigError("variance_target must lie in (0, 1]")
    mean = X.mean(axis=0)
    centered = X - mean
    cov = centered.T @ centered / (X.shape[0] - 1)
    w, V = np.linalg.eigh(cov)
    order = np.argsort(w)[::-1]
    w = np.clip(w[order], 0.0, None)
    V = V[:, order]
    cum = np.cumsum(w)
    total = cum[-1]
    if total <= 0.0:
        raise ConfigError("training data has zero variance; PCA undefined")
    n_positive = int(np.sum(w > w[0] * 1e-12))
    r = int(np.searchsorted(cum, variance_target * total) + 1)
    r = min(max(r, 1), n_positive)
    model = PcaModel(
        mean=mean,
        loadings=V[:, :r],
        eigenvalues=w[:r],
        variance_target=variance_target,
        retained_fraction=float(cum[r - 1] / total),
        t2_threshold=0.0,
        spe_threshold=0.0,
        quantile=q,
    )
    model.t2_threshold = quantile_threshold(t2_statistic(model, X), q)
    model.spe_threshold = quantile_threshold(spe_statistic(model, X), q)
    return model


def t2_statistic(model: PcaModel, x: np.ndarray):
    """Hotelling T2 in the retained subspace: sum of t_i^2 / lambda_i."""
    x = np.asarray(x, dtype=float)
    single = x.ndim == 1
    X = np.atleast_2d(x)
    if X.shape[1] != model.mean.size:
        raise UsageError(f"samples must have {model.mean.size} columns")
    t = (X - model.mean) @ model.loadings
    d = (t * t / model.eigenvalues).sum(axis=1)
    return float(d[0]) if single else d


def spe_statistic(model: PcaModel, x: np.ndarray):
    """Squared residual outside the retained subspace."""
    x = np.asarray(x, dtype=float)
    single = x.ndim == 1
    X = np.atleast_2d(x)
    if X.shape[1] != model.mean.size:
        raise UsageError(f"samples must have {model.mean.size} columns")
    centered = X - model.mean
    t = centered @ model.loadings
    resid = centered - t @ model.loadings.T
    d = (resid * resid).sum(axis=1)
    return float(d[0]) if single else d
