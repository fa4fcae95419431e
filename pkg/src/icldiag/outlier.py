"""Gaussian statistics over score embeddings and quantile rejection rules.

The inlier/outlier decision is: distance(sample) <= theta -> inlier, where
theta is an empirical quantile of the training-sample distances. Mahalanobis
distances are evaluated through a Cholesky factor with triangular solves;
the covariance carries a trace-scaled ridge so the factorization exists even
when the sample covariance is singular (n < k or collinear score columns).
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from fractions import Fraction

import numpy as np
from scipy.linalg import solve_triangular

from .errors import ConfigError, NumericalError, UsageError

DISTANCE_KINDS = ("mahalanobis", "euclidean", "cityblock", "canberra")

DEFAULT_RIDGE_EPS = 1e-6


@dataclass
class GaussianStats:
    """Mean, ridged covariance, and its lower Cholesky factor."""

    mean: np.ndarray  # (k,)
    cov: np.ndarray  # (k, k), ridge already added
    factor: np.ndarray  # lower triangular, factor @ factor.T == cov
    ridge_eps: float  # requested ridge coefficient
    ridge_added: float  # absolute amount added to the diagonal

    @classmethod
    def from_covariance(
        cls, mean: np.ndarray, cov: np.ndarray, ridge_eps: float = 0.0
    ) -> "GaussianStats":
        mean = np.asarray(mean, dtype=float)
        cov = np.asarray(cov, dtype=float)
        k = mean.shape[0]
        if cov.shape != (k, k):
            raise UsageError(f"covariance must be ({k}, {k}), got {cov.shape}")
        scale = float(np.trace(cov)) / k
        if scale <= 0.0:
            scale = 1.0
        added = ridge_eps * scale
        ridged = cov + added * np.eye(k)
        try:
            factor = np.linalg.cholesky(ridged)
        except np.linalg.LinAlgError:
            cond = float(np.linalg.cond(ridged))
            raise NumericalError(
                f"covariance not positive definite after ridge {added:g} "
                f"(condition estimate {cond:.3e})"
            )
        return cls(
            mean=mean, cov=ridged, factor=factor, ridge_eps=ridge_eps, ridge_added=added
        )


def fit_gaussian(scores: np.ndarray, ridge_eps: float = DEFAULT_RIDGE_EPS) -> GaussianStats:
    """Column means and ridged sample covariance (divisor n - 1) of scores."""
    S = np.asarray(scores, dtype=float)
    if S.ndim != 2:
        raise UsageError("scores must be an n x k matrix")
    n, k = S.shape
    if n < 2:
        raise UsageError(f"need at least 2 samples to fit a Gaussian, got {n}")
    mean = S.mean(axis=0)
    centered = S - mean
    cov = centered.T @ centered / (n - 1)
    return GaussianStats.from_covariance(mean, cov, ridge_eps=ridge_eps)


def mahalanobis(stats: GaussianStats, s: np.ndarray):
    """sqrt((s - mu)^T Sigma^{-1} (s - mu)) via triangular solves.

    Accepts a single k-vector or an (m, k) batch; returns a float or an
    (m,) array accordingly.
    """
    s = np.asarray(s, dtype=float)
    single = s.ndim == 1
    S = np.atleast_2d(s)
    if S.shape[1] != stats.mean.shape[0]:
        raise UsageError(
            f"sample length {S.shape[1]} does not match stats dimension "
            f"{stats.mean.shape[0]}"
        )
    z = solve_triangular(stats.factor, (S - stats.mean).T, lower=True)
    d = np.sqrt((z * z).sum(axis=0))
    return float(d[0]) if single else d


def alt_distance(kind: str, center: np.ndarray, s: np.ndarray):
    """Center-based ablation distances (euclidean, cityblock, canberra)."""
    center = np.asarray(center, dtype=float)
    s = np.asarray(s, dtype=float)
    single = s.ndim == 1
    S = np.atleast_2d(s)
    if S.shape[1] != center.shape[0]:
        raise UsageError("sample length does not match center length")
    diff = S - center
    if kind == "euclidean":
        d = np.sqrt((diff * diff).sum(axis=1))
    elif kind == "cityblock":
        d = np.abs(diff).sum(axis=1)
    elif kind == "canberra":
        denom = np.abs(S) + np.abs(center)
        terms = np.where(denom == 0.0, 0.0, np.abs(diff) / np.where(denom == 0.0, 1.0, denom))
        d = terms.sum(axis=1)
    else:
        raise ConfigError(f"unknown distance kind {kind!r}")
    return float(d[0]) if single else d


def quantile_threshold(train_distances, q) -> float:
    """The ceil(q*n/100)-th smallest training distance (order statistic).

    Guarantees that at least q% of the training distances are <= theta. The
    rank is computed with exact rational arithmetic so boundary cases like
    q*n/100 being an integer are never lost to float rounding.
    """
    d = np.asarray(train_distances, dtype=float).ravel()
    n = d.size
    if n == 0:
        raise UsageError("cannot take a quantile of an empty distance set")
    if not 0.0 < q <= 100.0:
        raise UsageError(f"quantile must lie in (0, 100], got {q}")
    rank = int(math.ceil(Fraction(q) * n / 100))
    rank = min(max(rank, 1), n)
    return float(np.partition(d, rank - 1)[rank - 1])


@dataclass
class RejectionRule:
    """A fitted distance kind plus its quantile threshold."""

    kind: str
    theta: float
    quantile: float
    stats: GaussianStats | None = None  # mahalanobis only
    center: np.ndarray | None = None  # other kinds

    def distance(self, s: np.ndarray):
        if self.kind == "mahalanobis":
            return mahalanobis(self.stats, s)
        return alt_distance(self.kind, self.center, s)

    def to_json(self) -> dict:
        if self.kind == "mahalanobis":
            mu = self.stats.mean
            sigma = self.stats.cov.ravel().tolist()
            ridge = self.stats.ridge_eps
        else:
            mu = self.center
            sigma = None
            ridge = None
        return {
            "kind": self.kind,
            "mu": mu.tolist(),
            "sigma": sigma,
            "ridge": ridge,
            "theta": self.theta,
            "quantile": self.quantile,
        }

    @classmethod
    def from_json(cls, meta: dict) -> "RejectionRule":
        kind = meta["kind"]
        mu = np.array(meta["mu"], dtype=float)
        if kind == "mahalanobis":
            k = mu.shape[0]
            sigma = np.array(meta["sigma"], dtype=float).reshape(k, k)
            # sigma was stored with the ridge already folded in
            stats = GaussianStats.from_covariance(mu, sigma, ridge_eps=0.0)
            stats.ridge_eps = meta.get("ridge", 0.0)
            return cls(
                kind=kind,
                theta=float(meta["theta"]),
                quantile=float(meta["quantile"]),
                stats=stats,
            )
        return cls(
            kind=kind,
            theta=float(meta["theta"]),
            quantile=float(meta["quantile"]),
            center=mu,
        )

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.to_json(), fh, indent=2, sort_keys=True)
            fh.write("\n")

    @classmethod
    def load(cls, path) -> "RejectionRule":
        with open(path, "r", encoding="utf-8") as fh:
            return cls.from_json(json.load(fh))


def fit_rule(
    train_scores: np.ndarray,
    kind: str = "mahalanobis",
    q: float = 98.0,
    ridge_eps: float = DEFAULT_RIDGE_EPS,
):
    """Fit a RejectionRule on training score embeddings.

    Returns (rule, train_distances); theta is the q% quantile of the
    training distances under the fitted statistics.
    """
    if kind not in DISTANCE_KINDS:
        raise ConfigError(f"unknown distance kind {kind!r}")
    S = np.asarray(train_scores, dtype=float)
    if kind == "mahalanobis":
        stats = fit_gaussian(S, ridge_eps=ridge_eps)
        dists = mahalanobis(stats, S)
        rule = RejectionRule(
            kind=kind, theta=quantile_threshold(dists, q), quantile=q, stats=stats
        )
    else:
        center = S.mean(axis=0)
        dists = alt_distance(kind, center, S)
        rule = RejectionRule(
            kind=kind, theta=quantile_threshold(dists, q), quantile=q, center=center
        )
    return rule, dists


def classify_outlier(rule: RejectionRule, d):
    """True when the distance exceeds theta (d == theta is an inlier)."""
    d = np.asarray(d, dtype=float)
    out = d > rule.theta
    return bool(out) if out.ndim == 0 else out
