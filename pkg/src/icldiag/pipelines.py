"""The two diagnosis pipelines: process monitoring and open-set diagnosis.

Process monitoring trains the contrastive encoders on normal data only and
rejects any sample whose Mahalanobis distance in score space exceeds the
q% training quantile. Open-set diagnosis additionally trains a known-class
classifier; rejected samples are labeled "unknown" regardless of classifier
confidence, accepted samples get the classifier's argmax class.

One standardizer is fitted on the training rows and applied before the
encoders, the classifier, and scoring alike.
"""

from __future__ import annotations

import hashlib
import json
import os
from dataclasses import dataclass, replace

import numpy as np

from .classifier import (
    ClassifierConfig,
    KnownClassifier,
    load_classifier,
    predict_known,
    save_classifier,
    train_classifier,
)
from .data import Standardizer, TabularDataset, fit_standardizer, transform
from .errors import ConfigError
from .icl import IclConfig, IclModel, load_icl, save_icl, score_matrix, train_icl
from .metrics import UNKNOWN_LABEL
from .outlier import DEFAULT_RIDGE_EPS, RejectionRule, fit_rule

DEFAULT_QUANTILE = 98.0


def data_fingerprint(ds: TabularDataset) -> str:
    h = hashlib.sha256()
    h.update(np.ascontiguousarray(ds.values, dtype="<f8").tobytes())
    h.update(np.ascontiguousarray(ds.labels, dtype="<i8").tobytes())
    return h.hexdigest()


@dataclass
class PmModel:
    """Normal-data encoders plus the fitted rejection rule (theta_0)."""

    icl: IclModel
    rule: RejectionRule
    standardizer: Standardizer | None
    train_fingerprint: str
    quantile: float


def pm_fit(
    normal: TabularDataset,
    icl_config: IclConfig,
    q: float = DEFAULT_QUANTILE,
    standardize: bool = True,
    distance_kind: str = "mahalanobis",
    ridge_eps: float = DEFAULT_RIDGE_EPS,
) -> PmModel:
    """Train on normal data only; theta_0 is the q% training quantile."""
    if np.any(normal.labels != 0):
        bad = sorted(set(normal.labels[normal.labels != 0].tolist()))
        raise ConfigError(
            f"process-monitoring training data must be all-normal (label 0); "
            f"found labels {bad}"
        )
    std = fit_standardizer(normal) if standardize else None
    train_ds = transform(std, normal) if std is not None else normal
    icl = train_icl(train_ds, icl_config)
    scores = score_matrix(icl, train_ds.values)
    rule, _ = fit_rule(scores, kind=distance_kind, q=q, ridge_eps=ridge_eps)
    return PmModel(
        icl=icl,
        rule=rule,
        standardizer=std,
        train_fingerprint=data_fingerprint(normal),
        quantile=q,
    )


def pm_distances(model: PmModel, x: np.ndarray):
    """Score-space distances of raw samples under the fitted statistics."""
    X = np.atleast_2d(np.asarray(x, dtype=float))
    if model.standardizer is not None:
        X = model.standardizer.transform_values(X)
    return model.rule.distance(score_matrix(model.icl, X))


def pm_detect(model: PmModel, x: np.ndarray):
    """1 for outlier (fault), 0 for inlier; the boundary d == theta is 0.

    A single sample returns an int, a batch an int array.
    """
    x = np.asarray(x, dtype=float)
    single = x.ndim == 1
    d = pm_distances(model, x)
    out = (d > model.rule.theta).astype(int)
    return int(out[0]) if single else out


@dataclass
class OsfdModel:
    """Joint encoders over all known classes, classifier, and theta_u."""

    icl: IclModel
    classifier: KnownClassifier
    rule: RejectionRule
    standardizer: Standardizer | None
    known_classes: list[int]
    train_fingerprint: str
    quantile: float

    @property
    def unknown_numeric_id(self) -> int:
        # reserved id following the known classes 1..N convention
        return len(self.known_classes) + 1


def osfd_fit(
    known: TabularDataset,
    icl_config: IclConfig,
    clf_config: ClassifierConfig,
    q: float = DEFAULT_QUANTILE,
    standardize: bool = True,
    distance_kind: str = "mahalanobis",
    ridge_eps: float = DEFAULT_RIDGE_EPS,
) -> OsfdModel:
    """Train classifier and encoders on the known classes; fit theta_u."""
    classes = np.unique(known.labels)
    if classes.size < 2:
        raise ConfigError("open-set training data needs at least 2 known classes")
    std = fit_standardizer(known) if standardize else None
    train_ds = transform(std, known) if std is not None else known
    clf = train_classifier(train_ds, clf_config)
    icl = train_icl(train_ds, icl_config)
    scores = score_matrix(icl, train_ds.values)
    rule, _ = fit_rule(scores, kind=distance_kind, q=q, ridge_eps=ridge_eps)
    return OsfdModel(
        icl=icl,
        classifier=clf,
        rule=rule,
        standardizer=std,
        known_classes=[int(c) for c in classes],
        train_fingerprint=data_fingerprint(known),
        quantile=q,
    )


def osfd_predict_detail(model: OsfdModel, x: np.ndarray):
    """Returns (distances, classifier_ids, is_unknown) for a batch."""
    X = np.atleast_2d(np.asarray(x, dtype=float))
    if model.standardizer is not None:
        X = model.standardizer.transform_values(X)
    dist = model.rule.distance(score_matrix(model.icl, X))
    _, ids = predict_known(model.classifier, X)
    ids = np.atleast_1d(ids)
    return dist, ids, dist > model.rule.theta


def osfd_predict(model: OsfdModel, x: np.ndarray):
    """Predicted class id, or "unknown" when the sample is rejected.

    Rejection overrides the classifier unconditionally. A single sample
    returns one value, a batch a list.
    """
    x = np.asarray(x, dtype=float)
    single = x.ndim == 1
    _, ids, unknown = osfd_predict_detail(model, x)
    out = [UNKNOWN_LABEL if u else int(c) for c, u in zip(ids, unknown)]
    return out[0] if single else out


def with_rule(model: OsfdModel, rule: RejectionRule) -> OsfdModel:
    """Same trained model, different rejection rule (ablation helper)."""
    return replace(model, rule=rule, quantile=rule.quantile)


def save_pm_model(model: PmModel, directory) -> None:
    os.makedirs(directory, exist_ok=True)
    save_icl(model.icl, directory)
    model.rule.save(os.path.join(directory, "rule.json"))
    _write_manifest(
        directory,
        {
            "task": "pm",
            "quantile": model.quantile,
            "icl_config": _icl_config_dict(model.icl.config),
            "standardizer": None
            if model.standardizer is None
            else model.standardizer.to_json(),
            "train_fingerprint": model.train_fingerprint,
        },
    )


def load_pm_model(directory) -> PmModel:
    meta = _read_manifest(directory, expect_task="pm")
    return PmModel(
        icl=load_icl(directory),
        rule=RejectionRule.load(os.path.join(directory, "rule.json")),
        standardizer=None
        if meta["standardizer"] is None
        else Standardizer.from_json(meta["standardizer"]),
        train_fingerprint=meta["train_fingerprint"],
        quantile=meta["quantile"],
    )


def save_osfd_model(model: OsfdModel, directory) -> None:
    os.makedirs(directory, exist_ok=True)
    save_icl(model.icl, directory)
    save_classifier(model.classifier, directory)
    model.rule.save(os.path.join(directory, "rule.json"))
    _write_manifest(
        directory,
        {
            "task": "osfd",
            "quantile": model.quantile,
            "icl_config": _icl_config_dict(model.icl.config),
            "known_classes": model.known_classes,
            "standardizer": None
            if model.standardizer is None
            else model.standardizer.to_json(),
            "train_fingerprint": model.train_fingerprint,
        },
    )


def load_osfd_model(directory) -> OsfdModel:
    meta = _read_manifest(directory, expect_task="osfd")
    return OsfdModel(
        icl=load_icl(directory),
        classifier=load_classifier(directory),
        rule=RejectionRule.load(os.path.join(directory, "rule.json")),
        standardizer=None
        if meta["standardizer"] is None
        else Standardizer.from_json(meta["standardizer"]),
        known_classes=[int(c) for c in meta["known_classes"]],
        train_fingerprint=meta["train_fingerprint"],
        quantile=meta["quantile"],
    )


def _icl_config_dict(config: IclConfig) -> dict:
    return {
        "l": config.l,
        "tau": config.tau,
        "u": config.u,
        "embed_dim": config.embed_dim,
        "lr": config.lr,
        "epochs": config.epochs,
        "batch_size": config.batch_size,
        "denominator_mode": config.denominator_mode,
        "score_mode": config.score_mode,
        "seed": config.seed,
    }


def _write_manifest(directory, meta: dict) -> None:
    with open(os.path.join(directory, "manifest.json"), "w", encoding="utf-8") as fh:
        json.dump(meta, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _read_manifest(directory, expect_task: str) -> dict:
    with open(os.path.join(directory, "manifest.json"), "r", encoding="utf-8") as fh:
        meta = json.load(fh)
    if meta.get("task") != expect_task:
        raise ConfigError(
            f"{directory}: manifest task {meta.get('task')!r}, expected {expect_task!r}"
        )
    return meta
