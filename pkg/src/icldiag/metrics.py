"""Evaluation: fault detection rate, F1, AUROC, confusion matrices, reports.

Report JSON schema (version 1): a single object with sorted keys

    schema_version   int
    task             "pm" | "osfd"
    seed             int
    config           flat dict echoed from the resolved run configuration
    n_test           int
    class_labels     list of row/column labels for the confusion matrix
    confusion        nested list, rows = truth, columns = prediction
    threshold        {"quantile": float, "theta": float}
    metrics          task-specific scalar metrics (see builders below)
    predictions      per-sample predicted labels (ints, or "unknown")

Wall-clock time is deliberately not part of report.json so that repeated
runs with the same seed produce byte-identical reports; it is carried on
the DiagnosisReport object and written to a sidecar timing file instead.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np
from scipy.stats import rankdata

from .errors import UsageError

DEFAULT_OT_LIMIT = 0.5


@dataclass
class FdrResult:
    """Detection rate over post-onset fault samples plus pre-onset alarms."""

    rate: float
    pre_onset_alarm_rate: float
    over_threshold: bool
    n_post: int
    n_pre: int

    def to_json(self) -> dict:
        return {
            "rate": self.rate,
            "pre_onset_alarm_rate": self.pre_onset_alarm_rate,
            "over_threshold": self.over_threshold,
            "n_post": self.n_post,
            "n_pre": self.n_pre,
        }


def fdr(predictions, fault_mask, onset: int = 0, ot_limit: float = DEFAULT_OT_LIMIT) -> FdrResult:
    """Fraction of fault samples at/after onset predicted as alarms.

    ``onset`` counts positions within the fault series (row order among the
    masked samples). The over-threshold flag marks runs whose pre-onset
    alarm rate exceeds ``ot_limit``: detection cannot be attributed to the
    fault because the indicator already fired beforehand.
    """
    pred = np.asarray(predictions, dtype=int)
    mask = np.asarray(fault_mask, dtype=bool)
    if pred.shape != mask.shape:
        raise UsageError("predictions and fault_mask must have the same length")
    series = pred[mask]
    if series.size == 0:
        raise UsageError("fault set is empty")
    if onset < 0:
        raise UsageError("onset must be non-negative")
    pre = series[:onset]
    post = series[onset:]
    if post.size == 0:
        raise UsageError("no fault samples at or after onset")
    pre_rate = float(pre.mean()) if pre.size else 0.0
    return FdrResult(
        rate=float(post.mean()),
        pre_onset_alarm_rate=pre_rate,
        over_threshold=bool(pre.size and pre_rate > ot_limit),
        n_post=int(post.size),
        n_pre=int(pre.size),
    )


@dataclass
class F1Result:
    per_class: np.ndarray
    macro: float
    absent: np.ndarray  # classes with no truth and no prediction occurrences


def f1_scores(confusion) -> F1Result:
    """Per-class and macro F1 from a square confusion matrix (rows = truth).

    0/0 ratios are 0 by convention. Classes absent from both truth and
    predictions get F1 = 0 and are flagged; the macro average runs over the
    non-absent classes.
    """
    M = np.asarray(confusion, dtype=float)
    if M.ndim != 2 or M.shape[0] != M.shape[1]:
        raise UsageError("confusion matrix must be square")
    tp = np.diag(M)
    truth = M.sum(axis=1)
    predicted = M.sum(axis=0)
    precision = np.divide(tp, predicted, out=np.zeros_like(tp), where=predicted > 0)
    recall = np.divide(tp, truth, out=np.zeros_like(tp), where=truth > 0)
    pr = precision + recall
    f1 = np.divide(2 * precision * recall, pr, out=np.zeros_like(tp), where=pr > 0)
    absent = (truth + predicted) == 0
    macro = float(f1[~absent].mean()) if np.any(~absent) else 0.0
    return F1Result(per_class=f1, macro=macro, absent=absent)


def auroc(scores, binary_labels) -> float:
    """Rank-based (Mann-Whitney) AUROC with 0.5 credit for ties.

    Equals the brute-force all-pairs comparison exactly; higher scores are
    expected for positive labels.
    """
    s = np.asarray(scores, dtype=float)
    y = np.asarray(binary_labels, dtype=bool)
    if s.shape != y.shape:
        raise UsageError("scores and labels must have the same length")
    n_pos = int(y.sum())
    n_neg = int(y.size - n_pos)
    if n_pos == 0 or n_neg == 0:
        raise UsageError("AUROC needs both classes present")
    ranks = rankdata(s)  # average ranks on ties
    return float((ranks[y].sum() - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg))


def confusion_matrix(true_idx, pred_idx, n_classes: int) -> np.ndarray:
    t = np.asarray(true_idx, dtype=int)
    p = np.asarray(pred_idx, dtype=int)
    if t.shape != p.shape:
        raise UsageError("truth and prediction index vectors must match")
    M = np.zeros((n_classes, n_classes), dtype=int)
    np.add.at(M, (t, p), 1)
    return M


@dataclass
class DiagnosisReport:
    """Everything a run produced; serialized (minus timing) to report.json."""

    task: str
    seed: int
    config: dict
    class_labels: list[str]
    confusion: list[list[int]]
    metrics: dict
    threshold: dict
    predictions: list
    n_test: int
    wall_clock_seconds: float = 0.0
    schema_version: int = 1

    def to_json_dict(self) -> dict:
        return {
            "schema_version": self.schema_version,
            "task": self.task,
            "seed": self.seed,
            "config": self.config,
            "n_test": self.n_test,
            "class_labels": self.class_labels,
            "confusion": self.confusion,
            "threshold": self.threshold,
            "metrics": self.metrics,
            "predictions": self.predictions,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_json_dict(), indent=2, sort_keys=True) + "\n"


def build_pm_report(
    true_labels,
    predictions,
    theta: float,
    quantile: float,
    config: dict,
    seed: int,
    onset: int = 0,
    ot_limit: float = DEFAULT_OT_LIMIT,
    wall_clock_seconds: float = 0.0,
) -> DiagnosisReport:
    """Process-monitoring report: 2x2 confusion, FDR per fault class, alarms."""
    labels = np.asarray(true_labels, dtype=int)
    pred = np.asarray(predictions, dtype=int)
    if labels.shape != pred.shape:
        raise UsageError("labels and predictions must have the same length")
    truth_bin = (labels != 0).astype(int)
    conf = confusion_matrix(truth_bin, pred, 2)
    normal_mask = labels == 0
    false_alarm = float(pred[normal_mask].mean()) if normal_mask.any() else None
    per_fault = {}
    for c in np.unique(labels):
        if c == 0:
            continue
        per_fault[str(int(c))] = fdr(pred, labels == c, onset=onset, ot_limit=ot_limit).to_json()
    fault_mask = labels != 0
    overall = (
        fdr(pred, fault_mask, onset=0, ot_limit=ot_limit).rate if fault_mask.any() else None
    )
    post_rates = [v["rate"] for v in per_fault.values()]
    metrics = {
        "fdr_overall": overall,
        "fdr_per_fault": per_fault,
        "fdr_mean_over_faults": float(np.mean(post_rates)) if post_rates else None,
        "false_alarm_rate": false_alarm,
        "n_normal": int(normal_mask.sum()),
        "n_fault": int(fault_mask.sum()),
    }
    return DiagnosisReport(
        task="pm",
        seed=seed,
        config=config,
        class_labels=["normal", "fault"],
        confusion=conf.tolist(),
        metrics=metrics,
        threshold={"quantile": quantile, "theta": theta},
        predictions=[int(p) for p in pred],
        n_test=int(labels.size),
        wall_clock_seconds=wall_clock_seconds,
    )


UNKNOWN_LABEL = "unknown"


def build_osfd_report(
    true_labels,
    predicted,
    distances,
    known_classes,
    theta: float,
    quantile: float,
    config: dict,
    seed: int,
    wall_clock_seconds: float = 0.0,
) -> DiagnosisReport:
    """Open-set report: (N+1)^2 confusion, per-class/macro F1, unknown AUROC.

    ``predicted`` holds original class ids for accepted samples and the
    string "unknown" for rejected ones. Test labels outside the known set
    are ground-truth unknown. The unknown score for AUROC is the distance
    itself (rejected samples are the high end).
    """
    labels = np.asarray(true_labels, dtype=int)
    dist = np.asarray(distances, dtype=float)
    known = [int(c) for c in known_classes]
    n_known = len(known)
    index_of = {c: i for i, c in enumerate(sorted(known))}
    unknown_idx = n_known

    true_idx = np.array(
        [index_of.get(int(c), unknown_idx) for c in labels], dtype=int
    )
    pred_idx = np.array(
        [unknown_idx if p == UNKNOWN_LABEL else index_of[int(p)] for p in predicted],
        dtype=int,
    )
    conf = confusion_matrix(true_idx, pred_idx, n_known + 1)
    f1 = f1_scores(conf)
    class_labels = [str(c) for c in sorted(known)] + [UNKNOWN_LABEL]

    truth_unknown = true_idx == unknown_idx
    auc = None
    if truth_unknown.any() and (~truth_unknown).any():
        auc = auroc(dist, truth_unknown)

    # binary known-vs-unknown F1 with unknown as the positive class
    pred_unknown = pred_idx == unknown_idx
    tp = int(np.sum(truth_unknown & pred_unknown))
    fp = int(np.sum(~truth_unknown & pred_unknown))
    fn = int(np.sum(truth_unknown & ~pred_unknown))
    f1_bin = 2.0 * tp / (2 * tp + fp + fn) if (2 * tp + fp + fn) > 0 else 0.0

    metrics = {
        "macro_f1": f1.macro,
        "per_class_f1": {
            lab: float(v) for lab, v in zip(class_labels, f1.per_class)
        },
        "absent_classes": [lab for lab, a in zip(class_labels, f1.absent) if a],
        "auroc_unknown": auc,
        "f1_unknown_binary": f1_bin,
        "accuracy": float(np.mean(true_idx == pred_idx)),
        "n_unknown_truth": int(truth_unknown.sum()),
        "n_unknown_predicted": int(pred_unknown.sum()),
        "unknown_numeric_id": n_known + 1,
    }
    preds_out = [p if p == UNKNOWN_LABEL else int(p) for p in predicted]
    return DiagnosisReport(
        task="osfd",
        seed=seed,
        config=config,
        class_labels=class_labels,
        confusion=conf.tolist(),
        metrics=metrics,
        threshold={"quantile": quantile, "theta": theta},
        predictions=preds_out,
        n_test=int(labels.size),
        wall_clock_seconds=wall_clock_seconds,
    )


def build_report(task: str, **kwargs) -> DiagnosisReport:
    """Dispatch to the task-specific report builder."""
    if task == "pm":
        return build_pm_report(**kwargs)
    if task == "osfd":
        return build_osfd_report(**kwargs)
    raise UsageError(f"unknown task {task!r}")


def write_scores_csv(path, true_labels, predicted, distances, scores) -> None:
    """Per-sample score dump for external plotting.

    Columns: sample_id, true_label, predicted, distance, score_0..score_{k-1}.
    """
    S = np.atleast_2d(np.asarray(scores, dtype=float))
    labels = np.asarray(true_labels)
    dist = np.asarray(distances, dtype=float)
    if not (len(labels) == len(predicted) == len(dist) == S.shape[0]):
        raise UsageError("scores csv inputs must have matching lengths")
    k = S.shape[1]
    header = ["sample_id", "true_label", "predicted", "distance"] + [
        f"score_{i}" for i in range(k)
    ]
    with open(path, "w", encoding="utf-8", newline="") as fh:
        fh.write(",".join(header) + "\n")
        for i in range(S.shape[0]):
            row = [str(i), str(int(labels[i])), str(predicted[i]), repr(float(dist[i]))]
            row += [repr(float(v)) for v in S[i]]
            fh.write(",".join(row) + "\n")
