"""Tabular dataset ingestion, standardization, splitting, synthetic data.

Input CSV: UTF-8, comma separated, header row, one numeric column per
process variable, optional integer ``label`` column (0 = normal operation,
positive ids = fault classes). A sidecar JSON manifest can declare
``{label_column, known_classes, unknown_classes, onset_index}``; for a file
``x.csv`` the conventional manifest path is ``x.manifest.json``.
"""

from __future__ import annotations

import csv
import json
import math
import os
from dataclasses import dataclass, field, replace

import numpy as np

from .errors import ConfigError, IngestionError, UsageError


@dataclass
class TabularDataset:
    """An n x D sample matrix with integer class labels.

    Label 0 is normal operation; positive labels are fault classes. For
    fault series recorded from a running process, ``fault_onset`` is the
    within-series index at which the fault is introduced (rows before it
    are pre-onset operation, still labeled with the series' fault id).
    """

    values: np.ndarray
    labels: np.ndarray
    variable_names: list[str]
    fault_onset: int | None = None

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=float)
        self.labels = np.asarray(self.labels, dtype=int)
        if self.values.ndim != 2:
            raise ConfigError("values must be a 2-d matrix")
        n, D = self.values.shape
        if self.labels.shape != (n,):
            raise ConfigError("labels must have one entry per row")
        if len(self.variable_names) != D:
            raise ConfigError("variable_names must have one entry per column")
        if not np.all(np.isfinite(self.values)):
            raise ConfigError("values contain NaN or Inf")
        if n and self.labels.min() < 0:
            raise ConfigError("labels must be non-negative")
        if self.fault_onset is not None and self.fault_onset < 0:
            raise ConfigError("fault_onset must be non-negative")

    @property
    def n(self) -> int:
        return self.values.shape[0]

    @property
    def D(self) -> int:
        return self.values.shape[1]

    def classes(self) -> np.ndarray:
        return np.unique(self.labels)

    def subset(self, mask: np.ndarray) -> "TabularDataset":
        return TabularDataset(
            values=self.values[mask],
            labels=self.labels[mask],
            variable_names=list(self.variable_names),
            fault_onset=self.fault_onset,
        )


@dataclass
class CsvSchema:
    """Declares how to interpret a CSV file; mirrors the manifest JSON."""

    label_column: str | None = "label"
    known_classes: list[int] | None = None
    unknown_classes: list[int] | None = None
    onset_index: int | None = None

    @classmethod
    def from_manifest(cls, path) -> "CsvSchema":
        try:
            with open(path, "r", encoding="utf-8") as fh:
                meta = json.load(fh)
        except FileNotFoundError:
            raise IngestionError(f"manifest not found: {path}")
        except json.JSONDecodeError as exc:
            raise IngestionError(f"{path}: invalid JSON ({exc})")
        known = {"label_column", "known_classes", "unknown_classes", "onset_index"}
        extra = set(meta) - known
        if extra:
            raise IngestionError(f"{path}: unknown manifest keys {sorted(extra)}")
        return cls(
            label_column=meta.get("label_column"),
            known_classes=meta.get("known_classes"),
            unknown_classes=meta.get("unknown_classes"),
            onset_index=meta.get("onset_index"),
        )


def manifest_path(csv_path) -> str:
    base, _ = os.path.splitext(str(csv_path))
    return base + ".manifest.json"


def load_csv(path, schema: CsvSchema | None = None) -> TabularDataset:
    """Parse a CSV file into a TabularDataset.

    With ``schema.label_column`` set the named column holds integer class
    labels; with ``label_column=None`` (unlabeled mode) every row is treated
    as normal (label 0). Ingestion errors name the data row (1-based, header
    excluded) and column.
    """
    if schema is None:
        schema = CsvSchema()
    try:
        fh = open(path, "r", encoding="utf-8", newline="")
    except FileNotFoundError:
        raise IngestionError(f"no such file: {path}")
    with fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise IngestionError(f"{path}: empty file, header row required")
        header = [h.strip() for h in header]
        label_idx = None
        if schema.label_column is not None:
            if schema.label_column not in header:
                raise IngestionError(
                    f"{path}: label column {schema.label_column!r} not in header"
                )
            label_idx = header.index(schema.label_column)
        names = [h for i, h in enumerate(header) if i != label_idx]
        rows: list[list[float]] = []
        labels: list[int] = []
        for row_no, row in enumerate(reader, start=1):
            if len(row) != len(header):
                raise IngestionError(
                    f"{path}: row {row_no} has {len(row)} cells, expected {len(header)}"
                )
            vals = []
            for col_idx, cell in enumerate(row):
                name = header[col_idx]
                if col_idx == label_idx:
                    lab = _parse_label(cell, path, row_no, name)
                    labels.append(lab)
                    continue
                try:
                    v = float(cell)
                except ValueError:
                    raise IngestionError(
                        f"{path}: non-numeric cell at row {row_no}, column {name}"
                    )
                if not math.isfinite(v):
                    raise IngestionError(
                        f"{path}: non-finite value at row {row_no}, column {name}"
                    )
                vals.append(v)
            rows.append(vals)
        if not rows:
            raise IngestionError(f"{path}: no data rows")
    values = np.array(rows, dtype=float)
    if label_idx is None:
        labels = [0] * values.shape[0]
    return TabularDataset(
        values=values,
        labels=np.array(labels, dtype=int),
        variable_names=names,
        fault_onset=schema.onset_index,
    )


def _parse_label(cell: str, path, row_no: int, name: str) -> int:
    try:
        v = float(cell)
    except ValueError:
        raise IngestionError(
            f"{path}: non-numeric label at row {row_no}, column {name}"
        )
    if not math.isfinite(v) or v != int(v) or v < 0:
        raise IngestionError(
            f"{path}: unknown label value {cell!r} at row {row_no}, column {name}"
        )
    return int(v)


def write_csv(path, ds: TabularDataset, label_column: str = "label") -> None:
    """Write a dataset as CSV with shortest-roundtrip float formatting."""
    with open(path, "w", encoding="utf-8", newline="") as fh:
        fh.write(",".join(ds.variable_names + [label_column]) + "\n")
        for row, lab in zip(ds.values, ds.labels):
            fh.write(",".join(repr(float(v)) for v in row) + f",{int(lab)}\n")


def write_manifest(path, schema: CsvSchema) -> None:
    meta = {
        "label_column": schema.label_column,
        "known_classes": schema.known_classes,
        "unknown_classes": schema.unknown_classes,
        "onset_index": schema.onset_index,
    }
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(meta, fh, indent=2, sort_keys=True)
        fh.write("\n")


@dataclass
class Standardizer:
    """Per-feature affine scaling fitted on training data only."""

    mean: np.ndarray
    std: np.ndarray
    zero_variance: np.ndarray  # bool flags; those features get std := 1

    def transform_values(self, X: np.ndarray) -> np.ndarray:
        X = np.asarray(X, dtype=float)
        return (X - self.mean) / self.std

    def inverse_transform_values(self, X: np.ndarray) -> np.ndarray:
        X = np.asarray(X, dtype=float)
        return X * self.std + self.mean

    def to_json(self) -> dict:
        return {
            "mean": self.mean.tolist(),
            "std": self.std.tolist(),
            "zero_variance": [bool(z) for z in self.zero_variance],
        }

    @classmethod
    def from_json(cls, meta: dict) -> "Standardizer":
        return cls(
            mean=np.array(meta["mean"], dtype=float),
            std=np.array(meta["std"], dtype=float),
            zero_variance=np.array(meta["zero_variance"], dtype=bool),
        )


def fit_standardizer(train: TabularDataset) -> Standardizer:
    if train.n < 1:
        raise UsageError("cannot fit a standardizer on an empty dataset")
    mean = train.values.mean(axis=0)
    std = train.values.std(axis=0, ddof=0)
    zero = std == 0.0
    std = np.where(zero, 1.0, std)
    return Standardizer(mean=mean, std=std, zero_variance=zero)


def transform(std: Standardizer, ds: TabularDataset) -> TabularDataset:
    return replace(ds, values=std.transform_values(ds.values))


@dataclass
class SplitSpec:
    """Deterministic train/test split honoring class membership.

    Unknown classes never appear in train: all their rows go to test. Known
    classes are split per class at ``train_fraction`` after a seeded shuffle.
    """

    train_fraction: float = 0.8
    known_classes: list[int] | None = None
    unknown_classes: list[int] = field(default_factory=list)
    seed: int = 0


def split(ds: TabularDataset, spec: SplitSpec):
    """Returns (train, test) TabularDataset partitions."""
    if not 0.0 < spec.train_fraction < 1.0:
        raise ConfigError("train_fraction must lie in (0, 1)")
    present = set(int(c) for c in ds.classes())
    unknown = [int(c) for c in spec.unknown_classes]
    for c in unknown:
        if c not in present:
            raise ConfigError(f"unknown class {c} not present in dataset")
    if spec.known_classes is None:
        known = sorted(present - set(unknown))
    else:
        known = [int(c) for c in spec.known_classes]
        for c in known:
            if c not in present:
                raise ConfigError(f"known class {c} not present in dataset")
    overlap = set(known) & set(unknown)
    if overlap:
        raise ConfigError(f"classes listed as both known and unknown: {sorted(overlap)}")
    if not known:
        raise ConfigError("no known classes to split")
    rng = np.random.default_rng(spec.seed)
    train_mask = np.zeros(ds.n, dtype=bool)
    test_mask = np.zeros(ds.n, dtype=bool)
    for c in known:
        idx = np.flatnonzero(ds.labels == c)
        perm = rng.permutation(idx.size)
        cut = int(round(spec.train_fraction * idx.size))
        train_mask[idx[perm[:cut]]] = True
        test_mask[idx[perm[cut:]]] = True
    for c in unknown:
        test_mask[ds.labels == c] = True
    return ds.subset(train_mask), ds.subset(test_mask)


@dataclass
class FaultSpec:
    """One synthetic fault series appended after the normal block."""

    kind: str  # mean-shift | variance-scale | correlation-break
    magnitude: float
    features: list[int]
    n_samples: int


@dataclass
class SynthSpec:
    """Block-correlated Gaussian process data with injected faults.

    The covariance is block diagonal: within each block the off-diagonal
    correlation is ``rho``, diagonals are 1. Fault series get labels 1..F in
    listed order; their first ``onset`` rows are pre-onset (unperturbed).
    """

    D: int
    n_normal: int
    blocks: list[int] | None = None
    rho: float = 0.0
    faults: list[FaultSpec] = field(default_factory=list)
    onset: int = 0
    seed: int = 0

    @classmethod
    def from_json(cls, meta: dict) -> "SynthSpec":
        faults = [
            FaultSpec(
                kind=f["kind"],
                magnitude=float(f["magnitude"]),
                features=[int(i) for i in f["features"]],
                n_samples=int(f["n_samples"]),
            )
            for f in meta.get("faults", [])
        ]
        return cls(
            D=int(meta["D"]),
            n_normal=int(meta["n_normal"]),
            blocks=meta.get("blocks"),
            rho=float(meta.get("rho", 0.0)),
            faults=faults,
            onset=int(meta.get("onset", 0)),
            seed=int(meta.get("seed", 0)),
        )

    @classmethod
    def load(cls, path) -> "SynthSpec":
        try:
            with open(path, "r", encoding="utf-8") as fh:
                meta = json.load(fh)
        except FileNotFoundError:
            raise ConfigError(f"no such spec file: {path}")
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON ({exc})")
        return cls.from_json(meta)


_FAULT_KINDS = ("mean-shift", "variance-scale", "correlation-break")


def _block_covariance(spec: SynthSpec) -> np.ndarray:
    blocks = spec.blocks if spec.blocks is not None else [spec.D]
    if sum(blocks) != spec.D:
        raise ConfigError(f"block sizes {blocks} do not sum to D={spec.D}")
    cov = np.zeros((spec.D, spec.D))
    start = 0
    for size in blocks:
        cov[start : start + size, start : start + size] = spec.rho
        start += size
    np.fill_diagonal(cov, 1.0)
    return cov


def synth_generate(spec: SynthSpec) -> TabularDataset:
    """Deterministic synthetic dataset: normal block then one series per fault."""
    if spec.D < 1 or spec.n_normal < 1:
        raise ConfigError("D and n_normal must be positive")
    if not all(math.isfinite(f.magnitude) for f in spec.faults):
        raise ConfigError("fault magnitudes must be finite")
    for f in spec.faults:
        if f.kind not in _FAULT_KINDS:
            raise ConfigError(f"unknown fault kind {f.kind!r}")
        if any(i < 0 or i >= spec.D for i in f.features):
            raise ConfigError(f"fault feature indices must lie in [0, {spec.D})")
        if f.n_samples < 1:
            raise ConfigError("fault n_samples must be positive")
        if spec.onset >= f.n_samples:
            raise ConfigError("onset must leave at least one post-onset sample")
    cov = _block_covariance(spec)
    try:
        chol = np.linalg.cholesky(cov)
    except np.linalg.LinAlgError:
        raise ConfigError("requested covariance is not positive definite")

    rng = np.random.default_rng(spec.seed)
    parts = [rng.standard_normal((spec.n_normal, spec.D)) @ chol.T]
    labels = [np.zeros(spec.n_normal, dtype=int)]
    for fid, f in enumerate(spec.faults, start=1):
        X = rng.standard_normal((f.n_samples, spec.D)) @ chol.T
        cols = np.array(f.features, dtype=int)
        if f.kind == "mean-shift":
            X[spec.onset :, cols] += f.magnitude
        elif f.kind == "variance-scale":
            X[spec.onset :, cols] *= f.magnitude
        else:  # correlation-break: variance-preserving blend with fresh noise
            w = min(abs(f.magnitude), 1.0)
            fresh = rng.standard_normal((f.n_samples - spec.onset, cols.size))
            X[spec.onset :, cols] = (
                math.sqrt(1.0 - w * w) * X[spec.onset :, cols] + w * fresh
            )
        parts.append(X)
        labels.append(np.full(f.n_samples, fid, dtype=int))
    return TabularDataset(
        values=np.vstack(parts),
        labels=np.concatenate(labels),
        variable_names=[f"V{i + 1}" for i in range(spec.D)],
        fault_onset=spec.onset if spec.faults else None,
    )
