"""Command-line entry point.

Commands: ``synth`` (generate a synthetic dataset), ``pm`` (process
monitoring), ``osfd`` (open-set fault diagnosis), ``ablate`` (threshold or
distance sweeps on one shared trained model). Every command is driven by a
resolved configuration (defaults < JSON config file with flat dotted keys
< command-line flags) that is echoed verbatim into the report, and is
byte-for-byte reproducible for fixed inputs and seed.

Exit codes: 0 success, 2 user/configuration error, 3 numerical or training
failure.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
import time

import numpy as np

from .classifier import ClassifierConfig
from .data import (
    CsvSchema,
    SynthSpec,
    TabularDataset,
    load_csv,
    manifest_path,
    synth_generate,
    write_csv,
    write_manifest,
)
from .errors import (
    ConfigError,
    IcldiagError,
    NumericalError,
    TrainingDivergenceError,
    UsageError,
)
from .icl import IclConfig, score_matrix, weight_fingerprint
from .metrics import (
    UNKNOWN_LABEL,
    build_osfd_report,
    build_pm_report,
    write_scores_csv,
)
from .outlier import DISTANCE_KINDS, fit_rule
from .pca import fit_pca, spe_statistic, t2_statistic
from .pipelines import (
    osfd_fit,
    pm_fit,
    save_osfd_model,
    save_pm_model,
    with_rule,
)

DEFAULTS = {
    "seed": 0,
    "quantile": 98.0,
    "distance": "mahalanobis",
    "baseline": None,
    "standardize": True,
    "ridge": 1e-6,
    "ot_limit": 0.5,
    "icl.l": 2,
    "icl.tau": 0.01,
    "icl.u": 200,
    "icl.embed_dim": 64,
    "icl.lr": 0.001,
    "icl.epochs": 200,
    "icl.batch_size": 128,
    "icl.denominator_mode": "exclude-positive",
    "icl.score_mode": "vector",
    "clf.hidden_units": 20,
    "clf.lr": 0.001,
    "clf.epochs": 200,
    "clf.batch_size": 128,
    "pca.variance_target": 0.9,
}

THRESHOLD_SWEEP = (80.0, 85.0, 90.0, 95.0, 98.0, 100.0)


def resolve_config(args) -> dict:
    """defaults < config file < command-line flags; fully resolved up front."""
    cfg = dict(DEFAULTS)
    if getattr(args, "config", None):
        try:
            with open(args.config, "r", encoding="utf-8") as fh:
                file_cfg = json.load(fh)
        except FileNotFoundError:
            raise ConfigError(f"no such config file: {args.config}")
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{args.config}: invalid JSON ({exc})")
        unknown = set(file_cfg) - set(DEFAULTS)
        if unknown:
            raise ConfigError(f"{args.config}: unknown config keys {sorted(unknown)}")
        cfg.update(file_cfg)
    flag_map = {
        "seed": "seed",
        "quantile": "quantile",
        "distance": "distance",
        "baseline": "baseline",
        "score_mode": "icl.score_mode",
        "denominator_mode": "icl.denominator_mode",
    }
    for attr, key in flag_map.items():
        value = getattr(args, attr, None)
        if value is not None:
            cfg[key] = value
    if cfg["distance"] not in DISTANCE_KINDS:
        raise ConfigError(f"unknown distance kind {cfg['distance']!r}")
    if cfg["baseline"] not in (None, "pca"):
        raise ConfigError(f"unknown baseline {cfg['baseline']!r}")
    return cfg


def icl_config_from(cfg: dict, seed: int) -> IclConfig:
    return IclConfig(
        l=int(cfg["icl.l"]),
        tau=float(cfg["icl.tau"]),
        u=int(cfg["icl.u"]),
        embed_dim=int(cfg["icl.embed_dim"]),
        lr=float(cfg["icl.lr"]),
        epochs=int(cfg["icl.epochs"]),
        batch_size=int(cfg["icl.batch_size"]),
        denominator_mode=cfg["icl.denominator_mode"],
        score_mode=cfg["icl.score_mode"],
        seed=seed,
    )


def clf_config_from(cfg: dict, seed: int) -> ClassifierConfig:
    return ClassifierConfig(
        hidden_units=int(cfg["clf.hidden_units"]),
        lr=float(cfg["clf.lr"]),
        epochs=int(cfg["clf.epochs"]),
        batch_size=int(cfg["clf.batch_size"]),
        seed=seed,
    )


def load_dataset(path):
    """Load a CSV with its sidecar manifest when one exists.

    Without a manifest the column named ``label`` (if present) holds class
    labels, otherwise the file is treated as unlabeled (all normal).
    """
    mpath = manifest_path(path)
    if os.path.exists(mpath):
        schema = CsvSchema.from_manifest(mpath)
    else:
        try:
            with open(path, "r", encoding="utf-8") as fh:
                header = [h.strip() for h in fh.readline().split(",")]
        except FileNotFoundError:
            raise ConfigError(f"no such file: {path}")
        schema = CsvSchema(label_column="label" if "label" in header else None)
    return load_csv(path, schema), schema


def _seeds_list(cfg: dict, args) -> list[int]:
    base = int(cfg["seed"])
    count = getattr(args, "seeds", None) or 1
    if count < 1:
        raise ConfigError("--seeds must be >= 1")
    return [base + i for i in range(count)]


def _write_report(out_dir, report) -> None:
    with open(os.path.join(out_dir, "report.json"), "w", encoding="utf-8") as fh:
        fh.write(report.to_json())


def _aggregate(runs: list[dict], keys: list[str]) -> dict:
    agg = {}
    for key in keys:
        vals = [r["metrics"].get(key) for r in runs]
        if any(v is None for v in vals):
            continue
        arr = np.array(vals, dtype=float)
        agg[key] = {
            "mean": float(arr.mean()),
            "std": float(arr.std(ddof=1)) if arr.size > 1 else 0.0,
        }
    return agg


def _write_multi_seed_report(out_dir, task, cfg, seeds, reports, agg_keys):
    runs = [
        {
            "seed": rep.seed,
            "metrics": rep.metrics,
            "threshold": rep.threshold,
        }
        for rep in reports
    ]
    top = {
        "schema_version": 1,
        "task": task,
        "config": cfg,
        "seeds": seeds,
        "runs": runs,
        "aggregate": _aggregate(runs, agg_keys),
    }
    with open(os.path.join(out_dir, "report.json"), "w", encoding="utf-8") as fh:
        json.dump(top, fh, indent=2, sort_keys=True)
        fh.write("\n")


def cmd_synth(args) -> int:
    spec = SynthSpec.load(args.spec)
    if args.seed is not None:
        spec.seed = int(args.seed)
    ds = synth_generate(spec)
    os.makedirs(args.out, exist_ok=True)
    csv_path = os.path.join(args.out, "dataset.csv")
    write_csv(csv_path, ds)
    classes = sorted(int(c) for c in ds.classes())
    write_manifest(
        manifest_path(csv_path),
        CsvSchema(
            label_column="label",
            known_classes=classes,
            unknown_classes=[],
            onset_index=spec.onset,
        ),
    )
    print(csv_path)
    return 0


def _echo_config(cfg: dict, extra: dict) -> dict:
    echo = dict(cfg)
    echo.update(extra)
    return echo


def cmd_pm(args) -> int:
    cfg = resolve_config(args)
    train_ds, _ = load_dataset(args.train)
    test_ds, test_schema = load_dataset(args.test)
    seeds = _seeds_list(cfg, args)
    onset = test_schema.onset_index or 0
    os.makedirs(args.out, exist_ok=True)
    echo = _echo_config(cfg, {"train": str(args.train), "test": str(args.test)})

    reports = []
    for seed in seeds:
        t0 = time.monotonic()
        model = pm_fit(
            train_ds,
            icl_config_from(cfg, seed),
            q=float(cfg["quantile"]),
            standardize=bool(cfg["standardize"]),
            distance_kind=cfg["distance"],
            ridge_eps=float(cfg["ridge"]),
        )
        X = test_ds.values
        if model.standardizer is not None:
            X = model.standardizer.transform_values(X)
        scores = score_matrix(model.icl, X)
        dist = model.rule.distance(scores)
        preds = (dist > model.rule.theta).astype(int)
        report = build_pm_report(
            test_ds.labels,
            preds,
            theta=model.rule.theta,
            quantile=float(cfg["quantile"]),
            config=echo,
            seed=seed,
            onset=onset,
            ot_limit=float(cfg["ot_limit"]),
            wall_clock_seconds=time.monotonic() - t0,
        )
        if cfg["baseline"] == "pca":
            report.metrics["baseline_pca"] = _pca_baseline(
                model, train_ds, test_ds, cfg, onset
            )
        run_dir = args.out if len(seeds) == 1 else os.path.join(args.out, f"seed-{seed}")
        os.makedirs(run_dir, exist_ok=True)
        _write_report(run_dir, report)
        write_scores_csv(
            os.path.join(run_dir, "scores.csv"), test_ds.labels, preds, dist, scores
        )
        save_pm_model(model, os.path.join(run_dir, "model"))
        print(
            f"pm seed={seed} fdr={report.metrics['fdr_overall']} "
            f"fa={report.metrics['false_alarm_rate']} "
            f"({report.wall_clock_seconds:.1f}s)",
            file=sys.stderr,
        )
        reports.append(report)
    if len(seeds) > 1:
        _write_multi_seed_report(
            args.out,
            "pm",
            echo,
            seeds,
            reports,
            ["fdr_overall", "fdr_mean_over_faults", "false_alarm_rate"],
        )
    return 0


def _pca_baseline(model, train_ds: TabularDataset, test_ds: TabularDataset, cfg, onset):
    """T2/SPE results on the same standardized data and quantile contract."""
    Xtr = train_ds.values
    Xte = test_ds.values
    if model.standardizer is not None:
        Xtr = model.standardizer.transform_values(Xtr)
        Xte = model.standardizer.transform_values(Xte)
    pca = fit_pca(Xtr, float(cfg["pca.variance_target"]), q=float(cfg["quantile"]))
    section = {"r": pca.r, "retained_fraction": pca.retained_fraction}
    labels = test_ds.labels
    for name, stat, threshold in (
        ("t2", t2_statistic(pca, Xte), pca.t2_threshold),
        ("spe", spe_statistic(pca, Xte), pca.spe_threshold),
    ):
        pred = (stat > threshold).astype(int)
        normal = labels == 0
        fault = labels != 0
        section[name] = {
            "threshold": threshold,
            "fdr_overall": float(pred[fault].mean()) if fault.any() else None,
            "false_alarm_rate": float(pred[normal].mean()) if normal.any() else None,
        }
    return section


def _osfd_ground_truth(train_ds, test_ds, schema: CsvSchema):
    known = schema.known_classes
    if known is None:
        known = sorted(int(c) for c in train_ds.classes())
    extra = sorted(set(int(c) for c in test_ds.classes()) - set(known))
    return known, extra


def cmd_osfd(args) -> int:
    cfg = resolve_config(args)
    train_ds, train_schema = load_dataset(args.train)
    test_ds, _ = load_dataset(args.test)
    known, test_unknown = _osfd_ground_truth(train_ds, test_ds, train_schema)
    seeds = _seeds_list(cfg, args)
    os.makedirs(args.out, exist_ok=True)
    echo = _echo_config(
        cfg,
        {
            "train": str(args.train),
            "test": str(args.test),
            "known_classes": known,
            "test_unknown_classes": test_unknown,
        },
    )

    reports = []
    for seed in seeds:
        t0 = time.monotonic()
        model = osfd_fit(
            train_ds,
            icl_config_from(cfg, seed),
            clf_config_from(cfg, seed),
            q=float(cfg["quantile"]),
            standardize=bool(cfg["standardize"]),
            distance_kind=cfg["distance"],
            ridge_eps=float(cfg["ridge"]),
        )
        X = test_ds.values
        if model.standardizer is not None:
            X = model.standardizer.transform_values(X)
        scores = score_matrix(model.icl, X)
        dist = model.rule.distance(scores)
        from .classifier import predict_known

        _, clf_ids = predict_known(model.classifier, X)
        unknown_mask = dist > model.rule.theta
        predicted = [
            UNKNOWN_LABEL if u else int(c) for c, u in zip(clf_ids, unknown_mask)
        ]
        report = build_osfd_report(
            test_ds.labels,
            predicted,
            dist,
            known_classes=model.known_classes,
            theta=model.rule.theta,
            quantile=float(cfg["quantile"]),
            config=echo,
            seed=seed,
            wall_clock_seconds=time.monotonic() - t0,
        )
        run_dir = args.out if len(seeds) == 1 else os.path.join(args.out, f"seed-{seed}")
        os.makedirs(run_dir, exist_ok=True)
        _write_report(run_dir, report)
        write_scores_csv(
            os.path.join(run_dir, "scores.csv"), test_ds.labels, predicted, dist, scores
        )
        save_osfd_model(model, os.path.join(run_dir, "model"))
        print(
            f"osfd seed={seed} macro_f1={report.metrics['macro_f1']:.4f} "
            f"auroc={report.metrics['auroc_unknown']} "
            f"({report.wall_clock_seconds:.1f}s)",
            file=sys.stderr,
        )
        reports.append(report)
    if len(seeds) > 1:
        _write_multi_seed_report(
            args.out,
            "osfd",
            echo,
            seeds,
            reports,
            ["macro_f1", "auroc_unknown", "f1_unknown_binary", "accuracy"],
        )
    return 0


def cmd_ablate(args) -> int:
    cfg = resolve_config(args)
    train_ds, train_schema = load_dataset(args.train)
    test_ds, _ = load_dataset(args.test)
    known, test_unknown = _osfd_ground_truth(train_ds, test_ds, train_schema)
    seed = int(cfg["seed"])
    os.makedirs(args.out, exist_ok=True)

    # one shared trained model per sweep; only the rejection rule varies
    model = osfd_fit(
        train_ds,
        icl_config_from(cfg, seed),
        clf_config_from(cfg, seed),
        q=float(cfg["quantile"]),
        standardize=bool(cfg["standardize"]),
        distance_kind="mahalanobis",
        ridge_eps=float(cfg["ridge"]),
    )
    fingerprint = weight_fingerprint(model.icl)
    Xtr = train_ds.values
    Xte = test_ds.values
    if model.standardizer is not None:
        Xtr = model.standardizer.transform_values(Xtr)
        Xte = model.standardizer.transform_values(Xte)
    train_scores = score_matrix(model.icl, Xtr)
    test_scores = score_matrix(model.icl, Xte)
    from .classifier import predict_known

    _, clf_ids = predict_known(model.classifier, Xte)

    def evaluate(rule):
        dist = rule.distance(test_scores)
        predicted = [
            UNKNOWN_LABEL if u else int(c)
            for c, u in zip(clf_ids, dist > rule.theta)
        ]
        rep = build_osfd_report(
            test_ds.labels,
            predicted,
            dist,
            known_classes=model.known_classes,
            theta=rule.theta,
            quantile=rule.quantile,
            config={},
            seed=seed,
        )
        return {
            "theta": rule.theta,
            "macro_f1": rep.metrics["macro_f1"],
            "f1_unknown_binary": rep.metrics["f1_unknown_binary"],
            "auroc_unknown": rep.metrics["auroc_unknown"],
            "n_unknown_predicted": rep.metrics["n_unknown_predicted"],
            "model_fingerprint": fingerprint,
        }

    points = []
    if args.mode == "threshold":
        for q in THRESHOLD_SWEEP:
            rule, _ = fit_rule(
                train_scores, kind="mahalanobis", q=q, ridge_eps=float(cfg["ridge"])
            )
            entry = {"quantile": q}
            entry.update(evaluate(with_rule(model, rule).rule))
            points.append(entry)
    elif args.mode == "distance":
        for kind in DISTANCE_KINDS:
            rule, _ = fit_rule(
                train_scores,
                kind=kind,
                q=float(cfg["quantile"]),
                ridge_eps=float(cfg["ridge"]),
            )
            entry = {"distance": kind}
            entry.update(evaluate(rule))
            points.append(entry)
    else:
        raise ConfigError(f"unknown ablation mode {args.mode!r}")

    out = {
        "schema_version": 1,
        "mode": args.mode,
        "seed": seed,
        "config": _echo_config(
            cfg,
            {
                "train": str(args.train),
                "test": str(args.test),
                "known_classes": known,
                "test_unknown_classes": test_unknown,
            },
        ),
        "model_fingerprint": fingerprint,
        "points": points,
    }
    with open(os.path.join(args.out, "ablation.json"), "w", encoding="utf-8") as fh:
        json.dump(out, fh, indent=2, sort_keys=True)
        fh.write("\n")
    print(os.path.join(args.out, "ablation.json"))
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="icldiag",
        description="Process monitoring and open-set fault diagnosis over tabular data",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p_synth = sub.add_parser("synth", help="generate a synthetic dataset")
    p_synth.add_argument("--spec", required=True, help="SynthSpec JSON file")
    p_synth.add_argument("--out", required=True, help="output directory")
    p_synth.add_argument("--seed", type=int, default=None)
    p_synth.set_defaults(func=cmd_synth)

    def common(p, distance=False):
        p.add_argument("--train", required=True, help="training CSV")
        p.add_argument("--test", required=True, help="test CSV")
        p.add_argument("--out", required=True, help="output directory")
        p.add_argument("--config", default=None, help="JSON config (flat dotted keys)")
        p.add_argument("--seed", type=int, default=None)
        p.add_argument("--seeds", type=int, default=None, help="number of seeded repeats")
        p.add_argument("--quantile", type=float, default=None)
        p.add_argument("--score-mode", dest="score_mode", choices=["vector", "scalar"], default=None)
        p.add_argument(
            "--denominator-mode",
            dest="denominator_mode",
            choices=["exclude-positive", "include-positive"],
            default=None,
        )
        if distance:
            p.add_argument("--distance", choices=list(DISTANCE_KINDS), default=None)

    p_pm = sub.add_parser("pm", help="process monitoring (train on normal data)")
    common(p_pm, distance=True)
    p_pm.add_argument("--baseline", choices=["pca"], default=None)
    p_pm.set_defaults(func=cmd_pm)

    p_osfd = sub.add_parser("osfd", help="open-set fault diagnosis")
    common(p_osfd, distance=True)
    p_osfd.set_defaults(func=cmd_osfd)

    p_ab = sub.add_parser("ablate", help="threshold or distance sweep")
    common(p_ab)
    p_ab.add_argument("--mode", choices=["threshold", "distance"], required=True)
    p_ab.set_defaults(func=cmd_ablate)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (ConfigError, UsageError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (TrainingDivergenceError, NumericalError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3
    except IcldiagError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
