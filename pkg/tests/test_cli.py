import json
import os

import numpy as np
import pytest

from icldiag.cli import main

TINY_CFG = {
    "icl.u": 8,
    "icl.embed_dim": 8,
    "icl.epochs": 3,
    "icl.batch_size": 64,
    "clf.hidden_units": 8,
    "clf.epochs": 10,
}


def _write_json(path, obj):
    path.write_text(json.dumps(obj), encoding="utf-8")
    return str(path)


def _synth_spec(tmp_path, name="spec.json", **overrides):
    spec = {
        "D": 6,
        "n_normal": 150,
        "blocks": [6],
        "rho": 0.4,
        "faults": [
            {"kind": "mean-shift", "magnitude": 5.0, "features": [0, 1], "n_samples": 60},
            {"kind": "mean-shift", "magnitude": -5.0, "features": [3, 4], "n_samples": 60},
        ],
        "onset": 0,
        "seed": 5,
    }
    spec.update(overrides)
    return _write_json(tmp_path / name, spec)


def _make_dataset(tmp_path, subdir, **overrides):
    spec = _synth_spec(tmp_path, name=f"{subdir}-spec.json", **overrides)
    out = tmp_path / subdir
    assert main(["synth", "--spec", spec, "--out", str(out)]) == 0
    return out / "dataset.csv"


def test_synth_deterministic_byte_identical(tmp_path):
    spec = _synth_spec(tmp_path)
    a, b = tmp_path / "a", tmp_path / "b"
    assert main(["synth", "--spec", spec, "--out", str(a)]) == 0
    assert main(["synth", "--spec", spec, "--out", str(b)]) == 0
    assert (a / "dataset.csv").read_bytes() == (b / "dataset.csv").read_bytes()
    assert (a / "dataset.manifest.json").read_bytes() == (b / "dataset.manifest.json").read_bytes()


def test_synth_manifest_lists_onset_and_classes(tmp_path):
    spec = _synth_spec(tmp_path, onset=10)
    out = tmp_path / "d"
    assert main(["synth", "--spec", spec, "--out", str(out)]) == 0
    meta = json.loads((out / "dataset.manifest.json").read_text())
    assert meta["onset_index"] == 10
    assert meta["known_classes"] == [0, 1, 2]
    assert meta["label_column"] == "label"


def test_synth_non_pd_covariance_exits_2(tmp_path):
    spec = _synth_spec(tmp_path, rho=-0.9)
    assert main(["synth", "--spec", spec, "--out", str(tmp_path / "x")]) == 2


def _pm_train_test(tmp_path):
    train_csv = _make_dataset(tmp_path, "train", faults=[], seed=1)
    test_csv = _make_dataset(tmp_path, "test", seed=2)
    return str(train_csv), str(test_csv)


def test_pm_run_and_default_quantile(tmp_path):
    train_csv, test_csv = _pm_train_test(tmp_path)
    cfg = _write_json(tmp_path / "cfg.json", TINY_CFG)
    out = tmp_path / "run"
    assert main(["pm", "--train", train_csv, "--test", test_csv, "--out", str(out), "--config", cfg]) == 0
    report = json.loads((out / "report.json").read_text())
    assert report["threshold"]["quantile"] == 98.0  # default when unset
    assert report["task"] == "pm"
    assert (out / "scores.csv").exists()
    assert (out / "model" / "manifest.json").exists()
    header = (out / "scores.csv").read_text().splitlines()[0]
    assert header.startswith("sample_id,true_label,predicted,distance,score_0")


def test_pm_byte_identical_reports_across_runs(tmp_path):
    train_csv, test_csv = _pm_train_test(tmp_path)
    cfg = _write_json(tmp_path / "cfg.json", TINY_CFG)
    outs = []
    for name in ("r1", "r2"):
        out = tmp_path / name
        assert main([
            "pm", "--train", train_csv, "--test", test_csv,
            "--out", str(out), "--config", cfg, "--seed", "9",
        ]) == 0
        outs.append((out / "report.json").read_bytes())
    assert outs[0] == outs[1]


def test_pm_baseline_pca_section(tmp_path):
    train_csv, test_csv = _pm_train_test(tmp_path)
    cfg = _write_json(tmp_path / "cfg.json", TINY_CFG)
    out = tmp_path / "run"
    assert main([
        "pm", "--train", train_csv, "--test", test_csv, "--out", str(out),
        "--config", cfg, "--baseline", "pca",
    ]) == 0
    report = json.loads((out / "report.json").read_text())
    assert "baseline_pca" in report["metrics"]
    assert "t2" in report["metrics"]["baseline_pca"]
    assert "spe" in report["metrics"]["baseline_pca"]


def test_pm_rejects_fault_labels_in_train(tmp_path):
    fault_csv = _make_dataset(tmp_path, "faulty", seed=3)  # contains labels 1, 2
    _, test_csv = _pm_train_test(tmp_path)
    assert main(["pm", "--train", str(fault_csv), "--test", test_csv, "--out", str(tmp_path / "o")]) == 2


def test_pm_missing_label_column_exits_2(tmp_path):
    csv = tmp_path / "plain.csv"
    csv.write_text("V1,V2,V3\n1,2,3\n4,5,6\n", encoding="utf-8")
    (tmp_path / "plain.manifest.json").write_text(
        json.dumps({"label_column": "label"}), encoding="utf-8"
    )
    _, test_csv = _pm_train_test(tmp_path)
    assert main(["pm", "--train", str(csv), "--test", test_csv, "--out", str(tmp_path / "o")]) == 2


def test_unknown_config_key_exits_2(tmp_path):
    train_csv, test_csv = _pm_train_test(tmp_path)
    cfg = _write_json(tmp_path / "cfg.json", {"not.a.key": 1})
    assert main(["pm", "--train", train_csv, "--test", test_csv, "--out", str(tmp_path / "o"), "--config", cfg]) == 2


def _osfd_data(tmp_path):
    # train: classes 0,1; test: classes 0,1 plus unseen class 2
    full_csv = _make_dataset(tmp_path, "full", seed=7)
    import csv as csvmod

    rows = list(csvmod.reader(open(full_csv, encoding="utf-8")))
    header, data = rows[0], rows[1:]
    train_rows = [r for r in data if r[-1] in ("0", "1")][::2]
    test_rows = data[1::2]
    train_csv = tmp_path / "osfd_train.csv"
    test_csv = tmp_path / "osfd_test.csv"
    for path, rws in ((train_csv, train_rows), (test_csv, test_rows)):
        with open(path, "w", encoding="utf-8", newline="") as fh:
            w = csvmod.writer(fh)
            w.writerow(header)
            w.writerows(rws)
    return str(train_csv), str(test_csv)


def test_osfd_run_maps_unseen_class_to_unknown(tmp_path):
    train_csv, test_csv = _osfd_data(tmp_path)
    cfg = _write_json(tmp_path / "cfg.json", TINY_CFG)
    out = tmp_path / "run"
    assert main(["osfd", "--train", train_csv, "--test", test_csv, "--out", str(out), "--config", cfg]) == 0
    report = json.loads((out / "report.json").read_text())
    assert report["task"] == "osfd"
    assert report["config"]["known_classes"] == [0, 1]
    assert report["config"]["test_unknown_classes"] == [2]
    assert report["class_labels"] == ["0", "1", "unknown"]
    assert np.array(report["confusion"]).shape == (3, 3)
    assert "macro_f1" in report["metrics"]
    assert "auroc_unknown" in report["metrics"]


def test_osfd_multi_seed_mean_std(tmp_path):
    train_csv, test_csv = _osfd_data(tmp_path)
    cfg = _write_json(tmp_path / "cfg.json", TINY_CFG)
    out = tmp_path / "run"
    assert main([
        "osfd", "--train", train_csv, "--test", test_csv, "--out", str(out),
        "--config", cfg, "--seeds", "2", "--seed", "3",
    ]) == 0
    report = json.loads((out / "report.json").read_text())
    assert report["seeds"] == [3, 4]
    assert len(report["runs"]) == 2
    assert "mean" in report["aggregate"]["macro_f1"]
    assert "std" in report["aggregate"]["macro_f1"]
    assert (out / "seed-3" / "report.json").exists()
    assert (out / "seed-4" / "report.json").exists()


def test_ablate_threshold_sweep(tmp_path):
    train_csv, test_csv = _osfd_data(tmp_path)
    cfg = _write_json(tmp_path / "cfg.json", TINY_CFG)
    out = tmp_path / "ab"
    assert main([
        "ablate", "--mode", "threshold", "--train", train_csv, "--test", test_csv,
        "--out", str(out), "--config", cfg,
    ]) == 0
    ablation = json.loads((out / "ablation.json").read_text())
    assert [p["quantile"] for p in ablation["points"]] == [80.0, 85.0, 90.0, 95.0, 98.0, 100.0]
    assert all("macro_f1" in p for p in ablation["points"])
    prints = {p["model_fingerprint"] for p in ablation["points"]}
    assert prints == {ablation["model_fingerprint"]}  # one shared trained model
    n_unknown = [p["n_unknown_predicted"] for p in ablation["points"]]
    assert n_unknown == sorted(n_unknown, reverse=True)  # shrinks as q grows


def test_ablate_distance_sweep(tmp_path):
    train_csv, test_csv = _osfd_data(tmp_path)
    cfg = _write_json(tmp_path / "cfg.json", TINY_CFG)
    out = tmp_path / "ab"
    assert main([
        "ablate", "--mode", "distance", "--train", train_csv, "--test", test_csv,
        "--out", str(out), "--config", cfg,
    ]) == 0
    ablation = json.loads((out / "ablation.json").read_text())
    kinds = [p["distance"] for p in ablation["points"]]
    assert kinds == ["mahalanobis", "euclidean", "cityblock", "canberra"]
    for p in ablation["points"]:
        assert "auroc_unknown" in p and "macro_f1" in p


def test_missing_train_file_exits_2(tmp_path):
    _, test_csv = _pm_train_test(tmp_path)
    assert main(["pm", "--train", str(tmp_path / "nope.csv"), "--test", test_csv, "--out", str(tmp_path / "o")]) == 2
