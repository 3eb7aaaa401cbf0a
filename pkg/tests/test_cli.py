import csv
import os

import numpy as np
import pytest

from guided_i2i.cli import main, preview, read_predictions
from guided_i2i.config import load_config
from guided_i2i.profiling import CSV_COLUMNS
from guided_i2i.synthdata import read_plate
from guided_i2i.tensor.io import save_tensor

TINY = """
[data]
n_plates = 3
test_plate = 2
n_perturbations = 8
n_controls = 4
replicates_per_perturbation = 2
[schedule]
beta_start = 5e-4
beta_end = 0.1
steps = 12
[network]
base_width = 8
depth = 1
[train]
iterations = 4
classifier_iterations = 4
accuracy_bins = 3
"""


@pytest.fixture(scope="module")
def work(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    cfg = root / "tiny.ini"
    cfg.write_text(TINY)
    c = str(cfg)
    assert main(["gen-data", "--config", c, "--out", str(root / "data")]) == 0
    assert main(["train", "--config", c, "--data", str(root / "data"), "--out", str(root / "run"), "--label-mode", "pert"]) == 0
    assert main(["train-classifier", "--config", c, "--data", str(root / "data"), "--out", str(root / "run"), "--label-mode", "pert"]) == 0
    return root, c


def _sample(root, c, out, *extra):
    return main(
        ["sample", "--config", c, "--denoiser", str(root / "run" / "denoiser.ckpt"), "--data", str(root / "data"), "--out", str(out)]
        + list(extra)
    )


def _read_csv(path):
    with open(path, newline="") as fh:
        return list(csv.reader(fh))


def test_gen_data_layout(work):
    root, c = work
    data = root / "data"
    assert sorted(os.listdir(data)) == ["ground_truth.csv", "plate_00", "plate_01", "plate_02", "resolved_config.ini"]
    header = (data / "resolved_config.ini").read_text().splitlines()[0]
    assert header.startswith("# guided_i2i ")
    assert load_config(data / "resolved_config.ini").data.n_plates == 3
    plate = read_plate(str(data / "plate_02"))
    assert len(plate) == 8 * 2 + 4
    assert len(_read_csv(data / "ground_truth.csv")) == 1 + 8


def test_gen_data_deterministic(work, tmp_path):
    root, c = work
    assert main(["gen-data", "--config", c, "--out", str(tmp_path / "again")]) == 0
    for name in ("manifest.csv", "wells/p01_w003_y.gi2i"):
        a = (root / "data" / "plate_01" / name).read_bytes()
        b = (tmp_path / "again" / "plate_01" / name).read_bytes()
        assert a == b


def test_train_outputs(work):
    root, _ = work
    run = root / "run"
    for name in ("denoiser.ckpt", "loss.csv", "classifier.ckpt", "classifier_loss.csv", "accuracy_vs_t.csv"):
        assert (run / name).exists()
    assert _read_csv(run / "loss.csv")[0] == ["iteration", "loss"]
    assert len(_read_csv(run / "loss.csv")) == 1 + 4
    acc = _read_csv(run / "accuracy_vs_t.csv")
    assert acc[0] == ["t", "accuracy"]
    assert [int(r[0]) for r in acc[1:]] == [0, 4, 8, 12]
    assert all(0.0 <= float(r[1]) <= 1.0 for r in acc[1:])


def test_sample_outputs_and_thread_invariance(work, tmp_path, monkeypatch):
    root, c = work
    monkeypatch.setenv("GI2I_THREADS", "1")
    assert _sample(root, c, tmp_path / "a", "--classifier", str(root / "run" / "classifier.ckpt"), "--scale", "1") == 0
    monkeypatch.setenv("GI2I_THREADS", "3")
    assert _sample(root, c, tmp_path / "b", "--classifier", str(root / "run" / "classifier.ckpt"), "--scale", "1") == 0
    pa, pb = read_predictions(str(tmp_path / "a")), read_predictions(str(tmp_path / "b"))
    assert list(pa) == list(pb) and len(pa) == 20
    for w in pa:
        assert np.array_equal(pa[w][1], pb[w][1])
    assert _read_csv(tmp_path / "a" / "manifest.csv")[0] == ["well_id", "label", "file"]
    ppm = (tmp_path / "a" / "previews" / "p02_w000.ppm").read_bytes()
    assert ppm.startswith(b"P6 ")


def test_sample_subset_and_plate(work, tmp_path):
    root, c = work
    assert _sample(root, c, tmp_path / "s", "--subset", "active", "--plate", "1", "--label-in-adagn", "off") == 0
    preds = read_predictions(str(tmp_path / "s"))
    assert 0 < len(preds) < 20
    assert all(w.startswith("p01_") for w in preds)


def _copy_truth_as_prediction(plate_dir, out):
    os.makedirs(os.path.join(out, "wells"))
    plate = read_plate(plate_dir)
    with open(os.path.join(out, "manifest.csv"), "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["well_id", "label", "file"])
        for s in plate.samples:
            save_tensor(os.path.join(out, "wells", s.well_id + ".gi2i"), s.y)
            w.writerow([s.well_id, s.k, f"wells/{s.well_id}.gi2i"])
    return plate


def _evaluate(root, c, pred, out):
    return main(
        [
            "evaluate", "--config", c, "--pred", str(pred), "--truth", str(root / "data" / "plate_02"),
            "--ground-truth", str(root / "data" / "ground_truth.csv"), "--out", str(out),
        ]
    )


def test_evaluate_identity_is_a_fixed_point(work, tmp_path):
    root, c = work
    _copy_truth_as_prediction(str(root / "data" / "plate_02"), str(tmp_path / "pred"))
    assert _evaluate(root, c, tmp_path / "pred", tmp_path / "ev") == 0
    rows = _read_csv(tmp_path / "ev" / "metrics_whole_plate.csv")
    assert tuple(rows[0]) == CSV_COLUMNS
    m = dict(zip(rows[0], rows[1]))
    assert float(m["pcc"]) == pytest.approx(1.0)
    assert float(m["mse"]) == 0.0 and float(m["mae"]) == 0.0
    assert float(m["ssim"]) == pytest.approx(1.0)
    assert abs(float(m["fd"])) < 1e-6
    assert float(m["cpcor"]) == pytest.approx(1.0)
    report = (tmp_path / "ev" / "report.txt").read_text()
    assert "whole_plate.pcc=" in report and "tool_version=" in report
    assert _read_csv(tmp_path / "ev" / "active_subset.csv")[0] == ["k", "label", "score", "designed_active"]


def test_evaluate_partial_prediction_skips_whole_plate(work, tmp_path):
    root, c = work
    assert _sample(root, c, tmp_path / "s", "--subset", "active") == 0
    assert _evaluate(root, c, tmp_path / "s", tmp_path / "ev") == 0
    assert not (tmp_path / "ev" / "metrics_whole_plate.csv").exists()
    assert (tmp_path / "ev" / "metrics_active_subset.csv").exists()


def test_evaluate_label_mismatch(work, tmp_path):
    root, c = work
    _copy_truth_as_prediction(str(root / "data" / "plate_02"), str(tmp_path / "pred"))
    rows = _read_csv(tmp_path / "pred" / "manifest.csv")
    rows[1][1] = str(int(rows[1][1]) + 1)
    with open(tmp_path / "pred" / "manifest.csv", "w", newline="") as fh:
        csv.writer(fh).writerows(rows)
    assert _evaluate(root, c, tmp_path / "pred", tmp_path / "ev") == 2


@pytest.mark.parametrize(
    "argv",
    [
        [],
        ["sample"],
        ["train", "--data", "/nonexistent/data", "--out", "/tmp/x"],
        ["gen-data", "--out", "/nonexistent/parent/out"],
        ["gen-data", "--config", "/nonexistent.ini", "--out", "/tmp/x"],
    ],
)
def test_usage_errors_exit_2(argv):
    assert main(argv) == 2


def test_semantic_errors_exit_2(work, tmp_path):
    root, c = work
    data, run = str(root / "data"), str(root / "run")
    assert main(["train-classifier", "--config", c, "--data", data, "--out", str(tmp_path / "r"), "--label-mode", "none"]) == 2
    assert _sample(root, c, tmp_path / "s", "--scale", "1") == 2
    bad = tmp_path / "bad.ini"
    bad.write_text("[data]\nunknown_key = 1\n")
    assert main(["gen-data", "--config", str(bad), "--out", str(tmp_path / "d")]) == 2
    wrong_t = tmp_path / "t.ini"
    wrong_t.write_text(TINY.replace("steps = 12", "steps = 30"))
    assert main(["sample", "--config", str(wrong_t), "--denoiser", run + "/denoiser.ckpt", "--data", data, "--out", str(tmp_path / "s2")]) == 2


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_divergent_training_exits_3(work, tmp_path):
    root, _ = work
    cfg = tmp_path / "diverge.ini"
    cfg.write_text(TINY.replace("iterations = 4\n", "iterations = 30\nlearning_rate = 1e300\n", 1))
    assert main(["train", "--config", str(cfg), "--data", str(root / "data"), "--out", str(tmp_path / "r")]) == 3


def test_preview_mapping_is_fixed():
    x = np.full((2, 4, 4), -4.0)
    y = np.full((2, 4, 4), 4.0)
    img = preview(x, y, zoom=1)
    assert img.shape == (4, 4 * 4 + 3)
    assert img[0, 0] == 0 and img[0, -1] == 255


def test_version(capsys):
    assert main(["--version"]) == 0
    assert "0.1.0" in capsys.readouterr().out
