import json
import math

import numpy as np
import pytest
from PIL import Image

from dentseg.cli import EXIT_FAILURE, EXIT_OK, EXIT_USAGE, main
from dentseg.dataio import dataset_header, write_cloud
from dentseg.grid import SurfaceGrid

SMALL = ["--width", "32", "--height", "32", "--world-x", "100", "--world-y", "100"]


def run(capsys, *argv):
    code = main([str(a) for a in argv])
    out = capsys.readouterr()
    lines = out.out.strip().splitlines()
    report = json.loads(lines[-1]) if code == EXIT_OK and lines else None
    return code, report, out.err


@pytest.fixture(scope="module")
def workdir(tmp_path_factory):
    return tmp_path_factory.mktemp("cli")


@pytest.fixture(scope="module")
def dataset(workdir):
    path = workdir / "set.dent"
    assert main(["generate", "--count", "20", "--seed", "7", *SMALL, "--out", str(path)]) == 0
    return path


@pytest.fixture(scope="module")
def checkpoint(workdir, dataset):
    path = workdir / "net.dntk"
    assert main(["train", str(dataset), "--stem", "4", "--epochs", "1", "--out", str(path)]) == 0
    return path


def test_generate_is_reproducible(tmp_path, capsys):
    a, b = tmp_path / "a.dent", tmp_path / "b.dent"
    for p in (a, b):
        code, report, _ = run(capsys, "generate", "--count", 12, "--seed", 7, *SMALL, "--out", p)
        assert code == EXIT_OK and report["samples"] == 12
    assert a.read_bytes() == b.read_bytes()


def test_generate_count_zero_is_usage_error(tmp_path, capsys):
    code, _, err = run(capsys, "generate", "--count", 0, "--out", tmp_path / "x.dent")
    assert code == EXIT_USAGE
    assert "count" in err
    assert not (tmp_path / "x.dent").exists()


def test_unknown_flag_is_usage_error(capsys):
    assert run(capsys, "generate", "--no-such-flag", 1)[0] == EXIT_USAGE


def test_config_file_and_flag_precedence(tmp_path, capsys):
    cfg = tmp_path / "run.cfg"
    cfg.write_text("# desk test\ncount = 5\nwidth = 32\nheight = 16\nseed = 3\n")
    out = tmp_path / "c.dent"
    code, report, _ = run(capsys, "generate", "--config", cfg, "--count", 3, "--out", out)
    assert code == EXIT_OK
    hd = dataset_header(out)
    assert (hd.count, hd.width, hd.height) == (3, 32, 16)


def test_config_unknown_key_rejected(tmp_path, capsys):
    cfg = tmp_path / "bad.cfg"
    cfg.write_text("count = 5\nlearning_rate = 0.1\n")
    code, _, err = run(capsys, "generate", "--config", cfg, "--out", tmp_path / "x.dent")
    assert code == EXIT_USAGE
    assert "bad.cfg:2" in err and "learning_rate" in err


def test_invalid_grid_size_is_usage_error(tmp_path, capsys):
    code, _, _ = run(capsys, "generate", "--count", 1, "--width", 30, "--out", tmp_path / "x.dent")
    assert code == EXIT_USAGE


def test_generate_dent_statistics_match_law(tmp_path, capsys):
    n, p, q = 2000, 0.8, 0.5
    code, report, _ = run(capsys, "generate", "--count", n, "--seed", 1, "--width", 16,
                          "--height", 16, "--out", tmp_path / "s.dent")
    assert code == EXIT_OK
    assert report["with_dents_expected"] == p
    assert abs(report["with_dents"] - p) <= 5 * math.sqrt(p * (1 - p) / n)
    # mean count under the sequential law: sum_k prod_{j<k} p q^j
    mean = sum(math.prod(p * q**j for j in range(k)) for k in range(1, 13))
    assert report["dents_per_sample_expected"] == pytest.approx(mean)
    assert abs(report["dents_per_sample"] - mean) <= 0.08
    assert sum(report["dent_histogram"].values()) == n


def test_generate_progress_every_thousand(tmp_path, capsys):
    code, _, err = run(capsys, "generate", "--count", 1000, "--width", 16, "--height", 16,
                       "--out", tmp_path / "p.dent")
    assert code == EXIT_OK
    assert "generated 1000/1000" in err


def test_evaluate_oracle_is_perfect(dataset, capsys):
    code, report, _ = run(capsys, "evaluate", dataset, "--oracle")
    assert code == EXIT_OK
    assert report["iou"] == 1.0 and report["precision"] == 1.0 and report["recall"] == 1.0
    assert report["cells"] == 20 * 32 * 32


def test_evaluate_checkpoint_writes_report(dataset, checkpoint, tmp_path, capsys):
    out = tmp_path / "eval.json"
    code, report, _ = run(capsys, "evaluate", dataset, "--checkpoint", checkpoint, "--out", out)
    assert code == EXIT_OK
    saved = json.loads(out.read_text())
    assert saved["iou"] == report["iou"]
    assert sum(saved["confusion"].values()) == 20 * 32 * 32


def test_evaluate_is_reproducible(dataset, checkpoint, capsys):
    a = run(capsys, "evaluate", dataset, "--checkpoint", checkpoint)[1]
    b = run(capsys, "evaluate", dataset, "--checkpoint", checkpoint)[1]
    assert a == b


def test_train_with_and_without_noise_bank(workdir, tmp_path, capsys):
    bank = tmp_path / "bank.dent"
    code, _, _ = run(capsys, "ingest-noise", "--synthetic", 2, *SMALL, "--out", bank)
    assert code == EXIT_OK
    reports = []
    for extra in ([], ["--noise-bank", bank]):
        code, report, _ = run(capsys, "train", "--count", 10, *SMALL, "--stem", 4, "--epochs", 1,
                              *extra, "--out", tmp_path / f"n{len(extra)}.dntk")
        assert code == EXIT_OK
        reports.append(report)
    assert reports[0].keys() == reports[1].keys()
    assert reports[0]["noise_bank"] is None and reports[1]["noise_bank"] == str(bank)
    assert reports[0]["epoch_losses"] != reports[1]["epoch_losses"]


def test_train_rejects_bank_with_dataset(dataset, tmp_path, capsys):
    bank = tmp_path / "bank.dent"
    run(capsys, "ingest-noise", "--synthetic", 1, *SMALL, "--out", bank)
    code, _, _ = run(capsys, "train", dataset, "--noise-bank", bank, "--out", tmp_path / "x.dntk")
    assert code == EXIT_USAGE


def test_ingest_noise_from_scan_files(tmp_path, capsys):
    scans = []
    for i in range(2):
        g = SurfaceGrid.lattice(32, 16, 1.0)
        g = g.with_z(0.01 * g.x + np.random.default_rng(i).normal(0, 0.1, g.shape))
        scans.append(tmp_path / f"flat{i}.xyzg")
        write_cloud(scans[-1], g)
    code, report, _ = run(capsys, "ingest-noise", *scans, "--out", tmp_path / "bank.dent")
    assert code == EXIT_OK
    assert report["maps"] == 2
    assert report["rms"] == pytest.approx(0.1, rel=0.2)


def test_predict_pads_and_crops(checkpoint, tmp_path, capsys):
    g = SurfaceGrid.lattice(950, 630, 0.5)
    cloud = tmp_path / "scan.xyzg"
    write_cloud(cloud, g.with_z(1e-4 * g.x**2))
    mask, overlay = tmp_path / "mask.png", tmp_path / "overlay.png"
    code, report, _ = run(capsys, "predict", cloud, "--checkpoint", checkpoint, "--out", mask,
                          "--overlay", overlay)
    assert code == EXIT_OK
    assert (report["width"], report["height"]) == (950, 630)
    assert np.asarray(Image.open(mask)).shape == (630, 950)
    assert np.asarray(Image.open(overlay)).shape == (630, 950, 3)


def test_predict_threshold_flag(checkpoint, tmp_path, capsys):
    cloud = tmp_path / "scan.xyzg"
    write_cloud(cloud, SurfaceGrid.lattice(32, 32, 1.0))
    code, report, _ = run(capsys, "predict", cloud, "--checkpoint", checkpoint, "--threshold", 0,
                          "--out", tmp_path / "m.png")
    assert code == EXIT_OK and report["dented_fraction"] == 1.0


def test_missing_inputs_are_usage_errors(checkpoint, tmp_path, capsys):
    assert run(capsys, "predict", tmp_path / "nope.xyz", "--checkpoint", checkpoint,
               "--out", tmp_path / "m.png")[0] == EXIT_USAGE
    assert run(capsys, "evaluate", tmp_path / "nope.dent", "--oracle")[0] == EXIT_USAGE
    assert run(capsys, "generate", "--count", 1, "--out", tmp_path / "no" / "dir.dent")[0] == EXIT_USAGE


def test_corrupt_inputs_are_runtime_failures(dataset, checkpoint, tmp_path, capsys):
    bad = tmp_path / "trunc.dent"
    bad.write_bytes(dataset.read_bytes()[:100])
    assert run(capsys, "evaluate", bad, "--oracle")[0] == EXIT_FAILURE
    ck = tmp_path / "bad.dntk"
    ck.write_bytes(checkpoint.read_bytes()[:-8])
    code, _, err = run(capsys, "evaluate", dataset, "--checkpoint", ck)
    assert code == EXIT_FAILURE and "checksum" in err


def test_bench_reports_stages(checkpoint, capsys):
    code, report, _ = run(capsys, "bench", "--checkpoint", checkpoint, "--reps", 3, *SMALL)
    assert code == EXIT_OK
    assert report["points"] == 32 * 32
    assert set(report["stages"]) == {"preprocess", "inference"}
    assert report["points_per_second"] * report["seconds"] == pytest.approx(report["points"])


def test_bench_needs_three_reps(capsys):
    assert run(capsys, "bench", "--reps", 2)[0] == EXIT_USAGE


def test_render(dataset, checkpoint, tmp_path, capsys):
    out = tmp_path / "r.png"
    code, _, _ = run(capsys, "render", dataset, "--index", 2, "--checkpoint", checkpoint,
                     "--scale", 3, "--out", out)
    assert code == EXIT_OK
    assert np.asarray(Image.open(out)).shape == (96, 96, 3)
    assert run(capsys, "render", dataset, "--index", 99, "--out", out)[0] == EXIT_USAGE


def test_commands_do_not_mutate_inputs(dataset, checkpoint, capsys):
    before = (dataset.read_bytes(), checkpoint.read_bytes())
    run(capsys, "evaluate", dataset, "--checkpoint", checkpoint)
    assert (dataset.read_bytes(), checkpoint.read_bytes()) == before
