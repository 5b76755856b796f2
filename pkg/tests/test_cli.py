import csv

import numpy as np
import pytest

from burnkit.checkpoint import Checkpoint
from burnkit.cli import main
from burnkit.data import load_dataset
from burnkit.trainer import teacher_logits


@pytest.fixture(scope="module")
def files(tmp_path_factory):
    d = tmp_path_factory.mktemp("cli")
    assert main(["-q", "synth-data", "--out", str(d / "data.bds"), "--n", "60", "--size", "8", "--seed", "1"]) == 0
    assert main(["-q", "pretrain-teacher", "--data", str(d / "data.bds"), "--out", str(d / "t.bnck"),
                 "--epochs", "1", "--widths", "4", "8", "--batch-size", "16"]) == 0
    return d


def _burn(files, out, *extra):
    cfg = files / "tiny.cfg"
    cfg.write_text("iters = 4\nbatch_size = 8\nnum_classes = 5\nstudent_widths = 4, 6\n")
    return main(["-q", "burn", "--data", str(files / "data.bds"), "--teacher", str(files / "t.bnck"),
                 "--out", str(out), "--config", str(cfg), *extra])


def test_pretrain_teacher_writes_log_matching_recomputation(files):
    rows = list(csv.DictReader(open(files / "t.bnck.log.csv")))
    assert [r["epoch"] for r in rows] == ["0"]
    data = load_dataset(files / "data.bds")
    _, held = data.split(0.1, seed=0)
    pred = teacher_logits(Checkpoint.load(files / "t.bnck"), held.images).argmax(1)
    assert abs(float(np.mean(pred == held.labels)) - float(rows[0]["heldout_top1"])) <= 1e-6


def test_pretrain_teacher_zero_epochs_is_deterministic(files, tmp_path):
    args = ["-q", "pretrain-teacher", "--data", str(files / "data.bds"), "--epochs", "0", "--widths", "4"]
    assert main(args + ["--out", str(tmp_path / "a.bnck")]) == 0
    assert main(args + ["--out", str(tmp_path / "b.bnck")]) == 0
    a, b = Checkpoint.load(tmp_path / "a.bnck"), Checkpoint.load(tmp_path / "b.bnck")
    assert a.digest() == b.digest() and a.iteration == 0


def test_burn_rerun_gives_byte_identical_telemetry(files, tmp_path):
    assert _burn(files, tmp_path / "a") == 0
    assert _burn(files, tmp_path / "b") == 0
    ta, tb = (tmp_path / "a/telemetry.csv").read_bytes(), (tmp_path / "b/telemetry.csv").read_bytes()
    assert ta == tb
    stages = [r["stage"] for r in csv.DictReader(open(tmp_path / "a/telemetry.csv"))]
    assert stages == ["1", "1", "2", "2"]
    for name in ("extractor.bnck", "stage1.bnck", "stage2.bnck"):
        assert (tmp_path / "a" / name).is_file()


def test_burn_full_ablation_is_single_stage_kl_only(files, tmp_path):
    assert _burn(files, tmp_path, "--ablate", "no-fs", "no-dyn", "no-mst") == 0
    rows = list(csv.DictReader(open(tmp_path / "telemetry.csv")))
    assert {r["stage"] for r in rows} == {"2"} and {float(r["lambda"]) for r in rows} == {0.0}
    assert not (tmp_path / "stage1.bnck").exists()


def test_burn_overrides_win_over_file(files, tmp_path):
    assert _burn(files, tmp_path, "--iters", "2", "--set", "lambda0=0.5") == 0
    rows = list(csv.DictReader(open(tmp_path / "telemetry.csv")))
    assert len(rows) == 2 and float(rows[0]["lambda"]) == pytest.approx(0.5)


def test_burn_nan_teacher_exits_4(files, tmp_path):
    ck = Checkpoint.load(files / "t.bnck")
    ck.tensors["extractor.convs.0.weight"] = np.full_like(ck.tensors["extractor.convs.0.weight"], np.nan)
    ck.save(tmp_path / "nan.bnck")
    cfg = tmp_path / "c.cfg"
    cfg.write_text("iters = 2\nbatch_size = 8\nstudent_widths = 4, 6\n")
    code = main(["-q", "burn", "--data", str(files / "data.bds"), "--teacher", str(tmp_path / "nan.bnck"),
                 "--out", str(tmp_path / "o"), "--config", str(cfg)])
    assert code == 4


@pytest.mark.parametrize(
    "argv",
    [
        ["burn", "--data", "x"],  # missing required flags
        ["ema-sim", "--mode", "quantum", "--out", "x.csv"],
        ["ema-sim", "--mode", "fp", "--out", "x.csv", "--tau", "2"],
        ["xnor-bench", "--m", "0", "--k", "4", "--n", "4"],
        ["nonsense"],
    ],
)
def test_config_errors_exit_2(argv, tmp_path, monkeypatch):
    monkeypatch.chdir(tmp_path)
    assert main(argv) == 2


def test_unknown_config_key_exits_2(files, tmp_path):
    assert _burn(files, tmp_path, "--set", "no_such_key=1") == 2


def test_bad_thread_env_exits_2(monkeypatch, tmp_path):
    monkeypatch.setenv("BURNKIT_THREADS", "zero")
    assert main(["ema-sim", "--mode", "fp", "--out", str(tmp_path / "e.csv"), "--iters", "1", "--runs", "2"]) == 2


def test_io_errors_exit_3(files, tmp_path):
    assert main(["burn", "--data", str(tmp_path / "missing.bds"), "--teacher", str(files / "t.bnck"), "--out", str(tmp_path)]) == 3
    (tmp_path / "junk.bnck").write_bytes(b"not a checkpoint")
    assert main(["eval-linear", "--data", str(files / "data.bds"), "--extractor", str(tmp_path / "junk.bnck"),
                 "--out", str(tmp_path / "r.csv")]) == 3


def test_eval_linear_writes_results(files, tmp_path):
    assert _burn(files, tmp_path / "b") == 0
    ext = str(tmp_path / "b/extractor.bnck")
    base = ["-q", "eval-linear", "--data", str(files / "data.bds"), "--extractor", ext, "--epochs", "2", "--run-id", "s0"]
    assert main(base + ["--out", str(tmp_path / "burn.csv")]) == 0
    assert main(base + ["--out", str(tmp_path / "rand.csv"), "--random-init"]) == 0
    burn = list(csv.DictReader(open(tmp_path / "burn.csv")))
    rand = list(csv.DictReader(open(tmp_path / "rand.csv")))
    assert burn[0]["pretrain_method"] == "burn" and rand[0]["pretrain_method"] == "random-init"
    assert 0.0 <= float(burn[0]["top1"]) <= 1.0 and burn[0]["run_id"] == "s0"


def test_ema_sim_csv(tmp_path, monkeypatch):
    monkeypatch.setenv("BURNKIT_THREADS", "1")
    out = tmp_path / "fp.csv"
    assert main(["-q", "ema-sim", "--mode", "fp", "--out", str(out), "--iters", "5", "--runs", "3"]) == 0
    rows = list(csv.DictReader(open(out)))
    assert len(rows) == 18 and rows[0] == {"mode": "fp", "run": "0", "iter": "0", "distance": "0.0"}
    agg = list(csv.DictReader(open(tmp_path / "fp_agg.csv")))
    assert len(agg) == 6


def test_xnor_bench_reports_exact_and_positive_throughput(capsys, tmp_path):
    assert main(["xnor-bench", "--m", "7", "--k", "130", "--n", "5", "--out", str(tmp_path / "x.csv")]) == 0
    fields = dict(line.split(": ") for line in capsys.readouterr().out.strip().splitlines())
    assert fields["exact"] == "true"
    assert float(fields["packed_gops"]) > 0 and float(fields["float_gops"]) > 0
    row = next(csv.DictReader(open(tmp_path / "x.csv")))
    assert row["exact"] == "true" and int(row["k"]) == 130


def test_convert_images(tmp_path):
    from PIL import Image

    for cls, colour in (("a", (255, 0, 0)), ("b", (0, 0, 255))):
        (tmp_path / "root" / cls).mkdir(parents=True)
        for i in range(2):
            Image.new("RGB", (12, 10), colour).save(tmp_path / "root" / cls / f"{i}.png")
    assert main(["-q", "convert-images", "--root", str(tmp_path / "root"), "--out", str(tmp_path / "d.bds"), "--size", "8"]) == 0
    ds = load_dataset(tmp_path / "d.bds")
    assert len(ds) == 4 and ds.num_classes == 2 and ds.images.shape[1:] == (3, 8, 8)
