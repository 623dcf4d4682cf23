import hashlib
from pathlib import Path

import numpy as np

from trupnet.cli import main
from trupnet.data import read_pgm, synth_dataset, save_sample


def dir_digest(directory):
    h = hashlib.sha256()
    for path in sorted(Path(directory).rglob("*")):
        if path.is_file():
            h.update(path.name.encode())
            h.update(path.read_bytes())
    return h.hexdigest()


def write_dataset(path, n=4, size=32, seed=0):
    for s in synth_dataset(n, size, seed):
        save_sample(s, Path(path) / "images", Path(path) / "masks")


def test_synth_data_deterministic(tmp_path):
    assert main(["synth-data", "--n", "3", "--size", "32", "--out", str(tmp_path / "a"), "--seed", "1"]) == 0
    assert main(["synth-data", "--n", "3", "--size", "32", "--out", str(tmp_path / "b"), "--seed", "1"]) == 0
    assert dir_digest(tmp_path / "a") == dir_digest(tmp_path / "b")
    assert len(list((tmp_path / "a" / "images").glob("*.ppm"))) == 3


def test_unknown_flag_exits_2(tmp_path, capsys):
    assert main(["synth-data", "--n", "1", "--bogus", "x"]) == 2
    assert main(["no-such-command"]) == 2


def test_missing_data_dir_exits_1(tmp_path):
    code = main(
        ["train", "--data", str(tmp_path / "nope"), "--out", str(tmp_path / "run"), "--epochs", "1", "--arch", "tiny", "--size", "32"]
    )
    assert code == 1


def test_train_eval_predict_bench_pipeline(tmp_path):
    data = tmp_path / "data"
    write_dataset(data, n=4, size=32, seed=3)
    run = tmp_path / "run"
    code = main(
        [
            "train",
            "--data", str(data),
            "--out", str(run),
            "--epochs", "2",
            "--batch", "2",
            "--size", "32",
            "--seed", "0",
            "--arch", "tiny",
        ]
    )
    assert code == 0
    ckpt = run / "checkpoint"
    assert (ckpt / "manifest.txt").is_file()
    log = (run / "train_log.csv").read_text().splitlines()
    assert log[0] == "epoch,step,loss"
    assert len(log) == 5  # header + 2 steps x 2 epochs

    report = tmp_path / "report.csv"
    assert main(["eval", "--data", str(data), "--ckpt", str(ckpt), "--out", str(report)]) == 0
    lines = report.read_text().splitlines()
    assert lines[0] == "image,dice,iou,recall,precision,f2"
    assert lines[-1].startswith("AGGREGATE,")
    assert len(lines) == 6  # header + 4 images + aggregate

    mask_out = tmp_path / "mask.pgm"
    image = next((data / "images").glob("*.ppm"))
    assert main(["predict", "--ckpt", str(ckpt), "--image", str(image), "--out", str(mask_out)]) == 0
    mask = read_pgm(mask_out)
    assert mask.shape == (32, 32)
    assert set(np.unique(mask)) <= {0, 255}

    fps_out = tmp_path / "fps.txt"
    assert main(["bench", "--ckpt", str(ckpt), "--warmup", "1", "--frames", "3", "--out", str(fps_out)]) == 0
    kv = dict(line.split("=") for line in fps_out.read_text().strip().splitlines())
    assert set(kv) == {"n_frames", "total_seconds", "fps", "p50_ms", "p95_ms"}
    assert int(kv["n_frames"]) == 3
    assert float(kv["fps"]) > 0


def test_train_resume_matches_straight_run(tmp_path):
    data = tmp_path / "data"
    write_dataset(data, n=4, size=32, seed=4)
    base = ["--data", str(data), "--batch", "2", "--size", "32", "--seed", "1", "--arch", "tiny"]

    run_a = tmp_path / "a"
    assert main(["train", *base, "--out", str(run_a), "--epochs", "4"]) == 0

    run_b = tmp_path / "b"
    assert main(["train", *base, "--out", str(run_b), "--epochs", "2"]) == 0
    assert main(["train", *base, "--out", str(run_b), "--epochs", "2", "--resume", str(run_b / "checkpoint")]) == 0

    log_a = (run_a / "train_log.csv").read_text()
    log_b = (run_b / "train_log.csv").read_text()
    assert log_a == log_b
    assert dir_digest(run_a / "checkpoint" / "params") == dir_digest(run_b / "checkpoint" / "params")


def test_bench_without_checkpoint(tmp_path):
    fps_out = tmp_path / "fps.txt"
    code = main(["bench", "--arch", "tiny", "--size", "32", "--warmup", "1", "--frames", "2", "--out", str(fps_out)])
    assert code == 0
    assert fps_out.is_file()


def test_eval_bad_checkpoint_exits_1(tmp_path):
    data = tmp_path / "data"
    write_dataset(data, n=2, size=32, seed=5)
    assert main(["eval", "--data", str(data), "--ckpt", str(tmp_path / "missing"), "--out", str(tmp_path / "r.csv")]) == 1


def test_gradcheck_quick(tmp_path):
    assert main(["gradcheck", "--seed", "7", "--repeats", "1", "--model-params", "20"]) == 0
