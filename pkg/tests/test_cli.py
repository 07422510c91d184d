import csv
import json
import shutil
import subprocess
import sys
from pathlib import Path

import pytest

from latentfusion.cli import discover_frames, main

DATA = Path(__file__).parent / "data"
TINY = ["--channels", "4,4,4,4", "--latent-n", "2"]


def test_run_synthetic_json(tmp_path):
    out = tmp_path / "r.json"
    assert main(["run", "--synthetic", "--seed", "2", "--objects", "2", *TINY, "--out", str(out)]) == 0
    doc = json.loads(out.read_text())
    assert doc["meta"]["source"] == "synthetic"
    assert doc["meta"]["toggles"] == "saf,sam,lfm"
    assert len(doc["frames"][0]["stages"]) == 4


def test_run_is_byte_identical(tmp_path):
    args = ["run", "--synthetic", "--seed", "4", "--objects", "3", *TINY]
    main([*args, "--out", str(tmp_path / "a.json")])
    main([*args, "--out", str(tmp_path / "b.json")])
    assert (tmp_path / "a.json").read_bytes() == (tmp_path / "b.json").read_bytes()


def test_run_csv_by_suffix(tmp_path):
    out = tmp_path / "r.csv"
    assert main(["run", "--synthetic", "--objects", "1", *TINY, "--toggles", "none", "--out", str(out)]) == 0
    rows = list(csv.DictReader(out.open()))
    assert [r["stage"] for r in rows] == ["1", "2", "3", "4"]
    assert [r["fused"] for r in rows] == ["True", "False", "False", "False"]


def test_run_with_timings(tmp_path):
    out = tmp_path / "r.json"
    main(["run", "--synthetic", "--objects", "1", *TINY, "--timings", "--out", str(out)])
    assert "timings" in json.loads(out.read_text())["frames"][0]


def kitti_dir(tmp_path, n=2):
    root = tmp_path / "kitti"
    (root / "velodyne").mkdir(parents=True)
    (root / "calib").mkdir()
    for k in range(n):
        shutil.copy(DATA / "000000.bin", root / "velodyne" / f"{k:06d}.bin")
        shutil.copy(DATA / "000000.txt", root / "calib" / f"{k:06d}.txt")
    return root


def test_run_frame_dir(tmp_path):
    root = kitti_dir(tmp_path)
    out = tmp_path / "k.json"
    assert main(["run", "--frame-dir", str(root), *TINY, "--out", str(out)]) == 0
    frames = json.loads(out.read_text())["frames"]
    assert [f["frame"] for f in frames] == ["000000", "000001"]
    assert frames[0]["stages"] == frames[1]["stages"]


def test_run_frame_dir_parallel_matches_serial(tmp_path):
    root = kitti_dir(tmp_path, 3)
    main(["run", "--frame-dir", str(root), *TINY, "--out", str(tmp_path / "s.json")])
    main(["run", "--frame-dir", str(root), *TINY, "--workers", "2", "--out", str(tmp_path / "p.json")])
    assert (tmp_path / "s.json").read_bytes() == (tmp_path / "p.json").read_bytes()


def test_discover_flat_layout(tmp_path):
    shutil.copy(DATA / "000000.bin", tmp_path / "a.bin")
    shutil.copy(DATA / "000000.txt", tmp_path / "a.txt")
    assert discover_frames(tmp_path) == [(tmp_path / "a.bin", tmp_path / "a.txt")]


def test_missing_calib_exit_1(tmp_path, caplog):
    shutil.copy(DATA / "000000.bin", tmp_path / "a.bin")
    assert main(["run", "--frame-dir", str(tmp_path), "--out", str(tmp_path / "x.json")]) == 1
    assert "no calibration file" in caplog.text


def test_empty_dir_exit_1(tmp_path):
    assert main(["run", "--frame-dir", str(tmp_path), "--out", str(tmp_path / "x.json")]) == 1


def test_malformed_calib_exit_1(tmp_path, caplog):
    root = kitti_dir(tmp_path, 1)
    (root / "calib" / "000000.txt").write_text("P2: 1 2 3\n")
    assert main(["run", "--frame-dir", str(root), *TINY, "--out", str(tmp_path / "x.json")]) == 1
    assert "3 values, expected 12" in caplog.text


def test_bad_toggle_exit_1(tmp_path):
    assert main(["run", "--synthetic", "--toggles", "xyz", "--out", str(tmp_path / "x.json")]) == 1


def test_bench_writes_csv(tmp_path):
    out = tmp_path / "b.csv"
    rc = main(["bench", "--sizes", "64,128", "--latent-n", "2", "--channels", "8", "--reps", "5", "--out", str(out)])
    assert rc == 0
    assert out.read_text().splitlines()[0] == "N,n,c,reps,ecmi_median_s,qkv_median_s,speedup"


def test_bench_check_fails_outside_window(tmp_path, capsys):
    # at toy sizes per-call overhead flattens the ecmi curve well below the window
    out = tmp_path / "b.json"
    rc = main(["bench", "--sizes", "16,32", "--latent-n", "2", "--channels", "4", "--reps", "5", "--check", "--out", str(out)])
    assert rc == 2
    assert "FAIL" in capsys.readouterr().out


def test_bench_rejects_few_reps(tmp_path):
    assert main(["bench", "--sizes", "64,128", "--reps", "3", "--out", str(tmp_path / "b.csv")]) == 1


def test_selftest_subcommand(capsys):
    assert main(["selftest", "--seeds", "1"]) == 0
    lines = capsys.readouterr().out.splitlines()
    assert lines and all(ln.startswith("PASS") for ln in lines)


def test_console_script_usage():
    proc = subprocess.run([sys.executable, "-m", "latentfusion.cli", "--help"], capture_output=True, text=True)
    assert proc.returncode == 0
    for sub in ("run", "bench", "selftest"):
        assert sub in proc.stdout


def test_missing_subcommand():
    with pytest.raises(SystemExit) as exc:
        main([])
    assert exc.value.code == 2
