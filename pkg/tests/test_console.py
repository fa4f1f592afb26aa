import os
import shutil

import numpy as np
import pytest

from mapstitch.console import UsageError, map_lock, read_preset, run
from mapstitch.errors import MapLocked
from mapstitch.synth import evaluate_ate, read_truth_csv

WORLD = "landmark_count 1500\ntrajectory_length 150\nsession_count 3\n"

PIPELINE = [
    ["keyframe"],
    ["filter-landmarks"],
    ["align"],
    ["relax"],
    ["loopclose-merge"],
    ["optimize", "--max-iters", "20"],
    ["summarize", "--target-landmarks", "1200"],
    ["build-index"],
    ["stats"],
    ["check"],
]


def read_csv(path):
    with open(path) as fh:
        head = fh.readline().strip().split(",")
        return head, [line.rstrip("\n").split(",") for line in fh]


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    (root / "world.cfg").write_text(WORLD)
    logs = root / "logs"
    codes = {"synth": run(["synth", "--config", str(root / "world.cfg"), "--out", str(logs),
                           "--seed", "2"])}
    mp = str(root / "map")
    sessions = sorted(str(p) for p in logs.glob("session_*.log"))
    codes["ingest"] = run(["ingest", mp, *sessions])
    for cmd in PIPELINE:
        codes[cmd[0]] = run([cmd[0], mp, *cmd[1:]])
    codes["export-trajectory"] = run(["export-trajectory", mp, "--out", str(root / "traj.csv")])
    codes["localize"] = run(["localize", mp, "--query-log", sessions[1],
                             "--out", str(root / "loc.csv")])
    return root, mp, codes


def test_every_stage_exits_zero(pipeline):
    _, _, codes = pipeline
    assert codes == {k: 0 for k in codes}


def test_exported_trajectory_is_accurate(pipeline):
    root, _, _ = pipeline
    truth = read_truth_csv(root / "logs" / "truth.csv")
    head, rows = read_csv(root / "traj.csv")
    assert head == ["ts", "x", "y", "z", "qw", "qx", "qy", "qz"]
    # every exported vertex matches a logged timestamp
    est = np.array([[float(v) for v in r[1:4]] for r in rows])
    gt = np.array([truth[float(r[0])] for r in rows])
    assert 0 < len(rows) <= len(truth)
    assert evaluate_ate(est, gt) < 0.5


def test_localize_output(pipeline):
    root, _, _ = pipeline
    truth = read_truth_csv(root / "logs" / "truth.csv")
    head, rows = read_csv(root / "loc.csv")
    assert head[:2] == ["frame_ts", "status"] and head[-1] == "query_ms"
    ok = [r for r in rows if r[1] == "Localized"]
    assert len(ok) >= 0.9 * len(rows)
    est = np.array([[float(v) for v in r[2:5]] for r in ok])
    gt = np.array([truth[float(r[0])] for r in ok])
    assert evaluate_ate(est, gt) < 0.5


def test_read_only_stages_leave_bytes(pipeline):
    _, mp, _ = pipeline

    def snapshot():
        return {n: open(os.path.join(mp, n), "rb").read() for n in sorted(os.listdir(mp))}

    before = snapshot()
    assert run(["check", mp]) == 0
    assert run(["stats", mp]) == 0
    assert snapshot() == before


def test_filter_landmarks_is_idempotent(pipeline, tmp_path):
    _, mp, _ = pipeline
    copy = str(tmp_path / "map")
    shutil.copytree(mp, copy)
    assert run(["filter-landmarks", copy]) == 0
    once = {n: open(os.path.join(copy, n), "rb").read() for n in os.listdir(copy)}
    assert run(["filter-landmarks", copy]) == 0
    twice = {n: open(os.path.join(copy, n), "rb").read() for n in os.listdir(copy)}
    assert once == twice


def test_usage_errors(tmp_path, capsys):
    assert run([]) == 1
    assert run(["frobnicate"]) == 1
    assert run(["summarize", str(tmp_path / "m")]) == 1  # --target-landmarks missing
    assert run(["stats", str(tmp_path / "missing")]) != 0
    capsys.readouterr()


def test_live_lock_refuses(pipeline):
    _, mp, _ = pipeline
    lock = mp.rstrip(os.sep) + ".lock"
    with open(lock, "w") as fh:
        fh.write(str(os.getpid()))
    try:
        assert run(["stats", mp]) == 2
    finally:
        os.unlink(lock)
    assert run(["stats", mp]) == 0


def test_stale_lock_taken_over(tmp_path):
    target = tmp_path / "m"
    lock = str(target) + ".lock"
    with open(lock, "w") as fh:
        fh.write("999999999")
    with map_lock(target):
        assert open(lock).read() == str(os.getpid())
        with pytest.raises(MapLocked):
            with map_lock(target):
                pass
    assert not os.path.exists(lock)


def test_preset_file(pipeline, tmp_path, capsys):
    _, mp, _ = pipeline
    cfg = tmp_path / "run.cfg"
    cfg.write_text("# presets\nmin_observers 5\nmax-distance = 40\n")
    assert read_preset(cfg) == {"min_observers": "5", "max_distance": "40"}
    copy = str(tmp_path / "map")
    shutil.copytree(mp, copy)
    capsys.readouterr()
    assert run(["--config", str(cfg), "filter-landmarks", copy]) == 0
    assert "good" in capsys.readouterr().out
    # a preset can satisfy a required flag
    cfg.write_text("target_landmarks 100\n")
    assert run(["--config", str(cfg), "summarize", copy]) == 0
    assert "retained 100" in capsys.readouterr().out
    cfg.write_text("bogus 1\n")
    assert run(["--config", str(cfg), "stats", copy]) == 1
    cfg.write_text("min_observers\n")
    with pytest.raises(UsageError):
        read_preset(cfg)
