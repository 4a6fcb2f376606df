import csv
import json
import subprocess
import sys

import pytest

from evcount.cli import main

SMALL = ["--width", "320", "--height", "240"]


def run(argv, capsys):
    code = main([str(a) for a in argv])
    out, err = capsys.readouterr()
    return code, out, err


def test_count_empty_file(tmp_path, capsys):
    path = tmp_path / "empty.csv"
    path.write_bytes(b"")
    code, out, err = run(["count", path], capsys)
    assert code == 0
    assert out == "second,count_delta,count_total\n"
    assert "count: 0" in err


def test_gen_then_count(tmp_path, capsys):
    ev, truth = tmp_path / "rec.bin", tmp_path / "truth.csv"
    code, out, _ = run(["gen", "--seed", 5, "--duration-s", 4, "--rate", 240,
                        "--events-out", ev, "--truth-out", truth], capsys)
    assert code == 0
    summary = json.loads(out)
    n_truth = len(truth.read_text().splitlines()) - 1
    assert summary["ground_truth"] == n_truth > 0

    reports = []
    for extra in ([], ["--concurrent"], []):
        js = tmp_path / "r.json"
        code, out, err = run(["count", ev, "--json", js, *extra], capsys)
        assert code == 0
        rows = list(csv.reader(out.splitlines()))
        assert rows[0] == ["second", "count_delta", "count_total"]
        assert sum(int(r[1]) for r in rows[1:]) == int(rows[-1][2])
        rep = json.loads(js.read_text())
        assert rep["totals"]["pipeline_count"] == int(rows[-1][2])
        assert f"count: {rep['totals']['pipeline_count']}" in err
        for k in ("wall_time_s", "throughput_events_per_s"):
            rep.pop(k)
        reports.append((out, rep))
    assert reports[0] == reports[1] == reports[2]
    count = reports[0][1]["totals"]["pipeline_count"]
    assert abs(count - n_truth) <= max(1, 0.02 * n_truth)


def test_csv_recording_and_dump_frames(tmp_path, capsys):
    ev = tmp_path / "rec.csv"
    code, _, _ = run(["gen", *SMALL, "--duration-s", 1, "--on-fraction", 0.2, "--events-out", ev], capsys)
    assert code == 0
    frames = tmp_path / "frames"
    code, out, _ = run(["count", ev, *SMALL, "--dump-frames", frames], capsys)
    assert code == 0
    pgms = sorted(frames.glob("*.pgm"))
    assert pgms and pgms[0].read_bytes().startswith(b"P5\n320 240\n255\n")


def test_sim_cross_check_with_count(tmp_path, capsys):
    ev, truth, js, trace = (tmp_path / n for n in ("sim.bin", "truth.csv", "sim.json", "trace.csv"))
    code, out, err = run(["sim", "--seed", 1, "--duration-s", 30, "--setpoint", 200,
                          "--events-out", ev, "--truth-out", truth, "--json", js, "--trace", trace], capsys)
    assert code == 0
    rep = json.loads(js.read_text())
    assert rep["totals"]["expected"] == 100
    assert trace.read_text().startswith("second,error,u,on_fraction,tripped\n")
    assert len(trace.read_text().splitlines()) == 31
    n_truth = len(truth.read_text().splitlines()) - 1
    code, out, err = run(["count", ev], capsys)
    counted = int(out.splitlines()[-1].split(",")[2])
    assert abs(counted - n_truth) <= 0.02 * n_truth


def test_closed_loop_prints_trace(capsys):
    code, out, err = run(["closed-loop", *SMALL, "--duration-s", 5, "--setpoint", 60], capsys)
    assert code == 0
    lines = out.splitlines()
    assert lines[0] == "second,error,u,on_fraction,tripped"
    assert lines[1].startswith("1,1.0,2.3,0.023,0")
    assert len(lines) == 6


def test_setpoint_zero_is_usage_error(capsys):
    code, _, err = run(["sim", "--setpoint", 0, "--duration-s", 1], capsys)
    assert code == 1
    assert "setpoint" in err


@pytest.mark.parametrize("argv", [
    ["count"],
    ["bogus"],
    ["sim", "--duration-s", "1"],
    ["count", "x.bin", "--connectivity", "6"],
    ["count", "x.bin", "--lines", "1,2"],
    ["gen", "--rate", "10", "--on-fraction", "0.1"],
])
def test_usage_errors_exit_1(argv, capsys):
    with pytest.raises(SystemExit) as exc:
        main(argv)
    assert exc.value.code == 1


def test_invalid_values_exit_1(tmp_path, capsys):
    ev = tmp_path / "e.csv"
    ev.write_text("")
    assert run(["count", ev, "--min-area", 0], capsys)[0] == 1
    assert run(["count", ev, "--lines", "300,200,100"], capsys)[0] == 1
    assert run(["gen", "--on-fraction", 2, "--events-out", ev], capsys)[0] == 1
    assert run(["gen", "--rate", 10], capsys)[0] == 1


def test_io_errors_exit_2(tmp_path, capsys):
    assert run(["count", tmp_path / "missing.bin"], capsys)[0] == 2
    bad = tmp_path / "bad.csv"
    bad.write_text("1,2,3,1\n0,0,0,1\n")
    code, _, err = run(["count", bad], capsys)
    assert code == 2 and "timestamp" in err
    garbage = tmp_path / "g.bin"
    garbage.write_bytes(b"EVC1" + bytes(5))
    assert run(["count", garbage, "--format", "binary"], capsys)[0] == 2


def test_safety_trip_exit_3(capsys):
    code, out, err = run(["sim", *SMALL, "--emission-rate", 0, "--setpoint", 120, "--duration-s", 60], capsys)
    assert code == 3
    assert "SAFETY TRIP" in err
    rows = out.splitlines()
    assert len(rows) - 1 <= 20


def test_seed_env_override(tmp_path, capsys, monkeypatch):
    outs = []
    for seed_flag, env in ((1, "7"), (2, "7"), (7, None)):
        if env is None:
            monkeypatch.delenv("EVCOUNT_SEED", raising=False)
        else:
            monkeypatch.setenv("EVCOUNT_SEED", env)
        code, out, _ = run(["gen", *SMALL, "--seed", seed_flag, "--duration-s", 1, "--on-fraction", 0.3,
                            "--events-out", tmp_path / "x.bin"], capsys)
        assert code == 0
        outs.append((json.loads(out), (tmp_path / "x.bin").read_bytes()))
    assert outs[0] == outs[1] == outs[2]
    monkeypatch.setenv("EVCOUNT_SEED", "nope")
    assert run(["gen", "--on-fraction", 0.1, "--events-out", tmp_path / "y.bin"], capsys)[0] == 1


def test_module_entry_point(tmp_path):
    path = tmp_path / "e.csv"
    path.write_text("1000,5,7,1\n")
    proc = subprocess.run([sys.executable, "-m", "evcount", "count", str(path)], capture_output=True, text=True)
    assert proc.returncode == 0
    assert proc.stdout == "second,count_delta,count_total\n0,0,0\n"
