"""Command-line entry points, driven as real subprocesses."""

import json
import os
import signal
import subprocess
import sys
import time

import pytest

TINY = {
    "workload": {
        "source": "poisson",
        "qps": 20,
        "seed": 3,
        "num_requests": 4,
        "prompt_tokens": 256,
        "output_tokens": 4,
    },
    "engine": {"chunk_size": 256, "max_batch_tokens": 256},
    "predictor": {"kind": "constant", "duration_us": 5000},
}


def bench(*args, **kwargs):
    return subprocess.run(
        [sys.executable, "-m", "timewarp.bench_cli", *args],
        capture_output=True,
        text=True,
        timeout=120,
        **kwargs,
    )


@pytest.fixture(scope="module")
def cfg_path(tmp_path_factory):
    path = tmp_path_factory.mktemp("cli") / "config.json"
    path.write_text(json.dumps(TINY))
    return str(path)


@pytest.fixture(scope="module")
def oracle_out(cfg_path, tmp_path_factory):
    out = str(tmp_path_factory.mktemp("cli") / "oracle")
    res = bench("oracle", "--config", cfg_path, "--out", out)
    assert res.returncode == 0, res.stderr
    return out


@pytest.fixture(scope="module")
def warp_out(cfg_path, tmp_path_factory):
    out = str(tmp_path_factory.mktemp("cli") / "warp")
    res = bench("run", "--config", cfg_path, "--mode", "timewarp", "--out", out)
    assert res.returncode == 0, res.stderr
    return out


def test_oracle_prints_summary(oracle_out, cfg_path):
    res = bench("oracle", "--config", cfg_path, "--out", oracle_out)
    assert res.returncode == 0
    assert "mode=oracle" in res.stdout
    assert "speedup=" in res.stdout
    assert "ttft: p50=" in res.stdout


def test_run_sleep_mode(cfg_path, tmp_path):
    res = bench("run", "--config", cfg_path, "--mode", "sleep",
                "--out", str(tmp_path / "sleep"))
    assert res.returncode == 0, res.stderr
    assert "mode=sleep" in res.stdout


def test_run_timewarp_mode(warp_out):
    assert os.path.exists(os.path.join(warp_out, "report.json"))


def test_compare_accepts_matching_runs(warp_out, oracle_out):
    res = bench(
        "compare",
        "--candidate", os.path.join(warp_out, "report.json"),
        "--reference", os.path.join(oracle_out, "report.json"),
        "--max-rel-err", "0.05",
    )
    assert res.returncode == 0, res.stdout + res.stderr
    assert "max relative error" in res.stdout


def test_compare_json_output(warp_out, oracle_out):
    res = bench(
        "compare", "--json",
        "--candidate", os.path.join(warp_out, "report.json"),
        "--reference", os.path.join(oracle_out, "report.json"),
    )
    assert res.returncode == 0
    diff = json.loads(res.stdout)
    assert diff["max_rel_err"] == 0.0


def test_compare_flags_divergent_runs(cfg_path, oracle_out, tmp_path):
    # same workload, slower steps: latencies shift, fingerprint stays equal
    doc = json.loads(json.dumps(TINY))
    doc["predictor"]["duration_us"] = 7500
    slow_cfg = tmp_path / "slow.json"
    slow_cfg.write_text(json.dumps(doc))
    slow_out = str(tmp_path / "slow")
    assert bench("oracle", "--config", str(slow_cfg), "--out", slow_out).returncode == 0
    res = bench(
        "compare",
        "--candidate", os.path.join(slow_out, "report.json"),
        "--reference", os.path.join(oracle_out, "report.json"),
        "--max-rel-err", "0.01",
    )
    assert res.returncode == 1
    assert "FAIL" in res.stderr


def test_compare_gates_at_5_percent_by_default(cfg_path, oracle_out, tmp_path):
    doc = json.loads(json.dumps(TINY))
    doc["predictor"]["duration_us"] = 7500
    slow_cfg = tmp_path / "slow.json"
    slow_cfg.write_text(json.dumps(doc))
    slow_out = str(tmp_path / "slow")
    assert bench("oracle", "--config", str(slow_cfg), "--out", slow_out).returncode == 0
    res = bench(
        "compare",
        "--candidate", os.path.join(slow_out, "report.json"),
        "--reference", os.path.join(oracle_out, "report.json"),
    )
    assert res.returncode == 1
    assert "FAIL" in res.stderr


def test_replay_accepts_live_log(warp_out):
    res = bench("replay", "--log", os.path.join(warp_out, "timekeeper_log.jsonl"))
    assert res.returncode == 0
    assert "log ok" in res.stdout


def test_replay_rejects_tampered_log(warp_out, tmp_path):
    records = [
        json.loads(line)
        for line in open(os.path.join(warp_out, "timekeeper_log.jsonl"))
        if line.strip()
    ]
    for rec in records:
        if rec.get("event") == "broadcast":
            rec["offset_ns"] += 1
            break
    bad = tmp_path / "tampered.jsonl"
    bad.write_text("".join(json.dumps(r) + "\n" for r in records))
    res = bench("replay", "--log", str(bad))
    assert res.returncode == 1
    assert "REPLAY MISMATCH" in res.stderr


def test_missing_config_fails(tmp_path):
    res = bench("run", "--config", str(tmp_path / "nope.json"),
                "--mode", "sleep", "--out", str(tmp_path / "x"))
    assert res.returncode != 0


def test_help_screens():
    assert bench("--help").returncode == 0
    res = subprocess.run(
        [sys.executable, "-m", "timewarp.timekeeper_cli", "--help"],
        capture_output=True, text=True, timeout=30,
    )
    assert res.returncode == 0


def test_timekeeper_daemon_lifecycle(tmp_path):
    ready = tmp_path / "tk_ready.json"
    proc = subprocess.Popen(
        [
            sys.executable, "-m", "timewarp.timekeeper_cli",
            "--requests", "127.0.0.1:0",
            "--broadcasts", "127.0.0.1:0",
            "--ready-file", str(ready),
            "--log", str(tmp_path / "tk.jsonl"),
        ],
        stdout=subprocess.PIPE,
        stderr=subprocess.PIPE,
        text=True,
    )
    try:
        deadline = time.monotonic() + 10
        while not ready.exists() and time.monotonic() < deadline:
            time.sleep(0.02)
        assert ready.exists(), "daemon never wrote its ready file"
        endpoints = json.loads(ready.read_text())

        from timewarp.client import TimekeeperClient

        with TimekeeperClient.connect(
            request_endpoint=endpoints["request_endpoint"],
            broadcast_endpoint=endpoints["broadcast_endpoint"],
            role="ACTOR",
        ) as client:
            client.seal()
            client.time_jump(50 * 1_000_000)
        proc.send_signal(signal.SIGTERM)
        assert proc.wait(timeout=10) == 0
    finally:
        if proc.poll() is None:
            proc.kill()
            proc.wait(timeout=5)
