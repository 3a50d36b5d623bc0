"""End-to-end trials: live engine subprocess vs the reference, all modes."""

import json
import os

import pytest

from timewarp.metrics import RunReport, compare_runs
from timewarp.replay import replay_and_verify
from timewarp.runner import RunnerError, run_benchmark, run_oracle

from _support import event_keys, load_events, rebase

MS = 1_000_000

SMOKE = {
    "workload": {
        "source": "poisson",
        "qps": 8,
        "seed": 42,
        "num_requests": 10,
        "prompt_tokens": 512,
        "output_tokens": 16,
    },
    "engine": {
        "chunk_size": 512,
        "max_batch_tokens": 512,
        "max_running": 8,
        "kv_block_tokens": 16,
        "kv_capacity_blocks": 4096,
        "policy": "mixed",
    },
    "predictor": {"kind": "constant", "duration_us": 5000},
    "timekeeper": {"jitter_cooldown_us": 500},
}


def suppressed_config() -> dict:
    doc = json.loads(json.dumps(SMOKE))
    doc["timekeeper"]["suppress_broadcasts"] = True
    return doc


@pytest.fixture(scope="module")
def workdir(tmp_path_factory):
    return tmp_path_factory.mktemp("smoke_runs")


@pytest.fixture(scope="module")
def oracle_run(workdir):
    out = str(workdir / "oracle")
    report = run_oracle(SMOKE, out)
    return report, load_events(os.path.join(out, "engine_events.jsonl"))


@pytest.fixture(scope="module")
def timewarp_run(workdir):
    out = str(workdir / "timewarp")
    report = run_benchmark(SMOKE, "timewarp", out)
    return report, load_events(os.path.join(out, "engine_events.jsonl")), out


@pytest.fixture(scope="module")
def sleep_run(workdir):
    out = str(workdir / "sleep")
    report = run_benchmark(SMOKE, "sleep", out)
    return report, load_events(os.path.join(out, "engine_events.jsonl")), out


@pytest.fixture(scope="module")
def suppressed_run(workdir):
    out = str(workdir / "suppressed")
    report = run_benchmark(suppressed_config(), "timewarp", out)
    return report, load_events(os.path.join(out, "engine_events.jsonl")), out


def test_timewarp_reproduces_reference_exactly(timewarp_run, oracle_run):
    report, events, _ = timewarp_run
    _, ref_events = oracle_run
    assert event_keys(events) == event_keys(ref_events)
    assert rebase(events, report.epoch_ns) == [
        e["virtual_ts_ns"] for e in ref_events
    ]


def test_sleep_reproduces_reference_exactly(sleep_run, oracle_run):
    report, events, _ = sleep_run
    _, ref_events = oracle_run
    assert event_keys(events) == event_keys(ref_events)
    assert rebase(events, report.epoch_ns) == [
        e["virtual_ts_ns"] for e in ref_events
    ]


def test_timewarp_is_faster_than_virtual_span(timewarp_run):
    report, _, _ = timewarp_run
    assert report.mode == "timewarp"
    assert report.speedup > 1.5
    assert report.wall_elapsed_ns < report.virtual_elapsed_ns


def test_sleep_wall_tracks_virtual_span(sleep_run):
    report, _, _ = sleep_run
    # sleeping cannot beat real time; wall covers the virtual span
    assert report.wall_elapsed_ns >= report.virtual_elapsed_ns
    assert report.wall_elapsed_ns < 3 * report.virtual_elapsed_ns


def test_latency_metrics_identical_across_modes(timewarp_run, sleep_run, oracle_run):
    warp_report = timewarp_run[0]
    sleep_report = sleep_run[0]
    oracle_report = oracle_run[0]
    assert compare_runs(warp_report, oracle_report)["max_rel_err"] == 0.0
    assert compare_runs(warp_report, sleep_report)["max_rel_err"] == 0.0


def test_suppressed_broadcasts_still_complete(suppressed_run, oracle_run):
    report, events, out = suppressed_run
    _, ref_events = oracle_run
    assert event_keys(events) == event_keys(ref_events)
    assert rebase(events, report.epoch_ns) == [
        e["virtual_ts_ns"] for e in ref_events
    ]
    # without clock updates the run degrades toward wall pace
    assert report.wall_elapsed_ns >= report.virtual_elapsed_ns // 2
    log = json.loads(open(os.path.join(out, "timekeeper_log.jsonl")).readline())
    assert log["suppress_broadcasts"] is True


def test_run_artifacts_present(timewarp_run):
    _, _, out = timewarp_run
    for name in (
        "config.json",
        "arrivals.jsonl",
        "submissions.jsonl",
        "engine_events.jsonl",
        "engine_ready.json",
        "timekeeper_log.jsonl",
        "report.json",
        "requests.csv",
        "ttft_cdf.csv",
    ):
        assert os.path.exists(os.path.join(out, name)), name


def test_submission_stamps_are_exact(timewarp_run):
    _, _, out = timewarp_run
    arrivals = {
        json.loads(line)["request_id"]: json.loads(line)["offset_ns"]
        for line in open(os.path.join(out, "arrivals.jsonl"))
    }
    epoch = timewarp_run[0].epoch_ns
    for line in open(os.path.join(out, "submissions.jsonl")):
        sub = json.loads(line)
        assert int(sub["stamp_ns"]) == epoch + arrivals[sub["request_id"]]


def test_timekeeper_log_replays_cleanly(timewarp_run):
    _, _, out = timewarp_run
    audit = replay_and_verify(os.path.join(out, "timekeeper_log.jsonl"))
    assert audit.broadcasts > 0
    assert audit.max_overshoot_ns == 0


def test_saved_report_round_trips(timewarp_run):
    report, _, out = timewarp_run
    loaded = RunReport.load(os.path.join(out, "report.json"))
    assert loaded == report


def test_zero_request_run(tmp_path):
    doc = json.loads(json.dumps(SMOKE))
    doc["workload"]["num_requests"] = 0
    report = run_benchmark(doc, "timewarp", str(tmp_path / "empty"))
    assert report.outcomes == []
    assert report.virtual_elapsed_ns == 0


def test_unknown_mode_rejected(tmp_path):
    with pytest.raises(ValueError, match="unknown mode"):
        run_benchmark(SMOKE, "hyperdrive", str(tmp_path / "x"))


def test_engine_startup_failure_surfaces(tmp_path):
    doc = json.loads(json.dumps(SMOKE))
    doc["engine"]["chunk_size"] = 0  # rejected by the engine process
    with pytest.raises(RunnerError, match="before becoming ready"):
        run_benchmark(doc, "sleep", str(tmp_path / "bad"))


def test_stalled_engine_reports_failure(tmp_path):
    from timewarp import wire

    doc = json.loads(json.dumps(SMOKE))
    doc["workload"]["num_requests"] = 1
    doc["engine"]["kv_capacity_blocks"] = 8  # 128 tokens: the prompt never fits
    # the engine dies mid-run; depending on which side notices first the
    # runner reports the nonzero exit or the dropped submit connection
    with pytest.raises((RunnerError, wire.ConnectionClosed, OSError)):
        run_benchmark(doc, "sleep", str(tmp_path / "stall"))
