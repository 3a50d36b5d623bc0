"""Latency reduction and run comparison: frozen examples and error paths."""

import math

import pytest

from timewarp.metrics import (
    IncompleteLog,
    MetricsError,
    RequestOutcome,
    RunReport,
    WorkloadMismatch,
    collect_metrics,
    compare_runs,
    ks_statistic,
    percentile,
    write_cdf_csv,
    write_request_csv,
)
from timewarp.workload import Arrival

MS = 1_000_000


def outcome(rid="r00000", arrival=0, first=10 * MS, fin=40 * MS, out=4) -> RequestOutcome:
    return RequestOutcome(
        request_id=rid,
        arrival_ns=arrival,
        first_token_ns=first,
        finished_ns=fin,
        output_tokens=out,
    )


def report(outcomes, mode="timewarp", fp="fp0", wall=1_000) -> RunReport:
    return RunReport(
        mode=mode,
        workload_fingerprint=fp,
        epoch_ns=0,
        virtual_elapsed_ns=max((o.finished_ns for o in outcomes), default=0),
        wall_elapsed_ns=wall,
        outcomes=outcomes,
    )


# --- percentile: nearest-rank on a frozen example -------------------------

def test_percentile_nearest_rank():
    deciles = [10, 20, 30, 40, 50, 60, 70, 80, 90, 100]
    assert percentile(deciles, 50) == 50
    assert percentile(deciles, 90) == 90
    assert percentile(deciles, 99) == 100
    assert percentile(deciles, 1) == 10
    assert percentile(deciles, 100) == 100


def test_percentile_single_sample():
    assert percentile([42.0], 50) == 42.0
    assert percentile([42.0], 99) == 42.0


def test_percentile_ignores_input_order():
    assert percentile([30, 10, 20], 50) == 20


def test_percentile_empty_rejected():
    with pytest.raises(MetricsError):
        percentile([], 50)


# --- per-request derived latencies -----------------------------------------

def test_outcome_latency_fields():
    o = outcome(arrival=5 * MS, first=15 * MS, fin=45 * MS, out=4)
    assert o.ttft_ns == 10 * MS
    assert o.e2e_ns == 40 * MS
    # decode gap averaged over the tokens after the first
    assert o.tpot_ns == pytest.approx(10 * MS)


def test_tpot_undefined_for_single_token():
    assert outcome(fin=10 * MS, out=1).tpot_ns is None


def test_report_skips_undefined_tpots():
    rep = report([outcome(out=1), outcome(rid="r00001", out=4)])
    assert len(rep.tpots_ns()) == 1
    assert len(rep.ttfts_ns()) == 2


def test_speedup_ratio():
    rep = report([outcome(fin=100 * MS)], wall=10 * MS)
    assert rep.speedup == pytest.approx(10.0)
    assert math.isinf(report([outcome()], wall=0).speedup)


# --- event-log reduction ----------------------------------------------------

def arrivals_two():
    return [
        Arrival("r00000", 0, 32, 2),
        Arrival("r00001", 5 * MS, 32, 1),
    ]


def events_two(epoch):
    return [
        {"request_id": "r00000", "kind": "FIRST_TOKEN", "virtual_ts_ns": epoch + 20 * MS, "step": 1},
        {"request_id": "r00001", "kind": "FIRST_TOKEN", "virtual_ts_ns": epoch + 25 * MS, "step": 2},
        {"request_id": "r00001", "kind": "FINISHED", "virtual_ts_ns": epoch + 25 * MS, "step": 2},
        {"request_id": "r00000", "kind": "OUTPUT_TOKEN", "virtual_ts_ns": epoch + 30 * MS, "step": 3},
        {"request_id": "r00000", "kind": "FINISHED", "virtual_ts_ns": epoch + 30 * MS, "step": 3},
    ]


def test_collect_metrics_rebases_to_epoch():
    epoch = 1_000_000_000
    rep = collect_metrics(arrivals_two(), events_two(epoch), epoch, "sleep", "fp0", 77)
    by_id = {o.request_id: o for o in rep.outcomes}
    assert by_id["r00000"].ttft_ns == 20 * MS
    assert by_id["r00000"].e2e_ns == 30 * MS
    assert by_id["r00001"].arrival_ns == 5 * MS
    assert by_id["r00001"].tpot_ns is None
    assert rep.virtual_elapsed_ns == 30 * MS
    assert rep.wall_elapsed_ns == 77


def test_collect_metrics_prefers_submission_stamps():
    epoch = 1_000
    stamps = {"r00000": epoch + 1 * MS, "r00001": epoch + 6 * MS}
    rep = collect_metrics(
        arrivals_two(), events_two(epoch), epoch, "timewarp", "fp0", 1, stamps=stamps
    )
    by_id = {o.request_id: o for o in rep.outcomes}
    assert by_id["r00000"].arrival_ns == 1 * MS
    assert by_id["r00000"].ttft_ns == 19 * MS


def test_collect_metrics_requires_stamp_for_every_request():
    epoch = 1_000
    with pytest.raises(MetricsError, match="stamp"):
        collect_metrics(
            arrivals_two(), events_two(epoch), epoch, "timewarp", "fp0", 1,
            stamps={"r00000": epoch},
        )


def test_collect_metrics_rejects_duplicate_first_token():
    epoch = 0
    events = events_two(epoch) + [
        {"request_id": "r00000", "kind": "FIRST_TOKEN", "virtual_ts_ns": 99, "step": 9}
    ]
    with pytest.raises(MetricsError, match="duplicate FIRST_TOKEN"):
        collect_metrics(arrivals_two(), events, epoch, "sleep", "fp0", 1)


def test_collect_metrics_rejects_duplicate_finished():
    epoch = 0
    events = events_two(epoch) + [
        {"request_id": "r00001", "kind": "FINISHED", "virtual_ts_ns": 99, "step": 9}
    ]
    with pytest.raises(MetricsError, match="duplicate FINISHED"):
        collect_metrics(arrivals_two(), events, epoch, "sleep", "fp0", 1)


def test_collect_metrics_rejects_finished_without_first():
    events = [{"request_id": "r00000", "kind": "FINISHED", "virtual_ts_ns": 10, "step": 1}]
    with pytest.raises(MetricsError, match="without FIRST_TOKEN"):
        collect_metrics([Arrival("r00000", 0, 32, 1)], events, 0, "sleep", "fp0", 1)


def test_collect_metrics_rejects_token_count_mismatch():
    events = [
        {"request_id": "r00000", "kind": "FIRST_TOKEN", "virtual_ts_ns": 10, "step": 1},
        {"request_id": "r00000", "kind": "FINISHED", "virtual_ts_ns": 10, "step": 1},
    ]
    with pytest.raises(MetricsError, match="produced 1 tokens, expected 2"):
        collect_metrics([Arrival("r00000", 0, 32, 2)], events, 0, "sleep", "fp0", 1)


def test_collect_metrics_reports_unfinished_requests():
    epoch = 0
    events = [e for e in events_two(epoch) if e["request_id"] != "r00001"]
    with pytest.raises(IncompleteLog, match="1 of 2"):
        collect_metrics(arrivals_two(), events, epoch, "sleep", "fp0", 1)


# --- report persistence -----------------------------------------------------

def test_report_save_load_round_trip(tmp_path):
    rep = collect_metrics(arrivals_two(), events_two(123), 123, "oracle", "fp0", 55)
    path = tmp_path / "report.json"
    rep.save(str(path))
    loaded = RunReport.load(str(path))
    assert loaded == rep
    assert loaded.epoch_ns == 123  # survives JSON via decimal-string encoding


def test_report_summary_shape():
    rep = report([outcome(), outcome(rid="r00001", fin=50 * MS)])
    summary = rep.summary()
    for key in ("ttft_ns", "tpot_ns", "e2e_ns"):
        assert set(summary[key]) == {"p50", "p90", "p99", "mean", "count"}
    assert summary["num_requests"] == 2
    assert summary["output_tokens"] == 8


# --- distribution distance and run comparison -------------------------------

def test_ks_statistic_bounds():
    assert ks_statistic([1, 2, 3], [1, 2, 3]) == 0.0
    assert ks_statistic([1, 2, 3], [10, 20, 30]) == 1.0
    assert ks_statistic([1, 2, 3, 4], [3, 4, 5, 6]) == pytest.approx(0.5)


def test_ks_statistic_rejects_empty():
    with pytest.raises(MetricsError):
        ks_statistic([], [1.0])


def test_compare_runs_identical_is_zero():
    a = report([outcome(), outcome(rid="r00001", fin=50 * MS)])
    b = report([outcome(), outcome(rid="r00001", fin=50 * MS)], mode="sleep")
    diff = compare_runs(a, b)
    assert diff["max_rel_err"] == 0.0
    assert diff["ttft"]["p99"] == 0.0
    assert diff["tpot"]["ks"] == 0.0


def test_compare_runs_measures_relative_error():
    a = report([outcome(first=11 * MS, fin=41 * MS)])
    b = report([outcome(first=10 * MS, fin=40 * MS)])
    diff = compare_runs(a, b)
    assert diff["ttft"]["p50"] == pytest.approx(0.1)
    assert diff["e2e"]["p50"] == pytest.approx(1 * MS / (40 * MS))
    assert diff["max_rel_err"] == pytest.approx(0.1)


def test_compare_runs_rejects_different_workloads():
    a = report([outcome()], fp="fp-a")
    b = report([outcome()], fp="fp-b")
    with pytest.raises(WorkloadMismatch):
        compare_runs(a, b)


def test_compare_runs_rejects_count_mismatch():
    a = report([outcome(), outcome(rid="r00001")])
    b = report([outcome()])
    with pytest.raises(WorkloadMismatch):
        compare_runs(a, b)


# --- CSV artifacts -----------------------------------------------------------

def test_write_request_csv(tmp_path):
    path = tmp_path / "requests.csv"
    write_request_csv(report([outcome(), outcome(rid="r00001", out=1, fin=10 * MS)]), str(path))
    lines = path.read_text().strip().splitlines()
    assert lines[0] == "request_id,arrival_ns,ttft_ns,tpot_ns,e2e_ns,output_tokens"
    assert lines[1].startswith("r00000,0,10000000,10000000.0,40000000,4")
    # undefined decode gap renders as an empty field, not a number
    assert lines[2].split(",")[3] == ""


def test_write_cdf_csv(tmp_path):
    path = tmp_path / "cdf.csv"
    write_cdf_csv([3.0, 1.0, 2.0, 2.0], str(path), label="ttft")
    lines = path.read_text().strip().splitlines()
    assert lines[0] == "ttft,cdf"
    assert lines[1] == "1.0,0.25"
    assert lines[-1] == "3.0,1.0"
