"""Latency/throughput metrics over token-event logs, and run comparison.

A run is summarized by per-request TTFT (arrival to first token), TPOT
(mean inter-token gap after the first token), and end-to-end latency, all
in virtual time, plus the wall-clock cost of producing it.  Two runs of
the same workload are compared with relative errors on percentile stats
and a two-sample Kolmogorov-Smirnov distance on the raw distributions.
"""

from __future__ import annotations

import csv
import json
import logging
import math
from dataclasses import dataclass, field

import numpy as np

from timewarp.time_core import NS_PER_S
from timewarp.workload import Arrival

log = logging.getLogger(__name__)


class MetricsError(Exception):
    pass


class IncompleteLog(MetricsError):
    """A submitted request never reached FINISHED in the event log."""


class WorkloadMismatch(MetricsError):
    """Two reports do not describe the same workload."""


@dataclass
class RequestOutcome:
    request_id: str
    arrival_ns: int  # relative to the run epoch
    first_token_ns: int
    finished_ns: int
    output_tokens: int

    @property
    def ttft_ns(self) -> int:
        return self.first_token_ns - self.arrival_ns

    @property
    def e2e_ns(self) -> int:
        return self.finished_ns - self.arrival_ns

    @property
    def tpot_ns(self) -> float | None:
        """Mean time per output token after the first; None for 1-token outputs."""
        if self.output_tokens <= 1:
            return None
        return (self.finished_ns - self.first_token_ns) / (self.output_tokens - 1)


def percentile(values: list[float], p: float) -> float:
    """Nearest-rank percentile: the smallest value with at least p% at or below."""
    if not values:
        raise MetricsError("percentile of empty data")
    ordered = sorted(values)
    rank = math.ceil(p / 100.0 * len(ordered))
    return ordered[max(rank, 1) - 1]


def _stats(values: list[float]) -> dict:
    return {
        "p50": percentile(values, 50),
        "p90": percentile(values, 90),
        "p99": percentile(values, 99),
        "mean": sum(values) / len(values),
        "count": len(values),
    }


@dataclass
class RunReport:
    mode: str
    workload_fingerprint: str
    epoch_ns: int
    virtual_elapsed_ns: int
    wall_elapsed_ns: int
    outcomes: list[RequestOutcome] = field(default_factory=list)

    @property
    def speedup(self) -> float:
        if self.wall_elapsed_ns <= 0:
            return float("inf")
        return self.virtual_elapsed_ns / self.wall_elapsed_ns

    def ttfts_ns(self) -> list[float]:
        return [float(o.ttft_ns) for o in self.outcomes]

    def tpots_ns(self) -> list[float]:
        return [o.tpot_ns for o in self.outcomes if o.tpot_ns is not None]

    def e2es_ns(self) -> list[float]:
        return [float(o.e2e_ns) for o in self.outcomes]

    def summary(self) -> dict:
        total_tokens = sum(o.output_tokens for o in self.outcomes)
        doc = {
            "mode": self.mode,
            "workload_fingerprint": self.workload_fingerprint,
            "num_requests": len(self.outcomes),
            "virtual_elapsed_ns": self.virtual_elapsed_ns,
            "wall_elapsed_ns": self.wall_elapsed_ns,
            "speedup": self.speedup,
            "output_tokens": total_tokens,
        }
        if self.outcomes:
            doc["ttft_ns"] = _stats(self.ttfts_ns())
            doc["e2e_ns"] = _stats(self.e2es_ns())
            virtual_s = self.virtual_elapsed_ns / NS_PER_S
            doc["tokens_per_virtual_s"] = total_tokens / virtual_s if virtual_s > 0 else 0.0
        tpots = self.tpots_ns()
        if tpots:
            doc["tpot_ns"] = _stats(tpots)
        return doc

    def to_doc(self) -> dict:
        return {
            "summary": self.summary(),
            "epoch_ns": str(self.epoch_ns),
            "requests": [
                {
                    "request_id": o.request_id,
                    "arrival_ns": o.arrival_ns,
                    "first_token_ns": o.first_token_ns,
                    "finished_ns": o.finished_ns,
                    "output_tokens": o.output_tokens,
                }
                for o in self.outcomes
            ],
        }

    @classmethod
    def from_doc(cls, doc: dict) -> "RunReport":
        s = doc["summary"]
        return cls(
            mode=s["mode"],
            workload_fingerprint=s["workload_fingerprint"],
            epoch_ns=int(doc["epoch_ns"]),
            virtual_elapsed_ns=int(s["virtual_elapsed_ns"]),
            wall_elapsed_ns=int(s["wall_elapsed_ns"]),
            outcomes=[
                RequestOutcome(
                    request_id=r["request_id"],
                    arrival_ns=int(r["arrival_ns"]),
                    first_token_ns=int(r["first_token_ns"]),
                    finished_ns=int(r["finished_ns"]),
                    output_tokens=int(r["output_tokens"]),
                )
                for r in doc["requests"]
            ],
        )

    def save(self, path: str) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.to_doc(), fh, indent=2)

    @classmethod
    def load(cls, path: str) -> "RunReport":
        with open(path, encoding="utf-8") as fh:
            return cls.from_doc(json.load(fh))


def collect_metrics(
    arrivals: list[Arrival],
    events: list[dict],
    epoch_ns: int,
    mode: str,
    workload_fingerprint: str,
    wall_elapsed_ns: int,
    stamps: dict[str, int] | None = None,
) -> RunReport:
    """Reduce an event log to per-request outcomes (times relative to epoch).

    ``stamps`` maps request ids to the virtual timestamps recorded at
    submission; when given, latency is measured from the stamp rather than
    from the modeled arrival offset, so dispatcher-side pacing noise does
    not bleed into time-to-first-token.
    """
    first: dict[str, int] = {}
    last_token: dict[str, int] = {}
    finished: dict[str, int] = {}
    tokens: dict[str, int] = {}
    for ev in events:
        rid = ev["request_id"]
        kind = ev["kind"]
        ts = int(ev["virtual_ts_ns"])
        if kind == "FIRST_TOKEN":
            if rid in first:
                raise MetricsError(f"{rid}: duplicate FIRST_TOKEN")
            first[rid] = ts
            tokens[rid] = tokens.get(rid, 0) + 1
            last_token[rid] = ts
        elif kind == "OUTPUT_TOKEN":
            tokens[rid] = tokens.get(rid, 0) + 1
            last_token[rid] = ts
        elif kind == "FINISHED":
            if rid in finished:
                raise MetricsError(f"{rid}: duplicate FINISHED")
            finished[rid] = ts

    outcomes = []
    missing = []
    for a in arrivals:
        if a.request_id not in finished:
            missing.append(a.request_id)
            continue
        if a.request_id not in first:
            raise MetricsError(f"{a.request_id}: FINISHED without FIRST_TOKEN")
        produced = tokens.get(a.request_id, 0)
        if produced != a.output_tokens:
            raise MetricsError(
                f"{a.request_id}: produced {produced} tokens, expected {a.output_tokens}"
            )
        if stamps is not None:
            if a.request_id not in stamps:
                raise MetricsError(f"{a.request_id}: no submission stamp recorded")
            arrival_rel = stamps[a.request_id] - epoch_ns
        else:
            arrival_rel = a.offset_ns
        outcomes.append(
            RequestOutcome(
                request_id=a.request_id,
                arrival_ns=arrival_rel,
                first_token_ns=first[a.request_id] - epoch_ns,
                finished_ns=finished[a.request_id] - epoch_ns,
                output_tokens=a.output_tokens,
            )
        )
    if missing:
        raise IncompleteLog(
            f"{len(missing)} of {len(arrivals)} requests never finished "
            f"(first: {missing[:5]})"
        )

    virtual_elapsed = max((o.finished_ns for o in outcomes), default=0)
    return RunReport(
        mode=mode,
        workload_fingerprint=workload_fingerprint,
        epoch_ns=epoch_ns,
        virtual_elapsed_ns=virtual_elapsed,
        wall_elapsed_ns=wall_elapsed_ns,
        outcomes=outcomes,
    )


def ks_statistic(sample_a: list[float], sample_b: list[float]) -> float:
    """Two-sample Kolmogorov-Smirnov distance: max gap between empirical CDFs."""
    if not sample_a or not sample_b:
        raise MetricsError("KS statistic needs non-empty samples")
    a = np.sort(np.asarray(sample_a, dtype=float))
    b = np.sort(np.asarray(sample_b, dtype=float))
    grid = np.concatenate([a, b])
    cdf_a = np.searchsorted(a, grid, side="right") / a.size
    cdf_b = np.searchsorted(b, grid, side="right") / b.size
    return float(np.max(np.abs(cdf_a - cdf_b)))


def _rel_err(candidate: float, reference: float) -> float:
    if reference == 0:
        return 0.0 if candidate == 0 else float("inf")
    return abs(candidate - reference) / abs(reference)


def compare_runs(candidate: RunReport, reference: RunReport) -> dict:
    """Relative errors of candidate vs reference on the same workload.

    Returns per-metric relative errors at p50/p90/p99/mean plus the KS
    distance of the TTFT and TPOT distributions.  Raises WorkloadMismatch
    when the reports describe different workloads.
    """
    if candidate.workload_fingerprint != reference.workload_fingerprint:
        raise WorkloadMismatch(
            f"{candidate.workload_fingerprint} != {reference.workload_fingerprint}"
        )
    if len(candidate.outcomes) != len(reference.outcomes):
        raise WorkloadMismatch(
            f"{len(candidate.outcomes)} vs {len(reference.outcomes)} outcomes"
        )
    out: dict = {}
    pairs = [
        ("ttft", candidate.ttfts_ns(), reference.ttfts_ns()),
        ("e2e", candidate.e2es_ns(), reference.e2es_ns()),
    ]
    if candidate.tpots_ns() and reference.tpots_ns():
        pairs.append(("tpot", candidate.tpots_ns(), reference.tpots_ns()))
    for name, cand, ref in pairs:
        out[name] = {
            stat: _rel_err(_stats(cand)[stat], _stats(ref)[stat])
            for stat in ("p50", "p90", "p99", "mean")
        }
        out[name]["ks"] = ks_statistic(cand, ref)
    out["max_rel_err"] = max(
        v for metric in pairs for k, v in out[metric[0]].items() if k != "ks"
    )
    return out


def write_request_csv(report: RunReport, path: str) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(
            ["request_id", "arrival_ns", "ttft_ns", "tpot_ns", "e2e_ns", "output_tokens"]
        )
        for o in report.outcomes:
            tpot = "" if o.tpot_ns is None else f"{o.tpot_ns:.1f}"
            writer.writerow(
                [o.request_id, o.arrival_ns, o.ttft_ns, tpot, o.e2e_ns, o.output_tokens]
            )


def write_cdf_csv(values: list[float], path: str, label: str = "value") -> None:
    """Dump an empirical CDF as (value, fraction_at_or_below) rows."""
    ordered = sorted(values)
    n = len(ordered)
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow([label, "cdf"])
        for i, v in enumerate(ordered, start=1):
            writer.writerow([v, i / n])
