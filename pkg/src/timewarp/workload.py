"""Workload generation: request arrival plans for the benchmark harness.

Two sources:

* ``poisson`` - seeded exponential inter-arrival gaps at a configured rate,
  with prompt/output token counts drawn from per-field distributions.
* ``trace``   - a CSV of ``arrival_ms,prompt_tokens,output_tokens`` rows.

Output token counts are part of the plan: the emulation stops each request
after exactly its planned number of tokens rather than modeling stop-token
sampling.  Generation is deterministic for a given spec, so the dispatcher
and the offline reference simulator derive the identical plan independently.
"""

from __future__ import annotations

import csv
import hashlib
import json
from dataclasses import dataclass, field

import numpy as np

from timewarp.time_core import NS_PER_MS, NS_PER_S


class WorkloadError(Exception):
    pass


class TraceParseError(WorkloadError):
    pass


@dataclass(frozen=True)
class TokenDist:
    """Distribution for a token-count field: fixed value or uniform range."""

    kind: str = "fixed"  # fixed | uniform
    value: int = 0
    low: int = 0
    high: int = 0

    def sample(self, rng: np.random.Generator) -> int:
        if self.kind == "fixed":
            return self.value
        if self.kind == "uniform":
            return int(rng.integers(self.low, self.high + 1))
        raise WorkloadError(f"unknown token distribution kind {self.kind!r}")

    @classmethod
    def from_doc(cls, doc) -> "TokenDist":
        if isinstance(doc, int):
            return cls(kind="fixed", value=doc)
        kind = doc.get("kind", "fixed")
        if kind == "fixed":
            return cls(kind="fixed", value=int(doc["value"]))
        if kind == "uniform":
            return cls(kind="uniform", low=int(doc["low"]), high=int(doc["high"]))
        raise WorkloadError(f"unknown token distribution kind {kind!r}")

    def to_doc(self) -> dict:
        if self.kind == "fixed":
            return {"kind": "fixed", "value": self.value}
        return {"kind": "uniform", "low": self.low, "high": self.high}


@dataclass(frozen=True)
class WorkloadSpec:
    source: str = "poisson"  # poisson | trace
    qps: float = 1.0
    seed: int = 0
    num_requests: int = 0
    prompt_tokens: TokenDist = field(default_factory=lambda: TokenDist(value=512))
    output_tokens: TokenDist = field(default_factory=lambda: TokenDist(value=64))
    trace_path: str | None = None

    @classmethod
    def from_doc(cls, doc: dict) -> "WorkloadSpec":
        return cls(
            source=doc.get("source", "poisson"),
            qps=float(doc.get("qps", 1.0)),
            seed=int(doc.get("seed", 0)),
            num_requests=int(doc.get("num_requests", 0)),
            prompt_tokens=TokenDist.from_doc(doc.get("prompt_tokens", 512)),
            output_tokens=TokenDist.from_doc(doc.get("output_tokens", 64)),
            trace_path=doc.get("trace_path"),
        )

    def to_doc(self) -> dict:
        return {
            "source": self.source,
            "qps": self.qps,
            "seed": self.seed,
            "num_requests": self.num_requests,
            "prompt_tokens": self.prompt_tokens.to_doc(),
            "output_tokens": self.output_tokens.to_doc(),
            "trace_path": self.trace_path,
        }

    def fingerprint(self) -> str:
        """Stable digest used to refuse comparisons across different workloads."""
        return hashlib.sha256(
            json.dumps(self.to_doc(), sort_keys=True).encode()
        ).hexdigest()[:16]


@dataclass(frozen=True)
class Arrival:
    request_id: str
    offset_ns: int  # arrival time relative to run start
    prompt_tokens: int
    output_tokens: int


def generate_arrivals(spec: WorkloadSpec) -> list[Arrival]:
    if spec.source == "poisson":
        return _poisson_arrivals(spec)
    if spec.source == "trace":
        if not spec.trace_path:
            raise WorkloadError("trace workload requires trace_path")
        return load_trace(spec.trace_path)
    raise WorkloadError(f"unknown workload source {spec.source!r}")


def _poisson_arrivals(spec: WorkloadSpec) -> list[Arrival]:
    if spec.qps <= 0:
        raise WorkloadError(f"qps must be positive, got {spec.qps}")
    rng = np.random.default_rng(spec.seed)
    arrivals = []
    clock_ns = 0
    for i in range(spec.num_requests):
        # one draw order, frozen: gap, prompt, output
        gap_s = rng.exponential(1.0 / spec.qps)
        clock_ns += int(round(gap_s * NS_PER_S))
        prompt = spec.prompt_tokens.sample(rng)
        output = spec.output_tokens.sample(rng)
        if prompt <= 0 or output <= 0:
            raise WorkloadError(
                f"request {i}: prompt and output token counts must be positive "
                f"(got {prompt}, {output})"
            )
        arrivals.append(Arrival(f"r{i:05d}", clock_ns, prompt, output))
    return arrivals


def load_trace(path: str) -> list[Arrival]:
    """Read ``arrival_ms,prompt_tokens,output_tokens`` rows, sorted by arrival."""
    rows: list[Arrival] = []
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        expected = {"arrival_ms", "prompt_tokens", "output_tokens"}
        if reader.fieldnames is None or not expected.issubset(reader.fieldnames):
            raise TraceParseError(
                f"{path}: header must contain {sorted(expected)}, got {reader.fieldnames}"
            )
        for lineno, row in enumerate(reader, start=2):
            try:
                arrival_ms = float(row["arrival_ms"])
                prompt = int(row["prompt_tokens"])
                output = int(row["output_tokens"])
            except (TypeError, ValueError) as exc:
                raise TraceParseError(f"{path}:{lineno}: {exc}") from None
            if arrival_ms < 0 or prompt <= 0 or output <= 0:
                raise TraceParseError(
                    f"{path}:{lineno}: arrival must be >= 0 and token counts positive"
                )
            rows.append(Arrival("", int(round(arrival_ms * NS_PER_MS)), prompt, output))
    rows.sort(key=lambda a: a.offset_ns)
    return [
        Arrival(f"r{i:05d}", row.offset_ns, row.prompt_tokens, row.output_tokens)
        for i, row in enumerate(rows)
    ]
