"""Batch runtime predictors.

A predictor maps a batch composition to the wall-clock duration the real
accelerator would have spent on that step.  Predictions are pure functions
of their inputs, quantized to whole microseconds so that the emulated and
sleep-based execution paths consume numerically identical durations.

Three families are provided:

* ``constant`` - fixed duration per step, used for controlled experiments.
* ``linear``   - affine model over prefill tokens, decode count and context.
* ``table``    - calibration lookup keyed by (total prefill tokens, number
  of decodes), with linear interpolation between measured buckets.
"""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field

from timewarp.time_core import NS_PER_US

log = logging.getLogger(__name__)


class PredictorError(Exception):
    pass


class EmptyBatch(PredictorError):
    """Prediction requested for a batch with no work in it."""


class NegativeDuration(PredictorError):
    """Model parameters produced a duration below zero."""


class TableMiss(PredictorError):
    """Lookup key outside the calibrated range with extrapolation disabled."""


class TableParseError(PredictorError):
    """Calibration file is malformed."""


@dataclass(frozen=True)
class PrefillChunk:
    """One prompt chunk scheduled this step."""

    request_id: str
    chunk_tokens: int
    context_len_before: int


@dataclass(frozen=True)
class DecodeSlot:
    """One decode (single token) scheduled this step."""

    request_id: str
    context_len: int


@dataclass(frozen=True)
class BatchComposition:
    prefill_chunks: tuple[PrefillChunk, ...] = ()
    decodes: tuple[DecodeSlot, ...] = ()

    @property
    def total_prefill_tokens(self) -> int:
        return sum(c.chunk_tokens for c in self.prefill_chunks)

    @property
    def num_decodes(self) -> int:
        return len(self.decodes)

    @property
    def total_context(self) -> int:
        return sum(c.context_len_before for c in self.prefill_chunks) + sum(
            d.context_len for d in self.decodes
        )

    def is_empty(self) -> bool:
        return not self.prefill_chunks and not self.decodes


@dataclass(frozen=True)
class HardwareSpec:
    """Opaque description of the emulated device, passed through to models."""

    name: str = "default"
    parameters: dict = field(default_factory=dict)


def _check_not_empty(batch: BatchComposition) -> None:
    if batch.is_empty():
        raise EmptyBatch("cannot predict a duration for an empty batch")


class ConstantPredictor:
    """Every non-empty batch takes the same fixed duration."""

    def __init__(self, duration_us: int) -> None:
        if duration_us < 0:
            raise NegativeDuration(f"constant duration {duration_us}us is negative")
        self.duration_us = int(duration_us)

    def predict(self, batch: BatchComposition, hw: HardwareSpec | None = None) -> int:
        """Returns the predicted step duration in nanoseconds."""
        _check_not_empty(batch)
        return self.duration_us * NS_PER_US


class LinearPredictor:
    """Affine cost model.

    duration_us = base
                + per_prefill_token * total prefill tokens
                + per_decode       * number of decodes
                + per_context_token * sum of context lengths across the batch
    """

    def __init__(
        self,
        base_us: float,
        per_prefill_token_us: float = 0.0,
        per_decode_us: float = 0.0,
        per_context_token_us: float = 0.0,
    ) -> None:
        self.base_us = base_us
        self.per_prefill_token_us = per_prefill_token_us
        self.per_decode_us = per_decode_us
        self.per_context_token_us = per_context_token_us

    def predict(self, batch: BatchComposition, hw: HardwareSpec | None = None) -> int:
        _check_not_empty(batch)
        us = (
            self.base_us
            + self.per_prefill_token_us * batch.total_prefill_tokens
            + self.per_decode_us * batch.num_decodes
            + self.per_context_token_us * batch.total_context
        )
        quantized = int(round(us))
        if quantized < 0:
            raise NegativeDuration(f"linear model produced {us}us")
        return quantized * NS_PER_US


class TablePredictor:
    """Calibration-table lookup over (total_prefill_tokens, num_decodes).

    Exact keys return the measured value.  Other keys interpolate linearly
    between the nearest calibrated buckets on each axis; queries outside the
    calibrated rectangle (or over a hole in the grid) either fall back to
    the nearest measured point (``allow_extrapolation=True``) or raise
    :class:`TableMiss`.
    """

    def __init__(self, rows: dict[tuple[int, int], int], allow_extrapolation: bool = False) -> None:
        if not rows:
            raise TableParseError("calibration table has no rows")
        self._rows = dict(rows)
        self._prefill_axis = sorted({p for p, _ in rows})
        self._decode_axis = sorted({d for _, d in rows})
        self.allow_extrapolation = allow_extrapolation

    @classmethod
    def from_csv(cls, path: str, allow_extrapolation: bool = False) -> "TablePredictor":
        """Load ``total_prefill_tokens,num_decodes,duration_us`` rows.

        Duplicate keys keep the last row and log a warning.
        """
        rows: dict[tuple[int, int], int] = {}
        with open(path, newline="") as fh:
            reader = csv.DictReader(fh)
            expected = {"total_prefill_tokens", "num_decodes", "duration_us"}
            if reader.fieldnames is None or not expected.issubset(reader.fieldnames):
                raise TableParseError(
                    f"{path}: header must contain {sorted(expected)}, got {reader.fieldnames}"
                )
            for lineno, row in enumerate(reader, start=2):
                try:
                    key = (int(row["total_prefill_tokens"]), int(row["num_decodes"]))
                    duration = int(row["duration_us"])
                except (TypeError, ValueError) as exc:
                    raise TableParseError(f"{path}:{lineno}: {exc}") from None
                if duration < 0:
                    raise NegativeDuration(f"{path}:{lineno}: duration {duration}us is negative")
                if key in rows:
                    log.warning("calibration table %s: duplicate key %s, keeping last", path, key)
                rows[key] = duration
        return cls(rows, allow_extrapolation=allow_extrapolation)

    def _bracket(self, axis: list[int], value: int) -> tuple[int, int] | None:
        """Nearest calibrated values at or around ``value``; None if outside."""
        if value < axis[0] or value > axis[-1]:
            return None
        lo = max(v for v in axis if v <= value)
        hi = min(v for v in axis if v >= value)
        return lo, hi

    def _corner(self, p: int, d: int) -> int | None:
        return self._rows.get((p, d))

    def _nearest(self, p: int, d: int) -> int:
        key = min(self._rows, key=lambda k: (abs(k[0] - p) + abs(k[1] - d), k))
        return self._rows[key]

    def predict(self, batch: BatchComposition, hw: HardwareSpec | None = None) -> int:
        _check_not_empty(batch)
        p = batch.total_prefill_tokens
        d = batch.num_decodes
        exact = self._rows.get((p, d))
        if exact is not None:
            return exact * NS_PER_US

        pb = self._bracket(self._prefill_axis, p)
        db = self._bracket(self._decode_axis, d)
        if pb is not None and db is not None:
            (p0, p1), (d0, d1) = pb, db
            corners = {
                (cp, cd): self._corner(cp, cd)
                for cp in {p0, p1}
                for cd in {d0, d1}
            }
            if all(v is not None for v in corners.values()):
                # interpolate along the prefill axis first, then decodes
                def lerp(a: float, b: float, lo: int, hi: int, x: int) -> float:
                    if hi == lo:
                        return a
                    return a + (b - a) * (x - lo) / (hi - lo)

                at_d0 = lerp(corners[(p0, d0)], corners[(p1, d0)], p0, p1, p)
                at_d1 = lerp(corners[(p0, d1)], corners[(p1, d1)], p0, p1, p)
                us = lerp(at_d0, at_d1, d0, d1, d)
                return int(round(us)) * NS_PER_US

        if self.allow_extrapolation:
            return self._nearest(p, d) * NS_PER_US
        raise TableMiss(
            f"no calibration for prefill={p} decodes={d} and extrapolation is disabled"
        )


def build_predictor(config: dict):
    """Construct a predictor from its config document.

    ``{"kind": "constant", "duration_us": 20000}``
    ``{"kind": "linear", "base_us": ..., "per_prefill_token_us": ..., ...}``
    ``{"kind": "table", "path": ..., "allow_extrapolation": false}``
    """
    kind = config.get("kind")
    if kind == "constant":
        return ConstantPredictor(duration_us=config["duration_us"])
    if kind == "linear":
        return LinearPredictor(
            base_us=config.get("base_us", 0.0),
            per_prefill_token_us=config.get("per_prefill_token_us", 0.0),
            per_decode_us=config.get("per_decode_us", 0.0),
            per_context_token_us=config.get("per_context_token_us", 0.0),
        )
    if kind == "table":
        return TablePredictor.from_csv(
            config["path"], allow_extrapolation=config.get("allow_extrapolation", False)
        )
    raise PredictorError(f"unknown predictor kind {kind!r}")
