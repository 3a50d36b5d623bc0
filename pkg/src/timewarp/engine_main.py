"""Subprocess entry point for one emulated engine replica.

Usage:
    python -m timewarp.engine_main --config cfg.json --mode timewarp \
        --out outdir --tk-request host:port --tk-subscribe host:port \
        --ready-file outdir/engine_ready.json

Writes token events incrementally to <out>/engine_events.jsonl and a
summary to <out>/engine_meta.json.  On SIGTERM/SIGINT the partial event
log is flushed and the process exits with status 1.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import signal
import sys
import time

from timewarp.engine import DeviceConfig, EmulatedEngine, EngineConfig
from timewarp.predictor import build_predictor

log = logging.getLogger(__name__)


class _Aborted(Exception):
    pass


def _raise_abort(signum, frame):
    raise _Aborted(f"signal {signum}")


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(description="emulated engine replica")
    parser.add_argument("--config", required=True, help="run config JSON")
    parser.add_argument("--mode", choices=("timewarp", "sleep"), required=True)
    parser.add_argument("--out", required=True, help="output directory")
    parser.add_argument("--tk-request", default=None, help="timekeeper request endpoint")
    parser.add_argument("--tk-subscribe", default=None, help="timekeeper broadcast endpoint")
    parser.add_argument("--ready-file", default=None, help="written once submissions are accepted")
    args = parser.parse_args(argv)

    logging.basicConfig(
        level=os.environ.get("TIMEWARP_LOGLEVEL", "WARNING"),
        format="%(asctime)s %(name)s %(levelname)s %(message)s",
    )

    with open(args.config, encoding="utf-8") as fh:
        doc = json.load(fh)
    cfg = EngineConfig.from_doc(doc.get("engine", {}))
    device_cfg = DeviceConfig.from_doc(doc.get("device", {}))
    predictor = build_predictor(doc.get("predictor", {"kind": "constant", "duration_us": 10000}))

    os.makedirs(args.out, exist_ok=True)
    engine = EmulatedEngine(
        cfg,
        predictor,
        args.mode,
        device_cfg=device_cfg,
        timekeeper_request=args.tk_request,
        timekeeper_broadcast=args.tk_subscribe,
    )

    events_path = os.path.join(args.out, "engine_events.jsonl")
    started_wall = time.time_ns()
    status = 0
    with open(events_path, "w", encoding="utf-8", buffering=1) as events_fh:
        engine.event_sink = lambda ev: events_fh.write(json.dumps(ev.to_doc()) + "\n")

        signal.signal(signal.SIGTERM, _raise_abort)
        signal.signal(signal.SIGINT, _raise_abort)

        engine.start_workers()
        if args.ready_file:
            host, port = engine.submit_address
            tmp = args.ready_file + ".tmp"
            with open(tmp, "w", encoding="utf-8") as fh:
                json.dump({"submit_endpoint": f"{host}:{port}"}, fh)
            os.replace(tmp, args.ready_file)

        try:
            engine.run()
        except _Aborted as exc:
            log.warning("aborted by %s; flushing partial event log", exc)
            events_fh.flush()
            status = 1
        except Exception:
            log.exception("engine failed")
            events_fh.flush()
            status = 2

    meta = {
        "status": status,
        "steps": engine.scheduler.steps,
        "finished_requests": len(engine.scheduler.finished),
        "events": len(engine.events),
        "wall_ns": time.time_ns() - started_wall,
        "mode": args.mode,
    }
    with open(os.path.join(args.out, "engine_meta.json"), "w", encoding="utf-8") as fh:
        json.dump(meta, fh, indent=2)
    return status


if __name__ == "__main__":
    sys.exit(main())
