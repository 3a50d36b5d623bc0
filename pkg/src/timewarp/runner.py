"""Benchmark orchestration: one process to run a full emulated serving trial.

Timewarp mode wiring:
  1. start the timekeeper (in-process server threads, structured log);
  2. launch the engine replica as a subprocess and wait for its readiness
     file, which it writes only after all worker actors are registered;
  3. register the dispatcher as the final actor and seal registration;
  4. replay the workload: advance virtual time to each arrival, stamp the
     request with the clock reading at submission, and wait for the
     submission acknowledgement so the engine sees it before time moves
     again;
  5. drain, deregister the dispatcher, wait for the engine to exit, then
     shut the timekeeper down and reduce the event log to a report.

Sleep mode is the same dance minus the timekeeper: the dispatcher sleeps
until each arrival on the wall clock and the engine paces itself the same
way, so one wall second is one virtual second.
"""

from __future__ import annotations

import json
import logging
import os
import socket
import subprocess
import sys
import time

from timewarp import wire
from timewarp.client import TimekeeperClient
from timewarp.metrics import RunReport, collect_metrics, write_cdf_csv, write_request_csv
from timewarp.pacer import sleep_until
from timewarp.replay import replay_and_verify
from timewarp.time_core import wall_now
from timewarp.timekeeper import TimekeeperServer, format_endpoint
from timewarp.wire import Role
from timewarp.workload import WorkloadSpec, generate_arrivals

log = logging.getLogger(__name__)

READY_TIMEOUT_S = 30.0
ENGINE_EXIT_TIMEOUT_S = 600.0


class RunnerError(Exception):
    pass


def _wait_for_ready(path: str, proc: subprocess.Popen, timeout_s: float) -> dict:
    deadline = time.monotonic() + timeout_s
    while time.monotonic() < deadline:
        if os.path.exists(path):
            with open(path, encoding="utf-8") as fh:
                return json.load(fh)
        if proc.poll() is not None:
            raise RunnerError(
                f"engine exited with status {proc.returncode} before becoming ready"
            )
        time.sleep(0.01)
    raise RunnerError(f"engine not ready after {timeout_s}s")


def _connect_submit(endpoint: str) -> socket.socket:
    host, port_text = endpoint.rsplit(":", 1)
    sock = socket.create_connection((host, int(port_text)), timeout=10.0)
    sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
    return sock


def _submit(sock: socket.socket, request_id: str, prompt: int, output: int, arrival_ns: int) -> None:
    wire.send_json(
        sock,
        {
            "kind": "submit",
            "request_id": request_id,
            "prompt_tokens": prompt,
            "output_tokens": output,
            "arrival_virtual_ns": str(arrival_ns),
        },
    )
    ack = wire.recv_json(sock)
    if ack.get("kind") != "submit_ack":
        raise RunnerError(f"unexpected submission reply: {ack}")


def _drain(sock: socket.socket) -> None:
    wire.send_json(sock, {"kind": "drain"})
    ack = wire.recv_json(sock)
    if ack.get("kind") != "drain_ack":
        raise RunnerError(f"unexpected drain reply: {ack}")


def _dispatch_all(arrivals, sock, out_dir, advance, now, epoch_ns: int) -> dict[str, int]:
    """Pace out the workload and submit each request.

    Each arrival is stamped with the virtual instant the dispatcher just
    advanced the clock to: after ``advance`` returns, that target *is*
    virtual now, exactly.  Re-reading the clock instead would fold wake
    jitter into the stamp, and any discrete admission decision downstream
    could then flip against the reference timeline over a few microseconds.
    The physical clock reading is logged per submission as ``lag_ns`` for
    observability.  Returns {request_id: stamp}.
    """
    stamps: dict[str, int] = {}
    path = os.path.join(out_dir, "submissions.jsonl")
    with open(path, "w", encoding="utf-8") as fh:
        for a in arrivals:
            stamp = epoch_ns + a.offset_ns
            advance(stamp)
            stamps[a.request_id] = stamp
            _submit(sock, a.request_id, a.prompt_tokens, a.output_tokens, stamp)
            fh.write(
                json.dumps(
                    {
                        "request_id": a.request_id,
                        "offset_ns": a.offset_ns,
                        "stamp_ns": str(stamp),
                        "lag_ns": now() - stamp,
                    }
                )
                + "\n"
            )
    return stamps


def _spawn_engine(config_path: str, mode: str, out_dir: str, extra_args: list[str]) -> subprocess.Popen:
    ready_path = os.path.join(out_dir, "engine_ready.json")
    if os.path.exists(ready_path):
        os.remove(ready_path)  # never trust a ready file from an earlier run
    cmd = [
        sys.executable,
        "-m",
        "timewarp.engine_main",
        "--config",
        config_path,
        "--mode",
        mode,
        "--out",
        out_dir,
        "--ready-file",
        os.path.join(out_dir, "engine_ready.json"),
        *extra_args,
    ]
    stdout = open(os.path.join(out_dir, "engine_stdout.log"), "w")
    stderr = open(os.path.join(out_dir, "engine_stderr.log"), "w")
    return subprocess.Popen(cmd, stdout=stdout, stderr=stderr)


def _await_engine(proc: subprocess.Popen, out_dir: str) -> None:
    try:
        status = proc.wait(timeout=ENGINE_EXIT_TIMEOUT_S)
    except subprocess.TimeoutExpired:
        proc.kill()
        raise RunnerError(f"engine did not exit within {ENGINE_EXIT_TIMEOUT_S}s") from None
    if status != 0:
        tail = ""
        err_path = os.path.join(out_dir, "engine_stderr.log")
        if os.path.exists(err_path):
            with open(err_path, encoding="utf-8") as fh:
                tail = fh.read()[-2000:]
        raise RunnerError(f"engine exited with status {status}\n{tail}")


def _load_events(out_dir: str) -> list[dict]:
    events = []
    with open(os.path.join(out_dir, "engine_events.jsonl"), encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if line:
                events.append(json.loads(line))
    return events


def _write_outputs(report: RunReport, out_dir: str) -> None:
    report.save(os.path.join(out_dir, "report.json"))
    write_request_csv(report, os.path.join(out_dir, "requests.csv"))
    if report.outcomes:
        write_cdf_csv(report.ttfts_ns(), os.path.join(out_dir, "ttft_cdf.csv"), label="ttft_ns")


def run_benchmark(config_doc: dict, mode: str, out_dir: str, verify_log: bool = True) -> RunReport:
    """Execute one benchmark trial and write report artifacts to out_dir."""
    if mode == "timewarp":
        return _run_timewarp(config_doc, out_dir, verify_log)
    if mode == "sleep":
        return _run_sleep(config_doc, out_dir)
    raise ValueError(f"unknown mode {mode!r}")


def _prepare(config_doc: dict, out_dir: str):
    os.makedirs(out_dir, exist_ok=True)
    spec = WorkloadSpec.from_doc(config_doc.get("workload", {}))
    arrivals = generate_arrivals(spec)
    config_path = os.path.join(out_dir, "config.json")
    with open(config_path, "w", encoding="utf-8") as fh:
        json.dump(config_doc, fh, indent=2)
    with open(os.path.join(out_dir, "arrivals.jsonl"), "w", encoding="utf-8") as fh:
        for a in arrivals:
            fh.write(
                json.dumps(
                    {
                        "request_id": a.request_id,
                        "offset_ns": a.offset_ns,
                        "prompt_tokens": a.prompt_tokens,
                        "output_tokens": a.output_tokens,
                    }
                )
                + "\n"
            )
    return spec, arrivals, config_path


def _run_timewarp(config_doc: dict, out_dir: str, verify_log: bool) -> RunReport:
    spec, arrivals, config_path = _prepare(config_doc, out_dir)
    tk_cfg = config_doc.get("timekeeper", {})
    server = TimekeeperServer(
        cooldown_us=int(tk_cfg.get("jitter_cooldown_us", 500)),
        log_path=os.path.join(out_dir, "timekeeper_log.jsonl"),
        suppress_broadcasts=bool(tk_cfg.get("suppress_broadcasts", False)),
    )
    server.start()
    req_ep = format_endpoint(server.request_address)
    sub_ep = format_endpoint(server.broadcast_address)

    proc = _spawn_engine(
        config_path,
        "timewarp",
        out_dir,
        ["--tk-request", req_ep, "--tk-subscribe", sub_ep],
    )
    dispatcher = None
    submit_sock = None
    try:
        ready = _wait_for_ready(os.path.join(out_dir, "engine_ready.json"), proc, READY_TIMEOUT_S)
        dispatcher = TimekeeperClient.connect(req_ep, sub_ep, role=Role.ACTOR)
        dispatcher.seal()
        submit_sock = _connect_submit(ready["submit_endpoint"])

        wall_start = wall_now()
        epoch = dispatcher.virtual_now()
        stamps = _dispatch_all(
            arrivals,
            submit_sock,
            out_dir,
            advance=lambda target: dispatcher.advance_to(target),
            now=dispatcher.virtual_now,
            epoch_ns=epoch,
        )
        _drain(submit_sock)
        dispatcher.deregister()
        _await_engine(proc, out_dir)
        wall_elapsed = wall_now() - wall_start
    finally:
        if submit_sock is not None:
            try:
                submit_sock.close()
            except OSError:
                pass
        if proc.poll() is None:
            proc.terminate()
            try:
                proc.wait(timeout=10.0)
            except subprocess.TimeoutExpired:
                proc.kill()
        if dispatcher is not None:
            try:
                dispatcher.shutdown_server()
            except Exception:
                log.debug("server shutdown request failed", exc_info=True)
            dispatcher.close()
        server.stop()

    if verify_log:
        replay_and_verify(os.path.join(out_dir, "timekeeper_log.jsonl"))

    events = _load_events(out_dir)
    report = collect_metrics(
        arrivals,
        events,
        epoch_ns=epoch,
        mode="timewarp",
        workload_fingerprint=spec.fingerprint(),
        wall_elapsed_ns=wall_elapsed,
        stamps=stamps,
    )
    _write_outputs(report, out_dir)
    return report


def _run_sleep(config_doc: dict, out_dir: str) -> RunReport:
    spec, arrivals, config_path = _prepare(config_doc, out_dir)
    proc = _spawn_engine(config_path, "sleep", out_dir, [])
    submit_sock = None
    try:
        ready = _wait_for_ready(os.path.join(out_dir, "engine_ready.json"), proc, READY_TIMEOUT_S)
        submit_sock = _connect_submit(ready["submit_endpoint"])

        wall_start = wall_now()
        epoch = wall_start
        stamps = _dispatch_all(
            arrivals,
            submit_sock,
            out_dir,
            advance=sleep_until,
            now=wall_now,
            epoch_ns=epoch,
        )
        _drain(submit_sock)
        _await_engine(proc, out_dir)
        wall_elapsed = wall_now() - wall_start
    finally:
        if submit_sock is not None:
            try:
                submit_sock.close()
            except OSError:
                pass
        if proc.poll() is None:
            proc.terminate()
            try:
                proc.wait(timeout=10.0)
            except subprocess.TimeoutExpired:
                proc.kill()

    events = _load_events(out_dir)
    report = collect_metrics(
        arrivals,
        events,
        epoch_ns=epoch,
        mode="sleep",
        workload_fingerprint=spec.fingerprint(),
        wall_elapsed_ns=wall_elapsed,
        stamps=stamps,
    )
    _write_outputs(report, out_dir)
    return report


def run_oracle(config_doc: dict, out_dir: str) -> RunReport:
    """Run the discrete-event reference over the same config, no clocks involved."""
    from timewarp.engine import EngineConfig
    from timewarp.oracle import simulate
    from timewarp.predictor import build_predictor

    spec, arrivals, _ = _prepare(config_doc, out_dir)
    cfg = EngineConfig.from_doc(config_doc.get("engine", {}))
    predictor = build_predictor(
        config_doc.get("predictor", {"kind": "constant", "duration_us": 10000})
    )
    wall_start = wall_now()
    events = simulate(arrivals, cfg, predictor, epoch_ns=0)
    wall_elapsed = wall_now() - wall_start
    with open(os.path.join(out_dir, "engine_events.jsonl"), "w", encoding="utf-8") as fh:
        for ev in events:
            fh.write(json.dumps(ev) + "\n")
    report = collect_metrics(
        arrivals,
        events,
        epoch_ns=0,
        mode="oracle",
        workload_fingerprint=spec.fingerprint(),
        wall_elapsed_ns=wall_elapsed,
    )
    _write_outputs(report, out_dir)
    return report
