"""Standalone timekeeper daemon.

Example:
    timekeeper --requests 127.0.0.1:7000 --broadcasts 127.0.0.1:7001 \
        --log tk.jsonl --ready-file tk_ready.json

Runs until SIGTERM/SIGINT or until a client sends SHUTDOWN.  The ready
file records the actually-bound endpoints, which matters when the
requested port is 0 (ephemeral).
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import signal
import sys

from timewarp.timekeeper import DEFAULT_COOLDOWN_US, TimekeeperServer, format_endpoint

log = logging.getLogger(__name__)


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(description="virtual-time barrier service")
    parser.add_argument("--requests", default="127.0.0.1:0", help="request endpoint (host:port)")
    parser.add_argument("--broadcasts", default="127.0.0.1:0", help="broadcast endpoint (host:port)")
    parser.add_argument(
        "--cooldown-us",
        type=int,
        default=DEFAULT_COOLDOWN_US,
        help="minimum spacing between clock broadcasts, microseconds",
    )
    parser.add_argument("--log", default=None, help="structured JSONL log path")
    parser.add_argument(
        "--suppress-broadcasts",
        action="store_true",
        help="fault injection: compute clock updates but never send them",
    )
    parser.add_argument("--ready-file", default=None, help="write bound endpoints here on start")
    parser.add_argument("-v", "--verbose", action="store_true")
    args = parser.parse_args(argv)

    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.INFO,
        format="%(asctime)s %(name)s %(levelname)s %(message)s",
    )

    server = TimekeeperServer(
        request_endpoint=args.requests,
        broadcast_endpoint=args.broadcasts,
        cooldown_us=args.cooldown_us,
        log_path=args.log,
        suppress_broadcasts=args.suppress_broadcasts,
    )
    server.start()

    if args.ready_file:
        tmp = args.ready_file + ".tmp"
        with open(tmp, "w", encoding="utf-8") as fh:
            json.dump(
                {
                    "request_endpoint": format_endpoint(server.request_address),
                    "broadcast_endpoint": format_endpoint(server.broadcast_address),
                },
                fh,
            )
        os.replace(tmp, args.ready_file)

    def _stop(signum, frame):
        log.info("signal %s: stopping", signum)
        server.stop()

    signal.signal(signal.SIGTERM, _stop)
    signal.signal(signal.SIGINT, _stop)

    print(
        f"timekeeper ready: requests={format_endpoint(server.request_address)} "
        f"broadcasts={format_endpoint(server.broadcast_address)}",
        flush=True,
    )
    server.join()
    server.stop()
    return 0


if __name__ == "__main__":
    sys.exit(main())
