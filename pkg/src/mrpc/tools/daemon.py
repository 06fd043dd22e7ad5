"""mrpcd: run one service instance in the foreground.

Config is JSON with the same keys ServiceConfig takes:

    {"instance": "default", "ring_slots": 1024, "heap_cap": 67108864}

Without a config file the defaults apply; --instance overrides either way.
The daemon exits cleanly on SIGINT, SIGTERM, or ``mrpcctl shutdown``,
tearing down every session and unlinking its shared memory.
"""

import argparse
import logging
import signal
import threading

from ..service import ServiceConfig, ServiceInstance


def main(argv=None) -> int:
    ap = argparse.ArgumentParser(prog="mrpcd", description="managed RPC service")
    ap.add_argument("--config", help="JSON config file")
    ap.add_argument("--instance", help="instance name (default from MRPC_INSTANCE)")
    ap.add_argument("--run-dir", help="directory for the unix sockets")
    ap.add_argument("-v", "--verbose", action="count", default=0)
    args = ap.parse_args(argv)

    level = [logging.WARNING, logging.INFO, logging.DEBUG][min(args.verbose, 2)]
    logging.basicConfig(level=level, format="%(asctime)s %(name)s %(levelname)s %(message)s")

    if args.config:
        config = ServiceConfig.from_file(args.config)
    else:
        config = ServiceConfig()
    if args.instance:
        config = ServiceConfig(instance=args.instance, **_carry(config))
    if args.run_dir:
        config.run_dir = args.run_dir

    done = threading.Event()
    service = ServiceInstance(config)
    service.on_stop = done.set  # `mrpcctl shutdown` must end the process too
    service.start()
    print(f"mrpcd: instance {config.instance!r}")
    print(f"  app socket     {service.app_socket_path}")
    print(f"  control socket {service.control_socket_path}")

    def on_signal(_sig, _frame):
        done.set()

    signal.signal(signal.SIGINT, on_signal)
    signal.signal(signal.SIGTERM, on_signal)
    done.wait()
    print("mrpcd: shutting down")
    service.stop()
    return 0


def _carry(config: ServiceConfig) -> dict:
    return {
        "ring_slots": config.ring_slots,
        "ring_spill": config.ring_spill,
        "heap_region": config.heap_region,
        "heap_cap": config.heap_cap,
        "budget": config.budget,
    }


if __name__ == "__main__":
    raise SystemExit(main())
