"""mrpcctl: poke a running service over its control socket.

Every subcommand is one JSON request/response pair; replies print as
indented JSON so they pipe into jq cleanly.  Connections are addressed by
the local id ("lid") shown in ``mrpcctl list``.
"""

import argparse
import json
import os
import socket
import sys

from ..errors import ControlError
from ..service import runtime_dir
from ..shmipc import DEFAULT_INSTANCE


class ControlClient:
    """One connection to a service's control socket."""

    def __init__(self, socket_path: str = None, instance: str = None):
        path = socket_path or os.path.join(runtime_dir(instance or DEFAULT_INSTANCE), "control.sock")
        self._sock = socket.socket(socket.AF_UNIX, socket.SOCK_STREAM)
        self._sock.connect(path)
        self._buf = b""

    def request(self, msg: dict, timeout: float = 30.0) -> dict:
        self._sock.settimeout(timeout)
        self._sock.sendall((json.dumps(msg) + "\n").encode())
        while b"\n" not in self._buf:
            chunk = self._sock.recv(65536)
            if not chunk:
                raise ControlError("control socket closed")
            self._buf += chunk
        line, _, self._buf = self._buf.partition(b"\n")
        reply = json.loads(line)
        if not reply.get("ok"):
            raise ControlError(f"{reply.get('error')}: {reply.get('detail', '')}")
        return reply

    def close(self) -> None:
        self._sock.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


def _engine_spec(args) -> dict:
    spec = {"kind": args.kind}
    if getattr(args, "version", None) is not None:
        spec["version"] = args.version
    if getattr(args, "config", None):
        spec.update(json.loads(args.config))
    return spec


def main(argv=None) -> int:
    ap = argparse.ArgumentParser(prog="mrpcctl", description="control a running RPC service")
    ap.add_argument("--instance", help="instance name (default from MRPC_INSTANCE)")
    ap.add_argument("--socket", help="explicit control socket path")
    sub = ap.add_subparsers(dest="cmd", required=True)

    sub.add_parser("list", help="apps, connections, registered engines")

    p = sub.add_parser("stats", help="counters, heap usage, runtimes")
    p.add_argument("--conn", type=int, help="limit to one connection lid")

    p = sub.add_parser("attach", help="insert a policy engine into a connection")
    p.add_argument("--conn", type=int, required=True)
    p.add_argument("--kind", required=True)
    p.add_argument("--version", type=int)
    p.add_argument("--config", help="engine config as JSON")
    p.add_argument("--index", type=int, help="chain position (default: before the transport)")

    p = sub.add_parser("detach", help="remove a policy engine from a connection")
    p.add_argument("--conn", type=int, required=True)
    p.add_argument("--kind", required=True)

    p = sub.add_parser("upgrade", help="swap an engine for another version in place")
    p.add_argument("--conn", type=int, required=True)
    p.add_argument("--kind", required=True)
    p.add_argument("--version", type=int, required=True)

    p = sub.add_parser("set", help="update a live engine's config")
    p.add_argument("--conn", type=int, required=True)
    p.add_argument("--kind", required=True)
    p.add_argument("--config", required=True, help="new settings as JSON")

    p = sub.add_parser("submit-schema", help="pre-build the marshalling plan for a schema")
    p.add_argument("file", help="schema source file")

    sub.add_parser("shutdown", help="stop the service")

    args = ap.parse_args(argv)

    if args.cmd == "list":
        msg = {"op": "list"}
    elif args.cmd == "stats":
        msg = {"op": "stats"}
        if args.conn is not None:
            msg["conn"] = args.conn
    elif args.cmd == "attach":
        msg = {"op": "attach", "conn": args.conn, "engine": _engine_spec(args)}
        if args.index is not None:
            msg["index"] = args.index
    elif args.cmd == "detach":
        msg = {"op": "detach", "conn": args.conn, "kind": args.kind}
    elif args.cmd == "upgrade":
        msg = {"op": "upgrade", "conn": args.conn, "kind": args.kind, "version": args.version}
    elif args.cmd == "set":
        msg = {"op": "set", "conn": args.conn, "kind": args.kind, "config": json.loads(args.config)}
    elif args.cmd == "submit-schema":
        with open(args.file) as f:
            msg = {"op": "submit-schema", "schema": f.read()}
    elif args.cmd == "shutdown":
        msg = {"op": "shutdown"}
    else:
        ap.error(f"unknown command {args.cmd}")
        return 2

    try:
        with ControlClient(args.socket, args.instance) as ctl:
            reply = ctl.request(msg)
    except (ControlError, OSError) as exc:
        print(f"mrpcctl: {exc}", file=sys.stderr)
        return 1
    reply.pop("ok", None)
    print(json.dumps(reply, indent=2, sort_keys=True))
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
