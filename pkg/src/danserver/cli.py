"""``dan`` command line: serve, get, gen-data, bench, stats, subscribe, set-config, schemagen.

Exit status is 0 on success, 1 when a request fails and 2 for usage errors.
"""

from __future__ import annotations

import argparse
import json
import logging
import signal
import sys
from pathlib import Path

from . import bench as bench_mod
from .backend import gen_dataset
from .client import DanClient
from .config import ConfigError, ServerConfig
from .errors import ERROR_NAMES, DanError, SchemaError
from .model import CalibKey, parse_key_string
from .schemagen import write_outputs

log = logging.getLogger("danserver")


class UsageError(Exception):
    pass


def _key_arg(text: str) -> CalibKey:
    try:
        return parse_key_string(text)
    except ValueError as exc:
        raise argparse.ArgumentTypeError(str(exc)) from None


def _value_arg(text: str):
    try:
        return json.loads(text)
    except ValueError:
        return text


def cmd_serve(args) -> int:
    from .server import DanServer

    try:
        config = ServerConfig.load(args.config)
    except ConfigError as exc:
        raise UsageError(str(exc)) from None
    server = DanServer(config).start()

    def stop(signum, frame):
        server.close()

    signal.signal(signal.SIGTERM, stop)
    signal.signal(signal.SIGINT, stop)
    print(f"LISTENING {server.addr}", flush=True)
    try:
        while not server.wait(0.5):
            pass
    finally:
        server.close()
    return 0


def cmd_get(args) -> int:
    key = CalibKey(args.table, args.run, args.variant)
    with DanClient(args.addr, timeout=args.timeout) as client:
        res = client.get(key)
    if args.out:
        Path(args.out).write_bytes(res.payload)
    print(json.dumps(res.meta))
    return 0


def cmd_gen_data(args) -> int:
    path = gen_dataset(args.root, args.table, args.run, args.variant, args.rows, args.seed)
    print(json.dumps({"path": str(path), "size_bytes": path.stat().st_size}))
    return 0


def cmd_bench(args) -> int:
    report = bench_mod.bench(args.addr, args.clients, args.requests, args.key, timeout=args.timeout)
    print(json.dumps(report.to_dict(), indent=2))
    print(report.table(), file=sys.stderr)
    return 0 if report.failures == 0 else 1


def cmd_stats(args) -> int:
    with DanClient(args.addr, timeout=args.timeout) as client:
        print(json.dumps(client.stats(), indent=2))
    return 0


def cmd_subscribe(args) -> int:
    seen = 0
    with DanClient(args.addr, timeout=args.timeout) as client:
        client.subscribe(args.min_severity)
        while args.count is None or seen < args.count:
            line = client.next_event(timeout=None)
            if line is None:
                break
            print(line, flush=True)
            seen += 1
    return 0


def cmd_set_config(args) -> int:
    with DanClient(args.addr, timeout=args.timeout) as client:
        print(json.dumps(client.set_config(args.param, _value_arg(args.value))))
    return 0


def cmd_schemagen(args) -> int:
    for path in write_outputs(args.schema, args.out):
        print(path)
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="dan", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def client_cmd(name, func, help):
        sp = sub.add_parser(name, help=help)
        sp.add_argument("--addr", required=True, help="server host:port")
        sp.add_argument("--timeout", type=float, default=60.0, help="socket timeout, seconds")
        sp.set_defaults(func=func)
        return sp

    sp = sub.add_parser("serve", help="run a server from a JSON config")
    sp.add_argument("--config", required=True)
    sp.set_defaults(func=cmd_serve)

    sp = client_cmd("get", cmd_get, "fetch one object")
    sp.add_argument("--table", required=True)
    sp.add_argument("--run", type=int, required=True)
    sp.add_argument("--variant", default="")
    sp.add_argument("--out", help="write the raw object bytes here")

    sp = sub.add_parser("gen-data", help="write a synthetic pedestal/gain run set")
    sp.add_argument("--root", required=True)
    sp.add_argument("--table", required=True)
    sp.add_argument("--run", type=int, required=True)
    sp.add_argument("--variant", default="")
    sp.add_argument("--rows", type=int, required=True)
    sp.add_argument("--seed", type=int, default=0)
    sp.set_defaults(func=cmd_gen_data)

    sp = client_cmd("bench", cmd_bench, "concurrent GET load test")
    sp.add_argument("--clients", type=int, default=50)
    sp.add_argument("--requests", type=int, default=1)
    sp.add_argument("--key", type=_key_arg, nargs="+", required=True, help="table/run/variant")

    client_cmd("stats", cmd_stats, "print the statistics snapshot")

    sp = client_cmd("subscribe", cmd_subscribe, "print pushed events as XML lines")
    sp.add_argument("--min-severity", default="I", help="E, I or D")
    sp.add_argument("--count", type=int, help="exit after this many events")

    sp = client_cmd("set-config", cmd_set_config, "change a runtime parameter")
    sp.add_argument("--param", required=True)
    sp.add_argument("--value", required=True)

    sp = sub.add_parser("schemagen", help="generate interface files and mapping descriptors")
    sp.add_argument("schema")
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_schemagen)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.WARNING,
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
    )
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"dan: {exc}", file=sys.stderr)
        return 2
    except SchemaError as exc:
        print(f"dan: schema error: {exc}", file=sys.stderr)
        return 1
    except DanError as exc:
        name = ERROR_NAMES.get(exc.code, type(exc).__name__)
        print(f"dan: {name}: {exc}", file=sys.stderr)
        return 1
    except (ValueError, OSError) as exc:
        print(f"dan: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
