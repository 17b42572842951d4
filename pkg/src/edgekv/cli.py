"""Command line: run nodes and gateways, issue client operations, run benchmarks.

Exit codes:
  0  success
  1  key not found (client), or a benchmark cell exceeded the error budget
  2  invalid configuration or arguments
  3  listen address already in use
  4  unavailable or timed out
"""

from __future__ import annotations

import argparse
import asyncio
import errno
import json
import logging
import os
import signal
import sys
import tempfile
from pathlib import Path

from edgekv import bench
from edgekv.chord import OverlayConfig
from edgekv.command import SCOPES
from edgekv.edge import MODES, EdgeConfig, EdgeNode
from edgekv.errors import ConfigError
from edgekv.gateway import Gateway, GatewayConfig
from edgekv.raft import RaftConfig
from edgekv.storage import FileDisk
from edgekv.transport import CLIENT, GATEWAY, STORAGE
from edgekv.transport.tcp import TcpNetwork, split_address

log = logging.getLogger("edgekv")

EXIT_OK = 0
EXIT_NOT_FOUND = 1
EXIT_CONFIG = 2
EXIT_PORT_IN_USE = 3
EXIT_UNAVAILABLE = 4

ENV_OVERRIDES = {
    "EDGEKV_LISTEN": "listen",
    "EDGEKV_GATEWAY": "gateway",
    "EDGEKV_BOOTSTRAP": "bootstrap",
    "EDGEKV_DATA_DIR": "dataDir",
}

NODE_FIELDS = {"nodeId", "group", "peers", "gateway", "listen", "dataDir", "localTimeoutMs",
               "globalTimeoutMs", "fsync", "snapshotEvery", "electionMinMs", "electionMaxMs",
               "heartbeatMs"}
GATEWAY_FIELDS = {"group", "listen", "members", "vnodes", "cacheCapacity", "bootstrap",
                  "stabilizeMs"}


class UsageError(Exception):
    """A user error: reported without a traceback."""

    def __init__(self, message: str, code: int = EXIT_CONFIG):
        super().__init__(message)
        self.code = code


def setup_logging(level: str) -> None:
    logging.basicConfig(
        stream=sys.stderr, level=getattr(logging, level.upper(), logging.INFO),
        format="ts=%(asctime)s level=%(levelname)s logger=%(name)s msg=%(message)s")


def load_json(path: str) -> dict:
    p = Path(path)
    if not p.is_file():
        raise UsageError(f"config file not found: {path}")
    try:
        data = json.loads(p.read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise UsageError(f"cannot parse {path}: {exc}") from exc
    if not isinstance(data, dict):
        raise UsageError(f"{path}: top level must be a JSON object")
    return data


def apply_env(cfg: dict, allowed: set[str]) -> dict:
    cfg = dict(cfg)
    for var, key in ENV_OVERRIDES.items():
        if key in allowed and os.environ.get(var):
            cfg[key] = os.environ[var]
    return cfg


def _check_fields(cfg: dict, allowed: set[str], required: set[str], what: str) -> None:
    unknown = set(cfg) - allowed
    if unknown:
        raise UsageError(f"{what} config has unknown fields: {sorted(unknown)}")
    missing = required - set(cfg)
    if missing:
        raise UsageError(f"{what} config is missing: {sorted(missing)}")
    for key in ("listen", "gateway", "bootstrap"):
        if cfg.get(key):
            try:
                split_address(cfg[key])
            except ConfigError as exc:
                raise UsageError(f"{what} config: {exc}") from exc


# -- node / gateway ----------------------------------------------------------------------------

def node_config(cfg: dict) -> tuple[EdgeConfig, str, Path]:
    cfg = apply_env(cfg, NODE_FIELDS)
    _check_fields(cfg, NODE_FIELDS, {"group", "peers", "listen", "dataDir"}, "node")
    listen = cfg["listen"]
    node_id = cfg.get("nodeId", listen)
    if node_id != listen:
        raise UsageError("nodeId must equal the listen address")
    peers = cfg["peers"]
    if not isinstance(peers, list) or listen not in peers:
        raise UsageError("peers must be a list containing this node's listen address")
    raft = RaftConfig(election_min_ms=cfg.get("electionMinMs", 150),
                      election_max_ms=cfg.get("electionMaxMs", 300),
                      heartbeat_ms=cfg.get("heartbeatMs", 50))
    ec = EdgeConfig(cfg["group"], peers, cfg.get("gateway"),
                    local_timeout_ms=cfg.get("localTimeoutMs", 2000.0),
                    global_timeout_ms=cfg.get("globalTimeoutMs", 5000.0),
                    snapshot_every=cfg.get("snapshotEvery", 1000), fsync=cfg.get("fsync", True),
                    raft=raft)
    return ec, listen, Path(cfg["dataDir"])


def gateway_config(cfg: dict) -> tuple[GatewayConfig, str]:
    cfg = apply_env(cfg, GATEWAY_FIELDS)
    _check_fields(cfg, GATEWAY_FIELDS, {"group", "listen", "members"}, "gateway")
    if not cfg["members"]:
        raise UsageError("gateway needs at least one member")
    if int(cfg.get("vnodes", 1)) < 1:
        raise UsageError("vnodes must be positive")
    gc = GatewayConfig(cfg["group"], list(cfg["members"]), vnodes=int(cfg.get("vnodes", 1)),
                       cache_capacity=int(cfg.get("cacheCapacity", 1024)),
                       bootstrap=cfg.get("bootstrap"),
                       overlay=OverlayConfig(stabilize_ms=cfg.get("stabilizeMs", 500.0)))
    return gc, cfg["listen"]


async def _serve(net: TcpNetwork, on_stop) -> None:
    try:
        await net.start()
    except OSError as exc:
        if exc.errno == errno.EADDRINUSE:
            raise UsageError(f"listen address in use: {exc}", EXIT_PORT_IN_USE) from exc
        raise UsageError(f"cannot listen: {exc}", EXIT_PORT_IN_USE) from exc
    stop = asyncio.Event()
    loop = asyncio.get_running_loop()
    for sig in (signal.SIGTERM, signal.SIGINT):
        loop.add_signal_handler(sig, stop.set)
    log.info("listening on %s", ", ".join(net.roles))
    await stop.wait()
    log.info("shutting down")
    on_stop()
    await net.close()


def run_node(args) -> int:
    ec, listen, data_dir = node_config(load_json(args.config))
    try:
        data_dir.mkdir(parents=True, exist_ok=True)
        probe = tempfile.NamedTemporaryFile(dir=data_dir)
        probe.close()
    except OSError as exc:
        raise UsageError(f"data dir {data_dir} is not writable: {exc}") from exc
    disks: list[FileDisk] = []

    def disk_for(group: str) -> FileDisk:
        d = FileDisk(data_dir / group)
        disks.append(d)
        return d

    def on_leader(group, term, node_id):
        log.info("became leader group=%s term=%d node=%s", group, term, node_id)

    async def main():
        net = TcpNetwork()
        node = EdgeNode(net.add(listen, STORAGE), ec, disk_for, on_leader)

        def on_stop():
            node.stop()
            for d in disks:
                d.close()

        await _serve(net, on_stop)

    asyncio.run(main())
    return EXIT_OK


def run_gateway(args) -> int:
    gc, listen = gateway_config(load_json(args.config))

    async def main():
        net = TcpNetwork()
        gw = Gateway(net.add(listen, GATEWAY), gc)
        started = asyncio.get_running_loop().create_future()

        async def boot():
            await asyncio.sleep(0)
            gw.start(lambda err: started.done() or started.set_result(err))
            err = await started
            if err is not None:
                log.error("overlay join failed: %s", err)

        asyncio.get_running_loop().create_task(boot())
        await _serve(net, gw.stop)

    asyncio.run(main())
    return EXIT_OK


# -- client ------------------------------------------------------------------------------------------

def run_client(args) -> int:
    try:
        split_address(args.endpoint)
    except ConfigError as exc:
        raise UsageError(str(exc)) from exc
    key = args.key.encode()
    if args.op == "get":
        kind, payload = "ClientGet", {"scope": args.scope, "key": key, "mode": args.mode}
    elif args.op == "put":
        if args.value is None:
            raise UsageError("put needs a value")
        kind, payload = "ClientPut", {"scope": args.scope, "key": key,
                                      "value": args.value.encode(),
                                      "requestId": f"cli-{os.getpid()}/0:1"}
    else:
        kind, payload = "ClientDelete", {"scope": args.scope, "key": key,
                                         "requestId": f"cli-{os.getpid()}/0:1"}

    async def main():
        net = TcpNetwork()
        net.attach()
        ep = net.client(CLIENT)
        fut = asyncio.get_running_loop().create_future()
        ep.request(args.endpoint, kind, payload, args.timeout_ms,
                   lambda env: fut.done() or fut.set_result(env))
        env = await fut
        await net.close()
        return env

    env = asyncio.run(main())
    if env is None:
        print("timeout: no response", file=sys.stderr)
        return EXIT_UNAVAILABLE
    p = env.payload
    status = p["status"]
    if status == "ok":
        if args.op == "get":
            sys.stdout.write(p.get("value", b"").decode("utf-8", "replace") + "\n")
        else:
            print("ok")
        return EXIT_OK
    if status == "not_found":
        print("not found", file=sys.stderr)
        return EXIT_NOT_FOUND
    if status == "invalid_argument":
        print(f"invalid argument: {p.get('error', '')}", file=sys.stderr)
        return EXIT_CONFIG
    print(f"{status}: {p.get('error', '')}", file=sys.stderr)
    return EXIT_UNAVAILABLE


# -- bench / sim ---------------------------------------------------------------------------------------

def _check_out_dir(out: str) -> Path:
    path = Path(out)
    try:
        path.mkdir(parents=True, exist_ok=True)
        probe = tempfile.NamedTemporaryFile(dir=path)
        probe.close()
    except OSError as exc:
        raise UsageError(f"output directory {out} is not writable: {exc}") from exc
    return path


def _parse(fn, data, what: str):
    try:
        return fn(data)
    except ConfigError as exc:
        raise UsageError(f"invalid {what}: {exc}") from exc


def write_reports(out: Path, scenario: bench.Scenario, rows: list[dict]) -> None:
    (out / "results.csv").write_text(bench.rows_to_csv(rows))
    (out / "plot.json").write_text(bench.dump_json(bench.plot_data(rows)))
    (out / "summary.json").write_text(bench.dump_json(
        {"scenario": scenario.to_dict(), "cells": rows}))


def _run_sweep(scenario: bench.Scenario, out: Path) -> int:
    def progress(row):
        log.info("cell %s=%s profile=%s write_mean_ms=%s throughput=%s error_rate=%s",
                 row["parameter"], row["value"], row["profile"], row.get("write_mean_ms"),
                 row.get("throughput_ops_s"), row.get("error_rate"))

    rows = bench.sweep(scenario, progress)
    write_reports(out, scenario, rows)
    log.info("wrote %s", out)
    return EXIT_NOT_FOUND if any(r.get("failed") for r in rows) else EXIT_OK


def run_bench(args) -> int:
    spec = dict(load_json(args.spec))
    sweep_cfg = spec.pop("sweep", None)
    topology = _parse(bench.Topology.from_dict, load_json(args.topology), "topology")
    workload = _parse(bench.WorkloadSpec.from_dict, spec, "workload spec")
    sweep = _parse(bench.SweepSpec.from_dict, sweep_cfg, "sweep") if sweep_cfg else None
    scenario = bench.Scenario(Path(args.spec).stem, topology, workload, sweep, workload.seed)
    _parse(lambda sc: sc.validate(), scenario, "benchmark")
    out = _check_out_dir(args.out)
    return _run_sweep(scenario, out)


def run_sim(args) -> int:
    scenario = _parse(bench.Scenario.from_dict, load_json(args.scenario), "scenario")
    out = _check_out_dir(args.out or str(Path("results") / scenario.name))
    return _run_sweep(scenario, out)


# -- entry point -------------------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="edgekv", description="Edge key-value store")
    p.add_argument("--log-level", default="info")
    sub = p.add_subparsers(dest="command", required=True)

    n = sub.add_parser("node", help="run an edge storage node")
    n.add_argument("--config", required=True)
    g = sub.add_parser("gateway", help="run a gateway")
    g.add_argument("--config", required=True)

    c = sub.add_parser("client", help="issue one operation")
    c.add_argument("op", choices=["get", "put", "del"])
    c.add_argument("key")
    c.add_argument("value", nargs="?")
    c.add_argument("--endpoint", required=True, help="edge node host:port")
    c.add_argument("--scope", choices=SCOPES, default="local")
    c.add_argument("--mode", choices=MODES, default="lin")
    c.add_argument("--timeout-ms", type=float, default=7000.0)

    b = sub.add_parser("bench", help="run a workload sweep on the simulator")
    b.add_argument("--spec", required=True, help="workload JSON, optionally with a sweep")
    b.add_argument("--topology", required=True, help="cluster topology JSON")
    b.add_argument("--out", required=True)

    s = sub.add_parser("sim", help="run a scenario file on the simulator")
    s.add_argument("--scenario", required=True)
    s.add_argument("--out", help="report directory (default results/<scenario name>)")
    return p


COMMANDS = {"node": run_node, "gateway": run_gateway, "client": run_client,
            "bench": run_bench, "sim": run_sim}


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_CONFIG if exc.code else EXIT_OK
    setup_logging(args.log_level)
    try:
        return COMMANDS[args.command](args)
    except UsageError as exc:
        print(f"edgekv: {exc}", file=sys.stderr)
        return exc.code
    except ConfigError as exc:
        print(f"edgekv: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except KeyboardInterrupt:
        return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
