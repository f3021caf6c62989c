"""Operator command line.

    msnmon run       --config sensor.yaml          long-running sensor
    msnmon simulate  [--scenario spec.yaml] --out DIR
    msnmon replay    --scenario DIR [--gateway] [--serve] [--pace S]
    msnmon stats     --gateway URL --sensor ID [--from N] [--to N] [--raw]
    msnmon diagnose  --gateway URL --sensor ID --window N [--raw]

Diagnostics go to stderr, data to stdout.  Exit codes: 0 success, 1 runtime
failure, 2 bad usage/configuration.  MSNM_LOG_LEVEL (error|warn|info|debug)
controls logging.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import signal
import sys
import tempfile
import time
import urllib.error
import urllib.request
from pathlib import Path

from msnmon.errors import ConfigError, MsnmonError, NotFound, RankError

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_RUNTIME = 1
EXIT_USAGE = 2

_LOG_LEVELS = {
    "error": logging.ERROR,
    "warn": logging.WARNING,
    "info": logging.INFO,
    "debug": logging.DEBUG,
}


def _setup_logging():
    level = os.environ.get("MSNM_LOG_LEVEL", "info").lower()
    logging.basicConfig(
        level=_LOG_LEVELS.get(level, logging.INFO),
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
        stream=sys.stderr,
    )


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="msnmon",
        description="Hierarchical statistical network monitoring sensors",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p_run = sub.add_parser("run", help="run one sensor from a config file")
    p_run.add_argument("--config", required=True, help="sensor YAML config")
    p_run.add_argument("--gateway-port", type=int, default=None,
                       help="also serve the read API on this port")

    p_sim = sub.add_parser("simulate", help="generate a traffic scenario")
    p_sim.add_argument("--scenario", default=None, help="scenario YAML (default: built-in)")
    p_sim.add_argument("--out", required=True, help="output directory")
    p_sim.add_argument("--seed", type=int, default=None, help="override the seed")

    p_rep = sub.add_parser("replay", help="replay a scenario through a full hierarchy")
    p_rep.add_argument("--scenario", required=True, help="directory from `simulate`")
    p_rep.add_argument("--overrides", default=None, help="sensor tuning YAML")
    p_rep.add_argument("--out", default=None, help="directory for obs logs")
    p_rep.add_argument("--gateway", action="store_true", help="serve the read API")
    p_rep.add_argument("--port", type=int, default=8710, help="gateway port")
    p_rep.add_argument("--pace", type=float, default=0.0,
                       help="seconds of wall time per window (0 = flat out)")
    p_rep.add_argument("--serve", action="store_true",
                       help="keep the gateway up after the replay finishes")

    p_stats = sub.add_parser("stats", help="query stat rows from a gateway")
    p_stats.add_argument("--gateway", default="http://127.0.0.1:8710")
    p_stats.add_argument("--sensor", required=True)
    p_stats.add_argument("--from", dest="from_", type=int, default=None)
    p_stats.add_argument("--to", type=int, default=None)
    p_stats.add_argument("--raw", action="store_true", help="machine-readable lines")

    p_diag = sub.add_parser("diagnose", help="trigger a diagnosis drill-down")
    p_diag.add_argument("--gateway", default="http://127.0.0.1:8710")
    p_diag.add_argument("--sensor", required=True)
    p_diag.add_argument("--window", type=int, required=True)
    p_diag.add_argument("--raw", action="store_true", help="machine-readable line")

    return parser


# ----------------------------------------------------------------- run

class _Tailer:
    """Follows an append-only text file from the beginning."""

    def __init__(self, path: str):
        self.path = Path(path)
        self._pos = 0

    def read_new(self) -> list[str]:
        if not self.path.exists():
            return []
        with open(self.path, encoding="utf-8", errors="replace") as fh:
            fh.seek(self._pos)
            lines = fh.readlines()
            self._pos = fh.tell()
        return [ln.rstrip("\n") for ln in lines if ln.strip()]


def _acquire_instance_lock(sensor_id: str) -> Path:
    """One process per sensor id per host."""
    lock = Path(tempfile.gettempdir()) / f"msnmon-{sensor_id}.pid"
    if lock.exists():
        try:
            pid = int(lock.read_text().strip())
            os.kill(pid, 0)
        except (ValueError, ProcessLookupError, PermissionError):
            lock.unlink(missing_ok=True)  # stale lock
        else:
            raise ConfigError(
                f"sensor {sensor_id!r} already running on this host (pid {pid})"
            )
    lock.write_text(str(os.getpid()))
    return lock


def cmd_run(args) -> int:
    from msnmon.config import load_sensor_config
    from msnmon.engine import SensorNode

    cfg = load_sensor_config(args.config)
    lock = _acquire_instance_lock(cfg.sensor_id)
    node = None
    gw = None
    stop = {"flag": False}

    def on_signal(signum, frame):
        stop["flag"] = True

    signal.signal(signal.SIGTERM, on_signal)
    signal.signal(signal.SIGINT, on_signal)
    try:
        node = SensorNode(cfg).start()
        if args.gateway_port is not None:
            from msnmon.gateway import Gateway

            gw = Gateway(port=args.gateway_port).start()
            gw.register(node.sensor)
            node.sensor.on_row = gw.notify_row
            logger.info("gateway on %s", gw.url)
        tailers = {s.source_id: _Tailer(s.path) for s in cfg.sources if s.path}
        if not tailers:
            raise ConfigError("run mode needs sources with file paths to tail")
        logger.info("%s: tailing %d source(s), window %ds",
                    cfg.sensor_id, len(tailers), cfg.window_len_s)
        newest = 0
        while not stop["flag"]:
            moved = False
            for source_id, tailer in tailers.items():
                lines = tailer.read_new()
                if lines:
                    node.sensor.ingest_lines(source_id, lines)
                    newest = max(newest, max(int(ln.split(" ", 1)[0]) for ln in lines))
                    moved = True
            while newest and node.sensor.has_due_window(newest):
                node.sensor.run_tick(newest)
            if not moved:
                time.sleep(0.5)
        logger.info("%s: shutting down, %d windows monitored",
                    cfg.sensor_id, len(node.sensor.obs_log))
        return EXIT_OK
    finally:
        if gw is not None:
            gw.stop()
        if node is not None:
            node.stop()
        lock.unlink(missing_ok=True)


# ------------------------------------------------------------- simulate

def cmd_simulate(args) -> int:
    from msnmon import simulate
    from msnmon.config import load_scenario_spec

    spec = load_scenario_spec(args.scenario)
    if args.seed is not None:
        spec = simulate.ScenarioSpec(
            nodes=spec.nodes, duration_s=spec.duration_s, warmup_s=spec.warmup_s,
            attacks=spec.attacks, seed=args.seed, window_len_s=spec.window_len_s,
            start_epoch=spec.start_epoch, modulation_amp=spec.modulation_amp,
            modulation_period_s=spec.modulation_period_s,
        )
    streams, manifest = simulate.generate(spec)
    out = simulate.write_streams(streams, manifest, args.out)
    total = sum(len(v) for v in streams.values())
    print(f"{out}: {len(streams)} streams, {total} flow records, "
          f"{len(manifest['attacks'])} attacks")
    return EXIT_OK


# --------------------------------------------------------------- replay

def cmd_replay(args) -> int:
    from msnmon import replay, simulate
    from msnmon.config import load_overrides

    manifest = simulate.load_manifest(args.scenario)
    overrides = load_overrides(args.overrides)
    gw = None
    if args.gateway or args.serve:
        from msnmon.gateway import Gateway

        gw = Gateway(port=args.port).start()
        print(f"gateway: {gw.url}", file=sys.stderr)
    driver = replay.ReplayDriver(
        None, manifest, scenario_dir=args.scenario,
        overrides=overrides, out_dir=args.out, gateway=gw,
    )
    try:
        for wstart in driver.window_starts():
            driver.step(wstart)
            if args.pace > 0:
                time.sleep(args.pace)
        result = driver.result()
        print(result.summary_text())
        if args.serve and gw is not None:
            print("serving gateway; interrupt to exit", file=sys.stderr)
            try:
                while True:
                    time.sleep(1)
            except KeyboardInterrupt:
                pass
        return EXIT_OK
    finally:
        driver.stop()
        if gw is not None:
            gw.stop()


# ----------------------------------------------------- gateway clients

def _http_error_detail(exc: urllib.error.HTTPError) -> str:
    body = exc.read().decode("utf-8", "replace").strip()
    try:
        return json.loads(body.splitlines()[0])["error"]
    except (json.JSONDecodeError, KeyError, IndexError):
        return body or str(exc)


def _fetch_lines(url: str) -> list[str]:
    try:
        with urllib.request.urlopen(url, timeout=30) as resp:
            return [ln for ln in resp.read().decode("utf-8").splitlines() if ln]
    except urllib.error.HTTPError as exc:
        if exc.code == 404:
            raise NotFound(f"not found: {_http_error_detail(exc)}") from exc
        raise


def cmd_stats(args) -> int:
    url = f"{args.gateway.rstrip('/')}/sensors/{args.sensor}/stats"
    params = []
    if args.from_ is not None:
        params.append(f"from={args.from_}")
    if args.to is not None:
        params.append(f"to={args.to}")
    if params:
        url += "?" + "&".join(params)
    lines = _fetch_lines(url)
    if args.raw:
        for line in lines:
            print(line)
        return EXIT_OK
    print(f"{'window':>12} {'q':>14} {'d':>12} {'ucl_q':>12} {'ucl_d':>10} flags")
    for line in lines:
        row = json.loads(line)
        print(f"{row['window']:>12} {row['q']:>14.4f} {row['d']:>12.4f} "
              f"{row['ucl_q']:>12.4f} {row['ucl_d']:>10.4f} {row['flags']}")
    print(f"# {len(lines)} windows", file=sys.stderr)
    return EXIT_OK


def cmd_diagnose(args) -> int:
    url = f"{args.gateway.rstrip('/')}/sensors/{args.sensor}/diagnose"
    body = json.dumps({"window": args.window}) + "\n"
    req = urllib.request.Request(
        url, data=body.encode(), method="POST",
        headers={"Content-Type": "application/x-ndjson"},
    )
    try:
        with urllib.request.urlopen(req, timeout=60) as resp:
            line = resp.read().decode("utf-8").strip()
    except urllib.error.HTTPError as exc:
        if exc.code == 404:
            raise NotFound(f"not found: {_http_error_detail(exc)}") from exc
        raise
    if args.raw:
        print(line)
        return EXIT_OK
    report = json.loads(line)
    _print_report(report)
    return EXIT_OK


def _print_report(report: dict, indent: str = "") -> None:
    print(f"{indent}sensor {report['sensor']}, window {report['window']} "
          f"[{report['status']}]")
    print(f"{indent}origin chain: {' -> '.join(report['chain'])}")
    print(f"{indent}top contributions:")
    for item in report["top"]:
        print(f"{indent}  {item['name']:<28} {item['value']:>14.4f}")
    if report.get("raw"):
        shown = report["raw"][:10]
        print(f"{indent}raw excerpt ({len(report['raw'])} lines):")
        for ln in shown:
            print(f"{indent}  | {ln}")
        if len(report["raw"]) > len(shown):
            print(f"{indent}  | ... {len(report['raw']) - len(shown)} more")
    if report.get("sub"):
        print(f"{indent}from child:")
        _print_report(report["sub"], indent + "  ")


def main(argv=None) -> int:
    _setup_logging()
    parser = build_parser()
    args = parser.parse_args(argv)
    handlers = {
        "run": cmd_run,
        "simulate": cmd_simulate,
        "replay": cmd_replay,
        "stats": cmd_stats,
        "diagnose": cmd_diagnose,
    }
    try:
        return handlers[args.command](args)
    except (ConfigError, RankError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (NotFound, MsnmonError, urllib.error.URLError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
