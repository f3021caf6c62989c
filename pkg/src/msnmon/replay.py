"""End-to-end scenario replay: every sensor of the hierarchy in one process.

Sensors talk over loopback TCP with the real wire protocol; only the clock is
synthetic.  The driver advances a data-clock window by window: children ingest
their slice of the record streams and tick first, the driver waits until the
root has received each child's statistic for that window (or a child is still
calibrating and emitted none), then the root ingests and ticks.  That barrier
makes a replay fully deterministic: same scenario, same seed, same summary.
"""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field
from pathlib import Path

from msnmon import simulate
from msnmon.config import default_flow_source
from msnmon.engine import ObsRow, SensorConfig, SensorNode
from msnmon.errors import ConfigError

logger = logging.getLogger(__name__)

BARRIER_TIMEOUT_S = 5.0

# engine knobs an overrides file may set per sensor or globally
_TUNABLE = (
    "window_len_s", "recalib_interval_s", "num_components", "confidence",
    "ewma_lambda", "calib_windows", "limit_method", "top_k", "max_excerpt_lines",
)


@dataclass
class SensorResult:
    sensor_id: str
    level: int
    rows: list[ObsRow]
    first_monitor_window: int | None
    parse_warnings: int
    data_pushes: int
    recalibrations: int


@dataclass
class ReplayResult:
    manifest: dict
    sensors: dict[str, SensorResult]
    summary: dict
    root_data_received: int

    def summary_text(self) -> str:
        return format_summary(self.summary)


def _node_configs(manifest: dict, overrides_default: dict, overrides_sensor: dict,
                  out_dir: Path | None) -> dict[str, dict]:
    """Raw keyword dicts per sensor, before addresses are known."""
    nodes = manifest["nodes"]
    by_id = {n["id"]: n for n in nodes}
    children_of: dict[str, list[str]] = {n["id"]: [] for n in nodes}
    for n in nodes:
        if n.get("parent"):
            if n["parent"] not in by_id:
                raise ConfigError(f"node {n['id']!r} has unknown parent {n['parent']!r}")
            children_of[n["parent"]].append(n["id"])

    configs = {}
    for n in nodes:
        kw = {
            "sensor_id": n["id"],
            "level": int(n.get("level", 1)),
            "window_len_s": int(manifest.get("window_len_s", 60)),
        }
        for key in _TUNABLE:
            if key in overrides_default:
                kw[key] = overrides_default[key]
        for key, val in (overrides_sensor.get(n["id"]) or {}).items():
            if key not in _TUNABLE:
                raise ConfigError(f"unknown override {key!r} for sensor {n['id']!r}")
            kw[key] = val
        if out_dir is not None:
            kw["obs_log_path"] = str(out_dir / f"{n['id']}.obslog")
        kw["_children"] = children_of[n["id"]]
        configs[n["id"]] = kw
    return configs


class ReplayDriver:
    """Owns the sensor processes-in-miniature and the data-clock."""

    def __init__(
        self,
        streams: dict[str, list[simulate.FlowRecord]] | None,
        manifest: dict,
        scenario_dir: str | Path | None = None,
        overrides: tuple[dict, dict] = ({}, {}),
        out_dir: str | Path | None = None,
        on_row=None,
        gateway=None,
    ):
        self.manifest = manifest
        self.scenario_dir = Path(scenario_dir) if scenario_dir else None
        self._lines: dict[str, list[tuple[int, str]]] = {}
        if streams is not None:
            for node_id, records in streams.items():
                self._lines[node_id] = [(r.ts, r.line()) for r in records]
        elif scenario_dir is not None:
            for n in manifest["nodes"]:
                path = Path(scenario_dir) / f"{n['id']}.flows"
                entries = []
                if path.exists():
                    with open(path, encoding="utf-8") as fh:
                        for line in fh:
                            line = line.rstrip("\n")
                            if line:
                                entries.append((int(line.split(" ", 1)[0]), line))
                self._lines[n["id"]] = entries
        else:
            raise ConfigError("replay needs streams or a scenario directory")

        out = Path(out_dir) if out_dir else None
        if out:
            out.mkdir(parents=True, exist_ok=True)
        raw_cfg = _node_configs(manifest, *overrides, out_dir=out)
        if gateway is not None and on_row is None:
            on_row = gateway.notify_row

        # construct leaves-first so parents can reference child listener ports
        order = sorted(raw_cfg.values(), key=lambda kw: -kw["level"])
        self.nodes: dict[str, SensorNode] = {}
        for kw in order:
            child_ids = kw.pop("_children")
            source_path = str(self.scenario_dir / f"{kw['sensor_id']}.flows") \
                if self.scenario_dir else f"{kw['sensor_id']}.flows"
            children = tuple(
                _child_ref(self.nodes[cid]) for cid in child_ids
            )
            cfg = SensorConfig(
                sources=(default_flow_source("netflow", source_path),),
                children=children,
                listen_addr=("127.0.0.1", 0),
                **kw,
            )
            node = SensorNode(cfg, on_row=on_row)
            node.start()
            self.nodes[kw["sensor_id"]] = node

        # connect every child's uplink to its parent's listener
        for n in manifest["nodes"]:
            parent = n.get("parent")
            if parent:
                self.nodes[n["id"]].connect_parent(self.nodes[parent].listen_address)
            if gateway is not None:
                gateway.register(self.nodes[n["id"]].sensor, parent_id=parent)

        self.root_id = next(n["id"] for n in manifest["nodes"] if not n.get("parent"))
        self._cursor = {node_id: 0 for node_id in self._lines}
        self.killed: set[str] = set()

    def window_starts(self) -> list[int]:
        """Grid-aligned windows covering the scenario span (sensors align
        their windows to multiples of window_len, not to the scenario start)."""
        wl = self.manifest["window_len_s"]
        start = self.manifest["start_epoch"]
        end = start + self.manifest["duration_s"]
        first = start // wl * wl
        return list(range(first, end, wl))

    def kill(self, sensor_id: str) -> None:
        """Stop feeding and ticking a sensor; its peers soldier on."""
        self.killed.add(sensor_id)

    def _feed(self, node_id: str, upto: int) -> None:
        lines = self._lines.get(node_id, [])
        cur = self._cursor[node_id]
        batch = []
        while cur < len(lines) and lines[cur][0] < upto:
            batch.append(lines[cur][1])
            cur += 1
        self._cursor[node_id] = cur
        if batch:
            self.nodes[node_id].sensor.ingest_lines("netflow", batch)

    def step(self, wstart: int) -> dict[str, object]:
        """Run one window across the hierarchy; returns emitted pairs by id."""
        wl = self.manifest["window_len_s"]
        wend = wstart + wl
        emitted: dict[str, object] = {}
        by_level = sorted(
            self.manifest["nodes"], key=lambda n: -int(n.get("level", 1))
        )
        for n in by_level:
            node_id = n["id"]
            if node_id in self.killed:
                continue
            node = self.nodes[node_id]
            if n.get("parent"):
                self._feed(node_id, wend)
                emitted[node_id] = node.sensor.run_tick(wend)
            else:
                self._await_children(node, wstart, emitted)
                self._feed(node_id, wend)
                emitted[node_id] = node.sensor.run_tick(wend)
        return emitted

    def _await_children(self, node: SensorNode, wstart: int, emitted: dict) -> None:
        expected = [
            (c.sensor_id, emitted[c.sensor_id].window_start)
            for c in node.sensor.config.children
            if emitted.get(c.sensor_id) is not None and c.sensor_id not in self.killed
        ]
        deadline = time.monotonic() + BARRIER_TIMEOUT_S
        while time.monotonic() < deadline:
            if all(node.sensor.has_child_stat(cid, w) for cid, w in expected):
                return
            time.sleep(0.001)
        logger.warning(
            "%s: barrier timeout waiting for %s at window %d",
            node.sensor.config.sensor_id, expected, wstart,
        )

    def run(self) -> ReplayResult:
        try:
            for wstart in self.window_starts():
                self.step(wstart)
            return self.result()
        finally:
            self.stop()

    def result(self) -> ReplayResult:
        sensors = {}
        for node_id, node in self.nodes.items():
            s = node.sensor
            rows = list(s.obs_log)
            sensors[node_id] = SensorResult(
                sensor_id=node_id,
                level=s.config.level,
                rows=rows,
                first_monitor_window=rows[0].window_start if rows else None,
                parse_warnings=s.parse_warnings,
                data_pushes=s.data_pushes,
                recalibrations=s.recalibrations,
            )
        root_received = 0
        root_node = self.nodes[self.root_id]
        if root_node.server is not None:
            root_received = root_node.server.data_received
        summary = summarize(self.manifest, sensors, root_received)
        return ReplayResult(
            manifest=self.manifest,
            sensors=sensors,
            summary=summary,
            root_data_received=root_received,
        )

    def stop(self) -> None:
        for node in self.nodes.values():
            node.stop()


def run_replay(
    scenario_dir: str | Path | None = None,
    streams: dict | None = None,
    manifest: dict | None = None,
    overrides_path: str | Path | None = None,
    overrides: tuple[dict, dict] | None = None,
    out_dir: str | Path | None = None,
) -> ReplayResult:
    from msnmon.config import load_overrides

    if manifest is None:
        if scenario_dir is None:
            raise ConfigError("replay needs a scenario directory or manifest")
        manifest = simulate.load_manifest(scenario_dir)
    if overrides is None:
        overrides = load_overrides(overrides_path)
    driver = ReplayDriver(
        streams, manifest, scenario_dir=scenario_dir,
        overrides=overrides, out_dir=out_dir,
    )
    return driver.run()


def _child_ref(node: SensorNode):
    from msnmon.engine import ChildConfig

    return ChildConfig(
        sensor_id=node.sensor.config.sensor_id, address=node.listen_address
    )


# ------------------------------------------------------------- summaries

def _rate(hits: int, total: int) -> float:
    return hits / total if total else 0.0


def summarize(manifest: dict, sensors: dict[str, SensorResult],
              root_data_received: int) -> dict:
    """Detection/false-positive accounting against the manifest labels."""
    attacks = manifest.get("attacks", [])
    root_id = next(n["id"] for n in manifest["nodes"] if not n.get("parent"))
    windows_by_attack = {
        i: set(simulate.attack_windows(manifest, a)) for i, a in enumerate(attacks)
    }

    per_sensor: dict[str, dict] = {}
    for sid, res in sensors.items():
        relevant = [
            i for i, a in enumerate(attacks)
            if a["target"] == sid or sid == root_id
        ]
        labeled = set()
        for i in relevant:
            labeled |= windows_by_attack[i]
        noc_rows = [r for r in res.rows if r.window_start not in labeled]
        noc_fp = _rate(sum(1 for r in noc_rows if r.anomalous), len(noc_rows))
        attack_stats = {}
        for i, a in enumerate(attacks):
            rows = [r for r in res.rows if r.window_start in windows_by_attack[i]]
            if not rows:
                continue
            exceeded = sum(1 for r in rows if r.anomalous)
            attack_stats[i] = {
                "kind": a["kind"],
                "windows": len(rows),
                "exceeded": exceeded,
                "rate": _rate(exceeded, len(rows)),
            }
        per_sensor[sid] = {
            "level": res.level,
            "monitored_windows": len(res.rows),
            "first_monitor_window": res.first_monitor_window,
            "noc_windows": len(noc_rows),
            "noc_fp_rate": noc_fp,
            "attacks": attack_stats,
            "parse_warnings": res.parse_warnings,
            "recalibrations": res.recalibrations,
        }

    attack_rows = []
    for i, a in enumerate(attacks):
        target_stats = per_sensor.get(a["target"], {}).get("attacks", {}).get(i)
        root_stats = per_sensor.get(root_id, {}).get("attacks", {}).get(i)
        others = {
            sid: info["attacks"].get(i, {"rate": None})["rate"]
            if i in info["attacks"] else None
            for sid, info in per_sensor.items()
            if sid not in (a["target"], root_id)
        }
        attack_rows.append({
            "kind": a["kind"],
            "target": a["target"],
            "start": a["start"],
            "end": a["end"],
            "windows": sorted(windows_by_attack[i]),
            "target_rate": target_stats["rate"] if target_stats else None,
            "root_rate": root_stats["rate"] if root_stats else None,
            "other_router_rates": others,
        })

    three_interval = None
    root = per_sensor.get(root_id)
    if root and root["monitored_windows"]:
        first_attack = min((a["start"] for a in attacks), default=None)
        wl = manifest["window_len_s"]
        root_rows = sensors[root_id].rows
        if first_attack is not None:
            normal_rows = [r for r in root_rows if r.window_start + wl <= first_attack]
            attack_labeled = set()
            for ws in windows_by_attack.values():
                attack_labeled |= ws
            attack_rows_r = [r for r in root_rows if r.window_start in attack_labeled]
            three_interval = {
                "calibration": {
                    "span": [manifest["start_epoch"], root["first_monitor_window"]],
                    "stat_rows": 0,
                },
                "normal_operation": {
                    "span": [root["first_monitor_window"], first_attack],
                    "fp_rate": _rate(
                        sum(1 for r in normal_rows if r.anomalous), len(normal_rows)
                    ),
                },
                "attack_period": {
                    "span": [first_attack, manifest["start_epoch"] + manifest["duration_s"]],
                    "exceed_rate": _rate(
                        sum(1 for r in attack_rows_r if r.anomalous), len(attack_rows_r)
                    ),
                },
            }

    expected_msgs = sum(
        len(res.rows) for sid, res in sensors.items() if sid != root_id
    )
    return {
        "root": root_id,
        "sensors": per_sensor,
        "attacks": attack_rows,
        "three_interval": three_interval,
        "data_messages": {
            "received_at_root": root_data_received,
            "expected": expected_msgs,
        },
    }


def format_summary(summary: dict) -> str:
    lines = []
    lines.append("sensor   lvl  monitored  noc-fp     recal  attack detection")
    for sid in sorted(summary["sensors"]):
        info = summary["sensors"][sid]
        det = " ".join(
            f"{st['kind']}={st['exceeded']}/{st['windows']}"
            for st in info["attacks"].values()
        )
        lines.append(
            f"{sid:<8} {info['level']:<4} {info['monitored_windows']:<10} "
            f"{info['noc_fp_rate']:<10.4f} {info['recalibrations']:<6} {det}"
        )
    lines.append("")
    for atk in summary["attacks"]:
        t = f"{atk['target_rate']:.2f}" if atk["target_rate"] is not None else "n/a"
        r = f"{atk['root_rate']:.2f}" if atk["root_rate"] is not None else "n/a"
        others = ", ".join(
            f"{sid}={rate:.2f}" if rate is not None else f"{sid}=n/a"
            for sid, rate in sorted(atk["other_router_rates"].items())
        )
        lines.append(
            f"attack {atk['kind']:<13} on {atk['target']}: "
            f"target rate {t}, root rate {r}, others: {others}"
        )
    ti = summary.get("three_interval")
    if ti:
        lines.append("")
        lines.append("three-interval structure:")
        lines.append(
            f"  1. calibration  [{ti['calibration']['span'][0]} .. "
            f"{ti['calibration']['span'][1]}): no statistics emitted"
        )
        lines.append(
            f"  2. normal ops   [{ti['normal_operation']['span'][0]} .. "
            f"{ti['normal_operation']['span'][1]}): fp rate "
            f"{ti['normal_operation']['fp_rate']:.4f} (below limits)"
        )
        lines.append(
            f"  3. attacks      [{ti['attack_period']['span'][0]} .. "
            f"{ti['attack_period']['span'][1]}): exceed rate "
            f"{ti['attack_period']['exceed_rate']:.4f} (limits exceeded)"
        )
    dm = summary["data_messages"]
    lines.append("")
    lines.append(
        f"data messages at root: {dm['received_at_root']} "
        f"(expected {dm['expected']})"
    )
    return "\n".join(lines)
