"""Deterministic desk-scale traffic scenario generator.

Reproduces the shape of a corporate network experiment: a border router (BR)
in front of three departmental routers (R1, R2, R3).  Hosts behind each
router fetch HTTP resources from internet and DMZ servers and issue DNS
lookups; the border router additionally sees internet-side traffic to the
DMZ.  After a normal-operation warmup, four non-overlapping attacks run in
sequence: high-rate DoS, low-rate DoS, a port scan, and a data exfiltration.

Streams are NetFlow-like text, one flow per line::

    ts src_ip dst_ip src_port dst_port proto packets bytes

Everything is driven by a single integer seed; the same seed yields
byte-identical streams.  The border router's stream is the superset of all
child streams plus its own internet-side flows.  A manifest records the
schedule ground truth for evaluation.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from msnmon.errors import ConfigError

# aligned to the minute grid so scenario windows and sensor windows coincide
DEFAULT_START_EPOCH = 1_704_067_200
DEFAULT_SEED = 20240601

FLOW_FIELDS = ("ts", "src_ip", "dst_ip", "src_port", "dst_port", "proto", "packets", "bytes")

ATTACK_KINDS = ("dos_high", "dos_low", "port_scan", "exfiltration")

# attack signature parameters
DOS_HIGH_RATE_MULT = 25.0    # flows/min multiple of the node's normal rate
DOS_LOW_RATE_MULT = 3.0      # "low and slow": 2-4x normal
SCAN_DISTINCT_PORTS = 800    # >= 500 distinct destination ports
EXFIL_FLOWS_PER_MIN = 10     # steady chunk-upload drip, one flow per 6 s
EXFIL_BYTES_RANGE = (2_000_000, 8_000_000)  # >= 100x the normal per-flow mean


@dataclass(frozen=True)
class FlowRecord:
    ts: int
    src_ip: str
    dst_ip: str
    src_port: int
    dst_port: int
    proto: str
    packets: int
    bytes: int

    def line(self) -> str:
        return (
            f"{self.ts} {self.src_ip} {self.dst_ip} {self.src_port} "
            f"{self.dst_port} {self.proto} {self.packets} {self.bytes}"
        )


@dataclass(frozen=True)
class NodeSpec:
    node_id: str
    level: int
    parent: str | None
    subnet: str                  # first three octets, e.g. "10.0.3"
    http_per_min: float = 45.0
    dns_per_min: float = 15.0
    inet_per_min: float = 0.0    # internet-side flows (border router only)


@dataclass(frozen=True)
class AttackSpec:
    kind: str
    target: str
    start_s: int
    duration_s: int

    @property
    def end_s(self) -> int:
        return self.start_s + self.duration_s


@dataclass(frozen=True)
class ScenarioSpec:
    nodes: tuple[NodeSpec, ...]
    duration_s: int
    warmup_s: int
    attacks: tuple[AttackSpec, ...]
    seed: int = DEFAULT_SEED
    window_len_s: int = 60
    start_epoch: int = DEFAULT_START_EPOCH
    # mild diurnal-style swing; the period matches the default calibration
    # span so a calibration buffer always sees one full cycle
    modulation_amp: float = 0.15
    modulation_period_s: int = 1800

    def root(self) -> NodeSpec:
        roots = [n for n in self.nodes if n.parent is None]
        if len(roots) != 1:
            raise ConfigError(f"topology must have exactly one root, found {len(roots)}")
        return roots[0]

    def validate(self) -> None:
        ids = [n.node_id for n in self.nodes]
        if len(set(ids)) != len(ids):
            raise ConfigError("duplicate node ids in topology")
        root_id = self.root().node_id
        for n in self.nodes:
            if n.parent is not None and n.parent not in ids:
                raise ConfigError(f"node {n.node_id!r} has unknown parent {n.parent!r}")
        if self.duration_s < 0 or self.warmup_s < 0 or self.warmup_s > self.duration_s:
            raise ConfigError("need 0 <= warmup <= duration")
        last_end = None
        for atk in sorted(self.attacks, key=lambda a: a.start_s):
            if atk.kind not in ATTACK_KINDS:
                raise ConfigError(f"unknown attack kind {atk.kind!r}")
            if atk.target not in ids or atk.target == root_id:
                raise ConfigError(f"attack target must be a non-root node, got {atk.target!r}")
            if atk.duration_s <= 0:
                raise ConfigError("attack duration must be positive")
            if atk.start_s < self.warmup_s or atk.end_s > self.duration_s:
                raise ConfigError(
                    f"attack [{atk.start_s}, {atk.end_s}) outside "
                    f"[{self.warmup_s}, {self.duration_s})"
                )
            if last_end is not None and atk.start_s < last_end:
                raise ConfigError("attacks must not overlap in time")
            last_end = atk.end_s


def default_scenario(seed: int = DEFAULT_SEED) -> ScenarioSpec:
    """Four sensors, 90 min of normal traffic, then four 5-min attacks
    separated by 2.5-min gaps: 120 simulated minutes total."""
    nodes = (
        NodeSpec("BR", level=1, parent=None, subnet="10.0.0",
                 http_per_min=0.0, dns_per_min=0.0, inet_per_min=30.0),
        NodeSpec("R1", level=2, parent="BR", subnet="10.0.1"),
        NodeSpec("R2", level=2, parent="BR", subnet="10.0.2"),
        NodeSpec("R3", level=2, parent="BR", subnet="10.0.3"),
    )
    attacks = (
        AttackSpec("dos_high", "R3", start_s=5400, duration_s=300),
        AttackSpec("dos_low", "R3", start_s=5850, duration_s=300),
        AttackSpec("port_scan", "R1", start_s=6300, duration_s=300),
        AttackSpec("exfiltration", "R2", start_s=6750, duration_s=300),
    )
    return ScenarioSpec(
        nodes=nodes, duration_s=7200, warmup_s=5400, attacks=attacks, seed=seed
    )


INTERNET_SERVERS = tuple(f"203.0.113.{k}" for k in range(1, 9))
EXTERNAL_CLIENTS = tuple(f"198.51.100.{k}" for k in range(1, 33))
DMZ_WEB = "10.0.0.80"
DMZ_DNS = "10.0.0.53"
WEB_PORTS = (80, 443, 8080)
WEB_PORT_WEIGHTS = (0.5, 0.4, 0.1)


def _modulation(spec: ScenarioSpec, t_s: float) -> float:
    return 1.0 + spec.modulation_amp * math.sin(
        2.0 * math.pi * t_s / spec.modulation_period_s
    )


def _http_flow(rng, ts, src_ip, dst_ip=None):
    if dst_ip is None:
        dst_ip = INTERNET_SERVERS[rng.integers(0, len(INTERNET_SERVERS))] \
            if rng.random() < 0.7 else DMZ_WEB
    dport = int(rng.choice(WEB_PORTS, p=WEB_PORT_WEIGHTS))
    packets = int(min(2 + rng.lognormal(2.2, 0.8), 80))
    nbytes = packets * int(rng.integers(400, 900))
    return FlowRecord(
        ts=int(ts), src_ip=src_ip, dst_ip=dst_ip,
        src_port=int(rng.integers(1024, 65536)), dst_port=dport,
        proto="TCP", packets=packets, bytes=nbytes,
    )


def _dns_flow(rng, ts, src_ip):
    packets = int(rng.integers(1, 3))
    return FlowRecord(
        ts=int(ts), src_ip=src_ip, dst_ip=DMZ_DNS,
        src_port=int(rng.integers(1024, 65536)), dst_port=53,
        proto="UDP", packets=packets, bytes=int(rng.integers(60, 301)),
    )


def _host(rng, subnet: str) -> str:
    return f"{subnet}.{rng.integers(10, 61)}"


def _normal_stream(spec: ScenarioSpec, node: NodeSpec, rng) -> list[FlowRecord]:
    records: list[FlowRecord] = []
    minutes = spec.duration_s // 60
    for minute in range(minutes):
        t0 = minute * 60
        mod = _modulation(spec, t0)
        for _ in range(rng.poisson(node.http_per_min * mod)):
            ts = spec.start_epoch + t0 + rng.integers(0, 60)
            records.append(_http_flow(rng, ts, _host(rng, node.subnet)))
        for _ in range(rng.poisson(node.dns_per_min * mod)):
            ts = spec.start_epoch + t0 + rng.integers(0, 60)
            records.append(_dns_flow(rng, ts, _host(rng, node.subnet)))
        for _ in range(rng.poisson(node.inet_per_min * mod)):
            ts = spec.start_epoch + t0 + rng.integers(0, 60)
            src = EXTERNAL_CLIENTS[rng.integers(0, len(EXTERNAL_CLIENTS))]
            records.append(_http_flow(rng, ts, src, dst_ip=DMZ_WEB))
    return records


def _attack_stream(spec: ScenarioSpec, atk: AttackSpec, node: NodeSpec, rng) -> list[FlowRecord]:
    records: list[FlowRecord] = []
    base_rate = node.http_per_min + node.dns_per_min
    n_minutes = atk.duration_s / 60.0

    def times(rate_per_min):
        n = rng.poisson(rate_per_min * n_minutes)
        offs = rng.integers(0, atk.duration_s, size=n)
        return [spec.start_epoch + atk.start_s + int(o) for o in offs]

    if atk.kind in ("dos_high", "dos_low"):
        mult = DOS_HIGH_RATE_MULT if atk.kind == "dos_high" else DOS_LOW_RATE_MULT
        victim = f"{node.subnet}.80"
        for ts in times(base_rate * mult):
            records.append(FlowRecord(
                ts=ts,
                src_ip=EXTERNAL_CLIENTS[rng.integers(0, len(EXTERNAL_CLIENTS))],
                dst_ip=victim,
                src_port=int(rng.integers(1024, 65536)),
                dst_port=80,
                proto="TCP",
                packets=int(rng.integers(1, 3)),
                bytes=int(rng.integers(40, 121)),
            ))
    elif atk.kind == "port_scan":
        scanner = "198.51.100.66"
        victim = f"{node.subnet}.20"
        ports = rng.choice(np.arange(1, 65536), size=SCAN_DISTINCT_PORTS, replace=False)
        offs = np.sort(rng.integers(0, atk.duration_s, size=SCAN_DISTINCT_PORTS))
        for port, off in zip(ports, offs):
            records.append(FlowRecord(
                ts=spec.start_epoch + atk.start_s + int(off),
                src_ip=scanner, dst_ip=victim,
                src_port=int(rng.integers(40000, 60000)),
                dst_port=int(port),
                proto="TCP",
                packets=int(rng.integers(1, 3)),
                bytes=int(rng.integers(40, 81)),
            ))
    elif atk.kind == "exfiltration":
        insider = f"{node.subnet}.33"
        sink = "203.0.113.99"
        spacing = 60 // EXFIL_FLOWS_PER_MIN
        for off in range(0, atk.duration_s, spacing):
            nbytes = int(rng.integers(*EXFIL_BYTES_RANGE))
            records.append(FlowRecord(
                ts=spec.start_epoch + atk.start_s + off,
                src_ip=insider, dst_ip=sink,
                src_port=int(rng.integers(1024, 65536)), dst_port=443,
                proto="TCP", packets=max(1, nbytes // 1400), bytes=nbytes,
            ))
    else:  # pragma: no cover - validate() rejects earlier
        raise ConfigError(f"unknown attack kind {atk.kind!r}")
    return records


def generate(spec: ScenarioSpec) -> tuple[dict[str, list[FlowRecord]], dict]:
    """Per-node ordered record streams plus the ground-truth manifest."""
    spec.validate()
    root_id = spec.root().node_id
    nodes_by_id = {n.node_id: n for n in spec.nodes}

    streams: dict[str, list[FlowRecord]] = {}
    for i, node in enumerate(spec.nodes):
        rng = np.random.default_rng([spec.seed, i])
        streams[node.node_id] = _normal_stream(spec, node, rng)

    for j, atk in enumerate(spec.attacks):
        rng = np.random.default_rng([spec.seed, 1000 + j])
        streams[atk.target].extend(
            _attack_stream(spec, atk, nodes_by_id[atk.target], rng)
        )

    # border router sees everything its children see, in configured order
    merged = list(streams[root_id])
    for node in spec.nodes:
        if node.node_id != root_id:
            merged.extend(streams[node.node_id])
    streams[root_id] = merged

    for node_id in streams:
        streams[node_id].sort(key=lambda r: r.ts)

    manifest = {
        "seed": spec.seed,
        "start_epoch": spec.start_epoch,
        "duration_s": spec.duration_s,
        "warmup_s": spec.warmup_s,
        "window_len_s": spec.window_len_s,
        "nodes": [
            {
                "id": n.node_id,
                "level": n.level,
                "parent": n.parent,
                "flows_per_min": n.http_per_min + n.dns_per_min + n.inet_per_min,
            }
            for n in spec.nodes
        ],
        "attacks": [
            {
                "kind": a.kind,
                "target": a.target,
                "start": spec.start_epoch + a.start_s,
                "end": spec.start_epoch + a.end_s,
            }
            for a in spec.attacks
        ],
    }
    return streams, manifest


def write_streams(
    streams: dict[str, list[FlowRecord]], manifest: dict, out_dir: str | Path
) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    for node_id, records in streams.items():
        with open(out / f"{node_id}.flows", "w", encoding="utf-8") as fh:
            for rec in records:
                fh.write(rec.line() + "\n")
    with open(out / "manifest.json", "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return out


def load_manifest(scenario_dir: str | Path) -> dict:
    path = Path(scenario_dir) / "manifest.json"
    if not path.exists():
        raise ConfigError(f"no manifest.json in {scenario_dir}")
    with open(path, encoding="utf-8") as fh:
        return json.load(fh)


def attack_windows(manifest: dict, attack: dict) -> list[int]:
    """Window starts overlapping an attack interval (any overlap counts)."""
    wl = manifest["window_len_s"]
    first = (attack["start"] // wl) * wl
    out = []
    w = first
    while w < attack["end"]:
        if w + wl > attack["start"]:
            out.append(w)
        w += wl
    return out
