"""Configuration files: sensor definitions, variable catalogues, overrides.

Sensor configuration is nested key-value YAML.  Variables may be spelled out
one by one or requested as the built-in ``default_flow`` catalogue, which
covers the usual NetFlow-ish counters: totals, protocols, well-known ports,
port ranges, and packet/byte size buckets.
"""

from __future__ import annotations

from pathlib import Path

import yaml

from msnmon.engine import ChildConfig, SensorConfig, SourceConfig
from msnmon.errors import ConfigError
from msnmon.faac import VariableDef

FLOW_FIELDS = ("ts", "src_ip", "dst_ip", "src_port", "dst_port", "proto", "packets", "bytes")

_BIG = 10**12

# (name, field, matcher) rows of the stock counter catalogue
_DEFAULT_FLOW_CATALOGUE = (
    ("flows_total", "dst_port", ("any",)),
    ("proto_tcp", "proto", ("equals", "TCP")),
    ("proto_udp", "proto", ("equals", "UDP")),
    ("proto_icmp", "proto", ("equals", "ICMP")),
    ("port_http", "dst_port", ("equals", "80")),
    ("port_https", "dst_port", ("equals", "443")),
    ("port_http_alt", "dst_port", ("equals", "8080")),
    ("port_dns", "dst_port", ("equals", "53")),
    ("port_ssh", "dst_port", ("equals", "22")),
    ("port_privileged", "dst_port", ("range", 0, 1023)),
    ("port_ephemeral", "dst_port", ("range", 1024, 65535)),
    ("pkts_small", "packets", ("range", 1, 3)),
    ("pkts_mid", "packets", ("range", 4, 99)),
    ("pkts_bulk", "packets", ("range", 100, _BIG)),
    ("bytes_small", "bytes", ("range", 0, 999)),
    ("bytes_mid", "bytes", ("range", 1000, 99999)),
    ("bytes_large", "bytes", ("range", 100000, 999999)),
    ("bytes_huge", "bytes", ("range", 1000000, _BIG)),
)


def default_flow_variables(source_id: str) -> tuple[VariableDef, ...]:
    return tuple(
        VariableDef(name=name, source_id=source_id, field=field, matcher=matcher)
        for name, field, matcher in _DEFAULT_FLOW_CATALOGUE
    )


def default_flow_source(source_id: str = "netflow", path: str = "") -> SourceConfig:
    return SourceConfig(
        source_id=source_id,
        fields=FLOW_FIELDS,
        variables=default_flow_variables(source_id),
        path=path,
    )


def parse_addr(text: str) -> tuple[str, int]:
    host, _, port = str(text).rpartition(":")
    if not host or not port.isdigit():
        raise ConfigError(f"bad address {text!r}, expected host:port")
    return host, int(port)


def _parse_variable(source_id: str, entry: dict) -> VariableDef:
    if not isinstance(entry, dict) or "name" not in entry or "field" not in entry:
        raise ConfigError(f"variable entry needs name and field: {entry!r}")
    matchers = [k for k in ("match", "equals", "range", "regex") if k in entry]
    if len(matchers) != 1:
        raise ConfigError(
            f"variable {entry.get('name')!r} needs exactly one matcher, got {matchers}"
        )
    key = matchers[0]
    if key == "match":
        if entry["match"] != "any":
            raise ConfigError(f"match: must be 'any', got {entry['match']!r}")
        matcher = ("any",)
    elif key == "equals":
        matcher = ("equals", str(entry["equals"]))
    elif key == "range":
        rng = entry["range"]
        if not isinstance(rng, (list, tuple)) or len(rng) != 2:
            raise ConfigError(f"range must be [lo, hi]: {rng!r}")
        matcher = ("range", int(rng[0]), int(rng[1]))
    else:
        matcher = ("regex", str(entry["regex"]))
    return VariableDef(
        name=str(entry["name"]), source_id=source_id,
        field=str(entry["field"]), matcher=matcher,
    )


def _parse_source(entry: dict) -> SourceConfig:
    if "id" not in entry:
        raise ConfigError("source entry needs an id")
    source_id = str(entry["id"])
    fields = tuple(str(f) for f in entry.get("fields", FLOW_FIELDS))
    variables = entry.get("variables", "default_flow")
    if variables == "default_flow":
        defs = default_flow_variables(source_id)
    elif isinstance(variables, list):
        defs = tuple(_parse_variable(source_id, v) for v in variables)
    else:
        raise ConfigError(f"variables must be a list or 'default_flow': {variables!r}")
    return SourceConfig(
        source_id=source_id, fields=fields, variables=defs,
        path=str(entry.get("path", "")),
    )


def sensor_config_from_dict(doc: dict) -> SensorConfig:
    if not isinstance(doc, dict) or "sensor" not in doc:
        raise ConfigError("config must contain a 'sensor' section")
    sec = doc["sensor"]
    if not isinstance(sec, dict) or "id" not in sec:
        raise ConfigError("sensor section needs an id")
    sources = doc.get("sources")
    if not sources:
        raise ConfigError("config must define at least one source")
    children = tuple(
        ChildConfig(
            sensor_id=str(c["id"]),
            address=parse_addr(c["address"]) if c.get("address") else None,
        )
        for c in doc.get("children", [])
    )
    cfg = SensorConfig(
        sensor_id=str(sec["id"]),
        level=int(sec.get("level", 1)),
        window_len_s=int(sec.get("window_len_s", 60)),
        recalib_interval_s=int(sec.get("recalib_interval_s", 3600)),
        num_components=int(sec.get("num_components", 2)),
        confidence=float(sec.get("confidence", 0.9999)),
        ewma_lambda=float(sec.get("ewma_lambda", 0.5)),
        calib_windows=int(sec.get("calib_windows", 30)),
        limit_method=str(sec.get("limit_method", "theoretical")),
        top_k=int(sec.get("top_k", 10)),
        max_excerpt_lines=int(sec.get("max_excerpt_lines", 200)),
        parent_addr=parse_addr(sec["parent"]) if sec.get("parent") else None,
        listen_addr=parse_addr(sec["listen"]) if sec.get("listen") else None,
        obs_log_path=str(sec["obs_log"]) if sec.get("obs_log") else None,
        model_path=str(sec["model_snapshot"]) if sec.get("model_snapshot") else None,
        sources=tuple(_parse_source(s) for s in sources),
        children=children,
    )
    cfg.validate()
    return cfg


def load_sensor_config(path: str | Path) -> SensorConfig:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file not found: {path}")
    try:
        with open(path, encoding="utf-8") as fh:
            doc = yaml.safe_load(fh)
    except yaml.YAMLError as exc:
        raise ConfigError(f"{path}: {exc}") from exc
    try:
        return sensor_config_from_dict(doc)
    except ConfigError as exc:
        raise ConfigError(f"{path}: {exc}") from exc


def scenario_spec_from_dict(doc: dict):
    """Build a traffic scenario from its YAML form; omitted parts fall back
    to the stock four-sensor scenario."""
    from msnmon import simulate

    if not doc:
        return simulate.default_scenario()
    base = simulate.default_scenario(seed=int(doc.get("seed", simulate.DEFAULT_SEED)))
    nodes = base.nodes
    if "nodes" in doc:
        nodes = tuple(
            simulate.NodeSpec(
                node_id=str(n["id"]),
                level=int(n.get("level", 2 if n.get("parent") else 1)),
                parent=str(n["parent"]) if n.get("parent") else None,
                subnet=str(n.get("subnet", f"10.0.{i}")),
                http_per_min=float(n.get("http_per_min", 45.0)),
                dns_per_min=float(n.get("dns_per_min", 15.0)),
                inet_per_min=float(n.get("inet_per_min", 0.0)),
            )
            for i, n in enumerate(doc["nodes"])
        )
    attacks = base.attacks
    if "attacks" in doc:
        attacks = tuple(
            simulate.AttackSpec(
                kind=str(a["kind"]), target=str(a["target"]),
                start_s=int(a["start_s"]), duration_s=int(a["duration_s"]),
            )
            for a in doc["attacks"]
        )
    spec = simulate.ScenarioSpec(
        nodes=nodes,
        duration_s=int(doc.get("duration_s", base.duration_s)),
        warmup_s=int(doc.get("warmup_s", base.warmup_s)),
        attacks=attacks,
        seed=int(doc.get("seed", base.seed)),
        window_len_s=int(doc.get("window_len_s", base.window_len_s)),
        start_epoch=int(doc.get("start_epoch", base.start_epoch)),
        modulation_amp=float(doc.get("modulation_amp", base.modulation_amp)),
        modulation_period_s=int(doc.get("modulation_period_s", base.modulation_period_s)),
    )
    spec.validate()
    return spec


def load_scenario_spec(path: str | Path | None):
    if path is None:
        return scenario_spec_from_dict({})
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"scenario file not found: {path}")
    with open(path, encoding="utf-8") as fh:
        try:
            doc = yaml.safe_load(fh)
        except yaml.YAMLError as exc:
            raise ConfigError(f"{path}: {exc}") from exc
    try:
        return scenario_spec_from_dict(doc or {})
    except (ConfigError, KeyError, TypeError, ValueError) as exc:
        raise ConfigError(f"{path}: {exc}") from exc


def load_overrides(path: str | Path | None) -> tuple[dict, dict]:
    """Replay tuning file: a 'defaults' mapping applied to every sensor and a
    'sensors' mapping of per-sensor overrides."""
    if path is None:
        return {}, {}
    with open(path, encoding="utf-8") as fh:
        doc = yaml.safe_load(fh) or {}
    if not isinstance(doc, dict):
        raise ConfigError("overrides file must be a mapping")
    defaults = doc.get("defaults", {}) or {}
    per_sensor = doc.get("sensors", {}) or {}
    if not isinstance(defaults, dict) or not isinstance(per_sensor, dict):
        raise ConfigError("'defaults' and 'sensors' must be mappings")
    return defaults, per_sensor
