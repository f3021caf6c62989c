"""Anomaly diagnosis: per-variable contributions and hierarchical drill-down.

Given an anomalous window, the contribution of each observation variable is
computed with the oMEDA single-observation form: with the model-plane
reconstruction xhat = x . P_A . P_A^T,

    contribution_m = 2 * x_m * xhat_m - xhat_m^2

Large magnitude of either sign marks the variable as relevant.  A Diagnosis
Routing Table (DRT) partitions the observation indices: each index belongs
either to a local raw source (follow up by pulling that source's raw lines
for the window) or to a child sensor's (Q, D) segment (follow up by sending
the child a diagnose command for the same window and splicing its answer).
The recursion bottoms out at leaf sensors, which only own local segments.
"""

from __future__ import annotations

import bisect
from dataclasses import dataclass, field

import numpy as np

from msnmon import wire
from msnmon.errors import ConfigError, DimensionError, NotFound, Unreachable
from msnmon.faac import Observation, Segment
from msnmon.model import PcaModel

DEFAULT_TOP_K = 10


@dataclass(frozen=True)
class LocalSource:
    source_id: str
    raw_path: str


@dataclass(frozen=True)
class RemoteChild:
    sensor_id: str
    address: tuple[str, int]


@dataclass(frozen=True)
class DrtEntry:
    offset: int
    length: int
    target: LocalSource | RemoteChild


@dataclass(frozen=True)
class ContributionVector:
    values: np.ndarray
    variable_names: tuple[str, ...]

    def __post_init__(self):
        if len(self.values) != len(self.variable_names):
            raise DimensionError(
                f"{len(self.values)} contributions for {len(self.variable_names)} names"
            )

    def ranked(self, k: int = DEFAULT_TOP_K) -> list[tuple[str, float]]:
        order = np.argsort(-np.abs(self.values), kind="stable")
        return [
            (self.variable_names[i], float(self.values[i])) for i in order[:k]
        ]


@dataclass
class DiagnosisReport:
    sensor_id: str
    window_start: int
    top_variables: list[tuple[str, float]]
    origin: list[str]          # resolved target chain, e.g. ["BR", "R1", "R1:netflow"]
    raw_excerpt: list[str]     # raw lines of the terminal source for this window
    incomplete: bool = False
    sub_report: "DiagnosisReport | None" = None

    def terminal(self) -> "DiagnosisReport":
        node = self
        while node.sub_report is not None:
            node = node.sub_report
        return node


def omeda(model: PcaModel, x_scaled: np.ndarray,
          variable_names: tuple[str, ...] | None = None) -> ContributionVector:
    """Per-variable contribution of one scaled observation to its anomaly."""
    x = np.asarray(x_scaled, dtype=float)
    if x.shape[-1] != model.num_variables:
        raise DimensionError(
            f"vector has {x.shape[-1]} entries, model expects {model.num_variables}"
        )
    xhat = (x @ model.loadings) @ model.loadings.T
    values = 2.0 * x * xhat - xhat**2
    names = variable_names or model.variable_names or tuple(
        f"x{i}" for i in range(len(values))
    )
    return ContributionVector(values=values, variable_names=tuple(names))


def build_drt(
    layout: tuple[Segment, ...],
    local_paths: dict[str, str],
    children: dict[str, tuple[str, int]],
) -> list[DrtEntry]:
    """Derive the routing table from an observation layout; validate coverage."""
    entries: list[DrtEntry] = []
    for seg in layout:
        if seg.kind == "local":
            target: LocalSource | RemoteChild = LocalSource(
                source_id=seg.source_id,
                raw_path=local_paths.get(seg.source_id, ""),
            )
        elif seg.kind == "remote":
            if seg.source_id not in children:
                raise ConfigError(f"layout names unknown child {seg.source_id!r}")
            target = RemoteChild(
                sensor_id=seg.source_id, address=children[seg.source_id]
            )
        else:
            raise ConfigError(f"unknown segment kind {seg.kind!r}")
        entries.append(DrtEntry(offset=seg.offset, length=seg.length, target=target))
    validate_drt(entries)
    return entries


def validate_drt(entries: list[DrtEntry]) -> None:
    """The table must partition [0, e) with no gaps or overlaps."""
    expected = 0
    for entry in sorted(entries, key=lambda e: e.offset):
        if entry.offset != expected:
            raise ConfigError(
                f"routing table gap/overlap at index {expected} (entry at {entry.offset})"
            )
        if entry.length <= 0:
            raise ConfigError("routing table entry with nonpositive length")
        expected = entry.offset + entry.length
    if expected == 0:
        raise ConfigError("empty routing table")


def drt_resolve(entries: list[DrtEntry], variable_index: int):
    """Unique target owning an observation index."""
    ordered = sorted(entries, key=lambda e: e.offset)
    offsets = [e.offset for e in ordered]
    total = ordered[-1].offset + ordered[-1].length
    if not 0 <= variable_index < total:
        raise NotFound(f"index {variable_index} outside observation of length {total}")
    pos = bisect.bisect_right(offsets, variable_index) - 1
    return ordered[pos].target


def diagnose_window(
    sensor_id: str,
    observation: Observation,
    model: PcaModel,
    drt: list[DrtEntry],
    raw_lines: "callable",
    send_command: "callable | None" = None,
    top_k: int = DEFAULT_TOP_K,
) -> DiagnosisReport:
    """Run contribution analysis for one stored window and chase the origin.

    ``raw_lines(source_id, window_start)`` returns the retained raw lines of
    a local source; ``send_command(address, window_start)`` forwards the
    diagnose command to a child and returns its wire response.  Diagnosis is
    analyst-triggered: it runs whether or not the window was flagged.
    """
    from msnmon.model import apply_scaler

    x_scaled = apply_scaler(model.scaler, observation.values)
    contrib = omeda(model, x_scaled, observation.variable_names)
    top = contrib.ranked(top_k)
    report = DiagnosisReport(
        sensor_id=sensor_id,
        window_start=observation.window_start,
        top_variables=top,
        origin=[sensor_id],
        raw_excerpt=[],
    )
    if not top:
        return report

    top_index = int(np.argmax(np.abs(contrib.values)))
    target = drt_resolve(drt, top_index)
    if isinstance(target, LocalSource):
        report.origin.append(f"{sensor_id}:{target.source_id}")
        report.raw_excerpt = list(raw_lines(target.source_id, observation.window_start))
        return report

    # remote child: forward the command with the same window and splice
    if send_command is None:
        report.origin.append(target.sensor_id)
        report.incomplete = True
        return report
    try:
        resp = send_command(target.address, observation.window_start)
    except Unreachable:
        report.origin.append(target.sensor_id)
        report.incomplete = True
        return report
    if resp.status == "not_found":
        report.origin.append(target.sensor_id)
        report.incomplete = True
        return report
    report.origin.extend(resp.chain)
    report.raw_excerpt = list(resp.raw)
    report.incomplete = resp.status != "ok"
    # the response's top ranking belongs to the sensor that owns the source,
    # i.e. the last sensor hop of the returned chain
    sub_sensor = target.sensor_id
    for hop in resp.chain:
        if ":" not in hop:
            sub_sensor = hop
    report.sub_report = DiagnosisReport(
        sensor_id=sub_sensor,
        window_start=observation.window_start,
        top_variables=[(n, v) for n, v in resp.top],
        origin=list(resp.chain),
        raw_excerpt=list(resp.raw),
        incomplete=resp.status != "ok",
    )
    return report


def report_to_response(report: DiagnosisReport) -> wire.ResponseMessage:
    """Flatten a report into the wire response a child sends its parent.

    The chain already includes any deeper levels (the child spliced its own
    children before answering), so nesting collapses naturally; the top
    ranking sent upward is the terminal sensor's, the one owning the source.
    """
    status = "incomplete" if report.incomplete else "ok"
    return wire.ResponseMessage(
        sender=report.sensor_id,
        window=report.window_start,
        status=status,
        chain=tuple(report.origin),
        top=tuple(report.terminal().top_variables),
        raw=tuple(report.raw_excerpt),
    )
