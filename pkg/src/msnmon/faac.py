"""Feature-as-a-Counter: raw record streams -> per-window counter vectors.

Each monitored variable is a counter: the number of records in a time window
whose named field satisfies a predicate (exact value, integer range, regex,
or any).  Counter vectors from several local sources, plus the (Q, D) pairs
received from child sensors, are fused by concatenation into one observation
per window; a layout records which index range came from where so diagnosis
can route back to the origin.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field

import numpy as np

from msnmon.errors import ConfigError, ParseWarning


@dataclass(frozen=True)
class SourceSchema:
    """Whitespace-delimited text schema: ordered field names per line."""

    source_id: str
    fields: tuple[str, ...]

    def __post_init__(self):
        if len(set(self.fields)) != len(self.fields):
            raise ConfigError(f"duplicate field names in schema {self.source_id!r}")
        if not self.fields:
            raise ConfigError(f"schema {self.source_id!r} has no fields")


@dataclass(frozen=True)
class RawRecord:
    timestamp: int
    source_id: str
    fields: dict[str, str]


@dataclass(frozen=True)
class VariableDef:
    """One counter: count records whose ``field`` matches ``matcher``.

    Matcher forms:
      ("any",)                  every record
      ("equals", value)         exact string match
      ("range", lo, hi)         integer field in [lo, hi] inclusive
      ("regex", pattern)        full match of the pattern
    """

    name: str
    source_id: str
    field: str
    matcher: tuple

    def predicate(self):
        kind = self.matcher[0]
        if kind == "any":
            return lambda rec: True
        if kind == "equals":
            want = str(self.matcher[1])
            fld = self.field
            return lambda rec: rec.fields.get(fld) == want
        if kind == "range":
            lo, hi = int(self.matcher[1]), int(self.matcher[2])
            fld = self.field

            def in_range(rec):
                raw = rec.fields.get(fld)
                if raw is None:
                    return False
                try:
                    return lo <= int(raw) <= hi
                except ValueError:
                    return False

            return in_range
        if kind == "regex":
            pat = re.compile(self.matcher[1])
            fld = self.field
            return lambda rec: (
                rec.fields.get(fld) is not None
                and pat.fullmatch(rec.fields[fld]) is not None
            )
        raise ConfigError(f"unknown matcher kind {kind!r} in variable {self.name!r}")


@dataclass(frozen=True)
class WindowBatch:
    window_start: int
    window_len: int
    records: tuple[RawRecord, ...]

    def __post_init__(self):
        end = self.window_start + self.window_len
        for rec in self.records:
            if not self.window_start <= rec.timestamp < end:
                raise ConfigError(
                    f"record at {rec.timestamp} outside window "
                    f"[{self.window_start}, {end})"
                )


@dataclass(frozen=True)
class Segment:
    """One contiguous index span of an observation and where it came from."""

    segment_id: str
    source_id: str
    offset: int
    length: int
    kind: str  # "local" | "remote"


@dataclass(frozen=True)
class Observation:
    window_start: int
    values: np.ndarray
    layout: tuple[Segment, ...]
    variable_names: tuple[str, ...]
    substituted_children: tuple[str, ...] = ()  # children whose stats were stale

    def __post_init__(self):
        total = sum(seg.length for seg in self.layout)
        if total != len(self.values):
            raise ConfigError(
                f"layout covers {total} indices but observation has {len(self.values)}"
            )


def parse_line(line: str, schema: SourceSchema, ts_field: str = "ts") -> RawRecord:
    """Split one whitespace-delimited line into a record.

    Raises ParseWarning for anything that does not fit the schema; callers
    count and skip, the stream keeps flowing.
    """
    parts = line.split()
    if len(parts) != len(schema.fields):
        raise ParseWarning(
            f"{schema.source_id}: expected {len(schema.fields)} fields, "
            f"got {len(parts)}: {line[:80]!r}"
        )
    fields = dict(zip(schema.fields, parts))
    try:
        ts = int(float(fields[ts_field]))
    except (KeyError, ValueError) as exc:
        raise ParseWarning(f"{schema.source_id}: bad timestamp in {line[:80]!r}") from exc
    if ts <= 0:
        raise ParseWarning(f"{schema.source_id}: nonpositive timestamp {ts}")
    return RawRecord(timestamp=ts, source_id=schema.source_id, fields=fields)


def count_features(batch: WindowBatch, defs: list[VariableDef]) -> np.ndarray:
    """Counter vector for one window; a record may match several counters."""
    preds = [d.predicate() for d in defs]
    out = np.zeros(len(defs), dtype=float)
    for rec in batch.records:
        for i, pred in enumerate(preds):
            if pred(rec):
                out[i] += 1.0
    return out


def windowize(
    records: list[RawRecord], window_start: int, window_len: int, n_windows: int
) -> list[WindowBatch]:
    """Partition records into consecutive windows by timestamp.

    Pure and order-independent: shuffling the input changes nothing.  Records
    outside [window_start, window_start + n_windows * window_len) are dropped.
    """
    buckets: list[list[RawRecord]] = [[] for _ in range(n_windows)]
    for rec in records:
        idx = (rec.timestamp - window_start) // window_len
        if 0 <= idx < n_windows:
            buckets[int(idx)].append(rec)
    return [
        WindowBatch(
            window_start=window_start + i * window_len,
            window_len=window_len,
            records=tuple(sorted(bucket, key=lambda r: (r.timestamp, tuple(sorted(r.fields.items()))))),
        )
        for i, bucket in enumerate(buckets)
    ]


def fuse(
    window_start: int,
    local_vectors: list[tuple[str, np.ndarray, tuple[str, ...]]],
    remote_pairs: list[tuple[str, float, float]],
    substituted_children: tuple[str, ...] = (),
) -> Observation:
    """Concatenate per-source counters and per-child (Q, D) pairs.

    ``local_vectors`` is an ordered list of (source_id, counters, names);
    ``remote_pairs`` an ordered list of (child_id, q, d).  Locals come first,
    then one two-wide segment per child, so the fused length is always
    sum(z_i) + 2 * number_of_children.
    """
    chunks: list[np.ndarray] = []
    layout: list[Segment] = []
    names: list[str] = []
    offset = 0
    for source_id, vec, var_names in local_vectors:
        vec = np.asarray(vec, dtype=float)
        if len(var_names) != len(vec):
            raise ConfigError(
                f"source {source_id!r}: {len(var_names)} names for {len(vec)} counters"
            )
        layout.append(
            Segment(
                segment_id=f"local:{source_id}",
                source_id=source_id,
                offset=offset,
                length=len(vec),
                kind="local",
            )
        )
        names.extend(f"{source_id}.{n}" for n in var_names)
        chunks.append(vec)
        offset += len(vec)
    for child_id, q, d in remote_pairs:
        layout.append(
            Segment(
                segment_id=f"remote:{child_id}",
                source_id=child_id,
                offset=offset,
                length=2,
                kind="remote",
            )
        )
        names.extend((f"{child_id}.q", f"{child_id}.d"))
        chunks.append(np.array([q, d], dtype=float))
        offset += 2
    values = np.concatenate(chunks) if chunks else np.zeros(0)
    return Observation(
        window_start=window_start,
        values=values,
        layout=tuple(layout),
        variable_names=tuple(names),
        substituted_children=tuple(substituted_children),
    )
