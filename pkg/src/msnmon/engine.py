"""Per-sensor lifecycle: windowing, calibration, monitoring, recalibration.

A sensor ingests raw lines from its local sources and (Q, D) statistics from
child sensors.  Window boundaries follow the record timestamps (data-clock),
so accelerated replay and live operation run the same code.  Life starts in
a calibrating phase that buffers the first ``calib_windows`` fused
observations as presumed normal-operation data; once the model is fitted the
sensor monitors every subsequent window, appends one stat row to its
observation log, pushes the pair to its parent, and periodically folds the
interval's non-anomalous windows back into the model through the EWMA
accumulators so the control limits track slow environment drift.
"""

from __future__ import annotations

import logging
import queue
import threading
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from msnmon import diagnosis, faac, model, wire
from msnmon.errors import ConfigError, NotFound, RankError

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class SourceConfig:
    source_id: str
    fields: tuple[str, ...]
    variables: tuple[faac.VariableDef, ...]
    path: str = ""  # raw file backing this source (tailed in live mode)


@dataclass(frozen=True)
class ChildConfig:
    sensor_id: str
    address: tuple[str, int] | None = None  # where diagnosis commands go


@dataclass(frozen=True)
class SensorConfig:
    sensor_id: str
    sources: tuple[SourceConfig, ...]
    children: tuple[ChildConfig, ...] = ()
    level: int = 1
    window_len_s: int = 60
    recalib_interval_s: int = 3600
    num_components: int = 2
    confidence: float = 0.9999
    ewma_lambda: float = 0.5
    calib_windows: int = 30
    limit_method: str = "theoretical"  # or "percentile"
    top_k: int = diagnosis.DEFAULT_TOP_K
    max_excerpt_lines: int = 200
    parent_addr: tuple[str, int] | None = None
    listen_addr: tuple[str, int] | None = None
    obs_log_path: str | None = None
    model_path: str | None = None

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if not self.sensor_id:
            raise ConfigError("sensor_id must be nonempty")
        if self.window_len_s <= 0:
            raise ConfigError("window_len_s must be positive")
        if self.recalib_interval_s < self.window_len_s:
            raise ConfigError("recalib_interval_s must be >= window_len_s")
        floor = max(self.num_components + 2, 10)
        if self.calib_windows < floor:
            raise ConfigError(
                f"calib_windows must be >= {floor} for {self.num_components} components"
            )
        if not 0.0 < self.confidence < 1.0:
            raise ConfigError("confidence must be in (0, 1)")
        if not 0.0 <= self.ewma_lambda <= 1.0:
            raise ConfigError("ewma_lambda must be in [0, 1]")
        if not self.sources:
            raise ConfigError("sensor needs at least one local source")
        ids = [s.source_id for s in self.sources]
        if len(set(ids)) != len(ids):
            raise ConfigError("duplicate source ids")
        kids = [c.sensor_id for c in self.children]
        if len(set(kids)) != len(kids):
            raise ConfigError("duplicate child ids")
        for src in self.sources:
            names = [v.name for v in src.variables]
            if len(set(names)) != len(names):
                raise ConfigError(f"duplicate variable names in source {src.source_id!r}")
            if not names:
                raise ConfigError(f"source {src.source_id!r} defines no variables")


@dataclass(frozen=True)
class ObsRow:
    """One persisted monitoring record; the ground truth behind the charts."""

    window_start: int
    q: float
    d: float
    ucl_q: float
    ucl_d: float
    flags: str  # subset of "QDM" or "-": Q/D limit exceeded, M child substituted

    def line(self) -> str:
        return (
            f"{self.window_start} {self.q!r} {self.d!r} "
            f"{self.ucl_q!r} {self.ucl_d!r} {self.flags}"
        )

    @property
    def anomalous(self) -> bool:
        return "Q" in self.flags or "D" in self.flags


def parse_obs_row(line: str) -> ObsRow:
    parts = line.split()
    if len(parts) != 6:
        raise ConfigError(f"bad obs-log line: {line!r}")
    return ObsRow(
        window_start=int(parts[0]),
        q=float(parts[1]),
        d=float(parts[2]),
        ucl_q=float(parts[3]),
        ucl_d=float(parts[4]),
        flags=parts[5],
    )


PHASE_CALIBRATING = "calibrating"
PHASE_MONITORING = "monitoring"


class Sensor:
    """One monitoring pipeline.  run_tick() is single-threaded; stat delivery
    and diagnosis handling may come from other threads."""

    def __init__(self, config: SensorConfig, send_data=None, send_command=None,
                 on_row=None):
        self.config = config
        self.send_data = send_data        # callable(DataMessage) -> bool
        self.send_command = send_command  # callable(addr, window) -> ResponseMessage
        self.on_row = on_row              # callable(sensor_id, ObsRow), for gateways
        self.phase = PHASE_CALIBRATING
        self.model: model.PcaModel | None = None
        self.limits: model.ControlLimits | None = None
        self.ewma: model.EwmaState | None = None

        self._schemas = {
            s.source_id: faac.SourceSchema(source_id=s.source_id, fields=s.fields)
            for s in config.sources
        }
        self._pending: dict[str, list[tuple[faac.RawRecord, str]]] = {
            s.source_id: [] for s in config.sources
        }
        self._window_start: int | None = None
        self._calib_buffer: list[faac.Observation] = []
        self._child_queue: queue.SimpleQueue = queue.SimpleQueue()
        self._child_stats: dict[tuple[str, int], tuple[float, float]] = {}
        self._last_child: dict[str, tuple[float, float]] = {}
        self._children_seen: set[str] = set()
        self._interval_obs: list[np.ndarray] = []
        self._last_recalib: int | None = None
        self.obs_log: list[ObsRow] = []
        self._obs_by_window: dict[int, faac.Observation] = {}
        self._raw_lines: dict[int, dict[str, list[str]]] = {}
        self._lock = threading.RLock()
        self._log_fh = None
        self._drt: list[diagnosis.DrtEntry] | None = None

        self.parse_warnings = 0
        self.late_drops = 0
        self.discarded_preparation_windows = 0
        self.data_pushes = 0
        self.recalibrations = 0

        if config.obs_log_path:
            path = Path(config.obs_log_path)
            path.parent.mkdir(parents=True, exist_ok=True)
            self._log_fh = open(path, "a", encoding="utf-8", buffering=1)

    # ------------------------------------------------------------- ingest

    def ingest_line(self, source_id: str, line: str) -> None:
        """Parse and admit one raw line; raises ParseWarning on bad input."""
        schema = self._schemas.get(source_id)
        if schema is None:
            raise ConfigError(f"unknown source {source_id!r}")
        rec = faac.parse_line(line, schema)
        self._admit(source_id, rec, line.rstrip("\n"))

    def _admit(self, source_id: str, rec: faac.RawRecord, line: str) -> None:
        with self._lock:
            if self._window_start is None:
                wl = self.config.window_len_s
                self._window_start = rec.timestamp // wl * wl
            if rec.timestamp < self._window_start:
                self.late_drops += 1
                return
            self._pending[source_id].append((rec, line))

    def ingest_lines(self, source_id: str, lines) -> None:
        """Bulk ingest; parse failures are counted and skipped."""
        schema = self._schemas.get(source_id)
        if schema is None:
            raise ConfigError(f"unknown source {source_id!r}")
        for line in lines:
            if not line.strip():
                continue
            try:
                rec = faac.parse_line(line, schema)
            except faac.ParseWarning:
                self.parse_warnings += 1
                continue
            self._admit(source_id, rec, line.rstrip("\n"))

    def deliver_child_stat(self, msg: wire.DataMessage) -> None:
        """Called by the listener thread for each child data message."""
        self._child_queue.put(msg)

    def has_child_stat(self, child_id: str, window_start: int) -> bool:
        """Whether a child's statistic for a window has arrived (barrier aid)."""
        with self._lock:
            self._drain_child_queue()
            return (child_id, window_start) in self._child_stats

    # -------------------------------------------------------------- ticks

    def has_due_window(self, now: int) -> bool:
        with self._lock:
            return (
                self._window_start is not None
                and self._window_start + self.config.window_len_s <= now
            )

    def run_tick(self, now: int) -> model.StatPair | None:
        """Process the oldest closed window, if any.

        Returns the emitted StatPair while monitoring, None while calibrating
        or when no window is due.  Call repeatedly to catch up after gaps.
        """
        with self._lock:
            if not self.has_due_window(now):
                return None
            wstart = self._window_start
            wlen = self.config.window_len_s
            self._window_start = wstart + wlen
            self._drain_child_queue()

            local_vectors = []
            lines_by_source: dict[str, list[str]] = {}
            for src in self.config.sources:
                batch_records, lines = self._take_window(src.source_id, wstart, wlen)
                batch = faac.WindowBatch(
                    window_start=wstart, window_len=wlen, records=batch_records
                )
                vec = faac.count_features(batch, list(src.variables))
                names = tuple(v.name for v in src.variables)
                local_vectors.append((src.source_id, vec, names))
                lines_by_source[src.source_id] = lines

            remote_pairs = []
            substituted = []
            for child in self.config.children:
                pair = self._child_stats.pop((child.sensor_id, wstart), None)
                if pair is None:
                    pair = self._last_child.get(child.sensor_id, (0.0, 0.0))
                    substituted.append(child.sensor_id)
                else:
                    self._last_child[child.sensor_id] = pair
                remote_pairs.append((child.sensor_id, pair[0], pair[1]))

            obs = faac.fuse(wstart, local_vectors, remote_pairs, tuple(substituted))
            if self._drt is None:
                self._drt = diagnosis.build_drt(
                    obs.layout,
                    {s.source_id: s.path for s in self.config.sources},
                    {c.sensor_id: c.address for c in self.config.children},
                )

            if self.phase == PHASE_CALIBRATING:
                self._calibrating_tick(obs)
                return None
            if self.model is None or self.limits is None:
                logger.error(
                    "%s: monitoring without a model; tick aborted", self.config.sensor_id
                )
                return None
            return self._monitoring_tick(obs, lines_by_source, wstart, wlen)

    def _drain_child_queue(self) -> None:
        while True:
            try:
                msg = self._child_queue.get_nowait()
            except queue.Empty:
                return
            known = {c.sensor_id for c in self.config.children}
            if msg.sender not in known:
                logger.warning(
                    "%s: stat from unconfigured sender %r ignored",
                    self.config.sensor_id, msg.sender,
                )
                continue
            self._children_seen.add(msg.sender)
            self._child_stats[(msg.sender, msg.window)] = (msg.q, msg.d)

    def _take_window(self, source_id: str, wstart: int, wlen: int):
        kept, records, lines = [], [], []
        for rec, line in self._pending[source_id]:
            if rec.timestamp < wstart:
                self.late_drops += 1
            elif rec.timestamp < wstart + wlen:
                records.append(rec)
                lines.append(line)
            else:
                kept.append((rec, line))
        self._pending[source_id] = kept
        records.sort(key=lambda r: r.timestamp)
        return tuple(records), lines

    def _calibrating_tick(self, obs: faac.Observation) -> None:
        # a parent's observation is meaningless until every child reports, so
        # the calibration buffer only starts filling once the hierarchy below
        # is online
        if self.config.children and self._children_seen != {
            c.sensor_id for c in self.config.children
        }:
            self.discarded_preparation_windows += 1
            return
        self._calib_buffer.append(obs)
        if len(self._calib_buffer) >= self.config.calib_windows:
            self.calibrate()

    def calibrate(self) -> None:
        """Fit scaler, model and limits from the buffered warmup windows."""
        buffer = self._calib_buffer
        if len(buffer) < self.config.calib_windows:
            raise ConfigError(
                f"calibration needs {self.config.calib_windows} windows, "
                f"have {len(buffer)}"
            )
        data = np.array([o.values for o in buffer])
        names = buffer[0].variable_names
        calib = model.CalibrationMatrix(data=data, variable_names=names)
        try:
            fitted = model.fit_pca(calib, self.config.num_components)
        except RankError as exc:
            raise RankError(
                f"{self.config.sensor_id}: {exc}; lower num_components or widen "
                f"the variable catalogue"
            ) from exc
        calib_q = np.empty(len(buffer))
        calib_d = np.empty(len(buffer))
        for i, row in enumerate(data):
            xs = model.apply_scaler(fitted.scaler, row)
            calib_q[i], calib_d[i] = model.statistics_for(fitted, xs)
        limits = model.control_limits(
            fitted, self.config.confidence, method=self.config.limit_method,
            calib_q=calib_q, calib_d=calib_d,
        )
        self.model = fitted
        self.limits = limits
        self.ewma = model.ewma_seed(data, self.config.ewma_lambda)
        self.phase = PHASE_MONITORING
        last = buffer[-1].window_start + self.config.window_len_s
        self._last_recalib = last
        self._calib_buffer = []
        self._persist_model()
        logger.info(
            "%s: calibrated on %d windows, phase=%s ucl_q=%.4g ucl_d=%.4g",
            self.config.sensor_id, len(buffer), self.phase,
            limits.ucl_q, limits.ucl_d,
        )

    def _monitoring_tick(self, obs, lines_by_source, wstart, wlen):
        xs = model.apply_scaler(self.model.scaler, obs.values)
        q, d = model.statistics_for(self.model, xs)
        flags = ""
        if q > self.limits.ucl_q:
            flags += "Q"
        if d > self.limits.ucl_d:
            flags += "D"
        if obs.substituted_children:
            flags += "M"
        row = ObsRow(
            window_start=wstart, q=q, d=d,
            ucl_q=self.limits.ucl_q, ucl_d=self.limits.ucl_d,
            flags=flags or "-",
        )
        self.obs_log.append(row)
        if self._log_fh is not None:
            self._log_fh.write(row.line() + "\n")
        self._obs_by_window[wstart] = obs
        cap = self.config.max_excerpt_lines
        self._raw_lines[wstart] = {
            sid: lines[:cap] for sid, lines in lines_by_source.items()
        }
        if not row.anomalous:
            self._interval_obs.append(obs.values)
        if self.on_row is not None:
            self.on_row(self.config.sensor_id, row)

        pair = model.StatPair(
            q=q, d=d, window_start=wstart, sensor_id=self.config.sensor_id
        )
        if self.send_data is not None:
            self.send_data(
                wire.DataMessage(
                    sender=self.config.sensor_id, window=wstart, q=q, d=d
                )
            )
            self.data_pushes += 1

        window_end = wstart + wlen
        if window_end - self._last_recalib >= self.config.recalib_interval_s:
            self.recalibrate(window_end)
        return pair

    def recalibrate(self, now: int) -> None:
        """Fold the interval's normal windows into the model via EWMA.

        Windows that exceeded a limit are excluded so attack traffic cannot
        poison the model; an interval with nothing usable leaves the model
        untouched.
        """
        batch = self._interval_obs
        self._interval_obs = []
        self._last_recalib = now
        if not batch:
            logger.info("%s: recalibration skipped, no clean windows", self.config.sensor_id)
            return
        self.ewma = model.ewma_update(self.ewma, np.array(batch))
        try:
            refit = model.refit_from_ewma(
                self.ewma, self.config.num_components, self.model.variable_names
            )
        except RankError as exc:
            logger.warning("%s: recalibration refit failed (%s); keeping model",
                           self.config.sensor_id, exc)
            return
        if self.config.limit_method == "percentile":
            qs, ds = [], []
            for row in batch:
                xs = model.apply_scaler(refit.scaler, row)
                q, d = model.statistics_for(refit, xs)
                qs.append(q)
                ds.append(d)
            limits = model.control_limits(
                refit, self.config.confidence, method="percentile",
                calib_q=np.array(qs), calib_d=np.array(ds),
            )
        else:
            limits = model.control_limits(refit, self.config.confidence)
        self.model = refit
        self.limits = limits
        self.recalibrations += 1
        self._persist_model()
        logger.info(
            "%s: recalibrated from %d windows, ucl_q=%.4g ucl_d=%.4g",
            self.config.sensor_id, len(batch), limits.ucl_q, limits.ucl_d,
        )

    def _persist_model(self) -> None:
        if self.config.model_path and self.model is not None:
            path = Path(self.config.model_path)
            path.parent.mkdir(parents=True, exist_ok=True)
            path.write_text(model.dump_model(self.model), encoding="utf-8")

    # ---------------------------------------------------------- diagnosis

    def raw_excerpt(self, source_id: str, window_start: int) -> list[str]:
        with self._lock:
            return list(self._raw_lines.get(window_start, {}).get(source_id, []))

    def observation(self, window_start: int) -> faac.Observation | None:
        """The fused observation behind a monitored window, if retained."""
        with self._lock:
            return self._obs_by_window.get(window_start)

    def monitored_windows(self) -> list[int]:
        with self._lock:
            return sorted(self._obs_by_window)

    def handle_diagnosis_command(self, window_start: int) -> diagnosis.DiagnosisReport:
        """Analyst-triggered drill-down for one monitored window."""
        with self._lock:
            obs = self._obs_by_window.get(window_start)
            mdl = self.model
            drt = self._drt
        if obs is None or mdl is None or drt is None:
            raise NotFound(
                f"{self.config.sensor_id}: no monitored window at {window_start}"
            )
        return diagnosis.diagnose_window(
            self.config.sensor_id, obs, mdl, drt,
            raw_lines=self.raw_excerpt,
            send_command=self.send_command,
            top_k=self.config.top_k,
        )

    def close(self) -> None:
        if self._log_fh is not None:
            self._log_fh.close()
            self._log_fh = None


class SensorNode:
    """A sensor wired to its transport: listener for child statistics and
    diagnosis commands, persistent uplink for its own statistic pushes.

    A sensor without a parent never opens an outbound connection; a sensor
    without a listen address accepts nothing.
    """

    def __init__(self, config: SensorConfig, on_row=None):
        from msnmon import comms

        self._comms = comms
        self.uplink = (
            comms.UpstreamLink(config.parent_addr) if config.parent_addr else None
        )
        send_data = self.uplink.send if self.uplink else None
        self.sensor = Sensor(
            config,
            send_data=send_data,
            send_command=self._send_command,
            on_row=on_row,
        )
        self.server = None
        if config.listen_addr is not None:
            host, port = config.listen_addr
            self.server = comms.SensorServer(
                host, port,
                on_data=self.sensor.deliver_child_stat,
                on_command=self._on_command,
            )

    @property
    def listen_address(self) -> tuple[str, int] | None:
        return self.server.address if self.server else None

    def connect_parent(self, addr: tuple[str, int]) -> None:
        """Late uplink wiring, for topologies built leaves-first."""
        if self.uplink is not None:
            self.uplink.close()
        self.uplink = self._comms.UpstreamLink(addr)
        self.sensor.send_data = self.uplink.send

    def _send_command(self, addr, window: int) -> wire.ResponseMessage:
        cmd = wire.CommandMessage(
            sender=self.sensor.config.sensor_id, window=window
        )
        return self._comms.request_response(addr, cmd)

    def _on_command(self, cmd: wire.CommandMessage) -> wire.ResponseMessage:
        if cmd.action != "diagnose":
            return wire.ResponseMessage(
                sender=self.sensor.config.sensor_id, window=cmd.window,
                status="not_found", chain=(), top=(), raw=(),
            )
        try:
            report = self.sensor.handle_diagnosis_command(cmd.window)
        except NotFound:
            return wire.ResponseMessage(
                sender=self.sensor.config.sensor_id, window=cmd.window,
                status="not_found", chain=(), top=(), raw=(),
            )
        return diagnosis.report_to_response(report)

    def start(self) -> "SensorNode":
        if self.server is not None:
            self.server.start()
        return self

    def stop(self) -> None:
        if self.server is not None:
            self.server.stop()
        if self.uplink is not None:
            self.uplink.close()
        self.sensor.close()
