"""Read-side HTTP service over in-process sensors.

Co-located with the root sensor; clients (dashboard, CLI) only ever see
statistics and diagnosis reports, never raw traffic, unless they explicitly
trigger a diagnosis.  All bodies are line-oriented JSON (one object per
line).  Endpoints:

    GET  /sensors                          topology: node lines then edge lines
    GET  /sensors/{id}/stats?from=&to=     stat rows, ascending window order
    GET  /sensors/{id}/stream              live push, one row object per line
    POST /sensors/{id}/diagnose            body {"window": <epoch>}, one report line
"""

from __future__ import annotations

import json
import logging
import queue
import threading
from dataclasses import dataclass
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer
from urllib.parse import parse_qs, urlparse

from msnmon.diagnosis import DiagnosisReport
from msnmon.engine import ObsRow, Sensor
from msnmon.errors import NotFound

logger = logging.getLogger(__name__)

STALE_AFTER_WINDOWS = 3


@dataclass
class _Registered:
    sensor: Sensor
    parent_id: str | None


def row_json(row: ObsRow) -> str:
    return json.dumps(
        {
            "window": row.window_start,
            "q": row.q,
            "d": row.d,
            "ucl_q": row.ucl_q,
            "ucl_d": row.ucl_d,
            "flags": row.flags,
        },
        separators=(",", ":"),
    )


def report_json(report: DiagnosisReport) -> dict:
    body = {
        "sensor": report.sensor_id,
        "window": report.window_start,
        "status": "incomplete" if report.incomplete else "ok",
        "chain": list(report.origin),
        "top": [{"name": n, "value": v} for n, v in report.top_variables],
        "raw": list(report.raw_excerpt),
    }
    body["sub"] = report_json(report.sub_report) if report.sub_report else None
    return body


class Gateway:
    """Registry, subscription hub, and HTTP front."""

    def __init__(self, host: str = "127.0.0.1", port: int = 0):
        self._registry: dict[str, _Registered] = {}
        self._subscribers: dict[str, list[queue.SimpleQueue]] = {}
        self._lock = threading.Lock()
        self._server = _build_server(self, host, port)
        self.address = self._server.server_address
        self._thread = threading.Thread(
            target=self._server.serve_forever, daemon=True,
            name=f"gateway:{self.address[1]}",
        )

    # ------------------------------------------------------------ registry

    def register(self, sensor: Sensor, parent_id: str | None = None) -> None:
        with self._lock:
            self._registry[sensor.config.sensor_id] = _Registered(sensor, parent_id)
            self._subscribers.setdefault(sensor.config.sensor_id, [])

    def notify_row(self, sensor_id: str, row: ObsRow) -> None:
        """Fan one fresh stat row out to that sensor's subscribers."""
        with self._lock:
            subs = list(self._subscribers.get(sensor_id, ()))
        for q in subs:
            q.put(row)

    def subscribe(self, sensor_id: str) -> queue.SimpleQueue:
        if sensor_id not in self._registry:
            raise NotFound(f"unknown sensor {sensor_id!r}")
        q: queue.SimpleQueue = queue.SimpleQueue()
        with self._lock:
            self._subscribers[sensor_id].append(q)
        return q

    def unsubscribe(self, sensor_id: str, q) -> None:
        with self._lock:
            subs = self._subscribers.get(sensor_id, [])
            if q in subs:
                subs.remove(q)

    # -------------------------------------------------------------- views

    def topology(self) -> dict:
        with self._lock:
            reg = dict(self._registry)
        latest = {}
        for sid, entry in reg.items():
            rows = entry.sensor.obs_log
            latest[sid] = rows[-1].window_start if rows else None
        frontier = max((w for w in latest.values() if w is not None), default=None)
        nodes = []
        edges = []
        for sid, entry in sorted(reg.items()):
            cfg = entry.sensor.config
            if latest[sid] is None:
                status = "calibrating"
            elif frontier is not None and \
                    frontier - latest[sid] >= STALE_AFTER_WINDOWS * cfg.window_len_s:
                status = "stale"
            else:
                status = "live"
            addr = cfg.listen_addr
            nodes.append({
                "kind": "node",
                "id": sid,
                "level": cfg.level,
                "address": f"{addr[0]}:{addr[1]}" if addr else None,
                "status": status,
                "last_window": latest[sid],
            })
            if entry.parent_id:
                edges.append({"kind": "edge", "child": sid, "parent": entry.parent_id})
        return {"nodes": nodes, "edges": edges}

    def stats(self, sensor_id: str, start: int | None, end: int | None) -> list[ObsRow]:
        entry = self._registry.get(sensor_id)
        if entry is None:
            raise NotFound(f"unknown sensor {sensor_id!r}")
        rows = list(entry.sensor.obs_log)
        if start is not None:
            rows = [r for r in rows if r.window_start >= start]
        if end is not None:
            rows = [r for r in rows if r.window_start <= end]
        return rows

    def diagnose(self, sensor_id: str, window: int) -> DiagnosisReport:
        entry = self._registry.get(sensor_id)
        if entry is None:
            raise NotFound(f"unknown sensor {sensor_id!r}")
        return entry.sensor.handle_diagnosis_command(window)

    # ------------------------------------------------------------ lifecycle

    def start(self) -> "Gateway":
        self._thread.start()
        return self

    def stop(self) -> None:
        self._server.shutdown()
        self._server.server_close()

    @property
    def url(self) -> str:
        return f"http://{self.address[0]}:{self.address[1]}"


def _build_server(gw: Gateway, host: str, port: int) -> ThreadingHTTPServer:
    class Handler(BaseHTTPRequestHandler):
        # close-delimited bodies keep the streaming endpoint trivial
        protocol_version = "HTTP/1.0"

        def log_message(self, fmt, *args):
            logger.debug("gateway: " + fmt, *args)

        def _send_lines(self, lines, code=200):
            payload = ("".join(line + "\n" for line in lines)).encode("utf-8")
            self.send_response(code)
            self.send_header("Content-Type", "application/x-ndjson")
            self.send_header("Content-Length", str(len(payload)))
            self.send_header("Access-Control-Allow-Origin", "*")
            self.end_headers()
            self.wfile.write(payload)

        def _send_error_line(self, code, message):
            self._send_lines([json.dumps({"error": message})], code=code)

        def do_GET(self):
            url = urlparse(self.path)
            parts = [p for p in url.path.split("/") if p]
            try:
                if parts == ["sensors"]:
                    topo = gw.topology()
                    self._send_lines(
                        [json.dumps(n, separators=(",", ":")) for n in topo["nodes"]]
                        + [json.dumps(e, separators=(",", ":")) for e in topo["edges"]]
                    )
                elif len(parts) == 3 and parts[0] == "sensors" and parts[2] == "stats":
                    qs = parse_qs(url.query)
                    start = int(qs["from"][0]) if qs.get("from") else None
                    end = int(qs["to"][0]) if qs.get("to") else None
                    rows = gw.stats(parts[1], start, end)
                    self._send_lines([row_json(r) for r in rows])
                elif len(parts) == 3 and parts[0] == "sensors" and parts[2] == "stream":
                    self._stream(parts[1])
                else:
                    self._send_error_line(404, f"no such endpoint {url.path}")
            except NotFound as exc:
                self._send_error_line(404, str(exc))
            except BrokenPipeError:
                pass
            except Exception as exc:  # pragma: no cover - defensive
                logger.exception("gateway error")
                self._send_error_line(500, str(exc))

        def _stream(self, sensor_id):
            q = gw.subscribe(sensor_id)
            try:
                self.send_response(200)
                self.send_header("Content-Type", "application/x-ndjson")
                self.send_header("Access-Control-Allow-Origin", "*")
                self.end_headers()
                while True:
                    row = q.get()
                    if row is None:  # shutdown sentinel
                        return
                    self.wfile.write((row_json(row) + "\n").encode("utf-8"))
                    self.wfile.flush()
            except (BrokenPipeError, ConnectionResetError, OSError):
                pass
            finally:
                gw.unsubscribe(sensor_id, q)

        def do_POST(self):
            url = urlparse(self.path)
            parts = [p for p in url.path.split("/") if p]
            try:
                if len(parts) == 3 and parts[0] == "sensors" and parts[2] == "diagnose":
                    length = int(self.headers.get("Content-Length", 0))
                    body = self.rfile.read(length).decode("utf-8")
                    try:
                        doc = json.loads(body.splitlines()[0]) if body.strip() else {}
                        window = int(doc["window"])
                    except (json.JSONDecodeError, KeyError, ValueError, IndexError):
                        self._send_error_line(400, "body must be one line: {\"window\": <epoch>}")
                        return
                    report = gw.diagnose(parts[1], window)
                    self._send_lines(
                        [json.dumps(report_json(report), separators=(",", ":"))]
                    )
                else:
                    self._send_error_line(404, f"no such endpoint {url.path}")
            except NotFound as exc:
                self._send_error_line(404, str(exc))
            except BrokenPipeError:
                pass
            except Exception as exc:  # pragma: no cover - defensive
                logger.exception("gateway error")
                self._send_error_line(500, str(exc))

        def do_OPTIONS(self):
            self.send_response(204)
            self.send_header("Access-Control-Allow-Origin", "*")
            self.send_header("Access-Control-Allow-Methods", "GET, POST, OPTIONS")
            self.send_header("Access-Control-Allow-Headers", "Content-Type")
            self.end_headers()

    class Server(ThreadingHTTPServer):
        daemon_threads = True
        allow_reuse_address = True

    return Server((host, port), Handler)
