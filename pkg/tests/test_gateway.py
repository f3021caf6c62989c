import json
import threading
import time
import urllib.request

import pytest

from msnmon import gateway as gw_mod
from msnmon import replay, simulate
from conftest import MINI_OVERRIDES, mini_spec


def fetch_lines(url):
    with urllib.request.urlopen(url, timeout=10) as resp:
        body = resp.read().decode("utf-8")
    return [json.loads(line) for line in body.splitlines() if line]


def post_line(url, doc):
    req = urllib.request.Request(
        url, data=(json.dumps(doc) + "\n").encode(), method="POST",
        headers={"Content-Type": "application/x-ndjson"},
    )
    with urllib.request.urlopen(req, timeout=30) as resp:
        return [json.loads(line) for line in resp.read().decode().splitlines() if line]


@pytest.fixture(scope="module")
def served_replay():
    """A finished mini replay with its sensors still registered on a gateway."""
    gw = gw_mod.Gateway().start()
    spec = mini_spec(seed=11, attack_kind="port_scan", extra_children=2)
    streams, manifest = simulate.generate(spec)
    driver = replay.ReplayDriver(
        streams, manifest, overrides=MINI_OVERRIDES, gateway=gw
    )
    for w in driver.window_starts():
        driver.step(w)
    result = driver.result()
    yield gw, manifest, result, driver
    driver.stop()
    gw.stop()


def test_topology_nodes_and_edges(served_replay):
    gw, manifest, _, _ = served_replay
    lines = fetch_lines(f"{gw.url}/sensors")
    nodes = [l for l in lines if l["kind"] == "node"]
    edges = [l for l in lines if l["kind"] == "edge"]
    assert len(nodes) == 4
    assert len(edges) == 3
    assert all(e["parent"] == "BR" for e in edges)
    assert {n["status"] for n in nodes} == {"live"}


def test_stats_match_obs_log_exactly(served_replay):
    gw, manifest, result, _ = served_replay
    for sid, res in result.sensors.items():
        lines = fetch_lines(f"{gw.url}/sensors/{sid}/stats")
        assert len(lines) == len(res.rows)
        for got, row in zip(lines, res.rows):
            assert got["window"] == row.window_start
            assert got["q"] == row.q  # bit-exact float via JSON repr
            assert got["d"] == row.d
            assert got["ucl_q"] == row.ucl_q
            assert got["ucl_d"] == row.ucl_d
            assert got["flags"] == row.flags


def test_stats_range_filter_and_empty(served_replay):
    gw, manifest, result, _ = served_replay
    rows = result.sensors["R1"].rows
    mid = rows[len(rows) // 2].window_start
    lines = fetch_lines(f"{gw.url}/sensors/R1/stats?from={mid}&to={mid}")
    assert len(lines) == 1 and lines[0]["window"] == mid
    lines = fetch_lines(f"{gw.url}/sensors/R1/stats?from=1&to=2")
    assert lines == []


def test_unknown_sensor_404(served_replay):
    gw, _, _, _ = served_replay
    with pytest.raises(urllib.error.HTTPError) as err:
        fetch_lines(f"{gw.url}/sensors/nope/stats")
    assert err.value.code == 404


def test_diagnose_endpoint_drills_to_scan_source(served_replay):
    gw, manifest, result, _ = served_replay
    scan = next(a for a in manifest["attacks"] if a["kind"] == "port_scan")
    window = simulate.attack_windows(manifest, scan)[1]
    lines = post_line(f"{gw.url}/sensors/BR/diagnose", {"window": window})
    assert len(lines) == 1
    report = lines[0]
    assert report["status"] == "ok"
    assert report["chain"][0] == "BR"
    assert report["chain"][-1] == "R1:netflow"
    assert report["raw"]
    for raw_line in report["raw"]:
        ts = int(raw_line.split()[0])
        assert window <= ts < window + manifest["window_len_s"]
    sub = report["sub"]
    assert sub is not None and sub["sensor"] == "R1"
    top3 = [t["name"] for t in sub["top"][:3]]
    assert any("port" in n for n in top3)


def test_diagnose_unknown_window_404(served_replay):
    gw, _, _, _ = served_replay
    with pytest.raises(urllib.error.HTTPError) as err:
        post_line(f"{gw.url}/sensors/BR/diagnose", {"window": 17})
    assert err.value.code == 404


def test_diagnose_malformed_body_400(served_replay):
    gw, _, _, _ = served_replay
    req = urllib.request.Request(
        f"{gw.url}/sensors/BR/diagnose", data=b"not json\n", method="POST"
    )
    with pytest.raises(urllib.error.HTTPError) as err:
        urllib.request.urlopen(req, timeout=10)
    assert err.value.code == 400


def test_stream_pushes_once_per_window_no_duplicates():
    gw = gw_mod.Gateway().start()
    spec = mini_spec(seed=13, attack_kind=None)
    streams, manifest = simulate.generate(spec)
    driver = replay.ReplayDriver(
        streams, manifest, overrides=MINI_OVERRIDES, gateway=gw
    )
    try:
        starts = driver.window_starts()
        # warm up until R1 monitors
        for w in starts[:12]:
            driver.step(w)
        got: list[dict] = []

        def consume():
            req = urllib.request.urlopen(f"{gw.url}/sensors/R1/stream", timeout=30)
            for raw in req:
                got.append(json.loads(raw.decode()))
                if len(got) >= len(starts) - 12:
                    break

        t = threading.Thread(target=consume, daemon=True)
        t.start()
        time.sleep(0.2)  # subscriber in place; late subscriber sees only new rows
        for w in starts[12:]:
            driver.step(w)
        t.join(timeout=10)
        windows = [g["window"] for g in got]
        assert windows == starts[12:]  # in order, no gaps, no duplicates
    finally:
        driver.stop()
        gw.stop()


def test_killed_child_goes_stale():
    gw = gw_mod.Gateway().start()
    spec = mini_spec(seed=17, attack_kind=None, extra_children=1)
    streams, manifest = simulate.generate(spec)
    driver = replay.ReplayDriver(
        streams, manifest, overrides=MINI_OVERRIDES, gateway=gw
    )
    try:
        starts = driver.window_starts()
        for w in starts[:20]:
            driver.step(w)
        driver.kill("X0")
        for w in starts[20:24]:
            driver.step(w)
        topo = gw.topology()
        status = {n["id"]: n["status"] for n in topo["nodes"]}
        assert status["X0"] == "stale"
        assert status["R1"] == "live"
    finally:
        driver.stop()
        gw.stop()
