import logging

import pytest
from hypothesis import HealthCheck, settings

from msnmon import simulate

settings.register_profile(
    "fast", max_examples=50, deadline=None,
    suppress_health_check=[HealthCheck.too_slow],
)
settings.load_profile("fast")

logging.getLogger("msnmon").setLevel(logging.ERROR)


def mini_spec(seed=1, attack_kind="port_scan", extra_children=0):
    """Two-level hierarchy small enough for per-test replays: 10-window
    calibrations, 25 minutes of warmup, one 5-minute attack, 35 minutes total."""
    nodes = [
        simulate.NodeSpec("BR", level=1, parent=None, subnet="10.0.0",
                          http_per_min=0.0, dns_per_min=0.0, inet_per_min=30.0),
        simulate.NodeSpec("R1", level=2, parent="BR", subnet="10.0.1",
                          http_per_min=45.0, dns_per_min=15.0),
    ]
    for i in range(extra_children):
        nodes.append(
            simulate.NodeSpec(f"X{i}", level=2, parent="BR", subnet=f"10.0.{2 + i}",
                              http_per_min=45.0, dns_per_min=15.0)
        )
    attacks = ()
    if attack_kind:
        attacks = (simulate.AttackSpec(attack_kind, "R1", start_s=1500, duration_s=300),)
    return simulate.ScenarioSpec(
        nodes=tuple(nodes), duration_s=2100, warmup_s=1500,
        attacks=attacks, seed=seed, modulation_period_s=600,
    )


MINI_OVERRIDES = ({"calib_windows": 10, "recalib_interval_s": 1200}, {})


@pytest.fixture(scope="session")
def default_replay():
    """One full default-scenario replay shared by integration/acceptance
    tests.  The driver stays alive so diagnosis can still reach the sensors."""
    import time

    from msnmon import replay

    spec = simulate.default_scenario()
    streams, manifest = simulate.generate(spec)
    driver = replay.ReplayDriver(streams, manifest)
    t0 = time.perf_counter()
    for w in driver.window_starts():
        driver.step(w)
    wall_s = time.perf_counter() - t0
    result = driver.result()
    yield spec, streams, manifest, driver, result, wall_s
    driver.stop()
