import time

import numpy as np
import pytest

from microgrid.runner import run
from microgrid.scenario import build, parse_config, shipped_config

# Line table exactly as published (node 16 has no incident line there).
PRINTED_LINES = [
    (1, 2, 1.27), (1, 14, 1.4), (2, 3, 1.4), (2, 14, 2.25), (2, 15, 2.05),
    (3, 4, 1.1), (4, 5, 1.0), (5, 6, 2.5), (6, 7, 3.0), (7, 8, 2.7),
    (7, 9, 1.5), (7, 17, 3.0), (8, 9, 3.5), (9, 10, 1.5), (9, 18, 2.1),
    (10, 11, 3.0), (11, 12, 1.2), (12, 13, 3.3), (13, 14, 1.25), (14, 15, 2.2),
]

SMALL_CFG = """
network:
  gamma: {gamma}
  nodes:
    - {{id: 1, kind: generator, B_ii: -2.5, A: 1.6, M: 5.2, Xd: 0.02, Xdp: 0.004, tauU: 6.45}}
    - {{id: 2, kind: inverter, B_ii: -3.0, A: 1.5, M: 4.0}}
    - {{id: 3, kind: load, B_ii: -2.5, A: 1.45}}
  lines:
    - [1, 2, 1.5]
    - [2, 3, 1.5]
    - [1, 3, 1.0]
controller:
  tau_c: 0.01
loads:
  - {{node: 3, pl: {pl}, ql: {ql}}}
events: {events}
solver:
  horizon: {horizon}
outputs:
  figures: false
"""


def small_config(gamma=1.0, pl=0.3, ql=0.1, events="[]", horizon=10.0):
    return parse_config(SMALL_CFG.format(gamma=gamma, pl=pl, ql=ql, events=events,
                                         horizon=horizon))


@pytest.fixture(scope="session")
def shipped_cfg():
    return shipped_config()


@pytest.fixture(scope="session")
def grid(shipped_cfg):
    return build(shipped_cfg)


@pytest.fixture(scope="session")
def grid_lossless(shipped_cfg):
    return build(shipped_cfg.with_gamma(0.0))


@pytest.fixture(scope="session")
def small():
    return build(small_config())


@pytest.fixture(scope="session")
def small_lossless():
    return build(small_config(gamma=0.0))


@pytest.fixture(scope="session")
def shipped_run(shipped_cfg, tmp_path_factory):
    out = tmp_path_factory.mktemp("grid18")
    t0 = time.perf_counter()
    bundle = run(shipped_cfg, out)
    bundle.elapsed = time.perf_counter() - t0
    return bundle


@pytest.fixture(scope="session")
def shipped_run_lossless(shipped_cfg, tmp_path_factory):
    out = tmp_path_factory.mktemp("grid18_lossless")
    return run(shipped_cfg.with_gamma(0.0), out)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# ---------------------------------------------------------------- acceptance reporting

ACCEPTANCE = {}


@pytest.fixture
def acceptance():
    def record(number, passed, detail):
        ACCEPTANCE[number] = (bool(passed), detail)
    return record


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(ACCEPTANCE):
        passed, detail = ACCEPTANCE[number]
        terminalreporter.write_line(f"criterion {number:2d}: {'PASS' if passed else 'FAIL'}  {detail}")
