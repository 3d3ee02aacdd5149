"""Acceptance suite: one test per criterion.

Each test reports ``criterion N: PASS|FAIL <detail>`` in the terminal summary
(see ``conftest.py``), independent of whether the test is expected to fail.
"""

import numpy as np
import pytest

from microgrid.cli import main
from microgrid.closed_loop import (
    Equilibrium,
    passivity_residual,
    solve_equilibrium,
    verify_propositions,
)
from microgrid.controller import cost_gradient
from microgrid.integrator import SolverSettings, consistent_state, simulate
from microgrid.runner import verify_command

EVENT_TIMES = (100.0, 200.0, 300.0, 400.0)


def sample_at(record, t):
    return int(np.argmin(np.abs(record.t - t)))


def test_criterion_01_frequency_restoration(shipped_run, acceptance):
    rec = shipped_run.record
    worst = [float(np.max(np.abs(rec.freq_dev[sample_at(rec, te + 90.0)]))) for te in EVENT_TIMES]
    ok = max(worst) <= 1e-4 and shipped_run.elapsed <= 120.0
    acceptance(1, ok, f"max |f-50| 90 s after each step = {max(worst):.2e} Hz (limit 1e-4); "
                      f"run time {shipped_run.elapsed:.1f} s (limit 120 s)")
    assert max(worst) <= 1e-4
    assert shipped_run.elapsed <= 120.0


@pytest.mark.xfail(strict=True, reason="transients leave the 0.01 Hz band within 2 s; "
                                        "see decisions ledger")
def test_criterion_02_settling_time_band(shipped_run, acceptance):
    ts = shipped_run.metrics["settling_times"]
    ok = all(10.0 <= t <= 80.0 for t in ts)
    acceptance(2, ok, "settling times " + ", ".join(f"{t:.1f}" for t in ts)
               + " s (band 10-80 s)")
    assert ok


def test_criterion_03_transient_band(shipped_run, acceptance):
    peak = shipped_run.metrics["max_abs_df"]
    ok = 0.01 < peak < 1.0
    acceptance(3, ok, f"max transient |f-50| = {peak:.4f} Hz (band 0.01-1.0)")
    assert ok


def test_criterion_04_power_sharing(shipped_run, acceptance):
    system = shipped_run.scenario.system
    post = shipped_run.equilibria[1:]
    assert len(post) == 4
    share = [float(np.ptp(eq.state.controller.pg / system.cost.weights)) for eq in post]
    mc = [float(np.ptp(cost_gradient(system.cost, eq.state.controller.pg))) for eq in post]
    ok = max(share) <= 1e-6 and max(mc) <= 1e-6
    acceptance(4, ok, f"post-step equilibria: sharing spread {max(share):.1e}, marginal-cost "
                      f"spread {max(mc):.1e} (limit 1e-6); simulated spread at t_end "
                      f"{shipped_run.metrics['final_sharing_spread']:.1e}")
    assert ok


def test_criterion_05_power_balance(shipped_run, shipped_run_lossless, acceptance):
    residuals = []
    for bundle in (shipped_run, shipped_run_lossless):
        system = bundle.scenario.system
        for eq in bundle.equilibria:
            pg = eq.state.controller.pg
            residuals.append(abs(np.sum(pg) - np.sum(eq.inputs.pl) - eq.losses))
            assert verify_propositions(system, eq).balance_residual <= 1e-9
    ok = max(residuals) <= 1e-9
    acceptance(5, ok, f"max |sum p_g - sum p_l - Phi| over {len(residuals)} equilibria = "
                      f"{max(residuals):.1e} (limit 1e-9)")
    assert ok


def test_criterion_06_structure_suite(shipped_cfg, acceptance):
    lossy = verify_command(shipped_cfg, seed=0, samples=100)
    lossless = verify_command(shipped_cfg.with_gamma(0.0), seed=0, samples=100)
    checks = {c.name: c for c in lossy.checks}
    ok = lossy.passed and lossless.passed
    acceptance(6, ok, "J skew {:.0e}, min eig R {:.1e}, grad fd {:.1e}, dual rows {:.1e} "
                      "(gamma=0 all rows {:.1e})".format(
                          checks["J_skew_symmetry"].value, checks["R_min_eigenvalue"].value,
                          checks["gradient_fd_rel_error"].value,
                          checks["dual_form_angle_momentum_rows"].value,
                          lossless.checks[-1].value))
    assert ok


def test_criterion_07_lossless_passivity(grid_lossless, acceptance):
    system = grid_lossless.system
    eq = solve_equilibrium(system, grid_lossless.pl, grid_lossless.ql)
    rng = np.random.default_rng(7)
    settings = SolverSettings(record_interval=0.05)
    worst, samples = np.inf, 0
    for _ in range(100):
        y = eq.state.differential()
        y = y + rng.uniform(-0.1, 0.1, len(y))
        st = type(eq.state).from_vectors(system, y, eq.state.plant.omega_l, eq.state.plant.Ul)
        st = consistent_state(system, st, eq.inputs)
        worst = min(worst, passivity_residual(system, st, eq))
        start = Equilibrium(st, eq.inputs, eq.lambda_bar, eq.losses)
        rec = simulate(system, start, (), 1.0, settings, monitor=False)
        for r in range(len(rec)):
            worst = min(worst, passivity_residual(system, rec.state(system, r), eq))
            samples += 1
    ok = worst >= -1e-10
    acceptance(7, ok, f"gamma=0: min shifted-passivity residual {worst:.3e} over {samples} "
                      "states on 100 perturbed trajectories (limit -1e-10)")
    assert ok


def test_criterion_08_integrator_order(grid, acceptance):
    system = grid.system
    eq = solve_equilibrium(system, grid.pl, grid.ql)
    rng = np.random.default_rng(8)
    st = eq.state.copy()
    st.plant.L = st.plant.L + rng.uniform(-0.05, 0.05, len(st.plant.L))
    st.controller.pg = st.controller.pg + rng.uniform(-0.05, 0.05, len(st.controller.pg))
    start = Equilibrium(st, eq.inputs, eq.lambda_bar, eq.losses)
    ys = []
    for dt in (0.002, 0.001, 0.0005):
        rec = simulate(system, start, (), 1.0, SolverSettings(dt=dt, record_interval=1.0),
                       monitor=False)
        ys.append(rec.y[-1])
    order = float(np.log2(np.linalg.norm(ys[0] - ys[1]) / np.linalg.norm(ys[1] - ys[2])))
    ok = order >= 3.5
    acceptance(8, ok, f"rk4_with_inner_solve observed order {order:.2f} on a 1 s window, "
                      "dt = 2/1/0.5 ms (limit 3.5)")
    assert ok


def test_criterion_09_determinism(tmp_path, acceptance):
    outs = [tmp_path / "a", tmp_path / "b"]
    codes = [main(["run", "--out", str(o), "-q"]) for o in outs]
    data = [(o / "trajectory.csv").read_bytes() for o in outs]
    ok = codes == [0, 0] and data[0] == data[1] and len(data[0]) > 0
    acceptance(9, ok, f"two CLI runs on the shipped scenario: exit codes {codes}, CSV "
                      f"{len(data[0])} bytes, identical = {data[0] == data[1]}")
    assert ok


def test_criterion_10_shifted_energy_decay(shipped_run, shipped_run_lossless, acceptance):
    def ratios(bundle):
        """End/peak Hbar per post-step window, against that window's equilibrium."""
        rec = bundle.record
        out, monotone = [], True
        for seg in range(1, len(rec.segment_starts)):
            hb = rec.Hbar[rec.segment == seg]
            out.append(float(hb[-1] / np.max(hb)))
            monotone &= bool(np.all(np.diff(hb) <= 1e-12 * np.max(hb)))
        return out, monotone

    lossless, monotone = ratios(shipped_run_lossless)
    lossy, _ = ratios(shipped_run)
    ok = max(lossless) <= 1e-6
    acceptance(10, ok, "gamma=0 end/peak Hbar per window "
               + ", ".join(f"{r:.1e}" for r in lossless)
               + f" (limit 1e-6, nonincreasing={monotone}); gamma=1 recorded "
               + ", ".join(f"{r:.1e}" for r in lossy))
    assert ok
    assert monotone
