"""Scenario runs: equilibrium, simulation, steady-state and structure verification."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import NamedTuple

import numpy as np

from .closed_loop import (
    Equilibrium,
    assemble_structure,
    solve_equilibrium,
    verify_propositions,
)
from .errors import PropositionViolated, StructureViolated
from .integrator import TrajectoryRecord, simulate
from .network import incidence
from .plant import (
    PlantInputs,
    PlantState,
    phs_form_rhs,
    plant_gradient,
    plant_hamiltonian,
    plant_rhs,
    plant_structure,
    voltages,
)
from .report import emit_csv, emit_summary, emit_text, render_figures
from .scenario import Scenario, ScenarioConfig, build

log = logging.getLogger(__name__)

SETTLING_BAND_HZ = 0.01


# --------------------------------------------------------------------------- metrics

def settling_times(record: TrajectoryRecord, event_times, band: float = SETTLING_BAND_HZ,
                   horizon: float | None = None) -> list:
    """Per event: last time after the event with any ``|f_i - 50| > band``,
    measured from the event; 0 when the band is never left."""
    out = []
    ends = list(event_times[1:]) + [horizon if horizon is not None else np.inf]
    dev = np.max(np.abs(record.freq_dev), axis=1) if len(record) else np.zeros(0)
    for te, tn in zip(event_times, ends):
        win = (record.t > te) & (record.t <= tn)
        late = np.flatnonzero(win & (dev > band))
        out.append(float(record.t[late[-1]] - te) if len(late) else 0.0)
    return out


def equilibrium_items(scn: Scenario, eq: Equilibrium) -> list:
    md = scn.model
    st = eq.state
    U = voltages(md, st.plant)
    items = [("newton_iterations", eq.iterations), ("residual", eq.residual),
             ("lambda_bar", eq.lambda_bar), ("losses_Phi", eq.losses),
             ("total_generation", float(np.sum(st.controller.pg))),
             ("total_load", float(np.sum(eq.inputs.pl)))]
    for r, nid in enumerate(md.node_ids):
        items.append((f"theta_{nid}", st.plant.theta[r]))
        items.append((f"U_{nid}", U[r]))
    for r, nid in enumerate(md.node_ids[:md.n_ctrl]):
        items.append((f"pg_{nid}", st.controller.pg[r]))
    for r, nid in enumerate(md.node_ids[:md.n_gen]):
        items.append((f"Uf_{nid}", eq.inputs.Uf[r]))
    return items


# --------------------------------------------------------------------------- run

@dataclass(eq=False)
class ResultBundle:
    scenario: Scenario
    initial: Equilibrium
    final: Equilibrium
    equilibria: list
    reports: list
    record: TrajectoryRecord
    metrics: dict
    paths: dict = field(default_factory=dict)

    @property
    def passed(self) -> bool:
        return all(rep.passed for _, rep in self.reports)

    def summary_items(self) -> list:
        m = self.metrics
        items = [
            ("nodes", self.scenario.model.n),
            ("gamma", self.scenario.model.gamma),
            ("horizon_s", self.scenario.config.horizon),
            ("samples", len(self.record)),
            ("max_abs_frequency_deviation_hz", m["max_abs_df"]),
            ("final_max_abs_frequency_deviation_hz", m["final_abs_df"]),
            ("settling_band_hz", SETTLING_BAND_HZ),
        ]
        for te, ts in zip(m["event_times"], m["settling_times"]):
            items.append((f"settling_time_s@{te:g}", ts))
        for label, eq in zip(m["equilibrium_labels"], self.equilibria):
            items.append((f"lambda_bar@{label}", eq.lambda_bar))
            items.append((f"losses_Phi@{label}", eq.losses))
        for label, rep in self.reports:
            items.append((f"sharing_spread@{label}", rep.sharing_spread))
            items.append((f"balance_residual@{label}", rep.balance_residual))
        items.append(("final_sharing_spread_trajectory", m["final_sharing_spread"]))
        items.append(("min_passivity_residual", m["min_passivity"]))
        items.append(("propositions_passed", self.passed))
        return items

    def verification_items(self) -> list:
        items = []
        for label, rep in self.reports:
            items.extend((f"{label}.{k}", v) for k, v in rep.__dict__.items())
        items.append(("all_passed", self.passed))
        return items


def run(cfg: ScenarioConfig, out_dir=None, raise_on_fail: bool = True) -> ResultBundle:
    """Solve the base-load equilibrium, simulate the event schedule, recheck
    the steady-state properties at every load level and write the outputs."""
    scn = build(cfg)
    system = scn.system
    log.info("solving base-load equilibrium (%d nodes)", scn.model.n)
    eq0 = solve_equilibrium(system, scn.pl, scn.ql)
    log.info("simulating %.1f s with %d events", cfg.horizon, len(cfg.events))
    record = simulate(system, eq0, cfg.events, cfg.horizon, cfg.solver)

    event_times = [ev.time for ev in cfg.events]
    equilibria = list(record.equilibria) or [eq0]
    starts = list(record.segment_starts) or [0.0]
    if equilibria[0] is not eq0:
        equilibria.insert(0, eq0)
        starts.insert(0, 0.0)
    labels = ["initial"] + [f"t{t:g}" for t in starts[1:]]
    reports = [(lab, verify_propositions(system, eq, raise_on_fail=False))
               for lab, eq in zip(labels, equilibria)]
    last = record.pg[-1] / system.cost.weights if len(record) else np.zeros(1)
    metrics = {
        "max_abs_df": float(np.max(np.abs(record.freq_dev))) if len(record) else 0.0,
        "final_abs_df": float(np.max(np.abs(record.freq_dev[-1]))) if len(record) else 0.0,
        "event_times": event_times,
        "settling_times": settling_times(record, event_times, horizon=cfg.horizon),
        "equilibrium_labels": labels,
        "final_sharing_spread": float(np.ptp(last)),
        "min_passivity": float(np.nanmin(record.passivity)) if len(record) else float("nan"),
    }
    bundle = ResultBundle(scn, eq0, equilibria[-1], equilibria, reports, record, metrics)
    if out_dir is not None:
        write_outputs(bundle, out_dir)
    if raise_on_fail and not bundle.passed:
        failed = [lab for lab, rep in reports if not rep.passed]
        raise PropositionViolated(f"steady-state checks failed at {', '.join(failed)}",
                                  dict(reports))
    return bundle


def write_outputs(bundle: ResultBundle, out_dir) -> dict:
    out = bundle.scenario.config.outputs
    out_dir = Path(out_dir)
    paths = {
        "csv": emit_csv(bundle.record, out_dir / out.csv),
        "summary": emit_summary(bundle, out_dir / out.summary),
        "verification": emit_text(bundle.verification_items(), out_dir / out.verification),
        "equilibrium": emit_text(equilibrium_items(bundle.scenario, bundle.initial),
                                 out_dir / out.equilibrium),
    }
    if out.figures and len(bundle.record):
        paths["figures"] = render_figures(bundle.record, out_dir, bundle.scenario.model.n_ctrl)
    bundle.paths = paths
    return paths


def equilibrium_command(cfg: ScenarioConfig, out_dir=None,
                        raise_on_fail: bool = True) -> tuple:
    scn = build(cfg)
    eq = solve_equilibrium(scn.system, scn.pl, scn.ql)
    rep = verify_propositions(scn.system, eq, raise_on_fail=False)
    items = equilibrium_items(scn, eq) + [(f"check.{k}", v) for k, v in rep.__dict__.items()]
    if out_dir is not None:
        emit_text(items, Path(out_dir) / cfg.outputs.equilibrium)
    if raise_on_fail and not rep.passed:
        raise PropositionViolated("equilibrium checks failed", rep.__dict__)
    return eq, rep, items


# --------------------------------------------------------------------------- structure checks

class Check(NamedTuple):
    name: str
    value: float
    limit: float
    passed: bool


@dataclass
class StructureReport:
    checks: list

    @property
    def passed(self) -> bool:
        return all(c.passed for c in self.checks)

    def items(self) -> list:
        out = []
        for c in self.checks:
            out.append((f"{c.name}.value", c.value))
            out.append((f"{c.name}.limit", c.limit))
            out.append((f"{c.name}.passed", c.passed))
        out.append(("all_passed", self.passed))
        return out


def random_plant_state(scn: Scenario, rng: np.random.Generator) -> PlantState:
    md = scn.model
    M = scn.system.params.M
    return PlantState(
        theta=rng.uniform(-0.5, 0.5, md.n),
        L=M * rng.uniform(-1.0, 1.0, md.n_ctrl),
        Ug=rng.uniform(0.8, 1.2, md.n_gen),
        omega_l=rng.uniform(-1.0, 1.0, md.n_load),
        Ul=rng.uniform(0.8, 1.2, md.n_load),
    )


def random_inputs(scn: Scenario, rng: np.random.Generator) -> PlantInputs:
    md = scn.model
    return PlantInputs(rng.uniform(-1, 1, md.n_ctrl), rng.uniform(0.9, 1.1, md.n_gen),
                       rng.uniform(-1, 1, md.n), rng.uniform(-0.5, 0.5, md.n_load))


def gradient_error(scn: Scenario, state: PlantState, h: float = 1e-6) -> float:
    """Max relative deviation of the analytic plant gradient from central differences."""
    md, pr = scn.model, scn.system.params
    x = state.flat()
    g = plant_gradient(md, pr, state).flat()
    fd = np.empty_like(x)
    for c in range(len(x)):
        xp, xm = x.copy(), x.copy()
        xp[c] += h
        xm[c] -= h
        fd[c] = (plant_hamiltonian(md, pr, PlantState.from_flat(md, xp))
                 - plant_hamiltonian(md, pr, PlantState.from_flat(md, xm))) / (2 * h)
    return float(np.max(np.abs(fd - g)) / max(1.0, np.max(np.abs(g))))


def dual_form_error(scn: Scenario, state: PlantState, inputs: PlantInputs,
                    all_rows: bool) -> float:
    """Max scaled difference between the node equations and the port-Hamiltonian form."""
    md, pr = scn.model, scn.system.params
    a = plant_rhs(md, pr, state, inputs)
    b = phs_form_rhs(md, pr, state, inputs)
    pairs = [(a.theta, b.theta), (incidence(md).matrix.T @ a.theta, b.edge), (a.L, b.L)]
    if all_rows:
        pairs += [(a.Ug, b.Ug), (a.res_p, b.res_p), (a.res_q, b.res_q)]
    err = 0.0
    for u, v in pairs:
        scale = max(1.0, float(np.max(np.abs(u))) if len(u) else 1.0)
        if len(u):
            err = max(err, float(np.max(np.abs(u - v))) / scale)
    return err


def verify_command(cfg: ScenarioConfig, seed: int = 0, samples: int = 100,
                   raise_on_fail: bool = False) -> StructureReport:
    """Independent re-evaluation of the port-Hamiltonian structure."""
    scn = build(cfg)
    md, pr = scn.model, scn.system.params
    rng = np.random.default_rng(seed)
    checks = []

    st = assemble_structure(scn.system)
    skew = float(np.max(np.abs(st.J + st.J.T))) if st.J.size else 0.0
    checks.append(Check("J_skew_symmetry", skew, 0.0, skew == 0.0))

    states = [random_plant_state(scn, rng) for _ in range(samples)]
    r_min = np.inf
    for s in states[:10]:
        _, Rp, _, _ = plant_structure(md, pr, s)
        r_min = min(r_min, float(np.min(np.linalg.eigvalsh(0.5 * (Rp + Rp.T)))))
        Rc = assemble_structure(scn.system, s.Ul).R
        r_min = min(r_min, float(np.min(np.linalg.eigvalsh(0.5 * (Rc + Rc.T)))))
    checks.append(Check("R_min_eigenvalue", r_min, -1e-12, r_min >= -1e-12))

    g_err = max(gradient_error(scn, s) for s in states)
    checks.append(Check("gradient_fd_rel_error", g_err, 1e-6, g_err <= 1e-6))

    lossless = md.gamma == 0.0
    d_err = max(dual_form_error(scn, s, random_inputs(scn, rng), lossless) for s in states)
    name = "dual_form_all_rows" if lossless else "dual_form_angle_momentum_rows"
    checks.append(Check(name, d_err, 1e-12, d_err <= 1e-12))

    rep = StructureReport(checks)
    if raise_on_fail and not rep.passed:
        failed = ", ".join(c.name for c in checks if not c.passed)
        raise StructureViolated(f"structure checks failed: {failed}")
    return rep
