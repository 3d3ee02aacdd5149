"""Fixed-step integration of the closed-loop index-1 DAE with load-step events."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import _kernels
from .closed_loop import (
    ClosedLoopState,
    ClosedLoopSystem,
    Equilibrium,
    Exogenous,
    hamiltonian,
    passivity_residual,
    shifted_hamiltonian,
    solve_equilibrium,
)
from .errors import AlgebraicSolveFailed, NonpositiveVoltage, StepRejected, ValidationError
from .plant import resistive_losses, voltages

METHODS = ("rk4_with_inner_solve", "implicit_trapezoid")


@dataclass(frozen=True)
class SolverSettings:
    dt: float = 0.002
    algebraic_tol: float = 1e-10
    newton_max_iter: int = 50
    method: str = "rk4_with_inner_solve"
    record_interval: float = 0.1

    def __post_init__(self):
        if not self.dt > 0:
            raise ValidationError("dt must be positive")
        if not self.algebraic_tol > 0:
            raise ValidationError("algebraic_tol must be positive")
        if self.newton_max_iter < 1:
            raise ValidationError("newton_max_iter must be >= 1")
        if self.method not in METHODS:
            raise ValidationError(f"method must be one of {METHODS}")
        if not self.record_interval > 0:
            raise ValidationError("record_interval must be positive")

    @property
    def decimation(self) -> int:
        return max(1, int(round(self.record_interval / self.dt)))


@dataclass(frozen=True)
class Event:
    time: float
    target: int
    delta_pl: float = 0.0
    delta_ql: float = 0.0

    def __post_init__(self):
        if not self.time >= 0:
            raise ValidationError("event time must be >= 0")


@dataclass(eq=False)
class TrajectoryRecord:
    """Decimated closed-loop trajectory.

    ``freq_dev`` is in Hz; ``Hbar`` and ``passivity`` are evaluated against
    the equilibrium of the load level active at each sample.
    """

    node_ids: list
    ctrl_ids: list
    t: np.ndarray
    freq_dev: np.ndarray
    pg: np.ndarray
    lambda_min: np.ndarray
    lambda_max: np.ndarray
    H: np.ndarray
    Hbar: np.ndarray
    Phi: np.ndarray
    passivity: np.ndarray
    y: np.ndarray
    algebraic: np.ndarray
    segment: np.ndarray
    segment_starts: list = field(default_factory=list)
    equilibria: list = field(default_factory=list)
    exogenous: list = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.t)

    @property
    def passivity_min(self) -> np.ndarray:
        if len(self.passivity) == 0:
            return self.passivity.copy()
        return np.minimum.accumulate(self.passivity)

    @property
    def frequency_hz(self) -> np.ndarray:
        return 50.0 + self.freq_dev

    @classmethod
    def empty(cls, node_ids=(), ctrl_ids=()) -> "TrajectoryRecord":
        n, k = len(node_ids), len(ctrl_ids)
        z = np.zeros(0)
        return cls(list(node_ids), list(ctrl_ids), z, np.zeros((0, n)), np.zeros((0, k)),
                   z, z, z, z, z, z, np.zeros((0, 0)), np.zeros((0, 0)), np.zeros(0, dtype=int))

    def state(self, system: ClosedLoopSystem, index: int) -> ClosedLoopState:
        nl = system.model.n_load
        a = self.algebraic[index]
        return ClosedLoopState.from_vectors(system, self.y[index], a[:nl], a[nl:])


def _raise_status(status: int, where: str) -> None:
    if status == _kernels.OK:
        return
    if status == _kernels.NONPOSITIVE_VOLTAGE:
        raise NonpositiveVoltage(f"{where}: voltage left the positive range")
    if status == _kernels.SINGULAR:
        raise AlgebraicSolveFailed(f"{where}: singular load Jacobian")
    raise AlgebraicSolveFailed(f"{where}: load equations did not converge")


def _omega_l(system: ClosedLoopSystem, y, ul, exo: Exogenous) -> np.ndarray:
    md = system.model
    n, k, nG = md.n, md.n_ctrl, md.n_gen
    U = np.ones(n)
    U[:nG] = y[n + k:n + k + nG]
    U[k:] = ul
    p, _, _, _ = _kernels.flows(md.edge_src, md.edge_dst, md.edge_b, md.edge_g,
                                md.b_self, md.g_self, np.ascontiguousarray(y[:n]), U)
    return (-exo.pl[k:] - p[k:]) / system.params.A[k:]


def _args(system: ClosedLoopSystem, exo: Exogenous, settings: SolverSettings):
    md = system.model
    return (system.pack(), md.n_gen, md.n_inv, np.asarray(exo.Uf, float),
            np.asarray(exo.pl, float), np.asarray(exo.ql, float),
            float(settings.algebraic_tol), int(settings.newton_max_iter))


def reduced_rhs(system: ClosedLoopSystem, y, ul, exo: Exogenous, settings: SolverSettings):
    """Differential rates with the algebraic states solved at ``y``."""
    dy, ul, _, status = _kernels.closed_loop_rhs(np.asarray(y, float), np.asarray(ul, float),
                                                 *_args(system, exo, settings))
    _raise_status(status, "rhs")
    return dy, ul


def consistent_state(system: ClosedLoopSystem, state: ClosedLoopState, exo: Exogenous,
                     settings: SolverSettings = SolverSettings()) -> ClosedLoopState:
    """Copy of ``state`` with the load frequencies and voltages re-solved."""
    y = state.differential()
    _, ul = reduced_rhs(system, y, state.plant.Ul, exo, settings)
    return ClosedLoopState.from_vectors(system, y, _omega_l(system, y, ul, exo), ul)


class _Trapezoid:
    """Implicit trapezoidal rule on the reduced ODE with a reused Jacobian."""

    def __init__(self, system, exo, settings):
        self.system, self.exo, self.settings = system, exo, settings
        self.jac = None

    def _jacobian(self, y, ul):
        f0, _ = reduced_rhs(self.system, y, ul, self.exo, self.settings)
        J = np.empty((len(y), len(y)))
        for c in range(len(y)):
            h = 1e-7 * max(1.0, abs(y[c]))
            yp = y.copy()
            yp[c] += h
            fp, _ = reduced_rhs(self.system, yp, ul, self.exo, self.settings)
            J[:, c] = (fp - f0) / h
        return J

    def step(self, y, ul, dt):
        f0, ul = reduced_rhs(self.system, y, ul, self.exo, self.settings)
        Y = y + dt * f0
        uY = ul
        for attempt in range(2):
            if self.jac is None or attempt == 1:
                self.jac = np.eye(len(y)) - 0.5 * dt * self._jacobian(y, ul)
            for _ in range(8):
                fY, uY = reduced_rhs(self.system, Y, uY, self.exo, self.settings)
                G = Y - y - 0.5 * dt * (f0 + fY)
                delta = np.linalg.solve(self.jac, G)
                Y = Y - delta
                if np.max(np.abs(delta)) <= 1e-12 * (1.0 + np.max(np.abs(Y))):
                    _, uY = reduced_rhs(self.system, Y, uY, self.exo, self.settings)
                    return Y, uY
        raise StepRejected("implicit trapezoid iteration did not converge")


def step(system: ClosedLoopSystem, state: ClosedLoopState, exo: Exogenous, dt: float,
         settings: SolverSettings = SolverSettings()) -> ClosedLoopState:
    """Advance one step; the returned state has consistent algebraic parts."""
    y = state.differential()
    ul = np.asarray(state.plant.Ul, float)
    if settings.method == "rk4_with_inner_solve":
        ynew, unew, status = _kernels.rk4_step(y, ul, float(dt), *_args(system, exo, settings))
        _raise_status(status, "rk4 step")
    else:
        ynew, unew = _Trapezoid(system, exo, settings).step(y, ul, dt)
    if not np.all(np.isfinite(ynew)):
        raise StepRejected("non-finite state after step")
    return ClosedLoopState.from_vectors(system, ynew, _omega_l(system, ynew, unew, exo), unew)


def _check_grid(value: float, dt: float, what: str) -> int:
    steps = value / dt
    nearest = int(round(steps))
    if abs(steps - nearest) > 1e-6 * max(1.0, abs(steps)):
        raise ValidationError(f"{what}={value} is not an integer multiple of dt={dt}")
    return nearest


def apply_event(model, exo: Exogenous, ev: Event) -> Exogenous:
    out = exo.copy()
    pos = model.position(ev.target)
    out.pl[pos] += ev.delta_pl
    if ev.delta_ql:
        k = model.n_ctrl
        if pos < k:
            raise ValidationError(f"reactive load step at non-load node {ev.target}")
        out.ql[pos - k] += ev.delta_ql
    return out


def simulate(system: ClosedLoopSystem, initial: Equilibrium, events=(), horizon: float = 0.0,
             settings: SolverSettings = SolverSettings(), monitor: bool = True) -> TrajectoryRecord:
    """Integrate from an equilibrium through a schedule of load steps.

    Events act exactly at their timestamps, which must lie on the step
    grid. With ``monitor`` the equilibrium of every load level is solved
    (excitation held at its initial value) and used for ``Hbar`` and the
    passivity residual.
    """
    md = system.model
    dt = settings.dt
    events = list(events)
    if any(b.time < a.time for a, b in zip(events, events[1:])):
        raise ValidationError("events must be sorted by time")
    if events and horizon < events[-1].time:
        raise ValidationError("horizon ends before the last event")
    total = _check_grid(horizon, dt, "horizon")
    event_steps = [_check_grid(ev.time, dt, "event time") for ev in events]
    decim = settings.decimation

    bounds = sorted(set([0, total] + event_steps))
    exo = initial.inputs.copy()
    state = initial.state.copy()
    y = state.differential()
    ul = np.asarray(state.plant.Ul, float).copy()

    ys, als, ts, segs = [y.copy()], [state.algebraic()], [0.0], [0]
    exos, eqs, starts = [], [], []
    target = initial
    for s_idx, (a, b) in enumerate(zip(bounds[:-1], bounds[1:])):
        for ev, es in zip(events, event_steps):
            if es == a:
                exo = apply_event(md, exo, ev)
        if a > 0 or 0 in event_steps:
            _, ul = reduced_rhs(system, y, ul, exo, settings)
        exos.append(exo.copy())
        starts.append(a * dt)
        if monitor:
            if a > 0 or 0 in event_steps:
                target = solve_equilibrium(system, exo.pl, exo.ql, Uf=exo.Uf, guess=target.state)
            eqs.append(target)
        nsteps = b - a
        if settings.method == "rk4_with_inner_solve":
            cap = nsteps // decim + 1
            out_y = np.zeros((cap, len(y)))
            out_ul = np.zeros((cap, md.n_load))
            y, ul, done, nrec, status = _kernels.rk4_segment(
                y, ul, nsteps, dt, decim, a, *_args(system, exo, settings), out_y, out_ul)
            _raise_status(status, f"t={(a + done) * dt:.3f}s")
            rec_steps = [g for g in range(a + 1, b + 1) if g % decim == 0]
            for r, g in enumerate(rec_steps[:nrec]):
                ys.append(out_y[r].copy())
                als.append(np.concatenate([_omega_l(system, out_y[r], out_ul[r], exo), out_ul[r]]))
                ts.append(g * dt)
                segs.append(s_idx)
        else:
            trap = _Trapezoid(system, exo, settings)
            for g in range(a + 1, b + 1):
                y, ul = trap.step(y, ul, dt)
                if g % decim == 0:
                    ys.append(y.copy())
                    als.append(np.concatenate([_omega_l(system, y, ul, exo), ul]))
                    ts.append(g * dt)
                    segs.append(s_idx)
        if not np.all(np.isfinite(y)):
            raise StepRejected("non-finite state during integration")
    if not exos:  # zero horizon: the record is the initial sample alone
        exos.append(exo.copy())
        starts.append(0.0)
        if monitor:
            eqs.append(initial)

    return _build_record(system, np.array(ts), np.array(ys), np.array(als), np.array(segs),
                         exos, eqs, starts, monitor)


def _build_record(system, t, ys, als, segs, exos, eqs, starts, monitor) -> TrajectoryRecord:
    md = system.model
    n, k, nl = md.n, md.n_ctrl, md.n_load
    N = len(t)
    freq = np.zeros((N, n))
    H = np.zeros(N)
    Hbar = np.full(N, np.nan)
    Phi = np.zeros(N)
    pas = np.full(N, np.nan)
    lam_lo = np.zeros(N)
    lam_hi = np.zeros(N)
    for r in range(N):
        st = ClosedLoopState.from_vectors(system, ys[r], als[r][:nl], als[r][nl:])
        freq[r] = np.concatenate([st.plant.L / system.params.M, st.plant.omega_l]) / (2 * np.pi)
        H[r] = hamiltonian(system, st)
        Phi[r] = resistive_losses(md, st.plant.theta, voltages(md, st.plant))
        lam_lo[r] = np.min(st.controller.lam)
        lam_hi[r] = np.max(st.controller.lam)
        if monitor:
            eq = eqs[segs[r]]
            Hbar[r] = shifted_hamiltonian(system, st, eq)
            pas[r] = passivity_residual(system, st, eq)
    off = n + k + md.n_gen
    return TrajectoryRecord(
        node_ids=md.node_ids, ctrl_ids=md.node_ids[:k], t=t, freq_dev=freq,
        pg=ys[:, off:off + k].copy(), lambda_min=lam_lo, lambda_max=lam_hi, H=H, Hbar=Hbar,
        Phi=Phi, passivity=pas, y=ys, algebraic=als, segment=segs, segment_starts=starts,
        equilibria=eqs, exogenous=exos)
