"""Plant and controller in closed loop: rates, structure, equilibria, passivity."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np

from .controller import (
    CommunicationGraph,
    ControllerGains,
    ControllerState,
    CostModel,
    Measurements,
    controller_hamiltonian,
    controller_rhs,
    cost_gradient,
)
from .errors import NoConvergence, PropositionViolated, SingularJacobian, SizeMismatch
from .network import NetworkModel, incidence
from .plant import (
    PlantInputs,
    PlantParams,
    PlantRates,
    PlantState,
    conductance_terms,
    edge_gradient,
    flow_jacobian,
    plant_gradient,
    plant_hamiltonian,
    plant_rhs,
    plant_structure,
    load_voltage_guess,
    power_flows,
    voltages,
)


@dataclass(frozen=True, eq=False)
class ClosedLoopSystem:
    model: NetworkModel
    params: PlantParams
    gains: ControllerGains
    cost: CostModel
    comm: CommunicationGraph

    def __post_init__(self):
        k, n = self.model.n_ctrl, self.model.n
        if len(self.cost.weights) != k or len(self.gains.tau_g) != k:
            raise SizeMismatch("weights and tau_g must cover every controllable node")
        if len(self.gains.tau_lambda) != n or len(self.gains.tau_nu) != self.comm.m:
            raise SizeMismatch("tau_lambda / tau_nu sizes do not match the graphs")

    @property
    def n_diff(self) -> int:
        m = self.model
        return m.n + 2 * m.n_ctrl + m.n_gen + m.n + self.comm.m

    def pack(self) -> tuple:
        """Parameter tuple consumed by the compiled kernels."""
        md, pr, g = self.model, self.params, self.gains
        return (
            md.edge_src, md.edge_dst, md.edge_b, md.edge_g, md.b_self, md.g_self,
            pr.M, pr.A, pr.xdd, pr.tauU,
            self.cost.weights, g.tau_g, g.tau_lambda, g.tau_nu,
            self.comm.src.astype(np.int64), self.comm.dst.astype(np.int64),
        )

    def with_model(self, model: NetworkModel) -> "ClosedLoopSystem":
        return ClosedLoopSystem(model, self.params, self.gains, self.cost, self.comm)


@dataclass(eq=False)
class Exogenous:
    Uf: np.ndarray
    pl: np.ndarray
    ql: np.ndarray

    def copy(self) -> "Exogenous":
        return Exogenous(np.array(self.Uf, float), np.array(self.pl, float), np.array(self.ql, float))


@dataclass(eq=False)
class ClosedLoopState:
    plant: PlantState
    controller: ControllerState

    def copy(self) -> "ClosedLoopState":
        return ClosedLoopState(self.plant.copy(), self.controller.copy())

    def differential(self) -> np.ndarray:
        p, c = self.plant, self.controller
        return np.concatenate([p.theta, p.L, p.Ug, c.pg, c.lam, c.nu])

    def algebraic(self) -> np.ndarray:
        return np.concatenate([self.plant.omega_l, self.plant.Ul])

    @classmethod
    def from_vectors(cls, system: ClosedLoopSystem, y, omega_l, Ul) -> "ClosedLoopState":
        md = system.model
        sizes = [md.n, md.n_ctrl, md.n_gen, md.n_ctrl, md.n, system.comm.m]
        th, L, Ug, pg, lam, nu = np.split(np.asarray(y, dtype=float), np.cumsum(sizes)[:-1])
        return cls(PlantState(th, L, Ug, np.array(omega_l, float), np.array(Ul, float)),
                   ControllerState(pg, lam, nu))


class ClosedRates(NamedTuple):
    plant: PlantRates
    controller: ControllerState

    def max_abs(self) -> float:
        parts = [self.plant.theta, self.plant.L, self.plant.Ug, self.plant.res_p,
                 self.plant.res_q, self.controller.pg, self.controller.lam, self.controller.nu]
        return float(max((np.max(np.abs(v)) for v in parts if len(v)), default=0.0))


@dataclass(eq=False)
class StructureMatrices:
    J: np.ndarray
    R: np.ndarray
    F: np.ndarray
    E: np.ndarray
    blocks: dict = field(default_factory=dict)


@dataclass(eq=False)
class Equilibrium:
    state: ClosedLoopState
    inputs: Exogenous
    lambda_bar: float
    losses: float
    iterations: int = 0
    residual: float = 0.0

    @property
    def plant_inputs(self) -> PlantInputs:
        return PlantInputs(self.state.controller.pg, self.inputs.Uf, self.inputs.pl, self.inputs.ql)


def _plant_inputs(state: ClosedLoopState, exo: Exogenous) -> PlantInputs:
    return PlantInputs(np.asarray(state.controller.pg, float), np.asarray(exo.Uf, float),
                       np.asarray(exo.pl, float), np.asarray(exo.ql, float))


def closed_rhs(system: ClosedLoopSystem, state: ClosedLoopState, exo: Exogenous) -> ClosedRates:
    """Closed-loop rates at a given state (algebraic states are not re-solved).

    The controller input is ``u_c = -omega`` at the controllable nodes.
    """
    md = system.model
    prates = plant_rhs(md, system.params, state.plant, _plant_inputs(state, exo))
    U = voltages(md, state.plant)
    phi, _ = conductance_terms(md, state.plant.theta, U)
    u_c = -prates.theta[: md.n_ctrl]
    crates = controller_rhs(state.controller, system.gains, system.cost, system.comm,
                            Measurements(u_c, np.asarray(exo.pl, float), phi))
    return ClosedRates(prates, crates)


def hamiltonian(system: ClosedLoopSystem, state: ClosedLoopState) -> float:
    return (plant_hamiltonian(system.model, system.params, state.plant)
            + controller_hamiltonian(state.controller, system.gains))


def _block_layout(system: ClosedLoopSystem):
    md = system.model
    names = ["pg", "lam", "nu", "edge", "L_G", "L_I", "Ug", "omega_l", "Ul"]
    sizes = [md.n_ctrl, md.n, system.comm.m, md.m, md.n_gen, md.n_inv, md.n_gen,
             md.n_load, md.n_load]
    off = np.concatenate([[0], np.cumsum(sizes)])
    return {nm: slice(int(off[a]), int(off[a + 1])) for a, nm in enumerate(names)}, int(off[-1])


def coordinates(system: ClosedLoopSystem, state: ClosedLoopState) -> np.ndarray:
    """State in port-Hamiltonian coordinates (scaled controller, edge angles)."""
    md, g = system.model, system.gains
    c, p = state.controller, state.plant
    inc = incidence(md)
    return np.concatenate([g.tau_g * c.pg, g.tau_lambda * c.lam, g.tau_nu * c.nu,
                           inc.matrix.T @ p.theta, p.L, p.Ug, p.omega_l, p.Ul])


def gradient(system: ClosedLoopSystem, state: ClosedLoopState) -> np.ndarray:
    c = state.controller
    return np.concatenate([c.pg, c.lam, c.nu,
                           edge_gradient(system.model, system.params, state.plant)])


def assemble_structure(system: ClosedLoopSystem, Ul=None) -> StructureMatrices:
    """Closed-loop ``J``, ``R``, ``F`` and descriptor mask ``E``.

    ``R`` contains ``diag(Ul)`` in its load-voltage block; ``Ul`` defaults
    to 1 p.u.
    """
    md = system.model
    blocks, N = _block_layout(system)
    k, n, nG = md.n_ctrl, md.n, md.n_gen
    if Ul is None:
        Ul = np.ones(md.n_load)
    ps = PlantState(np.zeros(n), np.zeros(k), np.ones(nG), np.zeros(md.n_load), np.asarray(Ul, float))
    Jp, Rp, _, Fp = plant_structure(md, system.params, ps)
    P = slice(blocks["edge"].start, N)

    J = np.zeros((N, N))
    J[P, P] = Jp
    I_hat = np.eye(k, n)
    Dc = system.comm.incidence
    J[blocks["pg"], blocks["lam"]] = I_hat
    J[blocks["lam"], blocks["pg"]] = -I_hat.T
    J[blocks["lam"], blocks["nu"]] = Dc
    J[blocks["nu"], blocks["lam"]] = -Dc.T
    I_tilde_G = np.eye(nG, k)
    I_tilde_I = np.eye(md.n_inv, k, k=nG)
    J[blocks["pg"], blocks["L_G"]] = -I_tilde_G.T
    J[blocks["pg"], blocks["L_I"]] = -I_tilde_I.T
    J[blocks["L_G"], blocks["pg"]] = I_tilde_G
    J[blocks["L_I"], blocks["pg"]] = I_tilde_I

    R = np.zeros((N, N))
    R[P, P] = Rp

    # plant input columns: [p_G, p_I, U_f, q_l, p_l]; closed-loop u = [U_f, q_l, p_l]
    nl = md.n_load
    F = np.zeros((N, nG + nl + n))
    F[P, :nG] = Fp[:, k:k + nG]
    F[P, nG:nG + nl] = Fp[:, k + nG:k + nG + nl]
    F[P, nG + nl:] = Fp[:, k + nG + nl:]
    F[blocks["lam"], nG + nl:] = np.eye(n)

    E = np.eye(N)
    for nm in ("omega_l", "Ul"):
        s = blocks[nm]
        E[s, s] = 0.0
    return StructureMatrices(J, R, F, E, blocks)


def dissipation(system: ClosedLoopSystem, state: ClosedLoopState) -> np.ndarray:
    """``R(x) grad H(x) + r(x)`` in port-Hamiltonian coordinates."""
    # R is block diagonal, so R grad H is formed blockwise
    md, pr = system.model, system.params
    ps = state.plant
    U = voltages(md, ps)
    phi, rho = conductance_terms(md, ps.theta, U, pr)
    g = plant_gradient(md, pr, ps)
    sg, si, sl = md.slices()
    nG = md.n_gen
    return np.concatenate([
        cost_gradient(system.cost, state.controller.pg),
        -phi,
        np.zeros(system.comm.m),
        np.zeros(md.m),
        pr.A[sg] * g.L[:nG] + phi[sg],
        pr.A[si] * g.L[nG:] + phi[si],
        pr.Rg * g.Ug + rho[sg],
        pr.A[sl] * g.omega_l + phi[sl],
        U[sl] * g.Ul + rho[sl],
    ])


def closed_phs_rhs(system: ClosedLoopSystem, state: ClosedLoopState, exo: Exogenous) -> np.ndarray:
    """``(J - R) grad H - r + F u`` in port-Hamiltonian coordinates."""
    st = assemble_structure(system, state.plant.Ul)
    u = np.concatenate([exo.Uf, exo.ql, exo.pl])
    return st.J @ gradient(system, state) - dissipation(system, state) + st.F @ u


def shifted_hamiltonian(system: ClosedLoopSystem, state: ClosedLoopState, eq: Equilibrium) -> float:
    x = coordinates(system, state)
    xb = coordinates(system, eq.state)
    return float(hamiltonian(system, state) - (x - xb) @ gradient(system, eq.state)
                 - hamiltonian(system, eq.state))


def passivity_residual(system: ClosedLoopSystem, state: ClosedLoopState, eq: Equilibrium) -> float:
    dg = gradient(system, state) - gradient(system, eq.state)
    dr = dissipation(system, state) - dissipation(system, eq.state)
    return float(dg @ dr)


class _Unknowns(NamedTuple):
    theta: np.ndarray
    Ul: np.ndarray
    lam: float
    Ug: np.ndarray


def solve_equilibrium(system: ClosedLoopSystem, pl, ql, Uf=None, guess: ClosedLoopState | None = None,
                      tol: float = 1e-10, max_iter: int = 50) -> Equilibrium:
    """Newton solve for the synchronous steady state at nominal frequency.

    Without ``Uf`` the generator voltages are held at 1 p.u. and the
    excitation voltages that sustain them are returned; with ``Uf`` the
    generator voltages are unknowns. The first node is the angle reference.
    """
    md, pr = system.model, system.params
    n, k, nG, nl = md.n, md.n_ctrl, md.n_gen, md.n_load
    pl = np.asarray(pl, dtype=float)
    ql = np.asarray(ql, dtype=float)
    if pl.shape != (n,) or ql.shape != (nl,):
        raise SizeMismatch("pl must cover all nodes and ql the load nodes")
    hold_uf = Uf is not None
    w = system.cost.weights
    sg, _, sl = md.slices()

    if guess is not None:
        th0 = guess.plant.theta - guess.plant.theta[0]
        z = [th0[1:], guess.plant.Ul, [np.mean(guess.controller.lam)]]
        if hold_uf:
            z.append(guess.plant.Ug)
    else:
        z = [np.zeros(n - 1), load_voltage_guess(md, np.zeros(n), np.ones(n), ql), [np.sum(pl) / np.sum(w)]]
        if hold_uf:
            z.append(np.ones(nG))
    z = np.concatenate([np.asarray(v, float) for v in z])
    i_th = slice(0, n - 1)
    i_ul = slice(n - 1, n - 1 + nl)
    i_lam = n - 1 + nl
    i_ug = slice(i_lam + 1, i_lam + 1 + (nG if hold_uf else 0))

    def unpack(z):
        theta = np.concatenate([[0.0], z[i_th]])
        Ug = z[i_ug] if hold_uf else np.ones(nG)
        return _Unknowns(theta, z[i_ul], z[i_lam], Ug)

    def volt(u):
        U = np.ones(n)
        U[sg] = u.Ug
        U[sl] = u.Ul
        return U

    def residual(z):
        u = unpack(z)
        U = volt(u)
        p, q = power_flows(md, u.theta, U)
        res_p = -pl - p
        res_p[:k] += w * u.lam
        parts = [res_p, -ql - q[sl]]
        if hold_uf:
            parts.append(Uf - u.Ug - pr.xdd / u.Ug * q[sg])
        return np.concatenate(parts)

    def jacobian(z):
        u = unpack(z)
        U = volt(u)
        _, q = power_flows(md, u.theta, U)
        dp_dth, dp_dU, dq_dth, dq_dU = flow_jacobian(md, u.theta, U)
        rows = n + nl + (nG if hold_uf else 0)
        Jm = np.zeros((rows, len(z)))
        Jm[:n, i_th] = -dp_dth[:, 1:]
        Jm[:n, i_ul] = -dp_dU[:, sl]
        Jm[:k, i_lam] = w
        Jm[n:n + nl, i_th] = -dq_dth[sl, 1:]
        Jm[n:n + nl, i_ul] = -dq_dU[sl, sl]
        if hold_uf:
            Jm[:n, i_ug] = -dp_dU[:, sg]
            Jm[n:n + nl, i_ug] = -dq_dU[sl, sg]
            s = pr.xdd / u.Ug
            Jm[n + nl:, i_th] = -s[:, None] * dq_dth[sg, 1:]
            Jm[n + nl:, i_ul] = -s[:, None] * dq_dU[sg, sl]
            Jm[n + nl:, i_ug] = (-np.eye(nG) - s[:, None] * dq_dU[sg, sg]
                                 + np.diag(pr.xdd * q[sg] / u.Ug**2))
        return Jm

    r = residual(z)
    rn = np.max(np.abs(r))
    it = 0
    singular = False
    while rn > tol:
        if it >= max_iter:
            if singular:
                raise SingularJacobian("equilibrium Jacobian is singular (islanding or infeasible loading)")
            raise NoConvergence(f"equilibrium not found after {it} Newton steps (|r|={rn:.3e})")
        Jm = jacobian(z)
        if not np.all(np.isfinite(Jm)):
            raise SingularJacobian("equilibrium Jacobian is not finite")
        # A flat start can sit exactly on a fold of the reactive-power map;
        # a minimum-norm step moves off it instead of giving up.
        singular = np.linalg.cond(Jm) > 1e13
        if singular:
            step = np.linalg.lstsq(Jm, r, rcond=None)[0]
        else:
            step = np.linalg.solve(Jm, r)
        alpha = 1.0
        while True:
            trial = z - alpha * step
            ut = unpack(trial)
            if np.all(ut.Ul > 0) and np.all(ut.Ug > 0):
                rt = residual(trial)
                rtn = np.max(np.abs(rt))
                if rtn < rn or alpha < 1e-6:
                    break
            alpha *= 0.5
            if alpha < 1e-12:
                if singular:
                    raise SingularJacobian("equilibrium Jacobian is singular (islanding or infeasible loading)")
                raise NoConvergence("equilibrium Newton step failed to reduce the residual")
        z, r, rn = trial, rt, rtn
        it += 1

    u = unpack(z)
    U = volt(u)
    p, q = power_flows(md, u.theta, U)
    phi, _ = conductance_terms(md, u.theta, U)
    if not hold_uf:
        Uf = u.Ug + pr.xdd / u.Ug * q[sg]
    pg = w * u.lam
    rhs = pl + phi
    rhs[:k] -= pg
    rhs = -rhs
    if system.comm.m:
        nu, *_ = np.linalg.lstsq(system.comm.incidence, rhs, rcond=None)
    else:
        nu = np.zeros(0)
    state = ClosedLoopState(
        PlantState(u.theta, np.zeros(k), np.array(u.Ug, float), np.zeros(nl), np.array(u.Ul, float)),
        ControllerState(pg, np.full(n, u.lam), nu),
    )
    exo = Exogenous(np.array(Uf, float), pl.copy(), ql.copy())
    eq = Equilibrium(state, exo, float(u.lam), float(np.sum(phi)), it)
    eq.residual = closed_rhs(system, state, exo).max_abs()
    return eq


@dataclass
class PropositionReport:
    max_frequency_deviation: float
    price_spread: float
    marginal_cost_spread: float
    sharing_spread: float
    balance_residual: float
    stationarity: float
    tol: float
    passed: bool

    def lines(self) -> list:
        return [f"{k}: {v}" for k, v in self.__dict__.items()]


def verify_propositions(system: ClosedLoopSystem, eq: Equilibrium, tol: float = 1e-9,
                        stationarity_tol: float = 1e-8, raise_on_fail: bool = True) -> PropositionReport:
    """Recheck nominal frequency, uniform prices, power sharing and the loss balance."""
    md = system.model
    st = eq.state
    omega = np.concatenate([st.plant.L / system.params.M, st.plant.omega_l])
    lam = st.controller.lam
    pg = st.controller.pg
    mc = cost_gradient(system.cost, pg)
    share = pg / system.cost.weights
    U = voltages(md, st.plant)
    phi, _ = conductance_terms(md, st.plant.theta, U)
    balance = float(np.sum(pg) - np.sum(eq.inputs.pl) - np.sum(phi))
    stat = closed_rhs(system, st, eq.inputs).max_abs()
    rep = PropositionReport(
        max_frequency_deviation=float(np.max(np.abs(omega))),
        price_spread=float(np.ptp(lam)),
        marginal_cost_spread=float(np.ptp(mc)) if len(mc) else 0.0,
        sharing_spread=float(np.ptp(share)) if len(share) else 0.0,
        balance_residual=abs(balance),
        stationarity=stat,
        tol=tol,
        passed=False,
    )
    rep.passed = (rep.max_frequency_deviation <= tol and rep.price_spread <= tol
                  and rep.marginal_cost_spread <= tol and rep.sharing_spread <= tol
                  and rep.balance_residual <= tol and stat <= stationarity_tol)
    if raise_on_fail and not rep.passed:
        raise PropositionViolated("equilibrium properties violated", rep.__dict__)
    return rep
