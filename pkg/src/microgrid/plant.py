"""Microgrid plant: lossy power flows, energy function and node dynamics.

The integration path uses the compact node equations (:func:`plant_rhs`).
:func:`phs_form_rhs` evaluates the same dynamics through the explicit
port-Hamiltonian matrices and serves as an independent cross-check.

Reactive flow convention: ``q_i = -B_ii U_i^2 - sum_j B_ij U_i U_j cos +
sum_j G_ij U_i U_j sin``, which is the sign for which ``U_i dH/dU_i``
equals the susceptive part of ``q_i``.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping, NamedTuple

import numpy as np

from . import _kernels
from .errors import (
    NoConvergence,
    NonpositiveParameter,
    NonpositiveVoltage,
    SingularJacobian,
    SizeMismatch,
    ValidationError,
    ZeroFrequency,
)
from .network import NetworkModel, incidence

NEWTON_TOL = 1e-10
NEWTON_MAX_ITER = 50


@dataclass(frozen=True)
class GeneratorParams:
    M: float
    A: float
    Xd: float
    Xdp: float
    tauU: float

    def __post_init__(self):
        if not self.M > 0 or not self.tauU > 0:
            raise NonpositiveParameter(f"generator needs M > 0 and tauU > 0: {self}")
        if not self.Xd > self.Xdp > 0:
            raise ValidationError(f"generator needs Xd > Xdp > 0: {self}")


@dataclass(frozen=True)
class InverterParams:
    M: float
    A: float

    def __post_init__(self):
        if not self.M > 0:
            raise NonpositiveParameter(f"inverter needs M > 0: {self}")


@dataclass(frozen=True)
class InverterPhysical:
    C_DC: float
    G_DC: float
    eta: float
    omega_n: float = 2 * np.pi * 50.0


@dataclass(frozen=True)
class LoadParams:
    A: float


@dataclass(frozen=True, eq=False)
class PlantParams:
    """Per-node parameter arrays in network order.

    ``M`` covers generator and inverter nodes, ``A`` every node, and the
    reactances and time constants the generator nodes only.
    """

    M: np.ndarray
    A: np.ndarray
    Xd: np.ndarray
    Xdp: np.ndarray
    tauU: np.ndarray

    @property
    def xdd(self) -> np.ndarray:
        return self.Xd - self.Xdp

    @property
    def Rg(self) -> np.ndarray:
        return self.xdd / self.tauU

    @classmethod
    def from_tables(cls, model: NetworkModel, generators: Mapping, inverters: Mapping,
                    loads: Mapping) -> "PlantParams":
        M, A, Xd, Xdp, tau = [], [], [], [], []
        for nd in model.nodes:
            table = {"generator": generators, "inverter": inverters, "load": loads}[nd.kind.value]
            if nd.id not in table:
                raise ValidationError(f"no {nd.kind.value} parameters for node {nd.id}")
            par = table[nd.id]
            A.append(par.A)
            if nd.kind.value != "load":
                M.append(par.M)
            if nd.kind.value == "generator":
                Xd.append(par.Xd)
                Xdp.append(par.Xdp)
                tau.append(par.tauU)
        return cls(*(np.array(v, dtype=float) for v in (M, A, Xd, Xdp, tau)))


@dataclass(eq=False)
class PlantState:
    theta: np.ndarray
    L: np.ndarray
    Ug: np.ndarray
    omega_l: np.ndarray
    Ul: np.ndarray

    def copy(self) -> "PlantState":
        return PlantState(*(np.array(a, dtype=float) for a in self.as_tuple()))

    def as_tuple(self):
        return self.theta, self.L, self.Ug, self.omega_l, self.Ul

    def flat(self) -> np.ndarray:
        return np.concatenate(self.as_tuple())

    @classmethod
    def flat_start(cls, model: NetworkModel) -> "PlantState":
        return cls(np.zeros(model.n), np.zeros(model.n_ctrl), np.ones(model.n_gen),
                   np.zeros(model.n_load), np.ones(model.n_load))

    @classmethod
    def from_flat(cls, model: NetworkModel, x) -> "PlantState":
        sizes = [model.n, model.n_ctrl, model.n_gen, model.n_load, model.n_load]
        parts = np.split(np.asarray(x, dtype=float), np.cumsum(sizes)[:-1])
        return cls(*parts)


@dataclass(eq=False)
class PlantInputs:
    pg: np.ndarray
    Uf: np.ndarray
    pl: np.ndarray
    ql: np.ndarray

    def copy(self) -> "PlantInputs":
        return PlantInputs(*(np.array(a, dtype=float) for a in (self.pg, self.Uf, self.pl, self.ql)))

    def check(self, model: NetworkModel) -> None:
        want = {"pg": model.n_ctrl, "Uf": model.n_gen, "pl": model.n, "ql": model.n_load}
        for name, size in want.items():
            if np.shape(getattr(self, name)) != (size,):
                raise SizeMismatch(f"{name} must have shape ({size},)")


class PlantRates(NamedTuple):
    """Differential rates and algebraic residuals of the plant."""

    theta: np.ndarray
    L: np.ndarray
    Ug: np.ndarray
    res_p: np.ndarray
    res_q: np.ndarray
    edge: np.ndarray | None = None


class AlgebraicSolution(NamedTuple):
    omega_l: np.ndarray
    Ul: np.ndarray
    iterations: int


def voltages(model: NetworkModel, state: PlantState) -> np.ndarray:
    """Nodal voltage magnitudes; inverter terminals sit at 1 p.u."""
    U = np.ones(model.n)
    sg, _, sl = model.slices()
    U[sg] = state.Ug
    U[sl] = state.Ul
    return U


def frequencies(model: NetworkModel, params: PlantParams, state: PlantState) -> np.ndarray:
    return np.concatenate([state.L / params.M, state.omega_l])


def _check_voltage(U) -> None:
    U = np.asarray(U)
    if not np.all(U > 0.0):
        raise NonpositiveVoltage(f"voltage magnitudes must be positive, min={U.min()}")


def _flows(model: NetworkModel, theta, U):
    return _kernels.flows(model.edge_src, model.edge_dst, model.edge_b, model.edge_g,
                          model.b_self, model.g_self, np.asarray(theta, dtype=float),
                          np.asarray(U, dtype=float))


def power_flows(model: NetworkModel, theta, U):
    """Active and reactive sending-end injections ``(p, q)``."""
    _check_voltage(U)
    p, q, _, _ = _flows(model, theta, U)
    return p, q


def resistive_losses(model: NetworkModel, theta, U) -> float:
    theta = np.asarray(theta, dtype=float)
    U = np.asarray(U, dtype=float)
    i, j = model.edge_src, model.edge_dst
    return float(np.sum(model.g_self * U**2)
                 + 2.0 * np.sum(model.edge_g * U[i] * U[j] * np.cos(theta[i] - theta[j])))


def conductance_terms(model: NetworkModel, theta, U, params: PlantParams | None = None):
    """Per-node conductance parts ``(phi, rho)`` of the active and reactive flows.

    With ``params`` given, the generator rows of ``rho`` are scaled by
    ``(Xd - Xdp) / tauU`` as in the dissipation vector of the port-Hamiltonian
    form.
    """
    _, _, phi, rho = _flows(model, theta, U)
    if params is not None:
        rho = rho.copy()
        rho[: model.n_gen] *= params.Rg
    return phi, rho


def flow_jacobian(model: NetworkModel, theta, U):
    """Dense partial derivatives ``(dp/dtheta, dp/dU, dq/dtheta, dq/dU)``."""
    theta = np.asarray(theta, dtype=float)
    U = np.asarray(U, dtype=float)
    B = model.susceptance_matrix()
    G = model.conductance_matrix()
    Bd, Gd = np.diag(B).copy(), np.diag(G).copy()
    np.fill_diagonal(B, 0.0)
    np.fill_diagonal(G, 0.0)
    dth = theta[:, None] - theta[None, :]
    S, C = np.sin(dth), np.cos(dth)
    UU = np.outer(U, U)

    a = B * S + G * C       # p kernel
    b = -B * C + G * S      # q kernel
    dp_dth = UU * (-B * C + G * S)
    np.fill_diagonal(dp_dth, np.sum(UU * (B * C - G * S), axis=1))
    dq_dth = UU * (-B * S - G * C)
    np.fill_diagonal(dq_dth, np.sum(UU * (B * S + G * C), axis=1))
    dp_dU = U[:, None] * a
    np.fill_diagonal(dp_dU, a @ U + 2.0 * Gd * U)
    dq_dU = U[:, None] * b
    np.fill_diagonal(dq_dU, b @ U - 2.0 * Bd * U)
    return dp_dth, dp_dU, dq_dth, dq_dU


def plant_hamiltonian(model: NetworkModel, params: PlantParams, state: PlantState) -> float:
    U = voltages(model, state)
    th = np.asarray(state.theta, dtype=float)
    i, j = model.edge_src, model.edge_dst
    nG = model.n_gen
    kinetic = 0.5 * np.sum(state.L**2 / params.M)
    field_energy = 0.5 * np.sum(U[:nG] ** 2 / params.xdd)
    magnetic = (-0.5 * np.sum(model.b_self * U**2)
                - np.sum(model.edge_b * U[i] * U[j] * np.cos(th[i] - th[j])))
    load = 0.5 * np.sum(np.asarray(state.omega_l) ** 2)
    return float(kinetic + field_energy + magnetic + load)


def _line_gradients(model: NetworkModel, theta, U):
    """Gradients of the line energy w.r.t. nodal angles and voltages."""
    B = model.susceptance_matrix()
    Bd = np.diag(B).copy()
    np.fill_diagonal(B, 0.0)
    dth = theta[:, None] - theta[None, :]
    d_theta = U * ((B * np.sin(dth)) @ U)
    d_U = -Bd * U - (B * np.cos(dth)) @ U
    return d_theta, d_U


def plant_gradient(model: NetworkModel, params: PlantParams, state: PlantState) -> PlantState:
    """Analytic gradient of :func:`plant_hamiltonian`, shaped like the state.

    The ``Ug``/``Ul`` entries are partial derivatives at fixed inverter
    voltages, which are not states.
    """
    U = voltages(model, state)
    d_theta, d_U = _line_gradients(model, np.asarray(state.theta, dtype=float), U)
    sg, _, sl = model.slices()
    return PlantState(
        theta=d_theta,
        L=np.asarray(state.L) / params.M,
        Ug=U[sg] / params.xdd + d_U[sg],
        omega_l=np.array(state.omega_l, dtype=float),
        Ul=d_U[sl],
    )


def plant_rhs(model: NetworkModel, params: PlantParams, state: PlantState,
              inputs: PlantInputs) -> PlantRates:
    """Compact node equations: angle, momentum and voltage rates plus load residuals."""
    U = voltages(model, state)
    _check_voltage(U)
    p, q, _, _ = _flows(model, state.theta, U)
    k, nG = model.n_ctrl, model.n_gen
    omega = frequencies(model, params, state)
    A = params.A
    pl = np.asarray(inputs.pl, dtype=float)
    Ug = np.asarray(state.Ug, dtype=float)
    return PlantRates(
        theta=omega,
        L=-A[:k] * omega[:k] + inputs.pg - pl[:k] - p[:k],
        Ug=(inputs.Uf - Ug - params.xdd / Ug * q[:nG]) / params.tauU,
        res_p=-A[k:] * omega[k:] - pl[k:] - p[k:],
        res_q=-np.asarray(inputs.ql, dtype=float) - q[k:],
    )


def load_voltage_guess(model: NetworkModel, theta, U, ql) -> np.ndarray:
    """High-voltage root of each load's lossless reactive balance with its
    neighbors held at ``U``. A start off the fold ``dq_i/dU_i = 0``, which a
    unit voltage hits when a load's self-susceptance is about half its line
    susceptance sum."""
    first = model.n_ctrl
    theta = np.asarray(theta, dtype=float)
    U = np.asarray(U, dtype=float)
    i, j = model.edge_src, model.edge_dst
    c = model.edge_b * np.cos(theta[i] - theta[j])
    s = np.zeros(model.n)
    np.add.at(s, i, c * U[j])
    np.add.at(s, j, c * U[i])
    a = -model.b_self[first:]
    s = s[first:]
    disc = np.maximum(s**2 - 4.0 * a * np.asarray(ql, dtype=float), 0.0)
    with np.errstate(divide="ignore", invalid="ignore"):
        u = (s + np.sqrt(disc)) / (2.0 * a)
    return np.where((a > 0) & (u > 0), u, 1.0)


def solve_algebraic(model: NetworkModel, params: PlantParams, state: PlantState,
                    inputs: PlantInputs, guess=None, tol: float = NEWTON_TOL,
                    max_iter: int = NEWTON_MAX_ITER) -> AlgebraicSolution:
    """Damped Newton solve of the load equations for ``(omega_l, Ul)``.

    Only the differential part of ``state`` is read; ``guess`` defaults to
    the algebraic part of ``state``.
    """
    nl = model.n_load
    if nl == 0:
        return AlgebraicSolution(np.zeros(0), np.zeros(0), 0)
    k = model.n_ctrl
    if guess is None:
        guess = (state.omega_l, state.Ul)
    x = np.concatenate([np.asarray(guess[0], float), np.asarray(guess[1], float)])
    work = state.copy()

    def residual(x):
        work.omega_l, work.Ul = x[:nl], x[nl:]
        r = plant_rhs(model, params, work, inputs)
        return np.concatenate([r.res_p, r.res_q])

    r = residual(x)
    rn = np.max(np.abs(r))
    it = 0
    restarted = False
    Al = params.A[k:]
    while rn > tol:
        if it >= max_iter:
            raise NoConvergence(f"load equations not solved after {it} iterations (|r|={rn:.3e})")
        U = voltages(model, work)
        _, dp_dU, _, dq_dU = flow_jacobian(model, work.theta, U)
        J = np.zeros((2 * nl, 2 * nl))
        J[:nl, :nl] = -np.diag(Al)
        J[:nl, nl:] = -dp_dU[k:, k:]
        J[nl:, nl:] = -dq_dU[k:, k:]
        if not np.all(np.isfinite(J)) or np.linalg.cond(J) > 1e14:
            if it == 0 and not restarted:
                restarted = True
                x[nl:] = load_voltage_guess(model, work.theta, U, inputs.ql)
                r = residual(x)
                rn = np.max(np.abs(r))
                continue
            raise SingularJacobian("load Jacobian is singular (zero load damping or voltage collapse)")
        step = np.linalg.solve(J, r)
        alpha = 1.0
        while True:
            trial = x - alpha * step
            if np.all(trial[nl:] > 0.0):
                rt = residual(trial)
                rtn = np.max(np.abs(rt))
                if rtn < rn or alpha < 1e-8:
                    break
            alpha *= 0.5
            if alpha < 1e-10:
                raise NoConvergence("damped Newton step failed to reduce the load residual")
        x, r, rn = trial, rt, rtn
        it += 1
    return AlgebraicSolution(x[:nl].copy(), x[nl:].copy(), it)


def plant_structure(model: NetworkModel, params: PlantParams, state: PlantState):
    """Port-Hamiltonian matrices ``(J, R, r, F)`` of the plant.

    Coordinates are ``[edge angles, L_G, L_I, U_g, omega_l, U_l]``; the input
    vector is ``[p_G, p_I, U_f, q_l, p_l]``.
    """
    inc = incidence(model)
    n, m = model.n, model.m
    nG, nI, nl = model.n_gen, model.n_inv, model.n_load
    sizes = [m, nG, nI, nG, nl, nl]
    off = np.concatenate([[0], np.cumsum(sizes)])
    N = off[-1]
    blk = [slice(off[a], off[a + 1]) for a in range(6)]

    J = np.zeros((N, N))
    for b_idx, Dk in ((1, inc.gen), (2, inc.inv), (4, inc.load)):
        J[blk[0], blk[b_idx]] = Dk.T
        J[blk[b_idx], blk[0]] = -Dk

    U = voltages(model, state)
    R = np.zeros((N, N))
    sg, si, sl = model.slices()
    R[blk[1], blk[1]] = np.diag(params.A[sg])
    R[blk[2], blk[2]] = np.diag(params.A[si])
    R[blk[3], blk[3]] = np.diag(params.Rg)
    R[blk[4], blk[4]] = np.diag(params.A[sl])
    R[blk[5], blk[5]] = np.diag(U[sl])

    phi, rho = conductance_terms(model, state.theta, U, params)
    r = np.zeros(N)
    r[blk[1]] = phi[sg]
    r[blk[2]] = phi[si]
    r[blk[3]] = rho[sg]
    r[blk[4]] = phi[sl]
    r[blk[5]] = rho[sl]

    ucols = [nG, nI, nG, nl, n]
    uoff = np.concatenate([[0], np.cumsum(ucols)])
    ublk = [slice(uoff[a], uoff[a + 1]) for a in range(5)]
    F = np.zeros((N, uoff[-1]))
    eye_n = np.eye(n)
    F[blk[1], ublk[0]] = np.eye(nG)
    F[blk[1], ublk[4]] = -eye_n[sg]
    F[blk[2], ublk[1]] = np.eye(nI)
    F[blk[2], ublk[4]] = -eye_n[si]
    F[blk[3], ublk[2]] = np.diag(1.0 / params.tauU)
    F[blk[4], ublk[4]] = -eye_n[sl]
    F[blk[5], ublk[3]] = -np.eye(nl)
    return J, R, r, F


def edge_gradient(model: NetworkModel, params: PlantParams, state: PlantState) -> np.ndarray:
    """Plant gradient in ``[edge angles, L_G, L_I, U_g, omega_l, U_l]`` coordinates."""
    U = voltages(model, state)
    th = np.asarray(state.theta, dtype=float)
    i, j = model.edge_src, model.edge_dst
    d_edge = model.edge_b * U[i] * U[j] * np.sin(th[i] - th[j])
    g = plant_gradient(model, params, state)
    nG = model.n_gen
    return np.concatenate([d_edge, g.L[:nG], g.L[nG:], g.Ug, g.omega_l, g.Ul])


def phs_form_rhs(model: NetworkModel, params: PlantParams, state: PlantState,
                 inputs: PlantInputs) -> PlantRates:
    """Plant rates from ``(J - R) grad H - r + F u``.

    ``edge`` carries the edge-angle rates; ``theta`` holds the nodal
    frequencies read from the gradient blocks, whose image under the
    transposed incidence is ``edge``.
    """
    J, R, r, F = plant_structure(model, params, state)
    grad = edge_gradient(model, params, state)
    nG = model.n_gen
    u = np.concatenate([inputs.pg[:nG], inputs.pg[nG:], inputs.Uf, inputs.ql, inputs.pl])
    rate = (J - R) @ grad - r + F @ u
    m, k, nl = model.m, model.n_ctrl, model.n_load
    o = m
    L = rate[o:o + k]
    Ug = rate[o + k:o + k + nG]
    res_p = rate[o + k + nG:o + k + nG + nl]
    res_q = rate[o + k + nG + nl:]
    theta = np.concatenate([grad[o:o + k], grad[o + k + nG:o + k + nG + nl]])
    return PlantRates(theta, L, Ug, res_p, res_q, edge=rate[:m])


def inverter_matching(physical: InverterPhysical) -> InverterParams:
    """Virtual inertia and damping of a matched inverter, scaled by nominal frequency."""
    vals = (physical.C_DC, physical.G_DC, physical.eta, physical.omega_n)
    if not all(v > 0 for v in vals):
        raise NonpositiveParameter(f"inverter physical parameters must be positive: {physical}")
    scale = physical.omega_n / physical.eta**2
    return InverterParams(M=physical.C_DC * scale, A=physical.G_DC * scale)


def dc_current_command(A_virtual_star: float, eta: float, omega_n: float, pg: float,
                       omega_I: float) -> float:
    """DC source current of the matching controller at absolute virtual frequency ``omega_I``."""
    if omega_I == 0:
        raise ZeroFrequency("virtual frequency must be nonzero")
    return eta * A_virtual_star * omega_n + eta * pg / omega_I
