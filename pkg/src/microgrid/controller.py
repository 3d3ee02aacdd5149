"""Distributed price-based primal-dual controller."""

from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from .errors import NonpositiveParameter, SizeMismatch, ValidationError
from .network import NetworkModel, _check_connected, incidence_from_pairs


@dataclass(frozen=True, eq=False)
class CostModel:
    """Weighted quadratic cost ``C(pg) = 1/2 sum pg_i^2 / w_i``."""

    weights: np.ndarray

    def __post_init__(self):
        w = np.asarray(self.weights, dtype=float)
        if w.ndim != 1 or not np.all(w > 0):
            raise NonpositiveParameter("cost weights must be a positive vector")
        object.__setattr__(self, "weights", w)

    @classmethod
    def default(cls, k: int) -> "CostModel":
        return cls(1.0 + 0.1 * np.arange(k))


def _check_size(costmodel: CostModel, pg) -> np.ndarray:
    pg = np.asarray(pg, dtype=float)
    if pg.shape != costmodel.weights.shape:
        raise SizeMismatch(f"pg has shape {pg.shape}, weights {costmodel.weights.shape}")
    return pg


def cost(costmodel: CostModel, pg) -> float:
    pg = _check_size(costmodel, pg)
    return float(0.5 * np.sum(pg**2 / costmodel.weights))


def cost_gradient(costmodel: CostModel, pg) -> np.ndarray:
    pg = _check_size(costmodel, pg)
    return pg / costmodel.weights


@dataclass(frozen=True, eq=False)
class CommunicationGraph:
    """Undirected communication links over all nodes (indices in network order)."""

    n: int
    src: np.ndarray
    dst: np.ndarray

    @property
    def m(self) -> int:
        return len(self.src)

    @property
    def incidence(self) -> np.ndarray:
        return incidence_from_pairs(self.n, self.src, self.dst)

    @classmethod
    def from_network(cls, model: NetworkModel) -> "CommunicationGraph":
        return cls(model.n, model.edge_src.copy(), model.edge_dst.copy())

    @classmethod
    def from_edges(cls, model: NetworkModel, edges) -> "CommunicationGraph":
        pairs = sorted({tuple(sorted((model.position(a), model.position(b)))) for a, b in edges})
        if any(a == b for a, b in pairs):
            raise ValidationError("communication graph has a self-loop")
        src = np.array([a for a, _ in pairs], dtype=np.int64)
        dst = np.array([b for _, b in pairs], dtype=np.int64)
        if model.n > 1:
            _check_connected(model.n, src, dst, model.node_ids)
        return cls(model.n, src, dst)


@dataclass(frozen=True, eq=False)
class ControllerGains:
    tau_g: np.ndarray
    tau_lambda: np.ndarray
    tau_nu: np.ndarray

    def __post_init__(self):
        for name in ("tau_g", "tau_lambda", "tau_nu"):
            v = np.asarray(getattr(self, name), dtype=float)
            if not np.all(v > 0):
                raise NonpositiveParameter(f"{name} entries must be positive")
            object.__setattr__(self, name, v)

    @classmethod
    def uniform(cls, tau: float, k: int, n: int, mc: int) -> "ControllerGains":
        return cls(np.full(k, tau), np.full(n, tau), np.full(mc, tau))


@dataclass(eq=False)
class ControllerState:
    """Unscaled controller variables; the scaled PHS state is ``tau * x``."""

    pg: np.ndarray
    lam: np.ndarray
    nu: np.ndarray

    def copy(self) -> "ControllerState":
        return ControllerState(np.array(self.pg, float), np.array(self.lam, float),
                               np.array(self.nu, float))

    def flat(self) -> np.ndarray:
        return np.concatenate([self.pg, self.lam, self.nu])


class Measurements(NamedTuple):
    u_c: np.ndarray
    pl: np.ndarray
    phi: np.ndarray


def controller_rhs(state: ControllerState, gains: ControllerGains, costmodel: CostModel,
                   comm: CommunicationGraph, meas: Measurements) -> ControllerState:
    """Time derivatives of ``(pg, lambda, nu)``."""
    k, n = len(state.pg), comm.n
    if len(state.lam) != n or len(state.nu) != comm.m:
        raise SizeMismatch("controller state does not match the communication graph")
    if len(meas.u_c) != k or len(meas.pl) != n or len(meas.phi) != n:
        raise SizeMismatch("measurement vectors have the wrong size")
    lam = np.asarray(state.lam, dtype=float)
    nu = np.asarray(state.nu, dtype=float)
    dpg = (-cost_gradient(costmodel, state.pg) + lam[:k] + meas.u_c) / gains.tau_g
    flow = np.zeros(n)
    np.add.at(flow, comm.src, nu)
    np.subtract.at(flow, comm.dst, nu)
    bal = flow + np.asarray(meas.pl, float) + np.asarray(meas.phi, float)
    bal[:k] -= state.pg
    dlam = bal / gains.tau_lambda
    dnu = -(lam[comm.src] - lam[comm.dst]) / gains.tau_nu
    return ControllerState(dpg, dlam, dnu)


def controller_hamiltonian(state: ControllerState, gains: ControllerGains) -> float:
    return float(0.5 * (np.sum(gains.tau_g * state.pg**2)
                        + np.sum(gains.tau_lambda * state.lam**2)
                        + np.sum(gains.tau_nu * state.nu**2)))


class BalanceCheck(NamedTuple):
    feasible: bool
    nu: np.ndarray
    imbalance: float


def check_balance_feasibility(comm: CommunicationGraph, pg, pl, phi,
                              tol: float = 1e-9) -> BalanceCheck:
    """Test whether the communication flows can carry the nodal imbalance.

    Feasibility reduces to the imbalance summing to zero; the returned flow
    vector is the minimum-norm least-squares solution.
    """
    pg = np.asarray(pg, dtype=float)
    rhs = -np.asarray(pl, dtype=float) - np.asarray(phi, dtype=float)
    rhs[: len(pg)] += pg
    total = float(np.sum(rhs))
    if comm.m == 0:
        return BalanceCheck(bool(np.all(np.abs(rhs) <= tol)), np.zeros(0), total)
    nu, *_ = np.linalg.lstsq(comm.incidence, rhs, rcond=None)
    return BalanceCheck(abs(total) <= tol * max(1.0, np.abs(rhs).sum()), nu, total)
