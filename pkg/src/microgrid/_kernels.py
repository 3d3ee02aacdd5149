"""Compiled inner loops: power flows, the closed-loop vector field and RK4.

Node arrays follow the network partition order (generators, inverters,
loads). The packed parameter tuple ``sysp`` is built by
:func:`microgrid.closed_loop.pack`; its layout is::

    (src, dst, eb, eg, bself, gself,      # network
     M, A, xdd, tau_u,                    # plant
     w, tau_g, tau_l, tau_nu, csrc, cdst) # controller

The closed-loop differential vector is ``[theta, L, Ug, pg, lam, nu]``;
load voltages are solved by Newton inside every evaluation and load
frequencies follow explicitly from the active power balance.
"""

import numpy as np
from numba import njit

OK = 0
SINGULAR = 1
NO_CONVERGENCE = 2
NONPOSITIVE_VOLTAGE = 3


@njit(cache=True)
def flows(src, dst, eb, eg, bself, gself, theta, U):
    """Return (p, q, phi, rho) at every node.

    ``phi`` is the conductance part of ``p`` and ``rho`` the unscaled
    conductance part of ``q``.
    """
    n = theta.shape[0]
    p = gself * U * U
    q = -bself * U * U
    phi = p.copy()
    rho = np.zeros(n)
    for e in range(src.shape[0]):
        i = src[e]
        j = dst[e]
        d = theta[i] - theta[j]
        s = np.sin(d)
        c = np.cos(d)
        uu = U[i] * U[j]
        bs = eb[e] * uu * s
        bc = eb[e] * uu * c
        gs = eg[e] * uu * s
        gc = eg[e] * uu * c
        p[i] += bs + gc
        p[j] += -bs + gc
        q[i] += -bc + gs
        q[j] += -bc - gs
        phi[i] += gc
        phi[j] += gc
        rho[i] += gs
        rho[j] -= gs
    return p, q, phi, rho


@njit(cache=True)
def _assemble_voltage(Ug, ul, n, nG, nI):
    U = np.ones(n)
    U[:nG] = Ug
    U[nG + nI:] = ul
    return U


@njit(cache=True)
def solve_load_voltages(theta, Ug, ul0, sysp, nG, nI, ql, tol, maxit):
    """Newton iteration on the load reactive balance ``0 = -ql - q``.

    Returns (ul, iterations, status).
    """
    src, dst, eb, eg, bself, gself = sysp[0], sysp[1], sysp[2], sysp[3], sysp[4], sysp[5]
    n = theta.shape[0]
    off = nG + nI
    nl = n - off
    ul = ul0.copy()
    if nl == 0:
        return ul, 0, OK
    U = _assemble_voltage(Ug, ul, n, nG, nI)
    p, q, phi, rho = flows(src, dst, eb, eg, bself, gself, theta, U)
    r = -ql - q[off:]
    rn = np.max(np.abs(r))
    it = 0
    while rn > tol:
        if it >= maxit:
            return ul, it, NO_CONVERGENCE
        J = np.zeros((nl, nl))
        for k in range(nl):
            J[k, k] = -(q[off + k] / ul[k] - bself[off + k] * ul[k])
        for e in range(src.shape[0]):
            i = src[e]
            j = dst[e]
            if i >= off and j >= off:
                d = theta[i] - theta[j]
                s = np.sin(d)
                c = np.cos(d)
                J[i - off, j - off] = -U[i] * (-eb[e] * c + eg[e] * s)
                J[j - off, i - off] = -U[j] * (-eb[e] * c - eg[e] * s)
        if not np.all(np.isfinite(J)):
            return ul, it, SINGULAR
        scale = np.max(np.abs(J))
        if scale == 0.0 or abs(np.linalg.det(J / scale)) < 1e-14:
            return ul, it, SINGULAR
        step = np.linalg.solve(J, r)
        alpha = 1.0
        accepted = False
        for _ in range(30):
            trial = ul - alpha * step
            if np.all(trial > 0.0):
                U[off:] = trial
                p, q, phi, rho = flows(src, dst, eb, eg, bself, gself, theta, U)
                rt = -ql - q[off:]
                rtn = np.max(np.abs(rt))
                if rtn < rn or alpha < 1e-8:
                    ul = trial
                    r = rt
                    rn = rtn
                    accepted = True
                    break
            alpha *= 0.5
        it += 1
        if not accepted:
            if np.any(ul - step <= 0.0):
                return ul, it, NONPOSITIVE_VOLTAGE
            return ul, it, NO_CONVERGENCE
    return ul, it, OK


@njit(cache=True)
def closed_loop_rhs(y, ul_guess, sysp, nG, nI, Uf, pl, ql, tol, maxit):
    """Closed-loop derivative with inner algebraic solve.

    Returns (dy, ul, omega_l, status).
    """
    src, dst, eb, eg, bself, gself = sysp[0], sysp[1], sysp[2], sysp[3], sysp[4], sysp[5]
    M, A, xdd, tau_u = sysp[6], sysp[7], sysp[8], sysp[9]
    w, tau_g, tau_l, tau_nu, csrc, cdst = sysp[10], sysp[11], sysp[12], sysp[13], sysp[14], sysp[15]
    n = tau_l.shape[0]
    k = nG + nI
    mc = tau_nu.shape[0]
    theta = y[:n]
    L = y[n:n + k]
    Ug = y[n + k:n + k + nG]
    o = n + k + nG
    pg = y[o:o + k]
    lam = y[o + k:o + k + n]
    nu = y[o + k + n:o + k + n + mc]

    dy = np.zeros(y.shape[0])
    for i in range(nG):
        if not Ug[i] > 0.0:
            return dy, ul_guess, np.zeros(n - k), NONPOSITIVE_VOLTAGE
    ul, it, status = solve_load_voltages(theta, Ug, ul_guess, sysp, nG, nI, ql, tol, maxit)
    if status != OK:
        return dy, ul, np.zeros(n - k), status
    U = _assemble_voltage(Ug, ul, n, nG, nI)
    p, q, phi, rho = flows(src, dst, eb, eg, bself, gself, theta, U)

    omega = np.empty(n)
    omega[:k] = L / M
    omega[k:] = (-pl[k:] - p[k:]) / A[k:]

    dy[:n] = omega
    dy[n:n + k] = -A[:k] * omega[:k] + pg - pl[:k] - p[:k]
    dy[n + k:o] = (Uf - Ug - xdd / Ug * q[:nG]) / tau_u
    dy[o:o + k] = (-pg / w + lam[:k] - omega[:k]) / tau_g
    bal = pl + phi
    bal[:k] -= pg
    for e in range(mc):
        bal[csrc[e]] += nu[e]
        bal[cdst[e]] -= nu[e]
        dy[o + k + n + e] = -(lam[csrc[e]] - lam[cdst[e]]) / tau_nu[e]
    dy[o + k:o + k + n] = bal / tau_l
    return dy, ul, omega[k:], OK


@njit(cache=True)
def rk4_step(y, ul, dt, sysp, nG, nI, Uf, pl, ql, tol, maxit):
    """One classical RK4 step; algebraic states solved at every stage.

    Returns (y_new, ul_new, status). ``ul_new`` is consistent with ``y_new``.
    """
    k1, u1, _, s = closed_loop_rhs(y, ul, sysp, nG, nI, Uf, pl, ql, tol, maxit)
    if s != OK:
        return y, ul, s
    k2, u2, _, s = closed_loop_rhs(y + 0.5 * dt * k1, u1, sysp, nG, nI, Uf, pl, ql, tol, maxit)
    if s != OK:
        return y, ul, s
    k3, u3, _, s = closed_loop_rhs(y + 0.5 * dt * k2, u2, sysp, nG, nI, Uf, pl, ql, tol, maxit)
    if s != OK:
        return y, ul, s
    k4, u4, _, s = closed_loop_rhs(y + dt * k3, u3, sysp, nG, nI, Uf, pl, ql, tol, maxit)
    if s != OK:
        return y, ul, s
    ynew = y + (dt / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
    n = sysp[12].shape[0]
    k = nG + nI
    Ug = ynew[n + k:n + k + nG]
    for i in range(nG):
        if not Ug[i] > 0.0:
            return y, ul, NONPOSITIVE_VOLTAGE
    unew, it, s = solve_load_voltages(ynew[:n], Ug, u4, sysp, nG, nI, ql, tol, maxit)
    if s != OK:
        return y, ul, s
    return ynew, unew, OK


@njit(cache=True)
def rk4_segment(y, ul, nsteps, dt, decim, phase, sysp, nG, nI, Uf, pl, ql, tol, maxit,
                out_y, out_ul):
    """Advance ``nsteps`` RK4 steps, storing the state whenever the global
    step counter ``phase + step + 1`` is a multiple of ``decim``.

    Returns (y, ul, steps_done, samples_written, status).
    """
    j = 0
    for step in range(nsteps):
        y, ul, s = rk4_step(y, ul, dt, sysp, nG, nI, Uf, pl, ql, tol, maxit)
        if s != OK:
            return y, ul, step, j, s
        if (phase + step + 1) % decim == 0:
            out_y[j, :] = y
            out_ul[j, :] = ul
            j += 1
    return y, ul, nsteps, j, OK
