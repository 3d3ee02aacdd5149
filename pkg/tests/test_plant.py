import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from microgrid.closed_loop import solve_equilibrium
from microgrid.errors import NonpositiveParameter, NonpositiveVoltage, ValidationError, ZeroFrequency
from microgrid.network import build_network
from microgrid.plant import (
    GeneratorParams,
    InverterPhysical,
    PlantInputs,
    PlantParams,
    PlantState,
    conductance_terms,
    dc_current_command,
    flow_jacobian,
    inverter_matching,
    phs_form_rhs,
    plant_gradient,
    plant_hamiltonian,
    plant_rhs,
    plant_structure,
    power_flows,
    resistive_losses,
    solve_algebraic,
    voltages,
)
from microgrid.runner import gradient_error, random_inputs, random_plant_state


def two_node(gamma, kinds=("generator", "load"), b_self=-1.0):
    return build_network([(1, kinds[0], b_self), (2, kinds[1], b_self)], [(1, 2, 1.0)], gamma)


def gen_load_params(A_load=1.0):
    return PlantParams(M=np.array([2.0]), A=np.array([1.0, A_load]), Xd=np.array([0.02]),
                       Xdp=np.array([0.004]), tauU=np.array([6.0]))


# ------------------------------------------------------------------ power flows

def test_lossless_flow_is_antisymmetric():
    p, _ = power_flows(two_node(0.0), np.array([0.1, 0.0]), np.ones(2))
    assert p[0] == pytest.approx(math.sin(0.1), abs=1e-15)
    assert p[1] == pytest.approx(-p[0], abs=1e-15)


def test_lossy_flow_hand_value():
    p, _ = power_flows(two_node(1.0), np.array([0.1, 0.0]), np.ones(2))
    assert p[0] == pytest.approx(math.sin(0.1) + 1.0 - math.cos(0.1), abs=1e-15)
    assert p[0] == pytest.approx(0.10483, abs=1e-5)


def test_reactive_flow_at_flat_start_is_zero_with_consistent_shunt():
    # self-susceptance equal to minus the line susceptance: no net reactive flow
    p, q = power_flows(two_node(1.0), np.zeros(2), np.ones(2))
    assert np.allclose(p, 0.0) and np.allclose(q, 0.0)


def test_reactive_flow_equals_voltage_times_energy_gradient(grid, rng):
    # q_i = U_i dH/dU_i for the lossless part; the conductance part is rho
    md, pr = grid.model, grid.system.params
    lossless = md.with_gamma(0.0)
    for _ in range(20):
        s = random_plant_state(grid, rng)
        U = voltages(md, s)
        _, q = power_flows(lossless, s.theta, U)
        g = plant_gradient(md, pr, s)
        sg, _, sl = md.slices()
        assert np.allclose(q[sl], U[sl] * g.Ul, atol=1e-13)
        assert np.allclose(q[sg], U[sg] * (g.Ug - U[sg] / pr.xdd), atol=1e-12)


def test_nonpositive_voltage_rejected():
    with pytest.raises(NonpositiveVoltage):
        power_flows(two_node(0.0), np.zeros(2), np.array([1.0, 0.0]))


def test_flow_jacobian_matches_finite_differences(grid, rng):
    md = grid.model
    s = random_plant_state(grid, rng)
    th, U = s.theta, voltages(md, s)
    dp_dth, dp_dU, dq_dth, dq_dU = flow_jacobian(md, th, U)
    h = 1e-7
    for c in (0, 7, 16):
        e = np.zeros(md.n)
        e[c] = h
        pp, qp = power_flows(md, th + e, U)
        pm, qm = power_flows(md, th - e, U)
        assert np.allclose((pp - pm) / (2 * h), dp_dth[:, c], atol=1e-6)
        assert np.allclose((qp - qm) / (2 * h), dq_dth[:, c], atol=1e-6)
        pp, qp = power_flows(md, th, U + e)
        pm, qm = power_flows(md, th, U - e)
        assert np.allclose((pp - pm) / (2 * h), dp_dU[:, c], atol=1e-6)
        assert np.allclose((qp - qm) / (2 * h), dq_dU[:, c], atol=1e-6)


# ------------------------------------------------------------------ losses

def test_losses_vanish_without_conductance(grid, rng):
    s = random_plant_state(grid, rng)
    md = grid.model.with_gamma(0.0)
    assert resistive_losses(md, s.theta, voltages(md, s)) == 0.0


def test_losses_zero_at_zero_angle():
    assert resistive_losses(two_node(1.0), np.zeros(2), np.ones(2)) == pytest.approx(0.0, abs=1e-15)


def test_losses_two_node_hand_value():
    md = two_node(1.0)
    th = np.array([0.1, 0.0])
    phi_total = resistive_losses(md, th, np.ones(2))
    p, _ = power_flows(md, th, np.ones(2))
    assert phi_total == pytest.approx(2 - 2 * math.cos(0.1), abs=1e-15)
    assert phi_total == pytest.approx(0.0099917, abs=1e-7)
    assert phi_total == pytest.approx(p.sum(), abs=1e-15)


def test_conductance_terms_two_node():
    md = two_node(1.0)
    th = np.array([0.1, 0.0])
    phi, rho = conductance_terms(md, th, np.ones(2))
    assert phi[0] == pytest.approx(1 - math.cos(0.1), abs=1e-15)
    assert phi.sum() == pytest.approx(resistive_losses(md, th, np.ones(2)), abs=1e-15)
    assert rho[0] == pytest.approx(-math.sin(0.1), abs=1e-15)


def test_conductance_terms_lossless_zero(grid, rng):
    s = random_plant_state(grid, rng)
    md = grid.model.with_gamma(0.0)
    phi, rho = conductance_terms(md, s.theta, voltages(md, s))
    assert np.all(phi == 0.0) and np.all(rho == 0.0)


def test_conductance_terms_flat_start_zero(grid):
    phi, rho = conductance_terms(grid.model, np.zeros(18), np.ones(18))
    assert np.allclose(phi, 0.0, atol=1e-15) and np.allclose(rho, 0.0, atol=1e-15)


def test_conductance_rho_generator_scaling(grid, rng):
    md, pr = grid.model, grid.system.params
    s = random_plant_state(grid, rng)
    U = voltages(md, s)
    _, rho = conductance_terms(md, s.theta, U)
    _, rho_s = conductance_terms(md, s.theta, U, pr)
    assert np.allclose(rho_s[:7], rho[:7] * pr.Rg)
    assert np.array_equal(rho_s[7:], rho[7:])


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**32 - 1), st.floats(0.0, 3.0))
def test_sum_of_injections_equals_losses(grid, seed, gamma):
    md = grid.model.with_gamma(gamma)
    s = random_plant_state(grid, np.random.default_rng(seed))
    U = voltages(md, s)
    p, _ = power_flows(md, s.theta, U)
    phi, _ = conductance_terms(md, s.theta, U)
    loss = resistive_losses(md, s.theta, U)
    assert p.sum() == pytest.approx(loss, abs=1e-12)
    assert phi.sum() == pytest.approx(loss, abs=1e-12)


# ------------------------------------------------------------------ Hamiltonian

def single_generator():
    md = build_network([(1, "generator", -2.67)], [], 0.0)
    pr = PlantParams(np.array([5.2]), np.array([1.6]), np.array([0.02]), np.array([0.004]),
                     np.array([6.45]))
    return md, pr


def test_hamiltonian_single_generator_hand_value():
    md, pr = single_generator()
    s = PlantState(np.zeros(1), np.zeros(1), np.ones(1), np.zeros(0), np.zeros(0))
    assert plant_hamiltonian(md, pr, s) == pytest.approx(0.5 / 0.016 + 0.5 * 2.67, abs=1e-12)
    assert plant_hamiltonian(md, pr, s) == pytest.approx(32.585, abs=1e-9)


def test_hamiltonian_kinetic_part_and_scaling():
    md, pr = single_generator()
    base = PlantState(np.zeros(1), np.zeros(1), np.ones(1), np.zeros(0), np.zeros(0))
    h0 = plant_hamiltonian(md, pr, base)
    one = PlantState(np.zeros(1), np.ones(1), np.ones(1), np.zeros(0), np.zeros(0))
    two = PlantState(np.zeros(1), 2 * np.ones(1), np.ones(1), np.zeros(0), np.zeros(0))
    k1 = plant_hamiltonian(md, pr, one) - h0
    assert k1 == pytest.approx(1 / (2 * 5.2), abs=1e-14)
    assert plant_hamiltonian(md, pr, two) - h0 == pytest.approx(4 * k1, abs=1e-13)


def test_hamiltonian_invariant_under_angle_shift(grid, rng):
    md, pr = grid.model, grid.system.params
    s = random_plant_state(grid, rng)
    shifted = s.copy()
    shifted.theta = s.theta + 0.7
    assert plant_hamiltonian(md, pr, s) == pytest.approx(plant_hamiltonian(md, pr, shifted),
                                                         abs=1e-12)


def test_gradient_simple_entries(grid, rng):
    md, pr = grid.model, grid.system.params
    s = random_plant_state(grid, rng)
    s.L[0] = 5.2
    g = plant_gradient(md, pr, s)
    assert g.L[0] == pytest.approx(1.0)
    assert np.array_equal(g.omega_l, s.omega_l)


def test_gradient_matches_finite_differences(grid, rng):
    errs = [gradient_error(grid, random_plant_state(grid, rng)) for _ in range(100)]
    assert max(errs) <= 1e-6


# ------------------------------------------------------------------ dynamics

def test_rhs_vanishes_at_equilibrium(grid):
    eq = solve_equilibrium(grid.system, grid.pl, grid.ql)
    r = plant_rhs(grid.model, grid.system.params, eq.state.plant, eq.plant_inputs)
    assert max(np.max(np.abs(v)) for v in r[:5]) <= 1e-9


def test_isolated_generator_pure_damping():
    md, pr = single_generator()
    s = PlantState(np.zeros(1), np.array([0.1]), np.ones(1), np.zeros(0), np.zeros(0))
    u = PlantInputs(np.zeros(1), np.ones(1), np.zeros(1), np.zeros(0))
    r = plant_rhs(md, pr, s, u)
    assert r.L[0] == pytest.approx(-1.6 * 0.1 / 5.2, abs=1e-15)
    assert r.theta[0] == pytest.approx(0.1 / 5.2)


def test_gen_load_algebraic_root():
    md = two_node(0.0)
    pr = gen_load_params(A_load=1.0)
    s = PlantState(np.array([0.1, 0.0]), np.zeros(1), np.ones(1), np.zeros(1), np.ones(1))
    _, q = power_flows(md, s.theta, np.ones(2))
    u = PlantInputs(np.zeros(1), np.ones(1), np.zeros(2), np.array([-q[1]]))
    r = plant_rhs(md, pr, s, u)
    assert r.res_p[0] == pytest.approx(math.sin(0.1), abs=1e-15)
    sol = solve_algebraic(md, pr, s, u)
    assert sol.omega_l[0] == pytest.approx(math.sin(0.1), abs=1e-12)
    assert sol.omega_l[0] == pytest.approx(0.09983, abs=1e-5)
    assert sol.Ul[0] == pytest.approx(1.0, abs=1e-12)


def test_solve_algebraic_without_loads():
    md, pr = single_generator()
    s = PlantState(np.zeros(1), np.zeros(1), np.ones(1), np.zeros(0), np.zeros(0))
    sol = solve_algebraic(md, pr, s, PlantInputs(np.zeros(1), np.ones(1), np.zeros(1), np.zeros(0)))
    assert sol.omega_l.size == 0 and sol.Ul.size == 0 and sol.iterations == 0


def test_solve_algebraic_flat_start_shipped_loads(grid):
    md, pr = grid.model, grid.system.params
    s = PlantState.flat_start(md)
    pl = grid.pl.copy()
    pl[14:] += 0.5
    u = PlantInputs(np.zeros(14), np.ones(7), pl, grid.ql)
    sol = solve_algebraic(md, pr, s, u)
    assert sol.iterations <= 10
    s.omega_l, s.Ul = sol.omega_l, sol.Ul
    r = plant_rhs(md, pr, s, u)
    assert max(np.max(np.abs(r.res_p)), np.max(np.abs(r.res_q))) <= 1e-10


@pytest.mark.parametrize("gamma", [0.0, 1.0])
def test_port_hamiltonian_form_agrees(grid, rng, gamma):
    md = grid.model.with_gamma(gamma)
    pr = grid.system.params
    for _ in range(100):
        s = random_plant_state(grid, rng)
        u = random_inputs(grid, rng)
        a = plant_rhs(md, pr, s, u)
        b = phs_form_rhs(md, pr, s, u)
        assert np.array_equal(a.theta, b.theta)
        assert np.max(np.abs(a.L - b.L)) <= 1e-12
        if gamma == 0.0:
            for x, y in ((a.Ug, b.Ug), (a.res_p, b.res_p), (a.res_q, b.res_q)):
                assert np.max(np.abs(x - y)) <= 1e-12


def test_port_hamiltonian_structure_properties(grid, rng):
    md, pr = grid.model, grid.system.params
    J, R, r, F = plant_structure(md, pr, random_plant_state(grid, rng))
    assert np.array_equal(J, -J.T)
    assert np.min(np.linalg.eigvalsh(R)) >= -1e-12
    assert np.allclose(np.diag(R)[20:27], pr.A[:7])


# ------------------------------------------------------------------ parameters and inverters

def test_parameter_validation():
    with pytest.raises(NonpositiveParameter):
        GeneratorParams(M=0.0, A=1.0, Xd=0.02, Xdp=0.004, tauU=6.0)
    with pytest.raises(ValidationError):
        GeneratorParams(M=1.0, A=1.0, Xd=0.004, Xdp=0.02, tauU=6.0)


def test_inverter_matching_identity():
    wn, eta = 2 * math.pi * 50, 3.0
    assert inverter_matching(InverterPhysical(eta**2 / wn, eta**2 / wn, eta, wn)).M == pytest.approx(1.0)


def test_inverter_matching_numeric():
    wn = 100 * math.pi
    par = inverter_matching(InverterPhysical(0.008, 0.00255, wn / 1000, wn))
    assert par.M == pytest.approx(0.008 * wn / (wn / 1000) ** 2)
    assert par.M == pytest.approx(25.46, abs=0.02)


def test_inverter_matching_eta_scaling():
    a = inverter_matching(InverterPhysical(0.01, 0.003, 0.5))
    b = inverter_matching(InverterPhysical(0.01, 0.003, 1.0))
    assert b.M == pytest.approx(a.M / 4) and b.A == pytest.approx(a.A / 4)
    with pytest.raises(NonpositiveParameter):
        inverter_matching(InverterPhysical(0.01, 0.003, 0.0))


def test_dc_current_command():
    assert dc_current_command(0.2, 0.5, 314.0, 0.0, 314.0) == pytest.approx(0.5 * 0.2 * 314.0)
    assert dc_current_command(1.0, 1.0, 1.0, 1.0, 1.0) == pytest.approx(2.0)
    i1 = dc_current_command(1.0, 0.5, 10.0, 1.0, 2.0)
    i2 = dc_current_command(1.0, 0.5, 10.0, 2.0, 2.0)
    assert i2 - i1 == pytest.approx(0.5 * 1.0 / 2.0)
    with pytest.raises(ZeroFrequency):
        dc_current_command(1.0, 1.0, 1.0, 1.0, 0.0)
