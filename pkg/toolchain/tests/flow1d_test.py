import math
import numpy as np
import pytest
from scipy.optimize import brentq

from perfusim import flow1d
from perfusim.errors import FlowSolverError, TreeError
from perfusim.models import Flow1dParams, FluidProps, TreeFlowState

from .fixtures.trees import make_tree, random_binary_tree

PROPS = FluidProps()
W0 = 0.1


def _area(r_mm):
    return math.pi * (r_mm * 1e-3) ** 2


def _friction(length_mm, r_mm):
    return 32.0 * PROPS.viscosity * length_mm * 1e-3 / (2 * r_mm * 1e-3) ** 2


def _zero_pressures(tree):
    return {t: 0.0 for t in tree.terminals()}


def test_branch_loss():
    loss = flow1d.branch_loss(0.2, 0.01, 0.002, PROPS)
    assert loss == pytest.approx(32.0 * PROPS.viscosity * 0.01 * 0.2 / 0.002 ** 2)
    assert flow1d.branch_loss(0.0, 0.01, 0.002, PROPS) == 0.0
    assert flow1d.branch_loss(-0.2, 0.01, 0.002, PROPS) == pytest.approx(-loss)
    with pytest.raises(ValueError):
        flow1d.branch_loss(0.2, 0.01, 0.0, PROPS)


def test_single_pipe(single_pipe):
    state = flow1d.solve_tree_flow(single_pipe, W0, {1: 0.0}, PROPS)
    assert state.velocities[0] == W0
    assert state.pressures[0] == pytest.approx(_friction(10.0, 1.0) * W0, rel=1e-10)
    assert state.pressures[1] == 0.0
    assert state.iterations <= 1


def test_symmetric_bifurcation(bifurcation):
    state = flow1d.solve_tree_flow(bifurcation, W0, _zero_pressures(bifurcation), PROPS)
    w1 = W0 * _area(1.0) / (2 * _area(0.8))
    assert state.velocities[1] == pytest.approx(w1, rel=1e-10)
    assert state.velocities[2] == pytest.approx(w1, rel=1e-10)

    length = math.dist((0, 0, 10), (5, 0, 15))
    rho = PROPS.density
    p1 = 0.5 * rho * (w1 ** 2 - W0 ** 2) + _friction(length, 0.8) * w1
    assert state.pressures[1] == pytest.approx(p1, rel=1e-9)
    assert state.pressures[0] == pytest.approx(p1 + _friction(10.0, 1.0) * W0, rel=1e-9)


def test_asymmetric_bifurcation(asymmetric_tree):
    'Two-branch tree reduced to one equation for the first child velocity'

    rho = PROPS.density
    a0, a1, a2 = _area(1.0), _area(0.9), _area(0.6)
    f1 = _friction(math.dist((0, 0, 10), (-4, 0, 13)), 0.9)
    f2 = _friction(math.dist((0, 0, 10), (8, 0, 20)), 0.6)

    def w2_of(w1):
        return (a0 * W0 - a1 * w1) / a2

    def mismatch(w1):
        w2 = w2_of(w1)
        return (0.5 * rho * w1 ** 2 + f1 * w1) - (0.5 * rho * w2 ** 2 + f2 * w2)

    w1 = brentq(mismatch, 0.0, a0 * W0 / a1, xtol=1e-15, rtol=1e-14)
    state = flow1d.solve_tree_flow(asymmetric_tree, W0, _zero_pressures(asymmetric_tree), PROPS)
    assert state.velocities[1] == pytest.approx(w1, rel=1e-8)
    assert state.velocities[2] == pytest.approx(w2_of(w1), rel=1e-8)
    p1 = 0.5 * rho * (w1 ** 2 - W0 ** 2) + f1 * w1
    assert state.pressures[1] == pytest.approx(p1, rel=1e-8)


def test_jacobian_matches_finite_differences(two_level_tree):
    terminals = {t: 10.0 * i for i, t in enumerate(two_level_tree.terminals())}
    system = flow1d.FlowSystem(two_level_tree, PROPS, W0, terminals)
    rng = np.random.default_rng(0)
    x = system.initial_guess() + rng.normal(0.0, 0.01, size=system.size)
    jac = system.jacobian(x).toarray()
    h = 1e-4
    fd = np.empty_like(jac)
    for k in range(system.size):
        step = np.zeros(system.size)
        step[k] = h
        fd[:, k] = (system.residual(x + step) - system.residual(x - step)) / (2 * h)
    assert np.allclose(jac, fd, rtol=1e-6, atol=1e-8)


def test_pack_inverts_state(two_level_tree):
    system = flow1d.FlowSystem(two_level_tree, PROPS, W0, _zero_pressures(two_level_tree))
    x = np.random.default_rng(1).normal(size=system.size)
    assert np.array_equal(system.pack(system.state(x)), x)


def test_solution_conserves_mass(two_level_tree):
    state = flow1d.solve_tree_flow(two_level_tree, W0, _zero_pressures(two_level_tree), PROPS)
    children = two_level_tree.children()
    for e in two_level_tree.edges:
        below = children[e.child]
        if below:
            assert state.flux(e.id) == pytest.approx(sum(state.flux(c.id) for c in below), rel=1e-9)
    residual = flow1d.tree_residual(two_level_tree, state, PROPS)
    assert np.abs(residual).max() < 1e-8
    assert state.residual_history[-1] < state.residual_history[0]


def test_energy_balance_along_paths():
    rho = PROPS.density
    for seed in range(5):
        tree = random_binary_tree(8, seed)
        pressures = {t: 0.1 * i for i, t in enumerate(tree.terminals())}
        state = flow1d.solve_tree_flow(tree, W0, pressures, PROPS)
        for t in tree.terminals():
            path = tree.path_edges(t)
            loss = sum(_friction(e.length, e.radius) * state.velocities[e.id] for e in path)
            head = state.pressures[tree.root] + 0.5 * rho * W0 ** 2
            tail = state.pressures[t] + 0.5 * rho * state.velocities[path[-1].id] ** 2
            assert head - tail == pytest.approx(loss, rel=1e-7, abs=1e-7)


def test_non_convergence_reports_history(asymmetric_tree):
    with pytest.raises(FlowSolverError) as err:
        flow1d.solve_tree_flow(
            asymmetric_tree, W0, _zero_pressures(asymmetric_tree), PROPS, Flow1dParams(max_iterations=1)
        )
    assert len(err.value.history) == 2


def test_input_errors(bifurcation):
    with pytest.raises(ValueError, match='no pressure'):
        flow1d.FlowSystem(bifurcation, PROPS, W0, {2: 0.0})
    thin = make_tree({0: (0, 0, 0), 1: (0, 0, 10)}, [(0, 1)], radii=[0.0])
    with pytest.raises(TreeError, match='zero radius'):
        flow1d.FlowSystem(thin, PROPS, W0, {1: 0.0})


def test_transit_times(single_pipe, bifurcation):
    state = flow1d.solve_tree_flow(single_pipe, W0, {1: 0.0}, PROPS)
    assert flow1d.transit_times(single_pipe, state) == {1: pytest.approx(0.01 / W0)}

    state = flow1d.solve_tree_flow(bifurcation, W0, _zero_pressures(bifurcation), PROPS)
    times = flow1d.transit_times(bifurcation, state)
    w1 = state.velocities[1]
    expected = 0.01 / W0 + math.dist((0, 0, 10), (5, 0, 15)) * 1e-3 / w1
    assert times[2] == pytest.approx(expected)
    assert times[3] == pytest.approx(expected)


def test_transit_time_without_forward_flow(single_pipe):
    state = TreeFlowState(velocities={0: -0.1}, areas={0: 1.0}, pressures={0: 0.0, 1: 0.0}, w0=-0.1)
    assert math.isinf(flow1d.transit_times(single_pipe, state)[1])


def test_annotate_and_terminal_fluxes(two_level_tree):
    state = flow1d.solve_tree_flow(two_level_tree, W0, _zero_pressures(two_level_tree), PROPS)
    annotated = flow1d.annotate_tree(two_level_tree, state)
    root_flow = _area(1.0) * W0 / 1e-9
    assert annotated.root_edge().flow == pytest.approx(root_flow)
    fluxes = flow1d.terminal_fluxes(two_level_tree, state)
    assert sorted(fluxes) == [4, 5, 6, 7]
    assert sum(fluxes.values()) == pytest.approx(root_flow, rel=1e-9)
