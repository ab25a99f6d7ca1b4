import math
import numpy as np
import pytest

from perfusim import darcy, transport
from perfusim.meshgen import boundary_faces, tet_faces
from perfusim.errors import TransportError
from perfusim.models import (
    DarcyParams, FaceFluxes, SaturationField, TransportParams, VelocityField
)

from .fixtures.meshes import box_mesh

STEP = [(0.0, 1.0), (100.0, 1.0)]


def _no_faces(n):
    return FaceFluxes(cells=np.zeros((0, 2), dtype=int), normals=np.zeros((0, 3)), flux=np.zeros((n, 0)))


def _single_cell(exchange_pairs, porosities, sink_compartment, **kw):
    'One unit cell; inflow of 1 mm^3/s into compartment 0, sink of 1 mm^3/s'

    n = len(porosities)
    exchange = np.zeros((n, n, 1))
    for (i, j), q in exchange_pairs.items():
        exchange[i, j, 0] = q
        exchange[j, i, 0] = -q
    sources = np.zeros((n, 1))
    sources[0, 0] = 1.0
    sources[sink_compartment, 0] = -1.0
    params = TransportParams(porosities=porosities, bolus=STEP, **kw)
    return transport.TransportOperator(np.ones(1), _no_faces(n), exchange, sources, params), params


def _integrate(operator, dt, end):
    state = SaturationField(values=np.zeros((operator.num_compartments, operator.num_cells)))
    for _ in range(int(round(end / dt))):
        state = transport.rk2_step(state, dt, operator)
    return state


def test_interior_faces(box3):
    cells, normals = transport.interior_faces(box3)
    assert len(cells) == (4 * box3.num_cells - len(boundary_faces(box3.tets))) // 2
    assert np.all(cells[:, 0] < cells[:, 1])
    centroids = box3.centroids()
    direction = centroids[cells[:, 1]] - centroids[cells[:, 0]]
    assert np.all(np.einsum('ij,ij->i', direction, normals) > 0)


def test_uniform_velocity_is_divergence_free_inside(box4):
    velocity = VelocityField(values=np.tile([0.3, -0.2, 0.5], (1, box4.num_cells, 1)))
    faces = transport.face_fluxes(box4, velocity)
    outflow = faces.outflow(box4.num_cells)[0]
    _, index, counts = tet_faces(box4.tets)
    inner = np.all(counts[index] == 2, axis=1)
    assert inner.any()
    assert np.allclose(outflow[inner], 0.0, atol=1e-12)


def test_corrected_fluxes_match_cell_budget(box3):
    load = np.zeros((3, box3.num_vertices))
    load[0, 0] = 1.0
    load[2, -1] = -1.0
    system = darcy.system_from_params(box3, DarcyParams(), load)
    pressure = darcy.solve_pressure(system, tolerance=1e-12)
    velocity = darcy.darcy_velocity(pressure, system)
    balance = darcy.cell_balance(system, pressure)
    faces = transport.face_fluxes(box3, velocity, balance)
    assert np.allclose(faces.outflow(box3.num_cells), balance.divergence(), atol=1e-9)


def test_exchange_ode_matches_exact_solution():
    'Inflow into one compartment that drains into a second one'

    operator, _ = _single_cell({(0, 1): 1.0}, [0.5, 0.5], sink_compartment=1)
    t = 1.0

    def exact(t):
        s0 = 1 - math.exp(-2 * t)
        s1 = 1 - math.exp(-2 * t) - 2 * t * math.exp(-2 * t)
        return np.array([[s0], [s1]])

    errors = [np.abs(_integrate(operator, dt, t).values - exact(t)).max() for dt in (0.1, 0.05, 0.025)]
    assert errors[1] < errors[0] and errors[2] < errors[1]
    assert math.log2(errors[0] / errors[1]) >= 1.7
    assert math.log2(errors[1] / errors[2]) >= 1.7


def test_single_cell_ledger_closes():
    operator, params = _single_cell({(0, 1): 1.0}, [0.5, 0.5], sink_compartment=1, end_time=2.0,
                                    snapshot_interval=0.5)
    result = transport.run(operator, params)
    assert [s.time for s in result.snapshots] == pytest.approx([0.0, 0.5, 1.0, 1.5, 2.0])
    assert len(result.ledger) == result.steps + 1
    for row in result.ledger:
        assert abs(row.imbalance) < 1e-12
    assert result.ledger[-1].injected == pytest.approx(2.0)


def test_arrival_order_along_a_chain():
    operator, params = _single_cell({(0, 1): 1.0, (1, 2): 1.0}, [0.3, 0.3, 0.3], sink_compartment=2,
                                    end_time=1.0, snapshot_interval=0.01)
    arrival = transport.arrival_times(transport.run(operator, params), 0.01)
    assert arrival[0] < arrival[1] < arrival[2] < math.inf


def test_no_exchange_means_no_arrival():
    operator, params = _single_cell({(0, 1): 1.0, (1, 2): 0.0}, [0.3, 0.3, 0.3], sink_compartment=1,
                                    end_time=0.5, snapshot_interval=0.05)
    result = transport.run(operator, params)
    arrival = transport.arrival_times(result, 0.01)
    assert math.isinf(arrival[2])
    assert not result.snapshots[-1].values[2].any()


def test_front_speed_in_a_channel():
    mesh = box_mesh(60, 1, 1)
    velocity = VelocityField(values=np.tile([1.0, 0.0, 0.0], (1, mesh.num_cells, 1)))
    faces = transport.face_fluxes(mesh, velocity)
    sources = faces.outflow(mesh.num_cells)
    params = TransportParams(porosities=[1.0], bolus=STEP, end_time=20.0, snapshot_interval=20.0)
    operator = transport.TransportOperator(
        np.abs(mesh.signed_volumes()), faces, np.zeros((1, 1, mesh.num_cells)), sources, params
    )
    result = transport.run(operator, params)
    s = result.snapshots[-1].values[0]
    per_voxel = np.bincount(mesh.cell_tags, weights=s) / np.bincount(mesh.cell_tags)
    assert per_voxel[0] > 0.99
    front = int(np.argmax(per_voxel < 0.5))
    assert abs(front - 20) <= 2


def test_darcy_driven_transport_is_bounded_and_conservative(box3):
    load = np.zeros((3, box3.num_vertices))
    load[0, 0] = 1.0
    load[2, -1] = -1.0
    system = darcy.system_from_params(box3, DarcyParams(), load)
    pressure = darcy.solve_pressure(system, tolerance=1e-12)
    velocity = darcy.darcy_velocity(pressure, system)
    params = TransportParams(end_time=1.0, snapshot_interval=0.25, bolus=[(0.0, 1.0), (0.5, 1.0), (0.5, 0.0)])
    result = transport.simulate_transport(system, pressure, velocity, params)
    for snap in result.snapshots:
        assert snap.values.min() >= -1e-12
        assert snap.values.max() <= 1 + 1e-12
    injected = result.ledger[-1].injected
    assert injected > 0
    for row in result.ledger:
        assert abs(row.imbalance) <= 1e-9 * max(injected, 1.0)


def test_step_above_cfl_limit():
    operator, _ = _single_cell({(0, 1): 1.0}, [0.5, 0.5], sink_compartment=1)
    limit, _ = operator.cfl_limit()
    assert limit == pytest.approx(0.4 * 0.5)
    state = SaturationField(values=np.zeros((2, 1)))
    with pytest.raises(TransportError, match='CFL'):
        operator.step(state, 2 * limit)


def test_too_many_steps():
    operator, params = _single_cell({(0, 1): 1.0}, [0.5, 0.5], sink_compartment=1, end_time=10.0, max_steps=5)
    with pytest.raises(TransportError, match='steps'):
        transport.run(operator, params)


def test_operator_shape_checks():
    exchange = np.zeros((2, 2, 1))
    with pytest.raises(TransportError):
        transport.TransportOperator(np.ones(1), _no_faces(2), exchange, np.zeros((2, 1)), TransportParams())
    with pytest.raises(TransportError, match='inlet'):
        transport.TransportOperator(
            np.ones(1), _no_faces(2), exchange, np.zeros((2, 1)),
            TransportParams(porosities=[0.5, 0.5], inlet_compartment=2),
        )


def test_params_validation():
    with pytest.raises(ValueError):
        TransportParams(porosities=[0.6, 0.6])
    with pytest.raises(ValueError):
        TransportParams(porosities=[0.5, 0.0])
    with pytest.raises(ValueError):
        TransportParams(bolus=[(1.0, 1.0), (0.0, 1.0)])
    with pytest.raises(ValueError):
        TransportParams(bolus=[(0.0, -1.0)])


def test_inlet_concentration():
    step = TransportParams(bolus=[(0.0, 1.0), (1.0, 1.0), (1.0, 0.0)])
    assert step.inlet_concentration(-1.0) == 0.0
    assert step.inlet_concentration(0.5) == 1.0
    assert step.inlet_concentration(1.0) == 0.0
    assert step.inlet_concentration(1.5) == 0.0
    ramp = TransportParams(bolus=[(0.0, 0.0), (2.0, 1.0)])
    assert ramp.inlet_concentration(1.0) == pytest.approx(0.5)


def test_delayed_inlet():
    exchange = np.zeros((1, 1, 1))
    params = TransportParams(porosities=[0.5], bolus=[(0.0, 1.0), (1.0, 1.0), (1.0, 0.0)])
    operator = transport.TransportOperator(
        np.ones(1), _no_faces(1), exchange, np.ones((1, 1)), params, inlet_delay=np.array([0.5])
    )
    assert operator.inlet_values(0.25).tolist() == [0.0]
    assert operator.inlet_values(0.75).tolist() == [1.0]


def test_total_concentration():
    state = SaturationField(values=np.array([[1.0, 0.0], [0.5, 1.0]]))
    assert np.allclose(transport.total_concentration(state, [0.2, 0.4]), [0.4, 0.4])
    with pytest.raises(ValueError):
        transport.total_concentration(state, [0.2])


def test_inlet_delays(box3):
    delay = transport.inlet_delays(box3, {7: 0}, {7: 0.3})
    touching = np.any(box3.tets == 0, axis=1)
    assert np.all(delay[touching] == 0.3)
    assert np.all(delay[~touching] == 0.0)
