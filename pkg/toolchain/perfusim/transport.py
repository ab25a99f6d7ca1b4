# Copyright (C) 2026 The perfusim developers
#
# This file is part of perfusim
#
# perfusim is free software: you can redistribute it and/or modify it
# under the terms of the GNU General Public License as published by the Free
# Software Foundation; either version 3 of the License, or (at your option) any
# later version.
#
# This program is distributed in the hope that it will be useful, but WITHOUT
# ANY WARRANTY; without even the implied warranty of MERCHANTABILITY or FITNESS
# FOR A PARTICULAR PURPOSE. See the GNU General Public License for more
# details.
#
# You should have received a copy of the GNU General Public License along with
# this program. If not, see <http://www.gnu.org/licenses/>.

'''
Tracer transport through the compartments.

Each compartment i carries a saturation S_i per cell. With porosity phi_i
and cell volume V the tracer volume phi_i V S_i changes by upwind face
fluxes, by inter-compartment exchange (upwinded by the sign of the
exchange), by sinks removing tracer at the local saturation and by inlet
sources injecting the bolus concentration. Time stepping is Heun's
two-stage Runge-Kutta method.
'''

import logging
import math
import numpy as np
from scipy import sparse
from scipy.sparse.csgraph import connected_components
from scipy.sparse.linalg import splu
from typing import Dict, List, Optional, Tuple

from perfusim import darcy, meshgen
from perfusim.errors import MeshError, TransportError
from perfusim.models import (
    CellBalance, CompartmentSystem, FaceFluxes, LedgerRow, PressureField, SaturationField,
    TetMesh, TransportParams, TransportResult, VelocityField
)

logger = logging.getLogger(__name__)


def interior_faces(mesh: TetMesh) -> Tuple[np.ndarray, np.ndarray]:
    '''
    Interior faces as cell pairs (a, b) with a < b, and their area vectors
    pointing from a into b. Raises MeshError when a face is shared by more
    than two cells.
    '''
    faces, index, counts = meshgen.tet_faces(mesh.tets)
    if np.any(counts > 2):
        raise MeshError(f'{int(np.sum(counts > 2))} face(s) shared by more than two tetrahedra')
    cell = np.repeat(np.arange(mesh.num_cells), 4)
    local = np.tile(np.arange(4), mesh.num_cells)
    flat = index.ravel()
    order = np.argsort(flat, kind='stable')
    flat, cell, local = flat[order], cell[order], local[order]
    shared = counts[flat] == 2
    flat, cell, local = flat[shared], cell[shared], local[shared]
    a_cell, b_cell = cell[0::2], cell[1::2]
    a_local = local[0::2]

    corners = mesh.vertices[mesh.tets[a_cell][np.arange(len(a_cell))[:, None], meshgen.TET_FACES[a_local]]]
    normals = 0.5 * np.cross(corners[:, 1] - corners[:, 0], corners[:, 2] - corners[:, 0])
    return np.stack([a_cell, b_cell], axis=1), normals


def _conservative_correction(cells: np.ndarray, num_cells: int, flux: np.ndarray,
                             divergence: np.ndarray, volumes: np.ndarray) -> np.ndarray:
    '''
    Adds phi_a - phi_b to each face flux, phi solving a cell-graph Laplacian,
    so that the net outflow of every cell equals `divergence`. Any mismatch
    left in the totals of a connected cell group is spread by volume first.
    '''
    adjacency = sparse.coo_matrix(
        (np.ones(len(cells)), (cells[:, 0], cells[:, 1])), shape=(num_cells, num_cells)
    ).tocsr()
    adjacency = adjacency + adjacency.T
    laplacian = (sparse.diags(np.asarray(adjacency.sum(axis=1)).ravel()) - adjacency).tocsc()
    count, labels = connected_components(adjacency, directed=False)

    out = np.zeros(num_cells)
    np.add.at(out, cells[:, 0], flux)
    np.subtract.at(out, cells[:, 1], flux)
    rhs = divergence - out
    pinned = []
    for k in range(count):
        members = np.flatnonzero(labels == k)
        mismatch = rhs[members].sum()
        rhs[members] -= mismatch * volumes[members] / volumes[members].sum()
        pinned.append(members[0])
        if abs(mismatch) > 1e-6 * max(np.abs(divergence[members]).sum(), 1e-300):
            logger.warning(f'Cell group {k}: flux budget off by {mismatch:.3e} mm^3/s')
    keep = np.setdiff1d(np.arange(num_cells), pinned)
    phi = np.zeros(num_cells)
    if len(keep):
        phi[keep] = splu(laplacian[keep][:, keep].tocsc()).solve(rhs[keep])
    return flux + phi[cells[:, 0]] - phi[cells[:, 1]]


def face_fluxes(mesh: TetMesh, velocity: VelocityField,
                balance: Optional[CellBalance] = None) -> FaceFluxes:
    '''
    Flux through each interior face: the average of the two cell velocities
    dotted with the face area vector. With a cell balance the fluxes are
    corrected so that every cell pushes out exactly its net source minus
    exchange.
    '''
    cells, normals = interior_faces(mesh)
    n = velocity.values.shape[0]
    flux = np.zeros((n, len(cells)))
    for i in range(n):
        w = velocity.values[i]
        flux[i] = np.einsum('fi,fi->f', 0.5 * (w[cells[:, 0]] + w[cells[:, 1]]), normals)
    if balance is not None:
        volumes = np.abs(mesh.signed_volumes())
        divergence = balance.divergence()
        for i in range(n):
            flux[i] = _conservative_correction(cells, mesh.num_cells, flux[i], divergence[i], volumes)
    return FaceFluxes(cells=cells, normals=normals, flux=flux)


def total_concentration(state: SaturationField, porosities) -> np.ndarray:
    'C = sum_i phi_i S_i per cell'
    phi = np.asarray(porosities, dtype=np.float64)
    if len(phi) != state.values.shape[0]:
        raise ValueError(f'{len(phi)} porosities for {state.values.shape[0]} compartments')
    return phi @ state.values


class TransportOperator:
    '''
    Right-hand side of the semi-discrete transport equations.

    `exchange[i, j, c]` is the net flow from compartment i to j in cell c
    and `sources[i, c]` the net source (positive inflow, negative sink).
    Positive sources of the inlet compartment carry the bolus concentration,
    other positive sources carry no tracer.
    '''

    def __init__(self, volumes: np.ndarray, faces: FaceFluxes, exchange: np.ndarray,
                 sources: np.ndarray, params: TransportParams, inlet_delay: Optional[np.ndarray] = None):
        self.volumes = np.asarray(volumes, dtype=np.float64)
        self.faces = faces
        self.exchange = np.asarray(exchange, dtype=np.float64)
        self.sources = np.asarray(sources, dtype=np.float64)
        self.params = params
        self.phi = np.asarray(params.porosities, dtype=np.float64)
        n, c = self.sources.shape
        if len(self.phi) != n:
            raise TransportError(f'{len(self.phi)} porosities for {n} compartments')
        if self.exchange.shape != (n, n, c) or faces.flux.shape[0] != n or len(self.volumes) != c:
            raise TransportError('transport operator shapes do not agree')
        self.num_compartments, self.num_cells = n, c
        self.capacity = self.phi[:, None] * self.volumes[None, :]
        self.inlet = params.inlet_compartment
        if self.inlet >= n:
            raise TransportError(f'inlet compartment {self.inlet} does not exist')
        self.delay = np.zeros(c) if inlet_delay is None else np.asarray(inlet_delay, dtype=np.float64)
        self.injection = np.where(self.sources[self.inlet] > 0, self.sources[self.inlet], 0.0)
        self.sink = np.where(self.sources < 0, -self.sources, 0.0)
        self._limit = None

    def inlet_values(self, t: float) -> np.ndarray:
        if not np.any(self.delay):
            return np.full(self.num_cells, self.params.inlet_concentration(t))
        return np.array([self.params.inlet_concentration(t - d) for d in self.delay])

    def outflow_rates(self) -> np.ndarray:
        'Volume leaving each cell per second, per compartment'
        out = self.sink.copy()
        for i, f in enumerate(self.faces.flux):
            np.add.at(out[i], self.faces.cells[:, 0], np.maximum(f, 0.0))
            np.add.at(out[i], self.faces.cells[:, 1], np.maximum(-f, 0.0))
        out += np.maximum(self.exchange, 0.0).sum(axis=1)
        return out

    def cfl_limit(self) -> Tuple[float, Tuple[int, int]]:
        'Largest stable step and the (compartment, cell) that sets it'
        if self._limit is not None:
            return self._limit
        out = self.outflow_rates()
        with np.errstate(divide='ignore'):
            local = np.where(out > 0, self.capacity / out, np.inf)
        i, c = np.unravel_index(int(np.argmin(local)), local.shape)
        self._limit = (float(self.params.cfl * local[i, c]), (int(i), int(c)))
        return self._limit

    def rates(self, s: np.ndarray, t: float) -> Tuple[np.ndarray, float, float]:
        '''
        d(phi V S)/dt per compartment and cell, plus the tracer injection and
        exit rates in mm^3/s.
        '''
        change = np.zeros_like(s)
        a, b = self.faces.cells[:, 0], self.faces.cells[:, 1]
        for i, f in enumerate(self.faces.flux):
            moved = np.where(f > 0, f * s[i, a], f * s[i, b])
            np.subtract.at(change[i], a, moved)
            np.add.at(change[i], b, moved)
        for i in range(self.num_compartments):
            for j in range(i + 1, self.num_compartments):
                q = self.exchange[i, j]
                if not np.any(q):
                    continue
                moved = np.where(q > 0, q * s[i], q * s[j])
                change[i] -= moved
                change[j] += moved
        injected = self.injection * self.inlet_values(t)
        change[self.inlet] += injected
        exited = self.sink * s
        change -= exited
        return change, float(injected.sum()), float(exited.sum())

    def step(self, state: SaturationField, dt: float) -> Tuple[SaturationField, float, float]:
        '''
        One Heun step. Returns the new state and the tracer injected and
        removed during the step.
        '''
        limit, (i, c) = self.cfl_limit()
        if dt > limit * (1 + 1e-12):
            raise TransportError(
                f'time step {dt:.6g} s exceeds the CFL limit {limit:.6g} s set by cell {c} '
                f'of compartment {i}'
            )
        s0 = state.values
        k1, in1, out1 = self.rates(s0, state.time)
        predictor = s0 + dt * k1 / self.capacity
        k2, in2, out2 = self.rates(predictor, state.time + dt)
        values = s0 + 0.5 * dt * (k1 + k2) / self.capacity
        return (
            SaturationField(time=state.time + dt, values=values),
            0.5 * dt * (in1 + in2),
            0.5 * dt * (out1 + out2),
        )

    def mass(self, state: SaturationField) -> List[float]:
        return [float(v) for v in (self.capacity * state.values).sum(axis=1)]


def rk2_step(state: SaturationField, dt: float, operator: TransportOperator) -> SaturationField:
    return operator.step(state, dt)[0]


def operator_for(system: CompartmentSystem, pressure: PressureField, velocity: VelocityField,
                 params: TransportParams, inlet_delay: Optional[np.ndarray] = None) -> TransportOperator:
    balance = darcy.cell_balance(system, pressure)
    faces = face_fluxes(system.mesh, velocity, balance)
    volumes = np.abs(system.mesh.signed_volumes())
    return TransportOperator(volumes, faces, balance.exchange, balance.sources, params, inlet_delay)


def run(operator: TransportOperator, params: TransportParams) -> TransportResult:
    '''
    Steps from S = 0 at t = 0 to the end time. The step is the CFL step,
    shortened so snapshot times are hit exactly. The ledger gets one row
    per step.
    '''
    limit, _ = operator.cfl_limit()
    interval = params.snapshot_interval or params.end_time
    if math.isinf(limit):
        per_interval = 1
    else:
        per_interval = max(1, math.ceil(interval / limit - 1e-9))
    dt = interval / per_interval
    expected = math.ceil(params.end_time / dt - 1e-9)
    if expected > params.max_steps:
        raise TransportError(f'{expected} steps needed, more than the allowed {params.max_steps}')

    state = SaturationField(time=0.0, values=np.zeros((operator.num_compartments, operator.num_cells)))
    injected = exited = 0.0
    snapshots = [state]
    ledger = [LedgerRow(time=0.0, mass=operator.mass(state), injected=0.0, exited=0.0)]
    steps = 0
    next_snapshot = interval
    while state.time < params.end_time * (1 - 1e-12):
        h = min(dt, params.end_time - state.time)
        state, tin, tout = operator.step(state, h)
        injected += tin
        exited += tout
        steps += 1
        ledger.append(LedgerRow(time=state.time, mass=operator.mass(state), injected=injected, exited=exited))
        if state.time >= next_snapshot * (1 - 1e-12):
            snapshots.append(state)
            next_snapshot += interval
    if snapshots[-1].time != state.time:
        snapshots.append(state)
    logger.info(
        f'Transport: {steps} step(s) of {dt:.4g} s, injected {injected:.6g} mm^3, '
        f'exited {exited:.6g} mm^3, final imbalance {ledger[-1].imbalance:.3e}'
    )
    return TransportResult(snapshots=snapshots, ledger=ledger, dt=dt, steps=steps)


def simulate_transport(system: CompartmentSystem, pressure: PressureField, velocity: VelocityField,
                       params: TransportParams, inlet_delay: Optional[np.ndarray] = None) -> TransportResult:
    return run(operator_for(system, pressure, velocity, params, inlet_delay), params)


def arrival_times(result: TransportResult, threshold: float = 0.01) -> Dict[int, float]:
    'First snapshot time at which some cell of each compartment exceeds `threshold`'
    times = {}
    for snap in result.snapshots:
        for i, row in enumerate(snap.values):
            if i not in times and np.any(row > threshold):
                times[i] = snap.time
    return {i: times.get(i, math.inf) for i in range(len(result.snapshots[0].values))}


def inlet_delays(mesh: TetMesh, terminal_vertices: Dict[int, int], transit: Dict[int, float]) -> np.ndarray:
    '''
    Per-cell bolus delay: each cell takes the transit time of the terminal
    whose vertex it touches; cells touching several take the smallest.
    '''
    delay = np.zeros(mesh.num_cells)
    best = np.full(mesh.num_cells, np.inf)
    for t, v in terminal_vertices.items():
        cells = np.flatnonzero(np.any(mesh.tets == v, axis=1))
        best[cells] = np.minimum(best[cells], transit[t])
    found = np.isfinite(best)
    delay[found] = best[found]
    return delay
