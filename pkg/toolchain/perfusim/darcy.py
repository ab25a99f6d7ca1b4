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
Multicompartment Darcy flow on a tetrahedral mesh.

For compartments i = 1..N the weak form reads

    int K_i grad p_i . grad q + int sum_j G_ij (p_i - p_j) q = int f_i q

with zero-flux conditions on the organ surface. Pressures are piecewise
linear (P1). Units are mm, s and Pa: K in mm^2/(Pa s), G in 1/(Pa s), nodal
loads in mm^3/s.
'''

import logging
import numpy as np
from scipy import sparse
from scipy.sparse.csgraph import connected_components
from scipy.sparse.linalg import cg
from scipy.spatial import cKDTree
from typing import Dict, List, Optional, Tuple

from perfusim import flow1d
from perfusim.errors import CouplingError, DarcyError
from perfusim.models import (
    CellBalance, CompartmentSpec, CompartmentSystem, CouplingParams, CouplingResult, DarcyParams,
    Flow1dParams, FluidProps, FluxBalance, PressureField, TetMesh, TreeFlowState, VascularTree,
    VelocityField
)

logger = logging.getLogger(__name__)

COMPATIBILITY = 1e-9


def p1_gradients(mesh: TetMesh) -> Tuple[np.ndarray, np.ndarray]:
    '''
    Gradients of the four barycentric basis functions per tetrahedron,
    shape (cells, 4, 3), and the cell volumes. Raises DarcyError for
    degenerate or inverted cells.
    '''
    p = mesh.vertices[mesh.tets]
    jac = p[:, 1:] - p[:, :1]
    volumes = np.linalg.det(jac) / 6.0
    bad = np.flatnonzero(volumes <= 0)
    if len(bad):
        raise DarcyError(f'{len(bad)} inverted or degenerate tetrahedra, first {bad[0]}')
    inverse = np.linalg.inv(jac)
    grads = np.empty((len(p), 4, 3))
    grads[:, 1:] = np.swapaxes(inverse, 1, 2)
    grads[:, 0] = -grads[:, 1:].sum(axis=1)
    return grads, volumes


def _scatter(mesh: TetMesh, local: np.ndarray) -> sparse.csr_matrix:
    rows = np.repeat(mesh.tets, 4, axis=1).ravel()
    cols = np.tile(mesh.tets, (1, 4)).ravel()
    n = mesh.num_vertices
    return sparse.coo_matrix((local.ravel(), (rows, cols)), shape=(n, n)).tocsr()


def mass_matrix(mesh: TetMesh) -> sparse.csr_matrix:
    'Consistent P1 mass matrix'
    _, volumes = p1_gradients(mesh)
    local = (np.ones((4, 4)) + np.eye(4))[None] * (volumes / 20.0)[:, None, None]
    return _scatter(mesh, local)


def _check_permeability(spec: CompartmentSpec, cells: int) -> np.ndarray:
    k = spec.per_cell(cells)
    lowest = np.linalg.eigvalsh(k).min(axis=1)
    scale = max(1.0, float(np.abs(k).max()))
    bad = np.flatnonzero(lowest < -1e-12 * scale)
    if len(bad):
        raise DarcyError(f'permeability of compartment {spec.id} is not positive semidefinite in cell {bad[0]}')
    return k


def stiffness_matrix(mesh: TetMesh, permeability: np.ndarray) -> sparse.csr_matrix:
    'P1 stiffness for per-cell tensors of shape (cells, 3, 3)'
    grads, volumes = p1_gradients(mesh)
    local = np.einsum('cai,cij,cbj->cab', grads, permeability, grads) * volumes[:, None, None]
    return _scatter(mesh, local)


def assemble(system: CompartmentSystem) -> Tuple[sparse.csr_matrix, np.ndarray]:
    '''
    Global matrix with stiffness plus exchange blocks on the diagonal and
    -G_ij M off the diagonal, and the stacked load vector. Unknowns are
    ordered compartment by compartment.
    '''
    mesh = system.mesh
    mass = mass_matrix(mesh)
    n = system.size
    blocks = [[None] * n for _ in range(n)]
    for i, spec in enumerate(system.compartments):
        k = _check_permeability(spec, mesh.num_cells)
        diagonal = stiffness_matrix(mesh, k)
        for j in range(n):
            g = system.coupling[i, j]
            if j != i and g > 0:
                diagonal = diagonal + g * mass
                blocks[i][j] = -g * mass
        blocks[i][i] = diagonal
    matrix = sparse.bmat(blocks, format='csr')
    # exact symmetry regardless of summation order
    matrix = ((matrix + matrix.T) * 0.5).tocsr()
    return matrix, system.sources.ravel().copy()


def _coupled_groups(coupling: np.ndarray) -> List[List[int]]:
    count, labels = connected_components(sparse.csr_matrix(coupling > 0), directed=False)
    return [list(np.flatnonzero(labels == k)) for k in range(count)]


def solve_pressure(system: CompartmentSystem, tolerance: float = 1e-10,
                   max_iterations: Optional[int] = None) -> PressureField:
    '''
    Jacobi-preconditioned conjugate gradients. Fixed pressures are
    eliminated. A group of coupled compartments without fixed pressures is
    determined up to a common constant: its loads must sum to zero and the
    zero-mean solution is returned.
    '''
    matrix, load = assemble(system)
    nv = system.mesh.num_vertices
    n = system.size

    fixed = np.zeros(n * nv, dtype=bool)
    values = np.zeros(n * nv)
    for i, nodes in system.fixed.items():
        for v, p in nodes.items():
            fixed[i * nv + v] = True
            values[i * nv + v] = p

    floating = []
    scale = float(np.linalg.norm(load))
    for group in _coupled_groups(system.coupling):
        dofs = np.concatenate([np.arange(i * nv, (i + 1) * nv) for i in group])
        if fixed[dofs].any():
            continue
        total = float(load[dofs].sum())
        if abs(total) > COMPATIBILITY * max(scale, 1e-300):
            raise DarcyError(
                f'incompatible loads: compartments {group} have no fixed pressure '
                f'but their sources sum to {total:.6g} mm^3/s'
            )
        load[dofs] -= total / len(dofs)
        floating.append(dofs)

    free = np.flatnonzero(~fixed)
    a_ff = matrix[free][:, free]
    rhs = load[free] - matrix[free][:, fixed] @ values[fixed]
    solution = values.copy()
    iterations = 0
    if np.any(rhs != 0):
        diag = a_ff.diagonal()
        inverse = np.where(diag > 0, 1.0 / np.where(diag > 0, diag, 1.0), 1.0)
        preconditioner = sparse.diags(inverse)
        counter = []
        x, info = cg(
            a_ff, rhs, rtol=tolerance, atol=0.0, maxiter=max_iterations,
            M=preconditioner, callback=lambda _: counter.append(1)
        )
        iterations = len(counter)
        if info != 0:
            residual = np.linalg.norm(a_ff @ x - rhs) / np.linalg.norm(rhs)
            raise DarcyError(f'CG stagnated after {iterations} iterations, relative residual {residual:.3e}')
        solution[free] = x
    for dofs in floating:
        solution[dofs] -= solution[dofs].mean()
    logger.info(f'Darcy solve: {len(free)} unknowns, {iterations} CG iteration(s)')
    return PressureField(values=solution.reshape(n, nv), cg_iterations=iterations)


def darcy_velocity(pressure: PressureField, system: CompartmentSystem) -> VelocityField:
    'Cellwise w = -K grad p'
    grads, _ = p1_gradients(system.mesh)
    out = np.empty((system.size, system.mesh.num_cells, 3))
    for i, spec in enumerate(system.compartments):
        nodal = pressure.values[i][system.mesh.tets]
        gradient = np.einsum('ca,cai->ci', nodal, grads)
        out[i] = -np.einsum('cij,cj->ci', spec.per_cell(system.mesh.num_cells), gradient)
    return VelocityField(values=out)


def volumetric_load(mesh: TetMesh, density) -> np.ndarray:
    '''
    Consistent nodal loads (mm^3/s) for a source density in 1/s, given as a
    scalar or per vertex.
    '''
    d = np.broadcast_to(np.asarray(density, dtype=np.float64), (mesh.num_vertices,))
    return mass_matrix(mesh) @ d


def _nearest_vertices(mesh: TetMesh, points: np.ndarray, tolerance: float) -> np.ndarray:
    distance, index = cKDTree(mesh.vertices).query(points)
    far = np.flatnonzero(distance > tolerance)
    if len(far):
        raise DarcyError(
            f'{len(far)} terminal(s) farther than {tolerance} mm from the mesh, '
            f'worst {distance.max():.3g} mm'
        )
    return np.atleast_1d(index)


def build_sources(tree: VascularTree, flow: TreeFlowState, mesh: TetMesh, compartment: int,
                  sign: float = 1.0, num_compartments: int = 3, tolerance: float = 5.0,
                  spread: Optional[float] = None) -> np.ndarray:
    '''
    Nodal loads of shape (num_compartments, vertices), nonzero only in row
    `compartment`. Each terminal deposits sign * A_k w_k of its terminal edge
    (mm^3/s) on the nearest vertex, or over a Gaussian of width `spread`
    around it, normalised so that loads sum to the deposited flux.
    '''
    if not 0 <= compartment < num_compartments:
        raise ValueError(f'compartment {compartment} outside 0..{num_compartments - 1}')
    fluxes = flow1d.terminal_fluxes(tree, flow)
    terminals = sorted(fluxes)
    nodes = tree.node_map()
    points = np.array([nodes[t].position for t in terminals]).reshape(-1, 3)
    loads = np.zeros((num_compartments, mesh.num_vertices))
    if not terminals:
        return loads
    nearest = _nearest_vertices(mesh, points, tolerance)
    row = loads[compartment]
    if spread is None:
        for t, v in zip(terminals, nearest):
            row[v] += sign * fluxes[t]
        return loads
    index = cKDTree(mesh.vertices)
    for t, p, v in zip(terminals, points, nearest):
        around = np.array(index.query_ball_point(p, 3.0 * spread), dtype=int)
        if len(around) == 0:
            around = np.array([v])
        weights = np.exp(-np.sum((mesh.vertices[around] - p) ** 2, axis=1) / (2 * spread ** 2))
        row[around] += sign * fluxes[t] * weights / weights.sum()
    return loads


def system_from_params(mesh: TetMesh, params: DarcyParams,
                       sources: Optional[np.ndarray] = None) -> CompartmentSystem:
    compartments = [
        CompartmentSpec(id=i, name=c.name, permeability=c.permeability)
        for i, c in enumerate(params.compartments)
    ]
    n = len(compartments)
    return CompartmentSystem(
        mesh=mesh,
        compartments=compartments,
        coupling=params.coupling_matrix(),
        sources=np.zeros((n, mesh.num_vertices)) if sources is None else sources,
    )


def sample_terminal_pressures(tree: VascularTree, mesh: TetMesh, pressure: np.ndarray,
                              tolerance: float) -> Dict[int, float]:
    'Nodal pressure at the vertex nearest to each terminal'
    terminals = tree.terminals()
    nodes = tree.node_map()
    points = np.array([nodes[t].position for t in terminals]).reshape(-1, 3)
    nearest = _nearest_vertices(mesh, points, tolerance)
    return {t: float(pressure[v]) for t, v in zip(terminals, nearest)}


def couple_1d_3d(portal: VascularTree, hepatic: VascularTree, system: CompartmentSystem,
                 props: FluidProps, w0_portal: float, params: Optional[CouplingParams] = None,
                 darcy: Optional[DarcyParams] = None,
                 flow_params: Optional[Flow1dParams] = None) -> CouplingResult:
    '''
    Fixed-point iteration between the two trees and the Darcy system.

    Each iteration samples the portal and hepatic compartment pressures at
    the tree terminals, solves both trees, turns terminal fluxes into loads
    (hepatic sinks rescaled to match the portal inflow exactly), relaxes the
    loads with factor theta and solves for the pressures. The hepatic root
    velocity follows from conservation: A_h w_h = -A_p w_p, so hepatic edge
    velocities are negative (blood runs towards the root).
    '''
    params = params or CouplingParams()
    darcy = darcy or DarcyParams()
    flow_params = flow_params or Flow1dParams()
    mesh = system.mesh
    n = system.size
    ip, ih = params.portal_compartment, params.hepatic_compartment
    if not (0 <= ip < n and 0 <= ih < n) or ip == ih:
        raise ValueError(f'portal and hepatic compartments must be distinct indices below {n}')

    a_portal = flow1d.FlowSystem(portal, props, w0_portal, {t: 0.0 for t in portal.terminals()}).area
    a_hepatic = flow1d.FlowSystem(hepatic, props, 0.0, {t: 0.0 for t in hepatic.terminals()}).area
    root_p = sorted(e.id for e in portal.edges).index(portal.root_edge().id)
    root_h = sorted(e.id for e in hepatic.edges).index(hepatic.root_edge().id)
    w0_hepatic = -a_portal[root_p] * w0_portal / a_hepatic[root_h]
    logger.info(f'Coupling: portal w0 {w0_portal:.6g} m/s, hepatic w0 {w0_hepatic:.6g} m/s')

    base = system.sources.copy()
    base[ip] = 0.0
    base[ih] = 0.0
    loads = np.zeros_like(base)
    current = system.with_sources(base)
    pressure = solve_pressure(current, darcy.cg_tolerance, darcy.cg_max_iterations) \
        if np.any(base) else PressureField(values=np.zeros((n, mesh.num_vertices)))

    history = []
    previous_fluxes = None
    for iteration in range(1, params.max_iterations + 1):
        p_portal = sample_terminal_pressures(portal, mesh, pressure.values[ip], darcy.source_tolerance)
        p_hepatic = sample_terminal_pressures(hepatic, mesh, pressure.values[ih], darcy.source_tolerance)
        s_portal = flow1d.solve_tree_flow(portal, w0_portal, p_portal, props, flow_params)
        s_hepatic = flow1d.solve_tree_flow(hepatic, w0_hepatic, p_hepatic, props, flow_params)

        inflow = build_sources(portal, s_portal, mesh, ip, 1.0, n, darcy.source_tolerance, darcy.source_spread)
        outflow = build_sources(hepatic, s_hepatic, mesh, ih, 1.0, n, darcy.source_tolerance, darcy.source_spread)
        total_in, total_out = inflow.sum(), outflow.sum()
        if total_out != 0:
            outflow *= -total_in / total_out
        fresh = inflow + outflow
        loads = fresh if previous_fluxes is None else params.relaxation * fresh + (1 - params.relaxation) * loads

        fluxes = np.concatenate([
            list(flow1d.terminal_fluxes(portal, s_portal).values()),
            list(flow1d.terminal_fluxes(hepatic, s_hepatic).values()),
        ])
        if previous_fluxes is None:
            change = 1.0
        else:
            change = float(np.abs(fluxes - previous_fluxes).max() / max(np.abs(fluxes).max(), 1e-300))
        history.append(change)
        previous_fluxes = fluxes
        logger.info(f'Coupling iteration {iteration}: relative terminal flux change {change:.3e}')

        current = system.with_sources(base + loads)
        pressure = solve_pressure(current, darcy.cg_tolerance, darcy.cg_max_iterations)
        if change < params.tolerance:
            return CouplingResult(
                portal=s_portal, hepatic=s_hepatic, pressure=pressure, system=current,
                iterations=iteration, history=history,
            )
    raise CouplingError(
        f'1D/3D coupling did not converge in {params.max_iterations} iterations '
        f'(last change {history[-1]:.3e})', history
    )


def _fixed_reactions(system: CompartmentSystem, pressure: PressureField) -> np.ndarray:
    'Load entering through fixed-pressure nodes, per compartment and vertex'
    reactions = np.zeros_like(system.sources)
    if not system.fixed:
        return reactions
    matrix, load = assemble(system)
    residual = (matrix @ pressure.values.ravel() - load).reshape(reactions.shape)
    for i, nodes in system.fixed.items():
        idx = list(nodes)
        reactions[i, idx] = residual[i, idx]
    return reactions


def flux_report(system: CompartmentSystem, pressure: PressureField) -> List[FluxBalance]:
    '''
    Per compartment: source inflow, sink outflow, reaction at fixed nodes and
    the exchange G_ij int (p_i - p_j) with every coupled compartment.
    '''
    mass = mass_matrix(system.mesh)
    ones = np.ones(system.mesh.num_vertices)
    reactions = _fixed_reactions(system, pressure)
    report = []
    for i in range(system.size):
        f = system.sources[i]
        exchange = {}
        for j in range(system.size):
            if j != i and system.coupling[i, j] > 0:
                diff = pressure.values[i] - pressure.values[j]
                exchange[j] = float(system.coupling[i, j] * ones @ (mass @ diff))
        report.append(FluxBalance(
            compartment=i,
            inflow=float(f[f > 0].sum()),
            outflow=float(-f[f < 0].sum()),
            exchange=exchange,
            reaction=float(reactions[i].sum()),
        ))
    return report


def cell_balance(system: CompartmentSystem, pressure: PressureField) -> CellBalance:
    '''
    Nodal loads and reactions shared among the cells around each vertex in
    proportion to cell volume, and the exact P1 integral of the exchange
    G_ij (p_i - p_j) over every cell.
    '''
    mesh = system.mesh
    _, volumes = p1_gradients(mesh)
    nodal = system.sources + _fixed_reactions(system, pressure)
    around = np.zeros(mesh.num_vertices)
    np.add.at(around, mesh.tets.ravel(), np.repeat(volumes, 4))
    share = np.divide(1.0, around, out=np.zeros_like(around), where=around > 0)
    n = system.size
    sources = np.zeros((n, mesh.num_cells))
    for i in range(n):
        per_vertex = nodal[i] * share
        sources[i] = volumes * per_vertex[mesh.tets].sum(axis=1)
    exchange = np.zeros((n, n, mesh.num_cells))
    for i in range(n):
        for j in range(n):
            g = system.coupling[i, j]
            if j != i and g > 0:
                diff = (pressure.values[i] - pressure.values[j])[mesh.tets].mean(axis=1)
                exchange[i, j] = g * volumes * diff
    return CellBalance(sources=sources, exchange=exchange)
