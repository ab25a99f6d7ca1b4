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
Steady flow in a vessel tree.

Unknowns are the edge velocities and the pressures of the root and the
branching nodes; the root velocity and terminal pressures are given. Every
branching node conserves volume flux, every edge satisfies Bernoulli's
equation with a laminar friction loss:

    p_u + rho w_in(u)^2 / 2 = p_v + rho w_e^2 / 2 + 32 mu L w_e / D^2

where w_in(u) is the velocity of the edge entering u (the root velocity at
the root). Summed along a path this gives the root-to-terminal energy
balance. Trees store millimetres; the solver works in SI units.
'''

import logging
import math
import numpy as np
from scipy import sparse
from scipy.sparse.linalg import splu
from typing import Dict, Optional

from perfusim.errors import FlowSolverError, TreeError
from perfusim.models import Flow1dParams, FluidProps, TreeFlowState, VascularTree

logger = logging.getLogger(__name__)

MM = 1e-3
MM3 = 1e-9


def branch_loss(w: float, length: float, diameter: float, props: FluidProps) -> float:
    '''
    Friction loss in Pa for velocity w (m/s) in a tube of given length and
    diameter (m). The Darcy-Weisbach form with the laminar factor 64/Re
    reduces to 32 mu L w / D^2, which stays regular at w = 0 and carries
    the sign of w.
    '''
    if diameter <= 0:
        raise ValueError('diameter must be > 0')
    return 32.0 * props.viscosity * length * w / diameter ** 2


class FlowSystem:
    '''
    Residual and Jacobian of the flow equations of one tree.

    The unknown vector holds the velocities of all edges except the root
    edge (ordered by edge id), followed by the pressures of the root and of
    the branching nodes (ordered by node id).
    '''

    def __init__(self, tree: VascularTree, props: FluidProps, w0: float,
                 terminal_pressures: Dict[int, float]):
        tree.check()
        self.tree = tree
        self.props = props
        self.w0 = float(w0)
        root_edge = tree.root_edge()

        edges = sorted(tree.edges, key=lambda e: e.id)
        self.edge_ids = [e.id for e in edges]
        for e in edges:
            if e.radius <= 0:
                raise TreeError(f'edge {e.id} has zero radius')
        radius = np.array([e.radius for e in edges]) * MM
        self.area = math.pi * radius ** 2
        self.length = np.array([e.length for e in edges]) * MM
        self.friction = 32.0 * props.viscosity * self.length / (2 * radius) ** 2

        self.node_ids = sorted(n.id for n in tree.nodes)
        index = {n: i for i, n in enumerate(self.node_ids)}
        self.parent = np.array([index[e.parent] for e in edges])
        self.child = np.array([index[e.child] for e in edges])

        terminals = tree.terminals()
        missing = [t for t in terminals if t not in terminal_pressures]
        if missing:
            raise ValueError(f'no pressure given for terminal(s) {missing}')
        self.terminal_index = np.array([index[t] for t in terminals], dtype=int)
        self.terminal_values = np.array([float(terminal_pressures[t]) for t in terminals])
        kinds = tree.node_map()
        self.free_nodes = [n for n in self.node_ids if kinds[n].kind != 'terminal']
        self.free_index = np.array([index[n] for n in self.free_nodes], dtype=int)
        self.junctions = [n for n in self.free_nodes if n != tree.root]

        self.root_pos = self.edge_ids.index(root_edge.id)
        self.num_edges = len(edges)
        self.num_w = self.num_edges - 1
        self.w_var = np.full(self.num_edges, -1)
        self.w_var[[i for i in range(self.num_edges) if i != self.root_pos]] = np.arange(self.num_w)
        self.p_var = np.full(len(self.node_ids), -1)
        self.p_var[self.free_index] = self.num_w + np.arange(len(self.free_index))

        into = {c: i for i, c in enumerate(self.child)}
        self.up = np.array([into.get(p, -1) for p in self.parent])
        self.junction_index = np.array([index[n] for n in self.junctions], dtype=int)

    @property
    def size(self) -> int:
        return self.num_w + len(self.free_index)

    def velocities(self, x: np.ndarray) -> np.ndarray:
        w = np.empty(self.num_edges)
        w[self.root_pos] = self.w0
        w[self.w_var >= 0] = x[:self.num_w]
        return w

    def pressures(self, x: np.ndarray) -> np.ndarray:
        p = np.empty(len(self.node_ids))
        p[self.terminal_index] = self.terminal_values
        p[self.free_index] = x[self.num_w:]
        return p

    def pack(self, state: TreeFlowState) -> np.ndarray:
        w = np.array([state.velocities[e] for e in self.edge_ids])
        p = np.array([state.pressures[n] for n in self.free_nodes])
        return np.concatenate([w[self.w_var >= 0], p])

    def initial_guess(self) -> np.ndarray:
        'Root flux split equally at every node; pressures at the terminal mean'
        flux = np.zeros(self.num_edges)
        flux[self.root_pos] = self.area[self.root_pos] * self.w0
        out = {}
        for i, p in enumerate(self.parent):
            out.setdefault(p, []).append(i)
        stack = [self.root_pos]
        while stack:
            i = stack.pop()
            kids = out.get(self.child[i], [])
            for k in kids:
                flux[k] = flux[i] / len(kids)
                stack.append(k)
        w = flux / self.area
        mean = float(self.terminal_values.mean()) if len(self.terminal_values) else 0.0
        return np.concatenate([w[self.w_var >= 0], np.full(len(self.free_index), mean)])

    def equations(self, w: np.ndarray, p: np.ndarray, w0: Optional[float] = None) -> np.ndarray:
        '''
        Mass balance per branching node (inflow minus outflow, m^3/s) then
        Bernoulli per edge (Pa) for arbitrary velocities and pressures.
        '''
        w0 = self.w0 if w0 is None else w0
        q = self.area * w
        balance = np.zeros(len(self.node_ids))
        np.add.at(balance, self.child, q)
        np.subtract.at(balance, self.parent, q)
        rho = self.props.density
        w_in = np.where(self.up >= 0, w[self.up], w0)
        bernoulli = (p[self.parent] + 0.5 * rho * w_in ** 2
                     - p[self.child] - 0.5 * rho * w ** 2 - self.friction * w)
        return np.concatenate([balance[self.junction_index], bernoulli])

    def residual(self, x: np.ndarray) -> np.ndarray:
        return self.equations(self.velocities(x), self.pressures(x))

    def jacobian(self, x: np.ndarray) -> sparse.csc_matrix:
        w = self.velocities(x)
        rho = self.props.density
        rows, cols, vals = [], [], []
        row_of = {n: r for r, n in enumerate(self.junction_index)}
        for i in range(self.num_edges):
            col = self.w_var[i]
            if col < 0:
                continue
            if self.child[i] in row_of:
                rows.append(row_of[self.child[i]])
                cols.append(col)
                vals.append(self.area[i])
            if self.parent[i] in row_of:
                rows.append(row_of[self.parent[i]])
                cols.append(col)
                vals.append(-self.area[i])
        offset = len(self.junction_index)
        for i in range(self.num_edges):
            r = offset + i
            rows.append(r)
            cols.append(self.p_var[self.parent[i]])
            vals.append(1.0)
            if self.p_var[self.child[i]] >= 0:
                rows.append(r)
                cols.append(self.p_var[self.child[i]])
                vals.append(-1.0)
            if self.w_var[i] >= 0:
                rows.append(r)
                cols.append(self.w_var[i])
                vals.append(-rho * w[i] - self.friction[i])
            up = self.up[i]
            if up >= 0 and self.w_var[up] >= 0:
                rows.append(r)
                cols.append(self.w_var[up])
                vals.append(rho * w[up])
        return sparse.coo_matrix((vals, (rows, cols)), shape=(self.size, self.size)).tocsc()

    def state(self, x: np.ndarray, iterations: int = 0, history=None) -> TreeFlowState:
        w = self.velocities(x)
        p = self.pressures(x)
        return TreeFlowState(
            velocities={e: float(v) for e, v in zip(self.edge_ids, w)},
            areas={e: float(a) for e, a in zip(self.edge_ids, self.area)},
            pressures={n: float(v) for n, v in zip(self.node_ids, p)},
            w0=self.w0,
            iterations=iterations,
            residual_history=list(history or []),
        )

    def _singular_node(self, x: np.ndarray) -> Optional[int]:
        w = self.velocities(x)
        stiffness = np.abs(self.props.density * w + self.friction)
        stiffness[self.root_pos] = np.inf
        i = int(np.argmin(stiffness))
        return self.node_ids[self.child[i]] if stiffness[i] == 0 else None

    def solve(self, params: Flow1dParams) -> TreeFlowState:
        scale = params.tolerance * max(1.0, self.props.density * self.w0 ** 2)
        x = self.initial_guess()
        history = []
        for iteration in range(params.max_iterations + 1):
            r = self.residual(x)
            norm = float(np.abs(r).max()) if r.size else 0.0
            history.append(norm)
            logger.debug(f'Newton iteration {iteration}: residual {norm:.3e}')
            if norm < scale:
                logger.info(f'Tree flow converged in {iteration} Newton iteration(s), residual {norm:.3e}')
                return self.state(x, iteration, history)
            if iteration == params.max_iterations:
                break
            try:
                step = splu(self.jacobian(x)).solve(-r)
            except RuntimeError as err:
                node = self._singular_node(x)
                raise FlowSolverError(f'singular Jacobian at node {node}: {err}', history, node) from err
            if not np.all(np.isfinite(step)):
                raise FlowSolverError('non-finite Newton step', history, self._singular_node(x))
            x = x + step
        raise FlowSolverError(
            f'Newton did not converge in {params.max_iterations} iterations '
            f'(residual {history[-1]:.3e})', history
        )


def tree_residual(tree: VascularTree, state: TreeFlowState, props: FluidProps) -> np.ndarray:
    '''
    Flow equations evaluated at `state`: branching-node mass balances
    (ordered by node id) followed by edge Bernoulli balances (ordered by
    edge id). The root edge is taken at the velocity the state stores.
    '''
    terminals = {t: state.pressures[t] for t in tree.terminals()}
    system = FlowSystem(tree, props, state.w0, terminals)
    w = np.array([state.velocities[e] for e in system.edge_ids])
    p = np.array([state.pressures[n] for n in system.node_ids])
    return system.equations(w, p, state.w0)


def solve_tree_flow(tree: VascularTree, w0: float, terminal_pressures: Dict[int, float],
                    props: FluidProps, params: Optional[Flow1dParams] = None) -> TreeFlowState:
    'Newton solve for root pressure and terminal velocities given the root velocity'
    state = FlowSystem(tree, props, w0, terminal_pressures).solve(params or Flow1dParams())
    backflow = [e for e, v in state.velocities.items() if v * w0 < 0]
    if backflow:
        logger.warning(f'Backflow in {len(backflow)} edge(s), first {backflow[0]}')
    return state


def transit_times(tree: VascularTree, state: TreeFlowState) -> Dict[int, float]:
    '''
    Plug-flow travel time in seconds from the root to each terminal, the sum
    of L / w over the path. A path edge without forward flow makes the time
    infinite.
    '''
    times = {}
    for t in tree.terminals():
        total = 0.0
        for e in tree.path_edges(t):
            w = state.velocities[e.id]
            if w <= 0:
                total = math.inf
                break
            total += e.length * MM / w
        if math.isinf(total):
            logger.warning(f'Terminal {t} is not reached by forward flow; transit time is infinite')
        times[t] = total
    return times


def annotate_tree(tree: VascularTree, state: TreeFlowState) -> VascularTree:
    'Copy of `tree` with edge flows set from the solved state, in mm^3/s'
    edges = [e.model_copy(update={'flow': state.flux(e.id) / MM3}) for e in tree.edges]
    return tree.model_copy(update={'edges': edges})


def terminal_fluxes(tree: VascularTree, state: TreeFlowState) -> Dict[int, float]:
    'Volumetric flux out of each terminal edge, in mm^3/s'
    up = tree.parent_edge()
    return {t: state.flux(up[t].id) / MM3 for t in tree.terminals()}
