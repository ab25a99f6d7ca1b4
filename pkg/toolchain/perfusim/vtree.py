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
Vascular trees: Horton-Strahler orders, flows, Murray radii, the
volume-plus-dissipation cost and synthesis of trees by constructive
optimisation (smoothing, pruning and reconnecting).

Cost of an edge of length L, radius r and flow Q:

    c_v * pi * r^2 * L + c_f * 8 * mu * L * Q^2 / (pi * r^4)

With Murray radii both terms depend on the flow only, so during synthesis
every edge has a fixed weight per unit length and moving a node only
changes the cost of its incident edges. relax_node and split_node applied
to a tree that already carries flows weight each edge by its own radius
and flow instead.
'''

import itertools
import logging
import math
import networkx as nx
import numpy as np
from scipy.spatial import cKDTree
from typing import Dict, List, Optional, Sequence, Set, Tuple, Union

from perfusim.errors import TreeError
from perfusim.models import BinaryMask, Edge, Node, StubDefinition, TetMesh, TreeGenParams, VascularTree

logger = logging.getLogger(__name__)

Point = Tuple[float, float, float]


def horton_strahler(tree: VascularTree) -> Dict[int, int]:
    'Order of every edge, keyed by edge id'
    tree.check()
    g = tree.to_graph()
    node_order = {}
    for n in nx.dfs_postorder_nodes(g, tree.root):
        below = [node_order[c] for c in g.successors(n)]
        if not below:
            node_order[n] = 1
            continue
        top = max(below)
        node_order[n] = top + 1 if below.count(top) >= 2 else top
    return {e.id: node_order[e.child] for e in tree.edges}


def _terminal_counts(tree: VascularTree) -> Dict[int, int]:
    g = tree.to_graph()
    kinds = {n.id: n.kind for n in tree.nodes}
    counts = {}
    for n in nx.dfs_postorder_nodes(g, tree.root):
        counts[n] = sum(counts[c] for c in g.successors(n)) + (kinds[n] == 'terminal')
    return counts


def assign_flows(tree: VascularTree, q_t: float) -> VascularTree:
    'Each edge carries q_t per terminal below it'
    tree.check()
    counts = _terminal_counts(tree)
    edges = [e.model_copy(update={'flow': q_t * counts[e.child]}) for e in tree.edges]
    return tree.model_copy(update={'edges': edges})


def _root_flow(tree: VascularTree) -> float:
    out = [e for e in tree.edges if e.parent == tree.root]
    if any(e.flow is None for e in tree.edges):
        raise TreeError('flows are not assigned')
    return float(sum(e.flow for e in out))


def assign_radii_murray(tree: VascularTree, root_radius: float, gamma: float) -> VascularTree:
    '''
    r = root_radius * (Q / Q_root)^(1/gamma), so r_parent^gamma equals the
    sum of r_child^gamma wherever flow is conserved.
    '''
    if root_radius <= 0 or gamma <= 0:
        raise ValueError('root radius and exponent must be positive')
    q_root = _root_flow(tree)
    if q_root <= 0:
        raise TreeError('zero root flow')
    edges = [
        e.model_copy(update={'radius': root_radius * (max(e.flow, 0.0) / q_root) ** (1.0 / gamma)})
        for e in tree.edges
    ]
    return tree.model_copy(update={'edges': edges})


def edge_cost(length: float, radius: float, flow: float, params: TreeGenParams) -> float:
    volume = params.volume_weight * math.pi * radius ** 2 * length
    if flow == 0:
        return volume
    if radius <= 0:
        raise TreeError('zero radius with nonzero flow')
    friction = params.friction_weight * 8.0 * params.viscosity * length * flow ** 2 / (math.pi * radius ** 4)
    return volume + friction


def tree_cost(tree: VascularTree, params: TreeGenParams) -> float:
    total = 0.0
    for e in tree.edges:
        if e.flow is None:
            raise TreeError(f'edge {e.id} has no flow')
        total += edge_cost(e.length, e.radius, e.flow, params)
    return total


def with_lengths(tree: VascularTree) -> VascularTree:
    'Edge lengths set to the distance between their end nodes'
    pos = {n.id: n.position for n in tree.nodes}
    edges = [e.model_copy(update={'length': math.dist(pos[e.parent], pos[e.child])}) for e in tree.edges]
    return tree.model_copy(update={'edges': edges})


def _fw_cost(x: Point, anchors: Sequence[Point], weights: Sequence[float]) -> float:
    return sum(w * math.dist(x, a) for a, w in zip(anchors, weights))


def fermat_weber(anchors: Sequence[Point], weights: Sequence[float], start: Point,
                 tolerance: float, max_iterations: int = 1000) -> Point:
    '''
    Point minimising the weighted sum of distances to `anchors`. An anchor is
    returned when it is optimal (its own weight outweighs the pull of all
    others); otherwise Weiszfeld iterations run from `start` until the step
    drops below `tolerance`. Never returns a point worse than `start`.
    '''
    grouped: Dict[Point, float] = {}
    for a, w in zip(anchors, weights):
        if w > 0:
            a = tuple(a)
            grouped[a] = grouped.get(a, 0.0) + w
    start = tuple(start)
    if not grouped:
        return start
    items = list(grouped.items())
    start_cost = _fw_cost(start, grouped.keys(), grouped.values())

    for a, wa in items:
        rx = ry = rz = 0.0
        for b, wb in items:
            if b == a:
                continue
            d = math.dist(a, b)
            rx += wb * (a[0] - b[0]) / d
            ry += wb * (a[1] - b[1]) / d
            rz += wb * (a[2] - b[2]) / d
        if math.sqrt(rx * rx + ry * ry + rz * rz) <= wa:
            if _fw_cost(a, grouped.keys(), grouped.values()) <= start_cost:
                return a
            return start

    x = start
    if x in grouped:
        total = sum(grouped.values())
        x = tuple(sum(w * a[i] for a, w in items) / total for i in range(3))
        if x in grouped:
            return start
    for _ in range(max_iterations):
        sx = sy = sz = sw = 0.0
        for a, w in items:
            d = math.dist(x, a)
            if d == 0.0:
                break
            f = w / d
            sx += f * a[0]
            sy += f * a[1]
            sz += f * a[2]
            sw += f
        else:
            nxt = (sx / sw, sy / sw, sz / sw)
            step = math.dist(nxt, x)
            x = nxt
            if step < tolerance:
                break
            continue
        break
    if _fw_cost(x, grouped.keys(), grouped.values()) <= start_cost:
        return x
    return start


class _EdgeWeights:
    'Cost per unit length of an edge feeding m terminals, under Murray radii'

    def __init__(self, params: TreeGenParams, total_terminals: int):
        self.params = params
        self.total = max(total_terminals, 1)
        self._cache: Dict[int, float] = {}

    def radius(self, m: int) -> float:
        return self.params.root_radius * (m / self.total) ** (1.0 / self.params.murray_exponent)

    def flow(self, m: int) -> float:
        return m * self.params.terminal_flow

    def __call__(self, m: int) -> float:
        if m not in self._cache:
            self._cache[m] = 0.0 if m == 0 else edge_cost(1.0, self.radius(m), self.flow(m), self.params)
        return self._cache[m]

    def edge(self, work: '_WorkTree', n: int) -> float:
        'Weight of the edge into n'
        return self(work.counts[n])

    def joined(self, work: '_WorkTree', nodes: Sequence[int]) -> float:
        'Weight of a new edge feeding all of `nodes`'
        return self(sum(work.counts[c] for c in nodes))

    def radius_flow(self, work: '_WorkTree', n: int) -> Tuple[float, float]:
        m = work.counts[n]
        return self.radius(m), self.flow(m)

    def register(self, work: '_WorkTree', j: int, nodes: Sequence[int]):
        pass


class _StoredWeights(_EdgeWeights):
    '''
    Cost per unit length from the radius and flow each edge of the given
    tree carries. A new edge above a group of edges gets the Murray radius
    of the group and the sum of its flows.
    '''

    def __init__(self, params: TreeGenParams, tree: VascularTree):
        super().__init__(params, len(tree.terminals()))
        self.stored: Dict[int, Tuple[float, float]] = {e.child: (e.radius, e.flow) for e in tree.edges}

    def _join(self, nodes: Sequence[int]) -> Tuple[float, float]:
        gamma = self.params.murray_exponent
        radius = sum(self.stored[c][0] ** gamma for c in nodes) ** (1.0 / gamma)
        return radius, sum(self.stored[c][1] for c in nodes)

    def edge(self, work: '_WorkTree', n: int) -> float:
        return edge_cost(1.0, *self.stored[n], self.params)

    def joined(self, work: '_WorkTree', nodes: Sequence[int]) -> float:
        return edge_cost(1.0, *self._join(nodes), self.params)

    def radius_flow(self, work: '_WorkTree', n: int) -> Tuple[float, float]:
        return self.stored[n]

    def register(self, work: '_WorkTree', j: int, nodes: Sequence[int]):
        self.stored[j] = self._join(nodes)


def _weights_for(tree: VascularTree, params: TreeGenParams) -> _EdgeWeights:
    'Stored edge weights when the tree carries flows, Murray weights otherwise'
    if tree.edges and all(e.flow is not None for e in tree.edges):
        return _StoredWeights(params, tree)
    return _EdgeWeights(params, len(tree.terminals()))


class _WorkTree:
    '''
    Mutable tree used during optimisation. Positions are tuples, edges are
    implied by `parent` (child -> parent).
    '''

    def __init__(self):
        self.pos: Dict[int, Point] = {}
        self.parent: Dict[int, int] = {}
        self.children: Dict[int, List[int]] = {}
        self.kind: Dict[int, str] = {}
        self.fixed: Set[int] = set()
        self.root: int = 0
        self.counts: Dict[int, int] = {}

    @classmethod
    def from_tree(cls, tree: VascularTree) -> '_WorkTree':
        tree.check()
        w = cls()
        w.root = tree.root
        for n in tree.nodes:
            w.pos[n.id] = tuple(float(c) for c in n.position)
            w.kind[n.id] = n.kind
            w.children[n.id] = []
            if n.fixed or n.id == tree.root:
                w.fixed.add(n.id)
        for e in sorted(tree.edges, key=lambda e: e.child):
            w.parent[e.child] = e.parent
            w.children[e.parent].append(e.child)
        w.update_counts()
        return w

    def copy(self) -> '_WorkTree':
        w = _WorkTree()
        w.pos = dict(self.pos)
        w.parent = dict(self.parent)
        w.children = {n: list(c) for n, c in self.children.items()}
        w.kind = dict(self.kind)
        w.fixed = set(self.fixed)
        w.root = self.root
        w.counts = dict(self.counts)
        return w

    def next_id(self) -> int:
        return max(self.pos) + 1

    def postorder(self) -> List[int]:
        out, stack = [], [(self.root, False)]
        while stack:
            n, done = stack.pop()
            if done:
                out.append(n)
                continue
            stack.append((n, True))
            for c in reversed(self.children[n]):
                stack.append((c, False))
        return out

    def update_counts(self):
        for n in self.postorder():
            self.counts[n] = sum(self.counts[c] for c in self.children[n]) + (self.kind[n] == 'terminal')

    def terminals(self) -> List[int]:
        return sorted(n for n, k in self.kind.items() if k == 'terminal')

    def junctions(self) -> List[int]:
        return sorted(n for n, k in self.kind.items() if k == 'branching')

    def link(self, child: int, parent: int):
        self.parent[child] = parent
        self.children[parent].append(child)
        self.children[parent].sort()

    def unlink(self, child: int):
        p = self.parent.pop(child)
        self.children[p].remove(child)

    def remove(self, n: int):
        if n in self.parent:
            self.unlink(n)
        for c in list(self.children[n]):
            self.unlink(c)
        for table in (self.pos, self.children, self.kind, self.counts):
            table.pop(n, None)
        self.fixed.discard(n)

    def cost(self, weights: _EdgeWeights) -> float:
        return sum(
            weights.edge(self, n) * math.dist(self.pos[n], self.pos[p])
            for n, p in sorted(self.parent.items())
        )

    def local_anchors(self, n: int, weights: _EdgeWeights) -> Tuple[List[Point], List[float]]:
        anchors = [self.pos[self.parent[n]]] + [self.pos[c] for c in self.children[n]]
        w = [weights.edge(self, n)] + [weights.edge(self, c) for c in self.children[n]]
        return anchors, w

    def orders(self) -> Dict[int, int]:
        'Horton-Strahler order of the edge into each non-root node'
        order = {}
        for n in self.postorder():
            below = [order[c] for c in self.children[n]]
            if not below:
                order[n] = 1
            else:
                top = max(below)
                order[n] = top + 1 if below.count(top) >= 2 else top
        return order

    def clean(self):
        'Drops childless non-terminals and bypasses free single-child junctions'
        changed = True
        while changed:
            changed = False
            for n in sorted(self.pos):
                if n == self.root or n not in self.pos or self.kind[n] == 'terminal':
                    continue
                if not self.children[n]:
                    self.remove(n)
                    changed = True
                elif len(self.children[n]) == 1 and n not in self.fixed:
                    c = self.children[n][0]
                    p = self.parent[n]
                    self.remove(n)
                    self.link(c, p)
                    changed = True
        self.update_counts()

    def to_tree(self, weights: _EdgeWeights) -> VascularTree:
        nodes = [
            Node(id=n, position=self.pos[n], kind='root' if n == self.root else self.kind[n],
                 fixed=n in self.fixed and n != self.root)
            for n in sorted(self.pos)
        ]
        edges = []
        for i, child in enumerate(sorted(self.parent)):
            radius, flow = weights.radius_flow(self, child)
            edges.append(Edge(
                id=i, parent=self.parent[child], child=child,
                radius=radius, length=math.dist(self.pos[child], self.pos[self.parent[child]]),
                flow=flow,
            ))
        return VascularTree(nodes=nodes, edges=edges, root=self.root)


def _relax(work: _WorkTree, n: int, weights: _EdgeWeights, tolerance: float) -> Point:
    anchors, w = work.local_anchors(n, weights)
    return fermat_weber(anchors, w, work.pos[n], tolerance)


def relax_node(tree: VascularTree, node: int, params: TreeGenParams) -> Point:
    '''
    Position of `node` minimising the cost of its incident edges. When the
    tree carries flows every edge keeps its own radius and flow, otherwise
    both come from the Murray assignment for `params`. Fixed nodes stay put.
    '''
    work = _WorkTree.from_tree(tree)
    if work.kind.get(node) != 'branching' or node == work.root:
        raise ValueError(f'node {node} is not a branching node')
    if node in work.fixed:
        return work.pos[node]
    return _relax(work, node, _weights_for(tree, params), params.relax_tolerance)


def merge_coincident(tree: VascularTree, eps_mm: float) -> VascularTree:
    '''
    Joins each free branching node to its branching parent when they are
    closer than eps_mm; its children move to the parent. Terminals and the
    root are never merged.
    '''
    tree.check()
    pos = {n.id: n.position for n in tree.nodes}
    kinds = {n.id: n.kind for n in tree.nodes}
    fixed = {n.id for n in tree.nodes if n.fixed}
    edges = {e.id: e for e in tree.edges}
    removed = set()
    for eid in sorted(edges):
        e = edges.get(eid)
        if e is None:
            continue
        p, c = e.parent, e.child
        if kinds[p] != 'branching' or kinds[c] != 'branching' or c in fixed:
            continue
        if math.dist(pos[p], pos[c]) >= eps_mm:
            continue
        del edges[eid]
        removed.add(c)
        for k, other in list(edges.items()):
            if other.parent == c:
                edges[k] = other.model_copy(update={
                    'parent': p, 'length': math.dist(pos[p], pos[other.child])
                })
    if not removed:
        return tree.model_copy()
    merged = tree.model_copy(update={
        'nodes': [n for n in tree.nodes if n.id not in removed],
        'edges': [edges[k] for k in sorted(edges)],
    })
    if all(e.flow is not None for e in tree.edges):
        merged = _reaccumulate(merged)
    merged.check()
    logger.debug(f'Merged {len(removed)} node(s)')
    return merged


def _reaccumulate(tree: VascularTree) -> VascularTree:
    'Recomputes internal flows from the terminal edge flows'
    g = tree.to_graph()
    by_child = {e.child: e for e in tree.edges}
    flow = {}
    for n in nx.dfs_postorder_nodes(g, tree.root):
        kids = list(g.successors(n))
        flow[n] = sum(flow[c] for c in kids) if kids else (by_child[n].flow if n in by_child else 0.0)
    return tree.model_copy(update={'edges': [e.model_copy(update={'flow': flow[e.child]}) for e in tree.edges]})


def _split_candidates(work: _WorkTree, n: int, x_n: Point, weights: _EdgeWeights,
                      exhaustive_limit: int) -> List[Tuple[int, ...]]:
    kids = work.children[n]
    k = len(kids)
    if k <= exhaustive_limit:
        return [
            subset
            for size in range(2, k)
            for subset in itertools.combinations(kids, size)
        ]
    # nearest sibling pairs, kept when their joint pull can move a new junction off n
    candidates = set()
    for a in kids:
        b = min((c for c in kids if c != a), key=lambda c: (math.dist(work.pos[a], work.pos[c]), c))
        candidates.add(tuple(sorted((a, b))))
    kept = []
    for pair in sorted(candidates):
        fx = fy = fz = 0.0
        for c in pair:
            d = math.dist(work.pos[c], x_n)
            if d == 0:
                continue
            w = weights.edge(work, c) / d
            fx += w * (work.pos[c][0] - x_n[0])
            fy += w * (work.pos[c][1] - x_n[1])
            fz += w * (work.pos[c][2] - x_n[2])
        if math.sqrt(fx * fx + fy * fy + fz * fz) > weights.joined(work, pair):
            kept.append(pair)
    return kept


def _evaluate_split(work: _WorkTree, n: int, moved: Tuple[int, ...], x_n: Point,
                    weights: _EdgeWeights, tolerance: float, rounds: int = 20) -> Tuple[float, Point, Point]:
    stay = [c for c in work.children[n] if c not in moved]
    x_p = work.pos[work.parent[n]]
    a_p = weights.edge(work, n)
    a_j = weights.joined(work, moved)
    b_pts = [work.pos[c] for c in moved]
    b_w = [weights.edge(work, c) for c in moved]
    a_pts = [work.pos[c] for c in stay]
    a_w = [weights.edge(work, c) for c in stay]
    free = n not in work.fixed

    def local(xn, xj):
        return (a_p * math.dist(xn, x_p) + _fw_cost(xn, a_pts, a_w)
                + a_j * math.dist(xn, xj) + _fw_cost(xj, b_pts, b_w))

    total_b = sum(b_w)
    x_j = tuple(sum(w * p[i] for p, w in zip(b_pts, b_w)) / total_b for i in range(3))
    x_j = fermat_weber([x_n] + b_pts, [a_j] + b_w, x_j, tolerance)
    best = local(x_n, x_j)
    for _ in range(rounds):
        if free:
            x_n = fermat_weber([x_p] + a_pts + [x_j], [a_p] + a_w + [a_j], x_n, tolerance)
        x_j = fermat_weber([x_n] + b_pts, [a_j] + b_w, x_j, tolerance)
        cost = local(x_n, x_j)
        if best - cost <= 1e-12 * abs(best):
            best = min(best, cost)
            break
        best = cost
    return best, x_n, x_j


def _split(work: _WorkTree, n: int, weights: _EdgeWeights, params: TreeGenParams) -> bool:
    '''
    Moves a subset of n's children to a new junction below n when that
    strictly lowers the cost compared with only relaxing n.
    '''
    kids = work.children[n]
    if len(kids) < 3 or n == work.root:
        return False
    anchors, w = work.local_anchors(n, weights)
    x_base = work.pos[n] if n in work.fixed else fermat_weber(anchors, w, work.pos[n], params.relax_tolerance)
    base = _fw_cost(x_base, anchors, w)

    coarse = params.relax_tolerance * 100
    best = None
    for moved in _split_candidates(work, n, x_base, weights, params.exhaustive_split_degree):
        cost, _, _ = _evaluate_split(work, n, moved, x_base, weights, coarse)
        if best is None or cost < best[0]:
            best = (cost, moved)
    if best is None:
        return False
    cost, x_n, x_j = _evaluate_split(work, n, best[1], x_base, weights, params.relax_tolerance)
    if not cost < base - 1e-12 * abs(base):
        return False

    j = work.next_id()
    work.pos[j] = x_j
    work.kind[j] = 'branching'
    work.children[j] = []
    for c in best[1]:
        work.unlink(c)
        work.link(c, j)
    work.link(j, n)
    work.pos[n] = x_n
    work.counts[j] = sum(work.counts[c] for c in best[1])
    weights.register(work, j, best[1])
    return True


def split_node(tree: VascularTree, node: int, params: TreeGenParams) -> VascularTree:
    '''
    Tree with `node` split in two when that lowers the cost, else the tree as
    given. Edge weights follow the same rule as in relax_node; the new edge
    gets the Murray radius and the summed flow of the edges it feeds.
    '''
    work = _WorkTree.from_tree(tree)
    weights = _weights_for(tree, params)
    if node not in work.pos:
        raise ValueError(f'unknown node {node}')
    if not _split(work, node, weights, params):
        return tree.model_copy()
    return work.to_tree(weights)


def _merge(work: _WorkTree, weights: _EdgeWeights, eps: float) -> int:
    'Cost-checked merge of near-coincident parent/child junction pairs'
    merged = 0
    for j in work.junctions():
        if j not in work.pos or j in work.fixed:
            continue
        p = work.parent[j]
        if p == work.root or work.kind[p] != 'branching':
            continue
        if math.dist(work.pos[j], work.pos[p]) >= eps:
            continue
        delta = -weights.edge(work, j) * math.dist(work.pos[j], work.pos[p])
        for c in work.children[j]:
            delta += weights.edge(work, c) * (
                math.dist(work.pos[p], work.pos[c]) - math.dist(work.pos[j], work.pos[c])
            )
        if delta > 0:
            continue
        kids = list(work.children[j])
        work.remove(j)
        for c in kids:
            work.link(c, p)
        merged += 1
    return merged


def _smooth(work: _WorkTree, weights: _EdgeWeights, params: TreeGenParams) -> List[float]:
    'Relax, merge and split sweeps until the relative cost change is small'
    costs = [work.cost(weights)]
    for sweep in range(params.max_smoothing_sweeps):
        for n in work.junctions():
            if n not in work.fixed:
                work.pos[n] = _relax(work, n, weights, params.relax_tolerance)
        merged = _merge(work, weights, params.merge_distance)
        splits = 0
        queue = [n for n in sorted(work.pos) if len(work.children[n]) >= 3 and n != work.root]
        while queue:
            n = queue.pop(0)
            if len(work.children[n]) >= 3 and _split(work, n, weights, params):
                splits += 1
                queue.append(n)
                j = max(work.pos)
                if len(work.children[j]) >= 3:
                    queue.append(j)
        cost = work.cost(weights)
        costs.append(cost)
        logger.debug(f'Smoothing sweep {sweep}: cost {cost:.10g}, {merged} merges, {splits} splits')
        if costs[-2] - cost <= params.cost_tolerance * costs[-2]:
            break
    return costs


def smooth(tree: VascularTree, params: TreeGenParams) -> VascularTree:
    work = _WorkTree.from_tree(tree)
    weights = _EdgeWeights(params, len(work.terminals()))
    _smooth(work, weights, params)
    return work.to_tree(weights)


def _prune(work: _WorkTree, cutoff: int):
    order = work.orders()
    for c in work.children[work.root]:
        if order[c] < cutoff:
            raise TreeError(f'order cutoff {cutoff} removes the root edge (order {order[c]})')
    removed = sorted(n for n in work.parent if order[n] < cutoff)
    if not removed:
        return
    terminals = [n for n in removed if work.kind[n] == 'terminal']
    saved = {n: work.pos[n] for n in terminals}
    for n in reversed(removed):
        work.remove(n)
    survivors = sorted(n for n in work.pos if n != work.root)
    index = cKDTree(np.array([work.pos[n] for n in survivors]))
    for t in terminals:
        _, i = index.query(saved[t])
        work.pos[t] = saved[t]
        work.kind[t] = 'terminal'
        work.children[t] = []
        work.link(t, survivors[int(i)])
    work.clean()


def prune_and_reconnect(tree: VascularTree, order_cutoff: int, params: TreeGenParams) -> VascularTree:
    '''
    Removes edges of Horton-Strahler order strictly below the cutoff (so a
    cutoff of 1 changes nothing) and reattaches every terminal by a straight
    edge to the nearest remaining non-root node. A cutoff above the order of
    a root edge is an error.
    '''
    work = _WorkTree.from_tree(tree)
    weights = _EdgeWeights(params, len(work.terminals()))
    _prune(work, order_cutoff)
    return work.to_tree(weights)


def sample_terminal_points(region: Union[BinaryMask, TetMesh], n: int, seed: int = 0) -> np.ndarray:
    '''
    n points uniformly distributed in a mask (rejection sampling over the
    bounding box of its voxels) or in a tetrahedral mesh (volume-weighted
    cell choice, then a uniform point in the cell).
    '''
    if n < 1:
        raise ValueError('at least one terminal point is required')
    rng = np.random.default_rng(seed)
    if isinstance(region, TetMesh):
        volumes = np.abs(region.signed_volumes())
        if region.num_cells == 0 or volumes.sum() <= 0:
            raise ValueError('degenerate region: mesh has no volume')
        cells = rng.choice(region.num_cells, size=n, p=volumes / volumes.sum())
        bary = rng.dirichlet(np.ones(4), size=n)
        return np.einsum('ij,ijk->ik', bary, region.vertices[region.tets[cells]])

    voxels = region.indices()
    if len(voxels) == 0:
        raise ValueError('degenerate region: mask is empty')
    spacing = np.asarray(region.spacing)
    lo = region.centers(voxels.min(axis=0)) - spacing / 2
    hi = region.centers(voxels.max(axis=0)) + spacing / 2
    dims = np.asarray(region.dims)
    points = []
    count = 0
    while count < n:
        batch = rng.uniform(lo, hi, size=(max(2 * (n - count), 64), 3))
        idx = np.floor((batch - np.asarray(region.origin)) / spacing + 0.5).astype(int)
        ok = np.all((idx >= 0) & (idx < dims), axis=1)
        ok[ok] = region.values[tuple(idx[ok].T)]
        accepted = batch[ok][:n - count]
        points.append(accepted)
        count += len(accepted)
    return np.vstack(points)


def tree_from_stub_definition(stub: StubDefinition) -> VascularTree:
    return VascularTree(
        nodes=[
            Node(id=0, position=stub.root, kind='root', fixed=True),
            Node(id=1, position=stub.tip, kind='terminal', fixed=True),
        ],
        edges=[Edge(id=0, parent=0, child=1, radius=stub.radius, length=math.dist(stub.root, stub.tip))],
        root=0,
    )


class TreeOptimizer:
    '''
    Synthesis of a tree from a stub and terminal points.

    Terminals are first joined to their nearest stub node (the root
    excluded). The resulting star is smoothed, then pruned, reconnected and
    smoothed again for order cutoffs 2, 3, ... A pass result replaces the
    current tree only when it is cheaper.

    `sweep_costs` holds the cost after each smoothing sweep, one list per
    smoothing phase; `pass_costs` the best cost after each pass.
    '''

    def __init__(self, stub: VascularTree, terminals, params: TreeGenParams):
        points = np.asarray(terminals, dtype=float).reshape(-1, 3)
        if len(points) == 0:
            raise TreeError('no terminal points')
        if len(stub.edges) == 0:
            raise TreeError('stub needs at least one edge')
        stub.check()
        self.stub = stub
        self.points = points
        self.params = params
        self.weights = _EdgeWeights(params, len(points))
        self.sweep_costs: List[List[float]] = []
        self.pass_costs: List[float] = []
        self.initial_cost: Optional[float] = None

    def star(self) -> _WorkTree:
        work = _WorkTree.from_tree(self.stub)
        stub_nodes = sorted(n for n in work.pos if n != work.root)
        for n in stub_nodes:
            work.fixed.add(n)
            work.kind[n] = 'branching'
        index = cKDTree(np.array([work.pos[n] for n in stub_nodes]))
        _, nearest = index.query(self.points)
        first = work.next_id()
        for k, (p, i) in enumerate(zip(self.points, np.atleast_1d(nearest))):
            t = first + k
            work.pos[t] = tuple(float(c) for c in p)
            work.kind[t] = 'terminal'
            work.children[t] = []
            work.link(t, stub_nodes[int(i)])
        work.clean()
        return work

    def _smooth(self, work: _WorkTree) -> float:
        costs = _smooth(work, self.weights, self.params)
        self.sweep_costs.append(costs)
        return costs[-1]

    def run(self) -> VascularTree:
        best = self.star()
        self.initial_cost = best.cost(self.weights)
        logger.info(f'Star connection of {len(self.points)} terminals: cost {self.initial_cost:.6g}')
        best_cost = self._smooth(best)
        self.pass_costs.append(best_cost)

        cutoff = 2
        for _ in range(self.params.max_hierarchy_passes):
            root_order = max(best.orders()[c] for c in best.children[best.root])
            if cutoff > root_order - 1:
                break
            candidate = best.copy()
            _prune(candidate, cutoff)
            cost = self._smooth(candidate)
            if cost < best_cost:
                best, best_cost = candidate, cost
            self.pass_costs.append(best_cost)
            logger.info(f'Hierarchy pass with cutoff {cutoff}: cost {cost:.6g}, best {best_cost:.6g}')
            cutoff += 1

        tree = best.to_tree(self.weights)
        tree.check()
        return tree


def generate_tree(stub: VascularTree, terminals, params: TreeGenParams) -> VascularTree:
    return TreeOptimizer(stub, terminals, params).run()
