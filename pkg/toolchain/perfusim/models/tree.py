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

import networkx as nx
from pydantic import BaseModel, ConfigDict, Field, field_validator
from typing import Dict, List, Literal, Optional, Tuple

from perfusim.errors import TreeError

Vector3 = Tuple[float, float, float]


class Node(BaseModel):
    model_config = ConfigDict(populate_by_name=True)

    id: int
    position: Vector3 = Field(alias='xyz', title='Position in mm')
    kind: Literal['root', 'branching', 'terminal'] = 'branching'
    radius: Optional[float] = Field(
        None,
        title='Radius',
        description='Local vessel radius in mm, set by centerline extraction'
    )
    fixed: bool = Field(
        False,
        title='Fixed',
        description='Fixed nodes are never moved by tree optimization'
    )


class Edge(BaseModel):
    id: int
    parent: int
    child: int
    radius: float = Field(0.0, ge=0, title='Radius in mm')
    length: float = Field(0.0, ge=0, title='Length in mm')
    flow: Optional[float] = Field(None, title='Volumetric flow in mm^3/s')
    cyclic: bool = Field(
        False,
        title='Cyclic',
        description='Set on edges lying on a cycle of a reconstructed centerline graph'
    )


class VascularTree(BaseModel):
    '''
    Rooted vessel tree. Edges point from parent to child, so flow is
    positive when blood moves away from the root.
    '''
    nodes: List[Node] = Field(default_factory=list)
    edges: List[Edge] = Field(default_factory=list)
    root: int = Field(title='Root node id')

    def node_map(self) -> Dict[int, Node]:
        return {n.id: n for n in self.nodes}

    def children(self) -> Dict[int, List[Edge]]:
        out = {n.id: [] for n in self.nodes}
        for e in self.edges:
            out[e.parent].append(e)
        return out

    def parent_edge(self) -> Dict[int, Edge]:
        return {e.child: e for e in self.edges}

    def terminals(self) -> List[int]:
        return sorted(n.id for n in self.nodes if n.kind == 'terminal')

    def root_edge(self) -> Edge:
        out = [e for e in self.edges if e.parent == self.root]
        if len(out) != 1:
            raise TreeError(f'root {self.root} must have exactly one child edge, has {len(out)}')
        return out[0]

    def to_graph(self) -> nx.DiGraph:
        g = nx.DiGraph()
        for n in self.nodes:
            g.add_node(n.id)
        for e in self.edges:
            g.add_edge(e.parent, e.child, id=e.id)
        return g

    def path_edges(self, node: int) -> List[Edge]:
        'Edges from the root down to `node`, root first'
        up = self.parent_edge()
        path = []
        while node != self.root:
            if node not in up:
                raise TreeError(f'node {node} is not connected to the root')
            e = up[node]
            path.append(e)
            node = e.parent
        return path[::-1]

    def check(self):
        'Raises TreeError unless this is a connected, rooted, acyclic tree'
        ids = [n.id for n in self.nodes]
        if len(set(ids)) != len(ids):
            raise TreeError('duplicate node ids')
        kinds = self.node_map()
        if self.root not in kinds:
            raise TreeError(f'root {self.root} is not a node')
        roots = [n.id for n in self.nodes if n.kind == 'root']
        if roots != [self.root]:
            raise TreeError(f'exactly one root node expected, found {roots}')
        g = self.to_graph()
        if g.number_of_edges() != len(self.edges):
            raise TreeError('parallel edges')
        for e in self.edges:
            if e.parent not in kinds or e.child not in kinds:
                raise TreeError(f'edge {e.id} references an unknown node')
        if not nx.is_directed_acyclic_graph(g):
            raise TreeError('tree contains a cycle')
        if any(d > 1 for _, d in g.in_degree()):
            raise TreeError('a node has more than one parent')
        reached = nx.descendants(g, self.root) | {self.root}
        if len(reached) != len(self.nodes):
            raise TreeError(f'{len(self.nodes) - len(reached)} node(s) unreachable from the root')
        for n in self.nodes:
            if n.kind == 'terminal' and g.out_degree(n.id) != 0:
                raise TreeError(f'terminal {n.id} has children')
            if n.kind != 'terminal' and n.id != self.root and g.out_degree(n.id) == 0:
                raise TreeError(f'non-terminal node {n.id} has no children')


class TreeGenParams(BaseModel):
    model_config = ConfigDict(extra='forbid')

    volume_weight: float = Field(1.0, gt=0, title='Cost per mm^3 of vessel volume')
    friction_weight: float = Field(1.0, gt=0, title='Cost per unit of viscous dissipation')
    viscosity: float = Field(3.5e-3, gt=0, title='Blood viscosity in Pa s')
    terminal_flow: float = Field(1.0, gt=0, title='Flow per terminal in mm^3/s')
    murray_exponent: float = Field(3.0, gt=0, title='Murray exponent')
    root_radius: float = Field(1.0, gt=0, title='Root edge radius in mm')
    max_hierarchy_passes: int = Field(3, ge=0, title='Prune/reconnect passes')
    relax_tolerance: float = Field(1e-6, gt=0, title='Relaxation step tolerance in mm')
    cost_tolerance: float = Field(
        1e-6, gt=0,
        title='Smoothing stop',
        description='Relative cost change below which a smoothing phase stops'
    )
    max_smoothing_sweeps: int = Field(50, ge=1)
    merge_distance: float = Field(1e-3, ge=0, title='Merge distance in mm')
    exhaustive_split_degree: int = Field(
        8, ge=3,
        title='Exhaustive split limit',
        description='Child count up to which all two-way partitions are tried'
    )
    seed: int = 0


class StubDefinition(BaseModel):
    'One-segment tree stub given inline in a configuration'
    model_config = ConfigDict(extra='forbid')

    root: Vector3 = Field(title='Root position in mm')
    tip: Vector3 = Field(title='Segment end in mm')
    radius: float = Field(1.0, gt=0)

    @field_validator('tip')
    @classmethod
    def tip_differs(cls, v, info):
        if 'root' in info.data and tuple(v) == tuple(info.data['root']):
            raise ValueError('stub tip must differ from its root')
        return v
