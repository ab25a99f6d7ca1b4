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
Centerline extraction from contrast volumes: threshold, morphology,
topology preserving thinning and conversion of the skeleton to a graph.
'''

import logging
import networkx as nx
import numpy as np
from collections import defaultdict
from scipy import ndimage
from scipy.spatial import cKDTree
from skimage.filters import threshold_otsu
from skimage.morphology import skeletonize as _thin
from typing import Dict, List, Optional, Tuple

from perfusim import voxelio
from perfusim.errors import TreeError
from perfusim.models import BinaryMask, Edge, Node, Skeleton, VascularTree, VoxelGrid

logger = logging.getLogger(__name__)


def auto_threshold(grid: VoxelGrid) -> float:
    'Otsu threshold over a 256-bin histogram; foreground is strictly above it'
    values = grid.values
    if float(values.max()) == float(values.min()):
        raise ValueError('degenerate histogram: the grid is constant')
    return float(threshold_otsu(values, nbins=256))


def extract_vessel_mask(grid: VoxelGrid, threshold: Optional[float] = None, blur_sigma: float = 0.0,
                        open_r: int = 0, close_r: int = 0) -> BinaryMask:
    blurred = voxelio.gaussian_blur(grid, blur_sigma)
    if threshold is None:
        threshold = auto_threshold(blurred)
        logger.info(f'Automatic vessel threshold {threshold:.6g}')
    mask = BinaryMask(values=blurred.values > threshold, spacing=grid.spacing, origin=grid.origin)
    mask = voxelio.morph_open(mask, open_r)
    mask = voxelio.morph_close(mask, close_r)
    logger.debug(f'Vessel mask: {mask.count()} voxels')
    return mask


def skeletonize(mask: BinaryMask) -> Skeleton:
    '''
    Thinning by iterative deletion of simple border points (Lee's method),
    which keeps foreground 26-connectivity, background 6-connectivity and
    end points. The radius at a centerline voxel is its Euclidean distance to
    the nearest background voxel center, so a single voxel has radius equal
    to its smallest spacing.
    '''
    if not mask.values.any():
        raise ValueError('cannot skeletonize an empty mask')
    padded = np.pad(mask.values, 1)
    thin = _thin(padded, method='lee')[1:-1, 1:-1, 1:-1].astype(bool)
    distance = ndimage.distance_transform_edt(padded, sampling=mask.spacing)[1:-1, 1:-1, 1:-1]
    voxels = mask.like(thin).indices()
    return Skeleton(
        voxels=voxels,
        radii=distance[tuple(voxels.T)] if len(voxels) else np.zeros(0),
        dims=mask.dims,
        spacing=mask.spacing,
        origin=mask.origin,
    )


def _voxel_graph(skel: Skeleton) -> nx.Graph:
    '''
    26-neighbour graph of skeleton voxels, with each diagonal link dropped
    when the two voxels are also joined through a common neighbour by two
    strictly shorter links.
    '''
    g = nx.Graph()
    g.add_nodes_from(range(len(skel.voxels)))
    if len(skel.voxels) < 2:
        return g
    index_tree = cKDTree(skel.voxels)
    pairs = index_tree.query_pairs(r=np.sqrt(3) + 1e-6, output_type='ndarray')
    positions = skel.positions()
    for a, b in pairs:
        g.add_edge(int(a), int(b), length=float(np.linalg.norm(positions[a] - positions[b])))
    redundant = []
    for a, b, data in g.edges(data=True):
        for c in nx.common_neighbors(g, a, b):
            if g[a][c]['length'] < data['length'] and g[c][b]['length'] < data['length']:
                redundant.append((a, b))
                break
    g.remove_edges_from(redundant)
    return g


def _trace(g: nx.Graph, owner: Dict[int, int], start: int, step: int) -> List[int]:
    'Walks from `start` through `step` until a voxel owned by a graph node is reached'
    path = [start, step]
    previous, current = start, step
    while current not in owner:
        nxt = [n for n in g.neighbors(current) if n != previous]
        if not nxt:
            break
        previous, current = current, nxt[0]
        path.append(current)
        if current == start:
            break
    return path


def skeleton_to_graph(skel: Skeleton) -> VascularTree:
    '''
    Graph nodes are end voxels (at most one neighbour) and clusters of
    adjacent branch voxels (three or more neighbours). Edges follow the
    skeleton between them; a closed loop without such voxels gets a node at
    its lowest voxel. Edges lying on a cycle are flagged. The root is the end
    voxel with the largest radius and edges point away from it.
    '''
    if len(skel.voxels) == 0:
        raise TreeError('empty skeleton')
    g = _voxel_graph(skel)
    positions = skel.positions()

    owner: Dict[int, int] = {}
    clusters: List[List[int]] = []
    branch = [v for v in g.nodes if g.degree(v) >= 3]
    for component in nx.connected_components(g.subgraph(branch)):
        clusters.append(sorted(component))
    for v in sorted(g.nodes):
        if g.degree(v) <= 1:
            clusters.append([v])
    clustered = {v for c in clusters for v in c}
    for component in nx.connected_components(g):
        if clustered.isdisjoint(component):
            clusters.append([min(component)])
    clusters.sort(key=lambda c: c[0])
    for node_id, members in enumerate(clusters):
        for v in members:
            owner[v] = node_id

    def node_position(node_id):
        return positions[clusters[node_id]].mean(axis=0)

    raw_edges = []
    seen = set()
    for node_id, members in enumerate(clusters):
        for v in members:
            for w in sorted(g.neighbors(v)):
                if owner.get(w) == node_id or (v, w) in seen:
                    continue
                path = _trace(g, owner, v, w)
                for a, b in zip(path, path[1:]):
                    seen.add((a, b))
                    seen.add((b, a))
                end = owner.get(path[-1], node_id)
                raw_edges.append([node_id, end, path])

    raw_edges = _dissolve_pass_through(raw_edges, len(clusters))

    used = sorted({e[0] for e in raw_edges} | {e[1] for e in raw_edges} |
                  {n for n, members in enumerate(clusters) if _isolated(g, members)})

    ends = [n for n in used if len(clusters[n]) == 1 and g.degree(clusters[n][0]) <= 1]
    radius_of = {n: float(skel.radii[clusters[n]].max()) for n in used}
    root = max(ends, key=lambda n: (radius_of[n], -n)) if ends else used[0]

    undirected = nx.MultiGraph()
    undirected.add_nodes_from(used)
    for i, (a, b, _) in enumerate(raw_edges):
        undirected.add_edge(a, b, key=i)
    depth = {}
    for component in nx.connected_components(undirected):
        start = root if root in component else min(
            component, key=lambda n: (-radius_of[n], n))
        depth.update(nx.single_source_shortest_path_length(undirected, start))

    counts = defaultdict(int)
    for a, b, _ in raw_edges:
        counts[frozenset((a, b))] += 1
    simple = nx.Graph()
    simple.add_nodes_from(used)
    simple.add_edges_from((a, b) for a, b, _ in raw_edges if a != b)
    bridges = {frozenset(e) for e in nx.bridges(simple)}

    edges = []
    for i, (a, b, path) in enumerate(raw_edges):
        if (depth.get(b, 0), b) < (depth.get(a, 0), a):
            a, b, path = b, a, path[::-1]
        polyline = np.vstack([node_position(a), positions[path[1:-1]], node_position(b)]) \
            if len(path) > 2 else np.vstack([node_position(a), node_position(b)])
        length = float(np.linalg.norm(np.diff(polyline, axis=0), axis=1).sum())
        cyclic = a == b or counts[frozenset((a, b))] > 1 or frozenset((a, b)) not in bridges
        edges.append(Edge(
            id=i, parent=a, child=b, radius=float(skel.radii[path].mean()),
            length=length, cyclic=cyclic,
        ))

    nodes = []
    for n in used:
        if n == root:
            kind = 'root'
        elif n in ends:
            kind = 'terminal'
        else:
            kind = 'branching'
        nodes.append(Node(id=n, position=tuple(node_position(n)), kind=kind, radius=radius_of[n]))

    cyclic = sum(e.cyclic for e in edges)
    if cyclic:
        logger.warning(f'Centerline graph has {cyclic} edge(s) on cycles')
    logger.info(f'Centerline graph: {len(nodes)} nodes, {len(edges)} edges')
    return VascularTree(nodes=nodes, edges=edges, root=root)


def _isolated(g: nx.Graph, members: List[int]) -> bool:
    return all(g.degree(v) == 0 for v in members)


def _dissolve_pass_through(raw_edges: list, num_nodes: int) -> list:
    '''
    Joins the two edges of nodes that ended up with exactly two incident
    edges (a branch cluster that does not branch).
    '''
    changed = True
    while changed:
        changed = False
        incident = defaultdict(list)
        for i, (a, b, _) in enumerate(raw_edges):
            incident[a].append(i)
            if b != a:
                incident[b].append(i)
        for n in range(num_nodes):
            ids = incident.get(n, [])
            if len(ids) != 2:
                continue
            i, j = ids
            e1, e2 = raw_edges[i], raw_edges[j]
            if e1[0] == e1[1] or e2[0] == e2[1]:
                continue
            p1 = e1[2] if e1[1] == n else e1[2][::-1]
            p2 = e2[2] if e2[0] == n else e2[2][::-1]
            start = e1[0] if e1[1] == n else e1[1]
            end = e2[1] if e2[0] == n else e2[0]
            if start == n or end == n:
                continue
            merged = [start, end, p1 + p2[1:]]
            raw_edges = [e for k, e in enumerate(raw_edges) if k not in (i, j)] + [merged]
            changed = True
            break
    return raw_edges


def stub_from_tree(tree: VascularTree, min_radius: float) -> VascularTree:
    '''
    The part of a reconstructed tree reachable from the root through
    non-cyclic edges at least `min_radius` thick. Leaves of the result become
    terminals.
    '''
    children = defaultdict(list)
    for e in tree.edges:
        if not e.cyclic and e.radius >= min_radius and e.parent != e.child:
            children[e.parent].append(e)
    keep_nodes = {tree.root}
    keep_edges = []
    frontier = [tree.root]
    while frontier:
        n = frontier.pop()
        for e in sorted(children[n], key=lambda e: e.id):
            if e.child in keep_nodes:
                continue
            keep_nodes.add(e.child)
            keep_edges.append(e)
            frontier.append(e.child)
    if not keep_edges:
        raise TreeError(f'no vessel of radius >= {min_radius} mm leaves the root')

    parents = {e.parent for e in keep_edges}
    nodes = []
    for n in tree.nodes:
        if n.id not in keep_nodes:
            continue
        kind = 'root' if n.id == tree.root else ('branching' if n.id in parents else 'terminal')
        nodes.append(n.model_copy(update={'kind': kind}))
    stub = VascularTree(
        nodes=sorted(nodes, key=lambda n: n.id),
        edges=[e.model_copy() for e in sorted(keep_edges, key=lambda e: e.id)],
        root=tree.root,
    )
    stub.check()
    return stub


def reconstruct(grid: VoxelGrid, threshold: Optional[float], blur_sigma: float,
                open_r: int, close_r: int) -> Tuple[BinaryMask, Skeleton, VascularTree]:
    mask = extract_vessel_mask(grid, threshold, blur_sigma, open_r, close_r)
    skel = skeletonize(mask)
    return mask, skel, skeleton_to_graph(skel)
