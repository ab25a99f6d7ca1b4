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
Seeded graph-cut segmentation.

The labeling energy is E(A) = lambda * R(A) + B(A). R sums, over voxels, the
negative log-likelihood of each voxel's density under the Gaussian mixture
of the label it receives. B sums exp(-d^2 / (2 sigma_B^2)) over face
neighbours with different labels, d being their density difference. The
source side of the minimum cut is the foreground.
'''

import logging
import networkx as nx
import numpy as np
from networkx.algorithms.flow import boykov_kolmogorov
from scipy.special import logsumexp
from typing import Optional, Tuple

from perfusim.errors import SegmentationError
from perfusim.models import (
    BinaryMask, FlowNetwork, GmmComponent, GmmModel, MaxFlowResult,
    SeedSet, SegmentationParams, VoxelGrid
)

logger = logging.getLogger(__name__)

EM_TOLERANCE = 1e-6
EM_MAX_ITERATIONS = 200


def variance_floor(values: np.ndarray) -> float:
    spread = float(np.max(values) - np.min(values)) if np.size(values) else 0.0
    return 1e-6 * spread ** 2 if spread > 0 else 1e-6


def _log_components(x: np.ndarray, w: np.ndarray, mu: np.ndarray, var: np.ndarray) -> np.ndarray:
    return (
        np.log(w)[None, :]
        - 0.5 * np.log(2 * np.pi * var)[None, :]
        - (x[:, None] - mu[None, :]) ** 2 / (2 * var[None, :])
    )


def fit_gmm(samples, k: int, seed: int = 0, floor: Optional[float] = None) -> GmmModel:
    '''
    One-dimensional Gaussian mixture by expectation maximisation. Means start
    at the (j + 1/2)/k quantiles; ties are broken by drawing distinct sample
    values with the seeded generator. Variances never drop below `floor`
    (1e-6 times the squared sample range by default).
    '''
    x = np.asarray(samples, dtype=np.float64).ravel()
    if k < 1:
        raise ValueError('k must be >= 1')
    if len(x) < k:
        raise SegmentationError(f'{len(x)} samples cannot support {k} components')
    distinct = np.unique(x)
    if k > len(distinct):
        raise SegmentationError(f'{k} components requested but only {len(distinct)} distinct values')
    floor = variance_floor(x) if floor is None else floor
    rng = np.random.default_rng(seed)

    mu = np.quantile(x, (np.arange(k) + 0.5) / k)
    if len(np.unique(mu)) < k:
        mu = np.sort(rng.choice(distinct, size=k, replace=False))
    var = np.full(k, max(float(x.var()), floor))
    w = np.full(k, 1.0 / k)

    history = []
    previous = -np.inf
    for iteration in range(EM_MAX_ITERATIONS):
        log_p = _log_components(x, w, mu, var)
        per_sample = logsumexp(log_p, axis=1)
        ll = float(per_sample.mean())
        history.append(ll)
        logger.debug(f'EM iteration {iteration}: mean log-likelihood {ll:.10g}')
        if ll - previous < EM_TOLERANCE:
            break
        previous = ll

        resp = np.exp(log_p - per_sample[:, None])
        nk = np.maximum(resp.sum(axis=0), 1e-300)
        w = nk / nk.sum()
        mu = resp.T @ x / nk
        var = np.maximum((resp * (x[:, None] - mu[None, :]) ** 2).sum(axis=0) / nk, floor)

    return GmmModel(
        components=[
            GmmComponent(weight=float(a), mean=float(b), variance=float(c))
            for a, b, c in zip(w / w.sum(), mu, var)
        ],
        log_likelihood=history,
    )


def neg_log_likelihood(model: GmmModel, values: np.ndarray) -> np.ndarray:
    w, mu, var = model.arrays()
    x = np.asarray(values, dtype=np.float64).ravel()
    return -logsumexp(_log_components(x, w, mu, var), axis=1)


def _check_seeds(grid: VoxelGrid, seeds: SeedSet):
    if not seeds.foreground or not seeds.background:
        raise SegmentationError('both foreground and background seeds are required')
    for side in (seeds.foreground, seeds.background):
        idx = np.asarray(side, dtype=int)
        if np.any(idx < 0) or np.any(idx >= np.asarray(grid.dims)):
            raise SegmentationError(f'seed outside volume {grid.dims}')


def _flat(grid_dims, index) -> np.ndarray:
    idx = np.asarray(index, dtype=np.int64).reshape(-1, 3)
    return np.ravel_multi_index(tuple(idx.T), grid_dims, order='F')


def fit_seed_models(grid: VoxelGrid, seeds: SeedSet, params: SegmentationParams) -> Tuple[GmmModel, GmmModel]:
    '''
    Foreground and background mixtures trained on seed densities. The
    component count is reduced to the number of distinct seed densities.
    '''
    _check_seeds(grid, seeds)
    floor = variance_floor(grid.values)
    models = []
    for side in (seeds.foreground, seeds.background):
        idx = np.asarray(side, dtype=int)
        samples = grid.values[tuple(idx.T)]
        k = min(params.gmm_components, len(np.unique(samples)))
        models.append(fit_gmm(samples, k, seed=params.seed, floor=floor))
    return models[0], models[1]


def neighbour_pairs(dims) -> Tuple[np.ndarray, np.ndarray]:
    'Flat (x-fastest) indices of all face-neighbour pairs, each pair once'
    flat = np.arange(int(np.prod(dims))).reshape(dims, order='F')
    tails, heads = [], []
    for axis in range(3):
        lo = [slice(None)] * 3
        hi = [slice(None)] * 3
        lo[axis] = slice(0, -1)
        hi[axis] = slice(1, None)
        tails.append(flat[tuple(lo)].ravel(order='F'))
        heads.append(flat[tuple(hi)].ravel(order='F'))
    return np.concatenate(tails), np.concatenate(heads)


def boundary_weights(grid: VoxelGrid, params: SegmentationParams) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    u, v = neighbour_pairs(grid.dims)
    x = grid.flat()
    delta = x[u] - x[v]
    return u, v, np.exp(-delta ** 2 / (2 * params.boundary_scale ** 2))


def build_graph(grid: VoxelGrid, seeds: SeedSet, fg: GmmModel, bg: GmmModel,
                params: SegmentationParams) -> FlowNetwork:
    _check_seeds(grid, seeds)
    n = int(np.prod(grid.dims))
    source, sink = n, n + 1
    x = grid.flat()
    lam = params.lambda_

    cost_fg = neg_log_likelihood(fg, x)
    cost_bg = neg_log_likelihood(bg, x)
    shift = np.minimum(cost_fg, cost_bg)
    to_source = lam * (cost_bg - shift)
    to_sink = lam * (cost_fg - shift)
    offset_terms = lam * shift

    u, v, w = boundary_weights(grid, params)

    fg_idx = _flat(grid.dims, seeds.foreground)
    bg_idx = _flat(grid.dims, seeds.background)
    seeded = np.zeros(n, dtype=bool)
    seeded[fg_idx] = True
    seeded[bg_idx] = True
    hard = max(
        params.hard_seed_weight,
        1.0 + float(to_source[~seeded].sum() + to_sink[~seeded].sum() + 2 * w.sum())
    )

    offset_terms[fg_idx] = lam * cost_fg[fg_idx]
    offset_terms[bg_idx] = lam * cost_bg[bg_idx]
    to_source[fg_idx] = hard
    to_sink[fg_idx] = 0.0
    to_source[bg_idx] = 0.0
    to_sink[bg_idx] = hard

    voxels = np.arange(n)
    tails = np.concatenate([np.full(n, source), voxels, u, v])
    heads = np.concatenate([voxels, np.full(n, sink), v, u])
    caps = np.concatenate([to_source, to_sink, w, w])
    return FlowNetwork(
        num_nodes=n + 2, source=source, sink=sink,
        tails=tails, heads=heads, capacities=caps,
        energy_offset=float(offset_terms.sum()),
    )


def max_flow(net: FlowNetwork) -> MaxFlowResult:
    '''
    Exact maximum flow by the Boykov-Kolmogorov augmenting path algorithm.
    Parallel arcs are merged by summing their capacities.
    '''
    g = nx.DiGraph()
    g.add_nodes_from(range(net.num_nodes))
    for a, b, c in zip(net.tails.tolist(), net.heads.tolist(), net.capacities.tolist()):
        if a == b:
            continue
        if g.has_edge(a, b):
            g[a][b]['capacity'] += c
        else:
            g.add_edge(a, b, capacity=c)
    flow_value, (reachable, _) = nx.minimum_cut(
        g, net.source, net.sink, capacity='capacity', flow_func=boykov_kolmogorov
    )
    source_side = np.zeros(net.num_nodes, dtype=bool)
    source_side[list(reachable)] = True
    crossing = source_side[net.tails] & ~source_side[net.heads]
    cut = float(net.capacities[crossing].sum())
    logger.debug(f'max flow {flow_value:.10g}, cut capacity {cut:.10g}')
    return MaxFlowResult(flow_value=float(flow_value), cut_capacity=cut, source_side=source_side)


def energy(mask: BinaryMask, grid: VoxelGrid, fg: GmmModel, bg: GmmModel,
           params: SegmentationParams) -> float:
    'Direct evaluation of lambda * R(A) + B(A)'
    if mask.dims != grid.dims:
        raise ValueError(f'mask {mask.dims} and grid {grid.dims} differ in shape')
    x = grid.flat()
    labels = mask.flat()
    region = np.where(labels, neg_log_likelihood(fg, x), neg_log_likelihood(bg, x)).sum()
    u, v, w = boundary_weights(grid, params)
    boundary = w[labels[u] != labels[v]].sum()
    return float(params.lambda_ * region + boundary)


def segment(grid: VoxelGrid, seeds: SeedSet, params: SegmentationParams) -> BinaryMask:
    fg, bg = fit_seed_models(grid, seeds, params)
    net = build_graph(grid, seeds, fg, bg, params)
    result = max_flow(net)
    n = int(np.prod(grid.dims))
    values = result.source_side[:n].reshape(grid.dims, order='F')
    logger.info(
        f'Segmented {grid.dims}: {int(values.sum())} foreground voxels, '
        f'energy {result.cut_capacity + net.energy_offset:.6g}'
    )
    return BinaryMask(values=values, spacing=grid.spacing, origin=grid.origin)
