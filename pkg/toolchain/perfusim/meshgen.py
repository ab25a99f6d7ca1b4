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

import itertools
import logging
import numpy as np
from scipy import sparse
from skimage import measure
from typing import Optional, Tuple

from perfusim.errors import MeshError
from perfusim.models import BinaryMask, MeshStats, SurfaceMesh, TaubinParams, TetMesh

logger = logging.getLogger(__name__)

# Outward faces of a positively oriented tetrahedron (a, b, c, d)
TET_FACES = np.array([[1, 2, 3], [0, 3, 2], [0, 1, 3], [0, 2, 1]])


def _empty_surface() -> SurfaceMesh:
    return SurfaceMesh(vertices=np.zeros((0, 3)), triangles=np.zeros((0, 3), dtype=np.int64))


def surface_volume(mesh: SurfaceMesh) -> float:
    'Enclosed volume of a closed triangle mesh by the divergence theorem'
    if mesh.is_empty:
        return 0.0
    p = mesh.vertices[mesh.triangles]
    return float(np.einsum('ij,ij->i', p[:, 0], np.cross(p[:, 1], p[:, 2])).sum() / 6.0)


def marching_cubes(mask: BinaryMask) -> SurfaceMesh:
    '''
    Isosurface at 0.5 of the mask padded by one background layer, so the
    surface is closed. With binary input every vertex is an edge midpoint.
    Ambiguous cells are resolved by the Lewiner tables. Triangles wind
    counter-clockwise seen from outside.
    '''
    if not mask.values.any():
        return _empty_surface()
    padded = np.pad(mask.values.astype(np.float64), 1)
    verts, faces, _, _ = measure.marching_cubes(padded, level=0.5, method='lewiner', allow_degenerate=False)

    # shared vertices keyed by position; binary input puts them on exact half-voxels
    keys = np.round(verts * 2).astype(np.int64)
    keys, inverse = np.unique(keys, axis=0, return_inverse=True)
    faces = inverse.reshape(-1)[faces]
    faces = faces[(faces[:, 0] != faces[:, 1]) & (faces[:, 1] != faces[:, 2]) & (faces[:, 0] != faces[:, 2])]

    index = keys / 2.0 - 1.0
    vertices = np.asarray(mask.origin) + index * np.asarray(mask.spacing)
    mesh = SurfaceMesh(vertices=vertices, triangles=faces)
    if surface_volume(mesh) < 0:
        mesh = SurfaceMesh(vertices=vertices, triangles=faces[:, ::-1].copy())
    logger.debug(f'Marching cubes: {len(vertices)} vertices, {len(faces)} triangles')
    return mesh


def umbrella_operator(num_vertices: int, triangles: np.ndarray) -> sparse.csr_matrix:
    '''
    Uniform Laplacian L = D^-1 A - I over mesh edges. Rows of vertices
    without neighbours are zero.
    '''
    if len(triangles) == 0:
        return sparse.csr_matrix((num_vertices, num_vertices))
    e = np.concatenate([triangles[:, [0, 1]], triangles[:, [1, 2]], triangles[:, [2, 0]]])
    e = np.unique(np.sort(e, axis=1), axis=0)
    rows = np.concatenate([e[:, 0], e[:, 1]])
    cols = np.concatenate([e[:, 1], e[:, 0]])
    adjacency = sparse.coo_matrix(
        (np.ones(len(rows)), (rows, cols)), shape=(num_vertices, num_vertices)
    ).tocsr()
    degree = np.asarray(adjacency.sum(axis=1)).ravel()
    scale = np.divide(1.0, degree, out=np.zeros_like(degree), where=degree > 0)
    identity = sparse.diags((degree > 0).astype(float))
    return (sparse.diags(scale) @ adjacency - identity).tocsr()


def _taubin(vertices: np.ndarray, laplacian: sparse.csr_matrix, params: TaubinParams) -> np.ndarray:
    x = vertices.copy()
    for _ in range(params.iterations):
        x = x + params.lambda_pos * (laplacian @ x)
        x = x + params.mu_neg * (laplacian @ x)
    return x


def taubin_smooth(mesh: SurfaceMesh, lambda_pos: float = 0.33, mu_neg: float = -0.34,
                  iterations: int = 20) -> SurfaceMesh:
    params = TaubinParams(lambda_pos=lambda_pos, mu_neg=mu_neg, iterations=iterations)
    if params.iterations == 0 or mesh.is_empty:
        return mesh.model_copy(update={'vertices': mesh.vertices.copy()})
    laplacian = umbrella_operator(len(mesh.vertices), mesh.triangles)
    return SurfaceMesh(vertices=_taubin(mesh.vertices, laplacian, params), triangles=mesh.triangles.copy())


def _kuhn_cube() -> np.ndarray:
    '''
    The six Kuhn tetrahedra of the unit cube as corner offsets, all along
    the (0,0,0)-(1,1,1) diagonal and all positively oriented. Every cube
    uses the same split, so neighbouring cubes share face diagonals.
    '''
    tets = []
    for perm in itertools.permutations(range(3)):
        corner = np.zeros(3, dtype=int)
        path = [corner.copy()]
        for axis in perm:
            corner[axis] += 1
            path.append(corner.copy())
        p = np.array(path)
        if np.linalg.det((p[1:] - p[0]).astype(float)) < 0:
            p = p[[0, 1, 3, 2]]
        tets.append(p)
    return np.array(tets)


KUHN = _kuhn_cube()


def tet_faces(tets: np.ndarray) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    '''
    Unique faces of a tetrahedral mesh. Returns the faces as sorted vertex
    triples, and per (cell, local face) the index of the face in that list
    (shape (cells, 4)), and the number of cells incident to each face.
    '''
    local = tets[:, TET_FACES].reshape(-1, 3)
    keys = np.sort(local, axis=1)
    faces, inverse, counts = np.unique(keys, axis=0, return_inverse=True, return_counts=True)
    return faces, inverse.reshape(len(tets), 4), counts


def boundary_faces(tets: np.ndarray) -> np.ndarray:
    'Faces referenced by exactly one tetrahedron, outward oriented'
    tets = np.asarray(tets, dtype=np.int64)
    if len(tets) == 0:
        return np.zeros((0, 3), dtype=np.int64)
    _, index, counts = tet_faces(tets)
    oriented = tets[:, TET_FACES]
    once = counts[index] == 1
    return oriented[once]


def voxel_tet_mesh(mask: BinaryMask, smooth_boundary: Optional[TaubinParams] = None) -> TetMesh:
    '''
    Six Kuhn tetrahedra per foreground voxel, on the lattice of voxel
    corners. Cell tags carry the flat (x-fastest) voxel index, vertex tag 1
    marks boundary vertices. Optional Taubin smoothing moves boundary
    vertices only and fails if it inverts a tetrahedron.
    '''
    voxels = mask.indices()
    if len(voxels) == 0:
        raise MeshError('cannot mesh an empty mask')
    nx_, ny_, nz_ = mask.dims
    corners = voxels[:, None, None, :] + KUHN[None, :, :, :]
    lattice = corners[..., 0] + (nx_ + 1) * (corners[..., 1] + (ny_ + 1) * corners[..., 2])
    lattice = lattice.reshape(-1, 4)

    used, tets = np.unique(lattice, return_inverse=True)
    tets = tets.reshape(-1, 4)
    ijk = np.stack([
        used % (nx_ + 1),
        (used // (nx_ + 1)) % (ny_ + 1),
        used // ((nx_ + 1) * (ny_ + 1)),
    ], axis=1)
    vertices = np.asarray(mask.origin) + (ijk - 0.5) * np.asarray(mask.spacing)

    surface = boundary_faces(tets)
    vertex_tags = np.zeros(len(vertices), dtype=np.int64)
    vertex_tags[np.unique(surface)] = 1
    cell_tags = np.repeat(
        np.ravel_multi_index(tuple(voxels.T), mask.dims, order='F'), len(KUHN)
    )

    if smooth_boundary is not None and smooth_boundary.iterations > 0:
        laplacian = umbrella_operator(len(vertices), surface)
        vertices = _taubin(vertices, laplacian, smooth_boundary)

    mesh = TetMesh(vertices=vertices, tets=tets, vertex_tags=vertex_tags, cell_tags=cell_tags)
    volumes = mesh.signed_volumes()
    if np.any(volumes <= 0):
        bad = np.flatnonzero(volumes <= 0)
        raise MeshError(f'boundary smoothing inverted {len(bad)} tetrahedra, first {bad[0]}')
    logger.info(f'Tetrahedral mesh: {len(vertices)} vertices, {len(tets)} tetrahedra')
    return mesh


def tet_quality(points: np.ndarray) -> np.ndarray:
    '''
    Normalised radius ratio 3 r_in / R_circ for tetrahedra given as
    (n, 4, 3) corner arrays; 1 for the regular tetrahedron.
    '''
    a = points[:, 0]
    u, v, w = points[:, 1] - a, points[:, 2] - a, points[:, 3] - a
    det = np.einsum('ij,ij->i', u, np.cross(v, w))
    volume = np.abs(det) / 6.0
    area = np.zeros(len(points))
    for f in TET_FACES:
        p = points[:, f]
        area += 0.5 * np.linalg.norm(np.cross(p[:, 1] - p[:, 0], p[:, 2] - p[:, 0]), axis=1)
    r_in = np.divide(3.0 * volume, area, out=np.zeros_like(area), where=area > 0)
    offset = (
        np.einsum('ij,ij->i', u, u)[:, None] * np.cross(v, w)
        + np.einsum('ij,ij->i', v, v)[:, None] * np.cross(w, u)
        + np.einsum('ij,ij->i', w, w)[:, None] * np.cross(u, v)
    )
    with np.errstate(divide='ignore', invalid='ignore'):
        r_circ = np.linalg.norm(offset, axis=1) / np.abs(2.0 * det)
        quality = np.where(volume > 0, 3.0 * r_in / r_circ, 0.0)
    return np.clip(quality, 0.0, 1.0)


def mesh_stats(mesh: TetMesh) -> MeshStats:
    volumes = mesh.signed_volumes()
    inverted = np.flatnonzero(volumes < 0).tolist()
    if inverted:
        logger.warning(f'{len(inverted)} inverted tetrahedra, first {inverted[0]}')
    quality = tet_quality(mesh.vertices[mesh.tets]) if mesh.num_cells else np.zeros(1)
    return MeshStats(
        volume=float(volumes.sum()),
        min_quality=float(quality.min()),
        max_quality=float(quality.max()),
        boundary_face_count=len(boundary_faces(mesh.tets)),
        inverted=inverted,
    )
