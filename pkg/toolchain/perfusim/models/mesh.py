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

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator
from typing import List, Optional


def _points(v) -> np.ndarray:
    arr = np.asarray(v, dtype=np.float64)
    if arr.size == 0:
        return arr.reshape(0, 3)
    if arr.ndim != 2 or arr.shape[1] != 3:
        raise ValueError(f'vertices must have shape (n, 3), got {arr.shape}')
    return arr


def _cells(v, width: int) -> np.ndarray:
    arr = np.asarray(v, dtype=np.int64)
    if arr.size == 0:
        return arr.reshape(0, width)
    if arr.ndim != 2 or arr.shape[1] != width:
        raise ValueError(f'cells must have shape (n, {width}), got {arr.shape}')
    return arr


class SurfaceMesh(BaseModel):
    model_config = ConfigDict(arbitrary_types_allowed=True)

    vertices: np.ndarray = Field(title='Vertices', description='(n, 3) positions in mm')
    triangles: np.ndarray = Field(
        title='Triangles',
        description='(m, 3) vertex indices, counter-clockwise seen from outside'
    )

    @field_validator('vertices', mode='before')
    @classmethod
    def vertex_shape(cls, v):
        return _points(v)

    @field_validator('triangles', mode='before')
    @classmethod
    def triangle_shape(cls, v):
        return _cells(v, 3)

    @model_validator(mode='after')
    def indices_in_bounds(self):
        if self.triangles.size and (
                self.triangles.min() < 0 or self.triangles.max() >= len(self.vertices)):
            raise ValueError('triangle index out of bounds')
        return self

    @property
    def is_empty(self) -> bool:
        return len(self.triangles) == 0

    def edges(self) -> np.ndarray:
        'Undirected edges, one row per (triangle, side), sorted per row'
        t = self.triangles
        e = np.concatenate([t[:, [0, 1]], t[:, [1, 2]], t[:, [2, 0]]])
        return np.sort(e, axis=1)


class TetMesh(BaseModel):
    model_config = ConfigDict(arbitrary_types_allowed=True)

    vertices: np.ndarray = Field(title='Vertices', description='(n, 3) positions in mm')
    tets: np.ndarray = Field(
        title='Tetrahedra',
        description='(m, 4) vertex indices with positive signed volume'
    )
    vertex_tags: Optional[np.ndarray] = Field(
        None,
        title='Vertex tags',
        description='Integer tag per vertex; 1 marks boundary vertices of voxel meshes'
    )
    cell_tags: Optional[np.ndarray] = Field(
        None,
        title='Cell tags',
        description='Integer tag per tetrahedron; voxel meshes store the flat voxel index'
    )

    @field_validator('vertices', mode='before')
    @classmethod
    def vertex_shape(cls, v):
        return _points(v)

    @field_validator('tets', mode='before')
    @classmethod
    def tet_shape(cls, v):
        return _cells(v, 4)

    @model_validator(mode='after')
    def indices_in_bounds(self):
        if self.tets.size and (self.tets.min() < 0 or self.tets.max() >= len(self.vertices)):
            raise ValueError('tetrahedron index out of bounds')
        if self.vertex_tags is not None and len(self.vertex_tags) != len(self.vertices):
            raise ValueError('one vertex tag per vertex expected')
        if self.cell_tags is not None and len(self.cell_tags) != len(self.tets):
            raise ValueError('one cell tag per tetrahedron expected')
        return self

    @property
    def num_vertices(self) -> int:
        return len(self.vertices)

    @property
    def num_cells(self) -> int:
        return len(self.tets)

    def signed_volumes(self) -> np.ndarray:
        p = self.vertices[self.tets]
        d = np.cross(p[:, 1] - p[:, 0], p[:, 2] - p[:, 0])
        return np.einsum('ij,ij->i', d, p[:, 3] - p[:, 0]) / 6.0

    def centroids(self) -> np.ndarray:
        return self.vertices[self.tets].mean(axis=1)


class TaubinParams(BaseModel):
    model_config = ConfigDict(extra='forbid')

    lambda_pos: float = Field(0.33, gt=0, title='Shrinking step factor')
    mu_neg: float = Field(-0.34, lt=0, title='Inflating step factor')
    iterations: int = Field(20, ge=0)


class MeshStats(BaseModel):
    volume: float = Field(title='Sum of signed tetrahedron volumes in mm^3')
    min_quality: float
    max_quality: float
    boundary_face_count: int
    inverted: List[int] = Field(default_factory=list, title='Tetrahedra with negative volume')
