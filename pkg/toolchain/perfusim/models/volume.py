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
from typing import List, Literal, Optional, Tuple

Vector3 = Tuple[float, float, float]


class _Volume(BaseModel):
    model_config = ConfigDict(arbitrary_types_allowed=True)

    values: np.ndarray = Field(
        title='Values',
        description='Voxel values indexed [i, j, k]; i runs along x. '
                    'Flattening and file payloads use x-fastest order.'
    )
    spacing: Vector3 = Field(
        (1.0, 1.0, 1.0),
        title='Spacing',
        description='Voxel size in mm per axis'
    )
    origin: Vector3 = Field(
        (0.0, 0.0, 0.0),
        title='Origin',
        description='Position of the center of voxel (0, 0, 0) in mm'
    )

    @field_validator('spacing')
    @classmethod
    def spacing_positive(cls, v):
        if any(s <= 0 for s in v):
            raise ValueError('spacing must be positive on every axis')
        return v

    @property
    def dims(self) -> Tuple[int, int, int]:
        return tuple(int(d) for d in self.values.shape)

    @property
    def voxel_volume(self) -> float:
        return float(np.prod(self.spacing))

    def centers(self, index: np.ndarray) -> np.ndarray:
        'Physical (mm) centers of voxels given as an (n, 3) index array'
        return np.asarray(self.origin) + np.asarray(index, dtype=float) * np.asarray(self.spacing)

    def grid_centers(self) -> np.ndarray:
        'Voxel centers for the whole grid, shape dims + (3,)'
        axes = [
            self.origin[a] + np.arange(self.dims[a]) * self.spacing[a]
            for a in range(3)
        ]
        return np.stack(np.meshgrid(*axes, indexing='ij'), axis=-1)

    def bounds(self) -> Tuple[np.ndarray, np.ndarray]:
        'Lower and upper corners of the volume covered by the voxels'
        spacing = np.asarray(self.spacing)
        lo = np.asarray(self.origin) - spacing / 2
        hi = lo + np.asarray(self.dims) * spacing
        return lo, hi

    def flat(self) -> np.ndarray:
        return self.values.ravel(order='F')


def _as_volume_array(v, dtype) -> np.ndarray:
    arr = np.asarray(v)
    if arr.ndim != 3:
        raise ValueError(f'values must be 3-dimensional, got shape {arr.shape}')
    if any(d < 1 for d in arr.shape):
        raise ValueError('every axis needs at least one voxel')
    return arr.astype(dtype, copy=False)


class VoxelGrid(_Volume):
    'Scalar density volume, float64 internally'

    @field_validator('values', mode='before')
    @classmethod
    def values_3d(cls, v):
        return _as_volume_array(v, np.float64)


class BinaryMask(_Volume):
    'Boolean volume produced by segmentation and vessel extraction'

    @field_validator('values', mode='before')
    @classmethod
    def values_3d(cls, v):
        return _as_volume_array(v, bool)

    def count(self) -> int:
        return int(self.values.sum())

    def indices(self) -> np.ndarray:
        'Foreground voxel indices, (n, 3), in x-fastest order'
        idx = np.argwhere(self.values)
        order = np.lexsort((idx[:, 0], idx[:, 1], idx[:, 2]))
        return idx[order]

    def like(self, values: np.ndarray) -> 'BinaryMask':
        return BinaryMask(values=values, spacing=self.spacing, origin=self.origin)


class PhantomSpec(BaseModel):
    '''
    Analytic test volume. Geometry is given in mm in the grid's frame
    (voxel (0, 0, 0) is centered at `origin`). A voxel takes the inside
    value when its center lies strictly inside the shape.
    '''
    model_config = ConfigDict(extra='forbid')

    kind: Literal['sphere', 'ellipsoid', 'tube', 'y_tube'] = 'sphere'
    dims: Tuple[int, int, int] = Field((32, 32, 32), title='Voxels per axis')
    spacing: Vector3 = (1.0, 1.0, 1.0)
    origin: Vector3 = (0.0, 0.0, 0.0)
    center: Optional[Vector3] = Field(
        None,
        title='Center',
        description='Sphere/ellipsoid center or y_tube junction; defaults to the grid center'
    )
    radius: float = Field(10.0, ge=0, title='Radius in mm (sphere, tube, y_tube)')
    semi_axes: Optional[Vector3] = Field(None, title='Ellipsoid semi-axes in mm')
    start: Optional[Vector3] = Field(None, title='Tube axis start point')
    end: Optional[Vector3] = Field(None, title='Tube axis end point')
    branch_ends: Optional[List[Vector3]] = Field(
        None,
        title='Y-tube arm end points',
        description='Three arm end points joined at `center`'
    )
    inside_value: float = 100.0
    outside_value: float = 0.0
    noise_sigma: float = Field(0.0, ge=0)
    seed: int = 0

    @field_validator('dims')
    @classmethod
    def dims_positive(cls, v):
        if any(d < 1 for d in v):
            raise ValueError('dims must be positive')
        return v

    @field_validator('branch_ends')
    @classmethod
    def three_arms(cls, v):
        if v is not None and len(v) != 3:
            raise ValueError('y_tube needs exactly three arm end points')
        return v

    @model_validator(mode='after')
    def geometry_present(self):
        missing = {
            'ellipsoid': ['semi_axes'],
            'tube': ['start', 'end'],
            'y_tube': ['branch_ends'],
        }.get(self.kind, [])
        for name in missing:
            if getattr(self, name) is None:
                raise ValueError(f'{self.kind} phantom needs {name}')
        return self
