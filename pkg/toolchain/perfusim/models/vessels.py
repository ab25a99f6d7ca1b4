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
from typing import Optional, Tuple

Vector3 = Tuple[float, float, float]


class Skeleton(BaseModel):
    model_config = ConfigDict(arbitrary_types_allowed=True)

    voxels: np.ndarray = Field(title='Centerline voxels', description='(n, 3) voxel indices')
    radii: np.ndarray = Field(title='Radii', description='Vessel radius in mm per centerline voxel')
    dims: Tuple[int, int, int]
    spacing: Vector3 = (1.0, 1.0, 1.0)
    origin: Vector3 = (0.0, 0.0, 0.0)

    @field_validator('voxels', 'radii', mode='before')
    @classmethod
    def skeleton_arrays(cls, v):
        return np.asarray(v)

    @model_validator(mode='after')
    def shapes(self):
        self.voxels = np.asarray(self.voxels, dtype=np.int64).reshape(-1, 3)
        self.radii = np.asarray(self.radii, dtype=np.float64).reshape(-1)
        if len(self.voxels) != len(self.radii):
            raise ValueError('one radius per skeleton voxel expected')
        return self

    def positions(self) -> np.ndarray:
        return np.asarray(self.origin) + self.voxels * np.asarray(self.spacing)

    def as_array(self) -> np.ndarray:
        out = np.zeros(self.dims, dtype=bool)
        if len(self.voxels):
            out[tuple(self.voxels.T)] = True
        return out


class VesselParams(BaseModel):
    model_config = ConfigDict(extra='forbid')

    threshold: Optional[float] = Field(
        None,
        title='Threshold',
        description='Density threshold; chosen by Otsu\'s method when absent'
    )
    blur_sigma: float = Field(0.5, ge=0, title='Gaussian blur sigma in mm')
    open_radius: int = Field(1, ge=0)
    close_radius: int = Field(1, ge=0)
    stub_min_radius: float = Field(
        1.0, ge=0,
        title='Stub radius cutoff',
        description='Reconstructed edges thinner than this (mm) are dropped from tree stubs'
    )
