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
from typing import List, Literal, Tuple

Index3 = Tuple[int, int, int]


class SeedSet(BaseModel):
    'Voxel indices [i, j, k] marked as organ (foreground) and outside (background)'
    foreground: List[Index3] = Field(default_factory=list)
    background: List[Index3] = Field(default_factory=list)

    @model_validator(mode='after')
    def disjoint(self):
        common = set(map(tuple, self.foreground)) & set(map(tuple, self.background))
        if common:
            raise ValueError(f'seed sets overlap at {sorted(common)[:5]}')
        return self


class GmmComponent(BaseModel):
    weight: float = Field(gt=0)
    mean: float
    variance: float = Field(gt=0)


class GmmModel(BaseModel):
    components: List[GmmComponent]
    log_likelihood: List[float] = Field(
        default_factory=list,
        title='Log-likelihood history',
        description='Mean log-likelihood per EM iteration'
    )

    @property
    def k(self) -> int:
        return len(self.components)

    @field_validator('components')
    @classmethod
    def weights_sum_to_one(cls, v):
        if not v:
            raise ValueError('at least one component')
        total = sum(c.weight for c in v)
        if abs(total - 1.0) > 1e-9:
            raise ValueError(f'weights sum to {total}, not 1')
        return v

    def arrays(self) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
        return (
            np.array([c.weight for c in self.components]),
            np.array([c.mean for c in self.components]),
            np.array([c.variance for c in self.components]),
        )


class SegmentationParams(BaseModel):
    model_config = ConfigDict(extra='forbid', populate_by_name=True)

    lambda_: float = Field(
        alias='lambda',
        title='Region weight',
        description='Weight of the region term against the boundary term'
    )
    boundary_scale: float = Field(10.0, gt=0, title='Boundary contrast scale')
    connectivity: Literal[6] = 6
    gmm_components: int = Field(3, ge=1)
    hard_seed_weight: float = Field(
        1e9, gt=0,
        title='Seed weight',
        description='Terminal capacity of seeded voxels; raised automatically '
                    'when it would not dominate every other cut'
    )
    seed: int = Field(0, title='RNG seed for GMM initialisation')

    @field_validator('lambda_')
    @classmethod
    def region_weight(cls, v):
        if v < 0:
            raise ValueError('lambda must be >= 0 (region weight)')
        return v


class FlowNetwork(BaseModel):
    '''
    Directed s-t network in arc-list form. Voxel nodes are numbered by flat
    x-fastest index, followed by the source and the sink.
    '''
    model_config = ConfigDict(arbitrary_types_allowed=True)

    num_nodes: int
    source: int
    sink: int
    tails: np.ndarray
    heads: np.ndarray
    capacities: np.ndarray
    energy_offset: float = Field(
        0.0,
        title='Energy offset',
        description='Constant such that cut capacity + offset = labeling energy'
    )

    @field_validator('tails', 'heads', 'capacities', mode='before')
    @classmethod
    def arc_arrays(cls, v):
        return np.asarray(v)

    @model_validator(mode='after')
    def arcs_valid(self):
        self.tails = np.asarray(self.tails, dtype=np.int64)
        self.heads = np.asarray(self.heads, dtype=np.int64)
        self.capacities = np.asarray(self.capacities, dtype=np.float64)
        if not (len(self.tails) == len(self.heads) == len(self.capacities)):
            raise ValueError('arc arrays differ in length')
        if np.any(self.capacities < 0):
            raise ValueError('negative capacity')
        if not np.all(np.isfinite(self.capacities)):
            raise ValueError('capacities must be finite')
        if np.any(self.heads == self.source):
            raise ValueError('arcs into the source are not allowed')
        return self


class MaxFlowResult(BaseModel):
    model_config = ConfigDict(arbitrary_types_allowed=True)

    flow_value: float
    cut_capacity: float
    source_side: np.ndarray = Field(
        title='Source side',
        description='Boolean per network node, True on the source side of the minimum cut'
    )
