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
from typing import Dict, List, Optional, Tuple, Union

from perfusim.models.flow import TreeFlowState
from perfusim.models.mesh import TetMesh


class CompartmentSpec(BaseModel):
    model_config = ConfigDict(arbitrary_types_allowed=True)

    id: int
    name: str = ''
    permeability: np.ndarray = Field(
        title='Permeability',
        description='Hydraulic conductivity K in mm^2/(Pa s): one symmetric 3x3 '
                    'tensor, or one per cell with shape (cells, 3, 3)'
    )

    @field_validator('permeability', mode='before')
    @classmethod
    def tensor(cls, v):
        k = np.asarray(v, dtype=np.float64)
        if k.ndim == 0:
            k = k * np.eye(3)
        if k.shape[-2:] != (3, 3) or k.ndim not in (2, 3):
            raise ValueError(f'permeability must be 3x3 or (cells, 3, 3), got {k.shape}')
        if not np.allclose(k, np.swapaxes(k, -1, -2), rtol=0, atol=1e-14 * max(1.0, np.abs(k).max())):
            raise ValueError('permeability must be symmetric')
        return k

    def per_cell(self, num_cells: int) -> np.ndarray:
        if self.permeability.ndim == 2:
            return np.broadcast_to(self.permeability, (num_cells, 3, 3))
        if len(self.permeability) != num_cells:
            raise ValueError(f'{len(self.permeability)} permeability tensors for {num_cells} cells')
        return self.permeability


class CompartmentSystem(BaseModel):
    '''
    Multicompartment Darcy problem on one tetrahedral mesh. `coupling[i, j]`
    is the exchange coefficient between compartments i and j (1/(Pa s)),
    `sources[i]` holds nodal volumetric loads in mm^3/s for compartment i.
    '''
    model_config = ConfigDict(arbitrary_types_allowed=True)

    mesh: TetMesh
    compartments: List[CompartmentSpec]
    coupling: np.ndarray
    sources: np.ndarray
    fixed: Dict[int, Dict[int, float]] = Field(
        default_factory=dict,
        title='Fixed pressures',
        description='compartment index -> {node: pressure in Pa}'
    )

    @model_validator(mode='after')
    def consistent(self):
        n = len(self.compartments)
        self.coupling = np.asarray(self.coupling, dtype=np.float64)
        self.sources = np.asarray(self.sources, dtype=np.float64)
        if self.coupling.shape != (n, n):
            raise ValueError(f'coupling must be {n}x{n}')
        if np.any(self.coupling < 0):
            raise ValueError('coupling coefficients must be >= 0')
        if not np.array_equal(self.coupling, self.coupling.T):
            raise ValueError('coupling must be symmetric')
        if np.any(np.diag(self.coupling) != 0):
            raise ValueError('a compartment does not couple to itself')
        if self.sources.shape != (n, self.mesh.num_vertices):
            raise ValueError(f'sources must have shape ({n}, {self.mesh.num_vertices})')
        for i, nodes in self.fixed.items():
            if not 0 <= i < n:
                raise ValueError(f'fixed pressures for unknown compartment {i}')
            if any(not 0 <= v < self.mesh.num_vertices for v in nodes):
                raise ValueError('fixed pressure node out of range')
        return self

    @property
    def size(self) -> int:
        return len(self.compartments)

    def with_sources(self, sources: np.ndarray) -> 'CompartmentSystem':
        return self.model_copy(update={'sources': np.asarray(sources, dtype=np.float64)})


class PressureField(BaseModel):
    model_config = ConfigDict(arbitrary_types_allowed=True)

    values: np.ndarray = Field(title='Nodal pressure in Pa, shape (compartments, vertices)')
    cg_iterations: int = 0


class VelocityField(BaseModel):
    model_config = ConfigDict(arbitrary_types_allowed=True)

    values: np.ndarray = Field(title='Cell Darcy velocity in mm/s, shape (compartments, cells, 3)')


class CompartmentConfig(BaseModel):
    model_config = ConfigDict(extra='forbid')

    name: str
    permeability: Union[float, List[List[float]]] = Field(
        1.0,
        title='Permeability',
        description='Isotropic value or full 3x3 tensor, mm^2/(Pa s)'
    )


class CouplingConfig(BaseModel):
    model_config = ConfigDict(extra='forbid')

    pair: Tuple[int, int]
    value: float = Field(ge=0, title='Exchange coefficient in 1/(Pa s)')

    @field_validator('pair')
    @classmethod
    def distinct(cls, v):
        if v[0] == v[1]:
            raise ValueError('coupling pair must name two different compartments')
        return v


class DarcyParams(BaseModel):
    model_config = ConfigDict(extra='forbid')

    compartments: List[CompartmentConfig] = Field(
        default_factory=lambda: [
            CompartmentConfig(name='portal', permeability=1.0),
            CompartmentConfig(name='filtration', permeability=0.5),
            CompartmentConfig(name='hepatic', permeability=1.0),
        ]
    )
    couplings: List[CouplingConfig] = Field(
        default_factory=lambda: [
            CouplingConfig(pair=(0, 1), value=1e-3),
            CouplingConfig(pair=(1, 2), value=1e-3),
        ]
    )
    cg_tolerance: float = Field(1e-10, gt=0, title='CG relative residual')
    cg_max_iterations: Optional[int] = Field(None, ge=1)
    source_tolerance: float = Field(
        5.0, gt=0,
        title='Source snapping distance',
        description='Largest distance in mm from a tree terminal to its mesh vertex'
    )
    source_spread: Optional[float] = Field(
        None, gt=0,
        title='Source spread',
        description='Gaussian sigma in mm for distributing terminal loads; point loads when absent'
    )

    @model_validator(mode='after')
    def pairs_in_range(self):
        n = len(self.compartments)
        for c in self.couplings:
            if not all(0 <= i < n for i in c.pair):
                raise ValueError(f'coupling pair {c.pair} outside 0..{n - 1}')
        return self

    def coupling_matrix(self) -> np.ndarray:
        n = len(self.compartments)
        g = np.zeros((n, n))
        for c in self.couplings:
            i, j = c.pair
            g[i, j] = g[j, i] = c.value
        return g


class CouplingParams(BaseModel):
    model_config = ConfigDict(extra='forbid')

    relaxation: float = Field(1.0, gt=0, le=1, title='Under-relaxation factor theta')
    tolerance: float = Field(1e-6, gt=0, title='Relative terminal flux change')
    max_iterations: int = Field(100, ge=1)
    portal_compartment: int = 0
    hepatic_compartment: int = 2


class FluxBalance(BaseModel):
    compartment: int
    inflow: float = Field(title='Source total in mm^3/s')
    outflow: float = Field(title='Sink total in mm^3/s')
    exchange: Dict[int, float] = Field(
        default_factory=dict,
        title='Exchange',
        description='Net flow from this compartment into the keyed one'
    )
    reaction: float = Field(
        0.0,
        title='Reaction',
        description='Flow entering through fixed-pressure nodes'
    )

    @property
    def imbalance(self) -> float:
        return self.inflow + self.reaction - self.outflow - sum(self.exchange.values())


class CellBalance(BaseModel):
    '''
    Per-cell volume budget of a solved system, in mm^3/s. `sources[i, c]` is
    the net load of compartment i delivered to cell c (positive inflow,
    negative sink, fixed-pressure reactions included); `exchange[i, j, c]`
    is the net flow from compartment i to j inside cell c.
    '''
    model_config = ConfigDict(arbitrary_types_allowed=True)

    sources: np.ndarray
    exchange: np.ndarray

    def divergence(self) -> np.ndarray:
        'Net volume each cell must push out through its faces, per compartment'
        return self.sources - self.exchange.sum(axis=1)


class CouplingResult(BaseModel):
    model_config = ConfigDict(arbitrary_types_allowed=True)

    portal: TreeFlowState
    hepatic: TreeFlowState
    pressure: PressureField
    system: CompartmentSystem = Field(title='System with the converged sources')
    iterations: int
    history: List[float] = Field(default_factory=list, title='Relative terminal flux change per iteration')
