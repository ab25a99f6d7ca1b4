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
from pydantic import BaseModel, ConfigDict, Field, field_validator
from typing import List, Optional, Tuple


class TransportParams(BaseModel):
    model_config = ConfigDict(extra='forbid')

    porosities: List[float] = Field(
        [0.2, 0.1, 0.2],
        title='Porosities',
        description='Volume fraction of each compartment'
    )
    cfl: float = Field(0.4, gt=0, le=1, title='CFL number')
    end_time: float = Field(10.0, gt=0, title='End time in s')
    snapshot_interval: Optional[float] = Field(
        None, gt=0,
        title='Snapshot interval in s',
        description='Only the final state is kept when absent'
    )
    bolus: List[Tuple[float, float]] = Field(
        [(0.0, 1.0), (2.0, 1.0), (2.0, 0.0)],
        title='Inlet bolus',
        description='Piecewise linear (time s, concentration) curve at the inlet compartment sources'
    )
    inlet_compartment: int = Field(0, ge=0)
    transit_delay: bool = Field(
        False,
        title='Transit delay',
        description='Delay the bolus at each inlet node by the tree transit time of its terminal'
    )
    max_steps: int = Field(1_000_000, ge=1)

    @field_validator('porosities')
    @classmethod
    def fractions(cls, v):
        if not v or any(p <= 0 for p in v):
            raise ValueError('porosities must be > 0')
        if sum(v) > 1 + 1e-12:
            raise ValueError('porosities must sum to at most 1')
        return v

    @field_validator('bolus')
    @classmethod
    def time_ordered(cls, v):
        times = [t for t, _ in v]
        if any(b < a for a, b in zip(times, times[1:])):
            raise ValueError('bolus times must be non-decreasing')
        if any(c < 0 for _, c in v):
            raise ValueError('bolus concentrations must be >= 0')
        return v

    def inlet_concentration(self, t: float) -> float:
        if not self.bolus:
            return 0.0
        times = np.array([p[0] for p in self.bolus])
        values = np.array([p[1] for p in self.bolus])
        if t < times[0] or t > times[-1]:
            return 0.0
        # right-continuous at repeated times so step inlets switch exactly once
        i = int(np.searchsorted(times, t, side='right')) - 1
        if i >= len(times) - 1:
            return float(values[-1])
        t0, t1 = times[i], times[i + 1]
        if t1 == t0:
            return float(values[i + 1])
        return float(values[i] + (values[i + 1] - values[i]) * (t - t0) / (t1 - t0))


class SaturationField(BaseModel):
    model_config = ConfigDict(arbitrary_types_allowed=True)

    time: float = 0.0
    values: np.ndarray = Field(title='Saturation per compartment and cell, shape (compartments, cells)')


class LedgerRow(BaseModel):
    time: float
    mass: List[float] = Field(title='Tracer volume per compartment in mm^3')
    injected: float = Field(title='Cumulative injected tracer in mm^3')
    exited: float = Field(title='Cumulative exited tracer in mm^3')

    @property
    def imbalance(self) -> float:
        return sum(self.mass) + self.exited - self.injected


class TransportResult(BaseModel):
    snapshots: List[SaturationField] = Field(default_factory=list)
    ledger: List[LedgerRow] = Field(default_factory=list)
    dt: float = 0.0
    steps: int = 0


class FaceFluxes(BaseModel):
    '''
    Volumetric fluxes through the interior faces of a tetrahedral mesh.
    `cells[f] = (a, b)`, `normals[f]` is the face area vector pointing from
    a into b (mm^2) and `flux[i, f]` the flow of compartment i from a to b
    (mm^3/s). Boundary faces carry no flux.
    '''
    model_config = ConfigDict(arbitrary_types_allowed=True)

    cells: np.ndarray
    normals: np.ndarray
    flux: np.ndarray

    @property
    def num_faces(self) -> int:
        return len(self.cells)

    def outflow(self, num_cells: int) -> np.ndarray:
        'Net flux leaving each cell, shape (compartments, cells)'
        out = np.zeros((self.flux.shape[0], num_cells))
        for i, f in enumerate(self.flux):
            np.add.at(out[i], self.cells[:, 0], f)
            np.subtract.at(out[i], self.cells[:, 1], f)
        return out
