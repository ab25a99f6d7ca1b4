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

from pydantic import BaseModel, ConfigDict, Field
from typing import Dict, List


class FluidProps(BaseModel):
    model_config = ConfigDict(extra='forbid')

    density: float = Field(1050.0, gt=0, title='Density in kg/m^3')
    viscosity: float = Field(3.5e-3, gt=0, title='Dynamic viscosity in Pa s')


class FlowBoundary(BaseModel):
    '''
    Boundary data for one tree: root inflow velocity and a pressure per
    terminal node id. Terminals left out take a default pressure.
    '''
    model_config = ConfigDict(extra='forbid')

    w0: float = Field(title='Root velocity in m/s')
    terminal_pressures: Dict[int, float] = Field(default_factory=dict, title='Terminal pressures in Pa')

    def pressures(self, terminals: List[int], default: float) -> Dict[int, float]:
        unknown = sorted(set(self.terminal_pressures) - set(terminals))
        if unknown:
            raise ValueError(f'boundary pressures given for non-terminal nodes {unknown}')
        return {t: self.terminal_pressures.get(t, default) for t in terminals}


class TreeFlowState(BaseModel):
    '''
    Solved (or trial) flow in a tree, SI units: velocities in m/s, areas in
    m^2, pressures in Pa. Keys are edge ids for edge quantities and node ids
    for pressures.
    '''
    velocities: Dict[int, float]
    areas: Dict[int, float]
    pressures: Dict[int, float]
    w0: float
    iterations: int = 0
    residual_history: List[float] = Field(default_factory=list)

    def flux(self, edge_id: int) -> float:
        'Volumetric flux A w in m^3/s'
        return self.areas[edge_id] * self.velocities[edge_id]


class Flow1dParams(BaseModel):
    model_config = ConfigDict(extra='forbid')

    max_iterations: int = Field(50, ge=1)
    tolerance: float = Field(1e-10, gt=0, title='Scaled residual tolerance')
