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

import hashlib
import ujson
from pydantic import BaseModel, ConfigDict, Field
from typing import List, Optional

from perfusim.models.compartments import CouplingParams, DarcyParams
from perfusim.models.flow import Flow1dParams, FluidProps
from perfusim.models.segmentation import SeedSet, SegmentationParams
from perfusim.models.transport import TransportParams
from perfusim.models.tree import StubDefinition, TreeGenParams
from perfusim.models.vessels import VesselParams
from perfusim.models.volume import PhantomSpec

STAGE_ORDER = ['segment', 'mesh', 'vessels', 'treegen', 'flow1d', 'perfuse', 'transport']


class Stages(BaseModel):
    model_config = ConfigDict(extra='forbid')

    segment: bool = True
    mesh: bool = True
    vessels: bool = False
    treegen: bool = True
    flow1d: bool = True
    perfuse: bool = True
    transport: bool = True

    def enabled(self) -> List[str]:
        return [s for s in STAGE_ORDER if getattr(self, s)]


class Inputs(BaseModel):
    '''
    Files consumed by the run. Each one stands in for the output of a
    disabled stage or for a phantom.
    '''
    model_config = ConfigDict(extra='forbid')

    volume: Optional[str] = Field(None, title='Organ volume header (JSON)')
    seeds: Optional[str] = Field(None, title='Seed file (JSON)')
    mask: Optional[str] = Field(None, title='Organ mask header, used when segmentation is off')
    vessel_volume: Optional[str] = Field(None, title='Contrast volume header for vessel extraction')
    portal_tree: Optional[str] = Field(None, title='Portal tree JSON, used when tree generation is off')
    hepatic_tree: Optional[str] = Field(None, title='Hepatic tree JSON, used when tree generation is off')
    portal_bc: Optional[str] = Field(
        None,
        title='Portal boundary data (JSON)',
        description='Root velocity and terminal pressures for the standalone flow1d solve'
    )
    hepatic_bc: Optional[str] = Field(
        None,
        title='Hepatic boundary data (JSON)',
        description='Root velocity and terminal pressures for the standalone flow1d solve'
    )

    def paths(self) -> List[tuple]:
        return [(k, v) for k, v in self.model_dump().items() if v is not None]


class MeshParams(BaseModel):
    model_config = ConfigDict(extra='forbid')

    taubin_lambda: float = Field(0.33, gt=0, lt=1)
    taubin_mu: float = Field(-0.34, gt=-1, lt=0)
    surface_iterations: int = Field(20, ge=0, title='Taubin iterations for the surface mesh')
    smooth_boundary: bool = Field(False, title='Smooth tetrahedral boundary vertices')
    boundary_iterations: int = Field(5, ge=0)


class TreeSource(BaseModel):
    model_config = ConfigDict(extra='forbid')

    stub: Optional[StubDefinition] = Field(None, title='Inline one-segment stub')
    stub_file: Optional[str] = Field(None, title='Tree JSON used as stub')
    use_reconstructed: bool = Field(
        False,
        title='Use reconstructed vessels',
        description='Seed the tree with the main branches found by the vessels stage'
    )
    terminals: int = Field(50, ge=1, title='Number of terminal points')


class TreeGenSection(BaseModel):
    model_config = ConfigDict(extra='forbid')

    params: TreeGenParams = Field(default_factory=TreeGenParams)
    portal: TreeSource = Field(default_factory=TreeSource)
    hepatic: TreeSource = Field(default_factory=TreeSource)


class Flow1dSection(BaseModel):
    model_config = ConfigDict(extra='forbid')

    solver: Flow1dParams = Field(default_factory=Flow1dParams)
    w0_portal: float = Field(0.1, ge=0, title='Portal root velocity in m/s')
    terminal_pressure: float = Field(
        0.0,
        title='Terminal pressure in Pa',
        description='Uniform terminal pressure for the standalone tree solve'
    )


class PipelineConfig(BaseModel):
    model_config = ConfigDict(extra='forbid')

    seed: int = Field(0, title='Global RNG seed')
    output_dir: str = Field('perfusim_out', title='Output directory')
    stages: Stages = Field(default_factory=Stages)
    inputs: Inputs = Field(default_factory=Inputs)
    phantom: Optional[PhantomSpec] = Field(None, title='Organ phantom used when no volume file is given')
    vessel_phantom: Optional[PhantomSpec] = Field(
        None, title='Contrast phantom used when no vessel volume is given'
    )
    segmentation: Optional[SegmentationParams] = Field(
        None,
        title='Segmentation',
        description='Required when segmentation runs; lambda has no default'
    )
    seeds: Optional[SeedSet] = Field(None, title='Inline seeds')
    downsample: int = Field(1, ge=1, title='Downsampling factor before segmentation')
    mesh: MeshParams = Field(default_factory=MeshParams)
    vessels: VesselParams = Field(default_factory=VesselParams)
    treegen: TreeGenSection = Field(default_factory=TreeGenSection)
    fluid: FluidProps = Field(default_factory=FluidProps)
    flow1d: Flow1dSection = Field(default_factory=Flow1dSection)
    darcy: DarcyParams = Field(default_factory=DarcyParams)
    coupling: CouplingParams = Field(default_factory=CouplingParams)
    transport: TransportParams = Field(default_factory=TransportParams)

    def config_hash(self) -> str:
        payload = self.model_dump(mode='json', by_alias=True)
        return hashlib.sha256(ujson.dumps(payload, sort_keys=True).encode()).hexdigest()
