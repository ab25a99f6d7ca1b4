from .volume import VoxelGrid, BinaryMask, PhantomSpec
from .mesh import SurfaceMesh, TetMesh, TaubinParams, MeshStats
from .segmentation import SeedSet, GmmComponent, GmmModel, SegmentationParams, FlowNetwork, MaxFlowResult
from .vessels import Skeleton, VesselParams
from .tree import Node, Edge, VascularTree, TreeGenParams, StubDefinition
from .flow import FluidProps, FlowBoundary, TreeFlowState, Flow1dParams
from .compartments import (
    CompartmentSpec, CompartmentSystem, PressureField, VelocityField,
    CompartmentConfig, CouplingConfig, DarcyParams, CouplingParams, FluxBalance,
    CellBalance, CouplingResult
)
from .transport import TransportParams, SaturationField, LedgerRow, TransportResult, FaceFluxes
from .config import PipelineConfig, Stages, Inputs, MeshParams, TreeSource, TreeGenSection, Flow1dSection
from .manifest import Artifact, Manifest
