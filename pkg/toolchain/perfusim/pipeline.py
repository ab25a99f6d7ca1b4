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

'''
Configuration checks, stage orchestration and export for a full run.

Stages run in the order segment, mesh, vessels, treegen, flow1d, perfuse,
transport. Every output lands under the output directory and is listed with
its sha256 in `manifest.json`.
'''

import csv
import logging
import math
import os
import numpy as np
from pydantic import ValidationError
from typing import Callable, Dict, List, Optional, Tuple

from perfusim import darcy, flow1d, meshgen, segmentation, transport, vesselrecon, voxelio, vtree
from perfusim.errors import ConfigError, PerfusimError, StageError
from perfusim.models import (
    Artifact, BinaryMask, Manifest, PipelineConfig, PressureField, SaturationField,
    SurfaceMesh, TaubinParams, TetMesh, VascularTree, VelocityField
)
from perfusim.store import load_flow_boundary, load_seeds, load_tree, read_json, save_model, save_tree, write_json, \
    write_polydata, write_unstructured_grid
from perfusim.version import __version__

logger = logging.getLogger(__name__)

TREES = ('portal', 'hepatic')


def _format_error(error: dict) -> str:
    where = '.'.join(str(part) for part in error['loc'])
    message = error['msg']
    if message.startswith('Value error, '):
        message = message[len('Value error, '):]
    return f'{where}: {message}' if where else message


def _resolve(config: PipelineConfig, base_dir: str) -> PipelineConfig:
    'Input paths made absolute against the configuration file directory'
    inputs = {
        k: (v if v is None or os.path.isabs(v) else os.path.normpath(os.path.join(base_dir, v)))
        for k, v in config.inputs.model_dump().items()
    }
    treegen = config.treegen.model_copy(deep=True)
    for name in TREES:
        source = getattr(treegen, name)
        if source.stub_file and not os.path.isabs(source.stub_file):
            source.stub_file = os.path.normpath(os.path.join(base_dir, source.stub_file))
    return config.model_copy(update={
        'inputs': config.inputs.model_copy(update=inputs),
        'treegen': treegen,
    })


def check_config(config: PipelineConfig) -> List[str]:
    'Cross-section checks; returns every violation found'
    violations = []
    stages = config.stages
    inputs = config.inputs

    for key, path in inputs.paths():
        if not os.path.exists(path):
            violations.append(f'inputs.{key}: {path} does not exist')
    for name in TREES:
        stub_file = getattr(config.treegen, name).stub_file
        if stub_file and not os.path.exists(stub_file):
            violations.append(f'treegen.{name}.stub_file: {stub_file} does not exist')

    if stages.segment:
        if inputs.volume is None and config.phantom is None:
            violations.append('segment: needs inputs.volume or phantom')
        if inputs.seeds is None and config.seeds is None:
            violations.append('segment: needs inputs.seeds or inline seeds')
        if config.segmentation is None:
            violations.append('segmentation.lambda: required when the segment stage runs')
    elif (stages.mesh or stages.treegen) and inputs.mask is None and config.phantom is None:
        violations.append('mesh: segment is disabled and neither inputs.mask nor phantom is given')

    if stages.vessels and inputs.vessel_volume is None and config.vessel_phantom is None:
        violations.append('vessels: needs inputs.vessel_volume or vessel_phantom')

    if stages.treegen:
        for name in TREES:
            source = getattr(config.treegen, name)
            given = [source.stub is not None, source.stub_file is not None, source.use_reconstructed]
            if sum(given) != 1:
                violations.append(
                    f'treegen.{name}: exactly one of stub, stub_file, use_reconstructed is required'
                )
            if source.use_reconstructed and not stages.vessels:
                violations.append(f'treegen.{name}.use_reconstructed: the vessels stage is disabled')
    elif stages.flow1d or stages.perfuse:
        for name in TREES:
            if getattr(inputs, f'{name}_tree') is None:
                violations.append(f'inputs.{name}_tree: required when treegen is disabled')

    if stages.perfuse and not stages.mesh:
        violations.append('perfuse: the mesh stage is disabled')
    if stages.transport and not stages.perfuse:
        violations.append('transport: the perfuse stage is disabled')

    n = len(config.darcy.compartments)
    for key in ('portal_compartment', 'hepatic_compartment'):
        if not 0 <= getattr(config.coupling, key) < n:
            violations.append(f'coupling.{key}: outside 0..{n - 1}')
    if config.coupling.portal_compartment == config.coupling.hepatic_compartment:
        violations.append('coupling: portal and hepatic compartments must differ')
    if len(config.transport.porosities) != n:
        violations.append(f'transport.porosities: {len(config.transport.porosities)} values for {n} compartments')
    if config.transport.inlet_compartment >= n:
        violations.append(f'transport.inlet_compartment: outside 0..{n - 1}')
    return violations


def _override(data: dict, dotted: str, value):
    node = data
    *parents, leaf = dotted.split('.')
    for key in parents:
        if not isinstance(node.get(key), dict):
            node[key] = {}
        node = node[key]
    node[leaf] = value


def validate_config(path: str, overrides: Optional[Dict[str, object]] = None) -> PipelineConfig:
    '''
    Reads and validates a configuration file. `overrides` maps dotted keys
    (such as "segmentation.lambda") to values replacing those in the file.
    Raises ConfigError listing every violation.
    '''
    try:
        data = read_json(path)
    except (OSError, ValueError) as err:
        raise ConfigError([f'{path}: {err}']) from err
    if not isinstance(data, dict):
        raise ConfigError([f'{path}: a JSON object is expected'])
    for key, value in (overrides or {}).items():
        _override(data, key, value)
    try:
        config = PipelineConfig.model_validate(data)
    except ValidationError as err:
        raise ConfigError([_format_error(e) for e in err.errors()]) from err
    config = _resolve(config, os.path.dirname(os.path.abspath(path)))
    violations = check_config(config)
    if violations:
        raise ConfigError(violations)
    logger.info(f'Configuration {path} valid, seed {config.seed}, stages {config.stages.enabled()}')
    return config


def export_vtk(obj, path: str, mesh: Optional[TetMesh] = None, porosities=None):
    '''
    Writes a surface mesh, a tetrahedral mesh, or a field on `mesh`, as a
    legacy ASCII VTK file. Pressures become point arrays p_1.., velocities
    cell vectors w_1.., saturations cell arrays S_1.. plus the total
    concentration C when porosities are given.
    '''
    if isinstance(obj, SurfaceMesh):
        write_polydata(obj, path)
    elif isinstance(obj, TetMesh):
        write_unstructured_grid(obj, path)
    elif mesh is None:
        raise ValueError(f'a mesh is required to export {type(obj).__name__}')
    elif isinstance(obj, PressureField):
        write_unstructured_grid(mesh, path, point_data={f'p_{i + 1}': p for i, p in enumerate(obj.values)})
    elif isinstance(obj, VelocityField):
        write_unstructured_grid(mesh, path, cell_data={f'w_{i + 1}': w for i, w in enumerate(obj.values)})
    elif isinstance(obj, SaturationField):
        cells = {f'S_{i + 1}': s for i, s in enumerate(obj.values)}
        if porosities is not None:
            cells['C'] = transport.total_concentration(obj, porosities)
        write_unstructured_grid(mesh, path, cell_data=cells)
    else:
        raise TypeError(f'cannot export {type(obj).__name__} to VTK')


def _finite(value: float) -> Optional[float]:
    return value if math.isfinite(value) else None


class PipelineRun:
    'State shared between the stages of one run'

    def __init__(self, config: PipelineConfig):
        self.config = config
        self.root = config.output_dir
        self.artifacts: List[Tuple[str, str]] = []
        self.stage = ''
        self.mask: Optional[BinaryMask] = None
        self.tet: Optional[TetMesh] = None
        self.stub: Optional[VascularTree] = None
        self.trees: Dict[str, VascularTree] = {}
        self.coupled = None
        self.velocity: Optional[VelocityField] = None

    def path(self, relpath: str) -> str:
        self.artifacts.append((self.stage, relpath))
        full = os.path.join(self.root, relpath)
        os.makedirs(os.path.dirname(full), exist_ok=True)
        return full

    def rng_seed(self, *keys: int) -> int:
        return int(np.random.SeedSequence([self.config.seed, *keys]).generate_state(1)[0])

    def organ_mask(self) -> BinaryMask:
        if self.mask is None:
            cfg = self.config
            if cfg.inputs.mask is not None:
                mask = voxelio.load_mask(cfg.inputs.mask)
            else:
                mask = voxelio.phantom_mask(cfg.phantom)
                if cfg.downsample > 1:
                    mask = voxelio.downsample(mask, cfg.downsample)
            self.mask = mask
        return self.mask

    def stage_segment(self):
        cfg = self.config
        if cfg.inputs.volume is not None:
            grid = voxelio.load_volume(cfg.inputs.volume)
        else:
            grid = voxelio.make_phantom(cfg.phantom)
        if cfg.downsample > 1:
            grid = voxelio.downsample(grid, cfg.downsample)
        seeds = load_seeds(cfg.inputs.seeds) if cfg.inputs.seeds else cfg.seeds
        self.mask = segmentation.segment(grid, seeds, cfg.segmentation)
        voxelio.save_volume(self.mask, self.path('segment/mask.json'))
        self.artifacts.append((self.stage, 'segment/mask.raw'))

    def stage_mesh(self):
        cfg = self.config.mesh
        mask = self.organ_mask()
        surface = meshgen.taubin_smooth(
            meshgen.marching_cubes(mask), cfg.taubin_lambda, cfg.taubin_mu, cfg.surface_iterations
        )
        smoothing = None
        if cfg.smooth_boundary:
            smoothing = TaubinParams(
                lambda_pos=cfg.taubin_lambda, mu_neg=cfg.taubin_mu, iterations=cfg.boundary_iterations
            )
        self.tet = meshgen.voxel_tet_mesh(mask, smoothing)
        stats = meshgen.mesh_stats(self.tet)
        export_vtk(surface, self.path('mesh/surface.vtk'))
        quality = meshgen.tet_quality(self.tet.vertices[self.tet.tets])
        write_unstructured_grid(self.tet, self.path('mesh/volume.vtk'), cell_data={'quality': quality})
        save_model(stats, self.path('mesh/stats.json'))

    def stage_vessels(self):
        cfg = self.config
        if cfg.inputs.vessel_volume is not None:
            grid = voxelio.load_volume(cfg.inputs.vessel_volume)
        else:
            grid = voxelio.make_phantom(cfg.vessel_phantom)
        params = cfg.vessels
        mask, _, graph = vesselrecon.reconstruct(
            grid, params.threshold, params.blur_sigma, params.open_radius, params.close_radius
        )
        self.stub = vesselrecon.stub_from_tree(graph, params.stub_min_radius)
        voxelio.save_volume(mask, self.path('vessels/mask.json'))
        self.artifacts.append((self.stage, 'vessels/mask.raw'))
        save_tree(graph, self.path('vessels/centerline.json'))
        save_tree(self.stub, self.path('vessels/stub.json'))

    def _load_trees(self):
        if not self.trees:
            for name in TREES:
                self.trees[name] = load_tree(getattr(self.config.inputs, f'{name}_tree'))
        return self.trees

    def stage_treegen(self):
        section = self.config.treegen
        region = self.tet if self.tet is not None else self.organ_mask()
        costs = {}
        for k, name in enumerate(TREES):
            source = getattr(section, name)
            if source.stub is not None:
                stub = vtree.tree_from_stub_definition(source.stub)
            elif source.stub_file is not None:
                stub = load_tree(source.stub_file)
            else:
                stub = self.stub
            points = vtree.sample_terminal_points(region, source.terminals, self.rng_seed(section.params.seed, k))
            optimizer = vtree.TreeOptimizer(stub, points, section.params)
            self.trees[name] = optimizer.run()
            costs[name] = {'initial': optimizer.initial_cost, 'passes': optimizer.pass_costs}
            save_tree(self.trees[name], self.path(f'treegen/{name}.json'))
        write_json(costs, self.path('treegen/costs.json'))

    def _hepatic_w0(self, trees: Dict[str, VascularTree], w0_portal: float) -> float:
        a_portal = math.pi * (trees['portal'].root_edge().radius * flow1d.MM) ** 2
        a_hepatic = math.pi * (trees['hepatic'].root_edge().radius * flow1d.MM) ** 2
        return -a_portal * w0_portal / a_hepatic

    def stage_flow1d(self):
        cfg = self.config
        trees = self._load_trees()
        boundaries = {}
        for name in TREES:
            path = getattr(cfg.inputs, f'{name}_bc')
            if path is not None:
                boundaries[name] = load_flow_boundary(path)
        w0 = {'portal': boundaries['portal'].w0 if 'portal' in boundaries else cfg.flow1d.w0_portal}
        if 'hepatic' in boundaries:
            w0['hepatic'] = boundaries['hepatic'].w0
        else:
            w0['hepatic'] = self._hepatic_w0(trees, w0['portal'])
        for name in TREES:
            tree = trees[name]
            if name in boundaries:
                pressures = boundaries[name].pressures(tree.terminals(), cfg.flow1d.terminal_pressure)
            else:
                pressures = {t: cfg.flow1d.terminal_pressure for t in tree.terminals()}
            state = flow1d.solve_tree_flow(tree, w0[name], pressures, cfg.fluid, cfg.flow1d.solver)
            times = flow1d.transit_times(tree, state) if name == 'portal' else {}
            write_json({
                'tree': flow1d.annotate_tree(tree, state).model_dump(mode='json', by_alias=True),
                'state': state.model_dump(mode='json'),
                'transit_times': {str(t): _finite(v) for t, v in times.items()},
            }, self.path(f'flow1d/{name}.json'))

    def stage_perfuse(self):
        cfg = self.config
        trees = self._load_trees()
        system = darcy.system_from_params(self.tet, cfg.darcy)
        self.coupled = darcy.couple_1d_3d(
            trees['portal'], trees['hepatic'], system, cfg.fluid, cfg.flow1d.w0_portal,
            cfg.coupling, cfg.darcy, cfg.flow1d.solver,
        )
        self.velocity = darcy.darcy_velocity(self.coupled.pressure, self.coupled.system)
        point_data = {f'p_{i + 1}': p for i, p in enumerate(self.coupled.pressure.values)}
        cell_data = {f'w_{i + 1}': w for i, w in enumerate(self.velocity.values)}
        write_unstructured_grid(self.tet, self.path('perfuse/fields.vtk'), point_data, cell_data)
        report = darcy.flux_report(self.coupled.system, self.coupled.pressure)
        write_json([
            {**b.model_dump(mode='json'), 'imbalance': b.imbalance} for b in report
        ], self.path('perfuse/balance.json'))
        write_json({
            'iterations': self.coupled.iterations,
            'history': self.coupled.history,
            'portal': self.coupled.portal.model_dump(mode='json'),
            'hepatic': self.coupled.hepatic.model_dump(mode='json'),
        }, self.path('perfuse/coupling.json'))

    def _inlet_delay(self) -> Optional[np.ndarray]:
        cfg = self.config
        if not cfg.transport.transit_delay:
            return None
        tree = self._load_trees()['portal']
        times = flow1d.transit_times(tree, self.coupled.portal)
        nodes = tree.node_map()
        vertices = {}
        for t in tree.terminals():
            d = np.linalg.norm(self.tet.vertices - np.asarray(nodes[t].position), axis=1)
            vertices[t] = int(np.argmin(d))
        return transport.inlet_delays(self.tet, vertices, {t: v if math.isfinite(v) else 0.0
                                                          for t, v in times.items()})

    def stage_transport(self):
        cfg = self.config
        result = transport.simulate_transport(
            self.coupled.system, self.coupled.pressure, self.velocity, cfg.transport, self._inlet_delay()
        )
        for k, snap in enumerate(result.snapshots):
            export_vtk(snap, self.path(f'transport/snapshot_{k:04d}.vtk'), self.tet, cfg.transport.porosities)
        n = len(cfg.transport.porosities)
        with open(self.path('transport/ledger.csv'), 'w', newline='') as fh:
            writer = csv.writer(fh, lineterminator='\n')
            writer.writerow(['time'] + [f'mass_{i + 1}' for i in range(n)] + ['injected', 'exited', 'imbalance'])
            for row in result.ledger:
                writer.writerow(
                    [f'{row.time:.10e}'] + [f'{m:.10e}' for m in row.mass]
                    + [f'{row.injected:.10e}', f'{row.exited:.10e}', f'{row.imbalance:.10e}']
                )


def run_pipeline(config: PipelineConfig) -> Manifest:
    '''
    Runs the enabled stages in order and writes the manifest. A failing
    stage stops the run with a StageError naming it.
    '''
    run = PipelineRun(config)
    os.makedirs(run.root, exist_ok=True)
    steps: Dict[str, Callable[[], None]] = {
        'segment': run.stage_segment,
        'mesh': run.stage_mesh,
        'vessels': run.stage_vessels,
        'treegen': run.stage_treegen,
        'flow1d': run.stage_flow1d,
        'perfuse': run.stage_perfuse,
        'transport': run.stage_transport,
    }
    done = []
    for stage in config.stages.enabled():
        run.stage = stage
        logger.info(f'Stage {stage} started')
        try:
            steps[stage]()
        except (PerfusimError, ValueError, OSError, ArithmeticError) as err:
            logger.error(f'Stage {stage} failed: {err}')
            raise StageError(stage, err) from err
        done.append(stage)
        logger.info(f'Stage {stage} finished')

    manifest = Manifest(
        version=__version__,
        config_hash=config.config_hash(),
        seed=config.seed,
        stages=done,
        artifacts=sorted(
            (Artifact.from_file(stage, run.root, rel) for stage, rel in run.artifacts),
            key=lambda a: a.path,
        ),
    )
    save_model(manifest, os.path.join(run.root, 'manifest.json'))
    logger.info(f'Wrote manifest with {len(manifest.artifacts)} artifact(s)')
    return manifest
