import os
import numpy as np
import pytest
import ujson

import perfusim
from perfusim import pipeline
from perfusim.errors import ConfigError, StageError
from perfusim.models import PressureField, SurfaceMesh
from perfusim.store import read_json, save_tree

from .fixtures.trees import make_tree

DEMO = os.path.join(os.path.dirname(perfusim.__file__), 'configs', 'demo.json')

ONLY_FLOW1D = {
    'segment': False, 'mesh': False, 'vessels': False, 'treegen': False,
    'flow1d': True, 'perfuse': False, 'transport': False,
}


def _write_config(tmp_path, data, name='config.json'):
    path = tmp_path / name
    path.write_text(ujson.dumps(data))
    return str(path)


def _flow1d_config(tmp_path, radius=1.0):
    pipe = make_tree({0: (0, 0, 0), 1: (0, 0, 10)}, [(0, 1)], radii=[radius])
    save_tree(pipe, str(tmp_path / 'portal.json'))
    save_tree(pipe, str(tmp_path / 'hepatic.json'))
    return _write_config(tmp_path, {
        'output_dir': str(tmp_path / 'out'),
        'stages': ONLY_FLOW1D,
        'inputs': {'portal_tree': 'portal.json', 'hepatic_tree': 'hepatic.json'},
    })


def test_demo_config_is_valid():
    config = pipeline.validate_config(DEMO)
    assert config.seed == 7
    assert config.segmentation.lambda_ == 1.0
    assert config.stages.enabled() == ['segment', 'mesh', 'treegen', 'flow1d', 'perfuse', 'transport']


def test_overrides_replace_file_values():
    config = pipeline.validate_config(DEMO, {'segmentation.lambda': 2.5, 'seed': 11})
    assert config.segmentation.lambda_ == 2.5
    assert config.seed == 11
    assert config.config_hash() != pipeline.validate_config(DEMO).config_hash()


def test_negative_lambda_is_rejected():
    with pytest.raises(ConfigError) as err:
        pipeline.validate_config(DEMO, {'segmentation.lambda': -1.0})
    assert len(err.value.violations) == 1
    assert 'lambda' in err.value.violations[0]


def test_missing_lambda_is_reported(tmp_path):
    data = read_json(DEMO)
    del data['segmentation']
    with pytest.raises(ConfigError) as err:
        pipeline.validate_config(_write_config(tmp_path, data))
    assert any(v.startswith('segmentation.lambda') for v in err.value.violations)


def test_every_violation_is_reported(tmp_path):
    data = {
        'stages': {**ONLY_FLOW1D, 'flow1d': False, 'perfuse': True},
        'coupling': {'portal_compartment': 1, 'hepatic_compartment': 1},
    }
    with pytest.raises(ConfigError) as err:
        pipeline.validate_config(_write_config(tmp_path, data))
    violations = err.value.violations
    assert 'perfuse: the mesh stage is disabled' in violations
    assert 'coupling: portal and hepatic compartments must differ' in violations
    assert any(v.startswith('inputs.portal_tree') for v in violations)
    assert any(v.startswith('inputs.hepatic_tree') for v in violations)


def test_unknown_keys_and_bad_files(tmp_path):
    with pytest.raises(ConfigError, match='stages'):
        pipeline.validate_config(_write_config(tmp_path, {'stages': {'render': True}}))
    broken = tmp_path / 'broken.json'
    broken.write_text('{"seed": ')
    with pytest.raises(ConfigError):
        pipeline.validate_config(str(broken))
    with pytest.raises(ConfigError, match='object'):
        pipeline.validate_config(_write_config(tmp_path, [1, 2], 'list.json'))
    with pytest.raises(ConfigError):
        pipeline.validate_config(str(tmp_path / 'absent.json'))


def test_input_paths_are_relative_to_the_config(tmp_path):
    config = pipeline.validate_config(_flow1d_config(tmp_path))
    assert config.inputs.portal_tree == str(tmp_path / 'portal.json')

    data = read_json(str(tmp_path / 'config.json'))
    data['inputs']['hepatic_tree'] = 'elsewhere.json'
    with pytest.raises(ConfigError) as err:
        pipeline.validate_config(_write_config(tmp_path, data, 'moved.json'))
    assert err.value.violations == [f'inputs.hepatic_tree: {tmp_path / "elsewhere.json"} does not exist']


def test_inconsistent_compartment_counts(tmp_path):
    data = read_json(DEMO)
    data['transport']['porosities'] = [0.2, 0.2]
    with pytest.raises(ConfigError, match='porosities'):
        pipeline.validate_config(_write_config(tmp_path, data))


def test_export_tet_mesh(tmp_path, single_tet):
    path = tmp_path / 'tet.vtk'
    pipeline.export_vtk(single_tet, str(path))
    lines = path.read_text().splitlines()
    assert lines[0] == '# vtk DataFile Version 3.0'
    assert 'DATASET UNSTRUCTURED_GRID' in lines
    assert 'POINTS 4 double' in lines
    assert 'CELLS 1 5' in lines
    assert lines[lines.index('CELL_TYPES 1') + 1] == '10'


def test_export_pressure(tmp_path, single_tet):
    path = tmp_path / 'p.vtk'
    field = PressureField(values=np.array([[0.0, 1.0, 2.0, 3.0], [1.0, 1.0, 1.0, 1.0]]))
    pipeline.export_vtk(field, str(path), single_tet)
    text = path.read_text()
    assert 'POINT_DATA 4' in text
    assert 'SCALARS p_1 double 1' in text
    assert 'SCALARS p_2 double 1' in text
    with pytest.raises(ValueError, match='mesh'):
        pipeline.export_vtk(field, str(path))
    with pytest.raises(TypeError):
        pipeline.export_vtk(object(), str(path), single_tet)


def test_export_empty_surface(tmp_path):
    path = tmp_path / 'empty.vtk'
    pipeline.export_vtk(SurfaceMesh(vertices=[], triangles=[]), str(path))
    lines = path.read_text().splitlines()
    assert 'DATASET POLYDATA' in lines
    assert 'POINTS 0 double' in lines
    assert 'POLYGONS 0 0' in lines


def test_flow1d_only_run(tmp_path):
    manifest = pipeline.run_pipeline(pipeline.validate_config(_flow1d_config(tmp_path)))
    assert manifest.stages == ['flow1d']
    assert [a.path for a in manifest.artifacts] == ['flow1d/hepatic.json', 'flow1d/portal.json']
    portal = read_json(str(tmp_path / 'out' / 'flow1d' / 'portal.json'))
    assert portal['state']['w0'] == 0.1
    assert list(portal['transit_times']) == ['1']
    hepatic = read_json(str(tmp_path / 'out' / 'flow1d' / 'hepatic.json'))
    assert hepatic['state']['w0'] == pytest.approx(-0.1)
    saved = read_json(str(tmp_path / 'out' / 'manifest.json'))
    assert saved['stages'] == ['flow1d']


def _boundary_config(tmp_path, portal_bc):
    tree = make_tree({0: (0, 0, 0), 1: (0, 0, 10), 2: (-3, 0, 14), 3: (3, 0, 14)}, [(0, 1), (1, 2), (1, 3)],
                     radii=[1.0, 0.8, 0.8])
    save_tree(tree, str(tmp_path / 'portal.json'))
    save_tree(tree, str(tmp_path / 'hepatic.json'))
    (tmp_path / 'portal_bc.json').write_text(ujson.dumps(portal_bc))
    return _write_config(tmp_path, {
        'output_dir': str(tmp_path / 'out'),
        'stages': ONLY_FLOW1D,
        'flow1d': {'terminal_pressure': 5.0},
        'inputs': {'portal_tree': 'portal.json', 'hepatic_tree': 'hepatic.json', 'portal_bc': 'portal_bc.json'},
    })


def test_flow1d_boundary_file(tmp_path):
    path = _boundary_config(tmp_path, {'w0': 0.25, 'terminal_pressures': {'2': 6.0}})
    pipeline.run_pipeline(pipeline.validate_config(path))
    portal = read_json(str(tmp_path / 'out' / 'flow1d' / 'portal.json'))
    assert portal['state']['w0'] == 0.25
    assert portal['state']['pressures']['2'] == pytest.approx(6.0)
    assert portal['state']['pressures']['3'] == pytest.approx(5.0)
    hepatic = read_json(str(tmp_path / 'out' / 'flow1d' / 'hepatic.json'))
    assert hepatic['state']['w0'] == pytest.approx(-0.25)
    assert hepatic['state']['pressures']['2'] == pytest.approx(5.0)


def test_flow1d_boundary_for_unknown_terminal(tmp_path):
    path = _boundary_config(tmp_path, {'w0': 0.1, 'terminal_pressures': {'1': 40.0}})
    with pytest.raises(StageError, match='non-terminal'):
        pipeline.run_pipeline(pipeline.validate_config(path))
    missing = _write_config(tmp_path, {**read_json(path), 'inputs': {
        'portal_tree': 'portal.json', 'hepatic_tree': 'hepatic.json', 'portal_bc': 'none.json'
    }}, name='missing.json')
    with pytest.raises(ConfigError) as err:
        pipeline.validate_config(missing)
    assert any(v.startswith('inputs.portal_bc') for v in err.value.violations)


def test_failing_stage_is_named(tmp_path):
    config = pipeline.validate_config(_flow1d_config(tmp_path, radius=0.0))
    with pytest.raises(StageError) as err:
        pipeline.run_pipeline(config)
    assert err.value.stage == 'flow1d'
    assert not os.path.exists(tmp_path / 'out' / 'manifest.json')


def test_demo_run_is_reproducible(tmp_path):
    'Two runs of the front stages with the same seed write identical files'

    overrides = {'stages.perfuse': False, 'stages.transport': False}
    digests = []
    for name in ('a', 'b'):
        config = pipeline.validate_config(DEMO, {**overrides, 'output_dir': str(tmp_path / name)})
        manifest = pipeline.run_pipeline(config)
        assert manifest.stages == ['segment', 'mesh', 'treegen', 'flow1d']
        digests.append([(a.stage, a.path, a.sha256) for a in manifest.artifacts])
    assert digests[0] == digests[1]
    paths = {path for _, path, _ in digests[0]}
    assert {'segment/mask.json', 'segment/mask.raw', 'mesh/volume.vtk', 'treegen/portal.json'} <= paths
