import os
import ujson

import perfusim
from perfusim import cli
from perfusim.store import read_json, save_tree

from .fixtures.trees import make_tree

DEMO = os.path.join(os.path.dirname(perfusim.__file__), 'configs', 'demo.json')


def _pipe_config(tmp_path, radius=1.0):
    pipe = make_tree({0: (0, 0, 0), 1: (0, 0, 10)}, [(0, 1)], radii=[radius])
    save_tree(pipe, str(tmp_path / 'portal.json'))
    save_tree(pipe, str(tmp_path / 'hepatic.json'))
    path = tmp_path / 'config.json'
    path.write_text(ujson.dumps({
        'output_dir': str(tmp_path / 'out'),
        'stages': {'segment': False, 'mesh': False, 'treegen': False},
        'inputs': {'portal_tree': 'portal.json', 'hepatic_tree': 'hepatic.json'},
    }))
    return str(path)


def test_validate_demo():
    assert cli.cli(['validate', '--config', DEMO]) == cli.EXIT_OK


def test_validate_invalid(tmp_path, caplog):
    path = tmp_path / 'bad.json'
    path.write_text(ujson.dumps({'segmentation': {'lambda': -2.0}, 'stages': {'mesh': False}}))
    assert cli.cli(['validate', '--config', str(path)]) == cli.EXIT_INVALID
    assert 'lambda' in caplog.text


def test_missing_config_file(tmp_path):
    assert cli.cli(['run', '--config', str(tmp_path / 'none.json')]) == cli.EXIT_INVALID


def test_stage_command_stops_after_its_stage(tmp_path):
    'perfuse and transport are enabled in the file but lie after flow1d'

    path = _pipe_config(tmp_path)
    assert cli.cli(['flow1d', '--config', path, '--w0', '0.2']) == cli.EXIT_OK
    manifest = read_json(str(tmp_path / 'out' / 'manifest.json'))
    assert manifest['stages'] == ['flow1d']
    portal = read_json(str(tmp_path / 'out' / 'flow1d' / 'portal.json'))
    assert portal['state']['w0'] == 0.2


def test_output_dir_and_seed_options(tmp_path):
    path = _pipe_config(tmp_path)
    other = tmp_path / 'elsewhere'
    assert cli.cli(['flow1d', '--config', path, '--output-dir', str(other), '--seed', '5']) == cli.EXIT_OK
    assert read_json(str(other / 'manifest.json'))['seed'] == 5
    assert not (tmp_path / 'out').exists()


def test_stage_failure_exit_code(tmp_path, caplog):
    path = _pipe_config(tmp_path, radius=0.0)
    assert cli.cli(['flow1d', '--config', path]) == cli.EXIT_STAGE_FAILED
    assert 'Stage flow1d failed' in caplog.text


def test_stage_options_become_overrides():
    args = cli._parser().parse_args(['mesh', '--config', 'c.json', '--surface-iterations', '3'])
    overrides = cli._overrides(args)
    assert overrides['mesh.surface_iterations'] == 3
    assert [k for k in overrides if k.startswith('stages.')] == [
        'stages.vessels', 'stages.treegen', 'stages.flow1d', 'stages.perfuse', 'stages.transport'
    ]
    assert all(overrides[k] is False for k in overrides if k.startswith('stages.'))

    args = cli._parser().parse_args(['treegen', '--config', 'c.json', '--terminals', '12'])
    overrides = cli._overrides(args)
    assert overrides['treegen.portal.terminals'] == overrides['treegen.hepatic.terminals'] == 12


def test_run_keeps_configured_stages():
    args = cli._parser().parse_args(['run', '--config', 'c.json'])
    assert not any(k.startswith('stages.') for k in cli._overrides(args))
