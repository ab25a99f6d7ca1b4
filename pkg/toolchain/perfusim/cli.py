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

import argparse
import logging
import os
import sys
from typing import Dict, List, Optional

from perfusim.errors import ConfigError, StageError
from perfusim.models.config import STAGE_ORDER
from perfusim.pipeline import run_pipeline, validate_config
from perfusim.version import __version__

config = {
    'PERFUSIM_LOG_LEVEL': os.environ.get('PERFUSIM_LOG_LEVEL') if os.environ.get('PERFUSIM_LOG_LEVEL') else 'INFO',
    'PERFUSIM_OUTPUT_DIR': os.environ.get('PERFUSIM_OUTPUT_DIR'),
}

EXIT_OK = 0
EXIT_INVALID = 1
EXIT_STAGE_FAILED = 2

logger = logging.getLogger('perfusim')

# stage-specific command line options: (flag, dotted config key, type, help)
STAGE_OPTIONS = {
    'segment': [('--lambda', 'segmentation.lambda', float, 'Region term weight')],
    'mesh': [('--surface-iterations', 'mesh.surface_iterations', int, 'Taubin iterations')],
    'vessels': [('--threshold', 'vessels.threshold', float, 'Vessel density threshold')],
    'treegen': [('--terminals', None, int, 'Terminals per tree')],
    'flow1d': [('--w0', 'flow1d.w0_portal', float, 'Portal root velocity in m/s')],
    'perfuse': [('--relaxation', 'coupling.relaxation', float, 'Coupling under-relaxation')],
    'transport': [('--end-time', 'transport.end_time', float, 'End time in s')],
}


def _parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog='perfusim',
        description='Liver perfusion toolchain from voxel data to contrast transport',
    )
    parser.add_argument('--version', action='version', version=f'%(prog)s {__version__}')
    commands = parser.add_subparsers(dest='command', required=True)

    def common(sub):
        sub.add_argument('--config', required=True, help='Configuration JSON file')
        sub.add_argument('--output-dir', help='Output directory, overrides the configuration')
        sub.add_argument('--seed', type=int, help='Global RNG seed, overrides the configuration')

    for stage in STAGE_ORDER:
        sub = commands.add_parser(stage, help=f'Run the pipeline up to and including {stage}')
        common(sub)
        for flag, _, kind, text in STAGE_OPTIONS[stage]:
            sub.add_argument(flag, type=kind, help=text)
    common(commands.add_parser('run', help='Run every enabled stage'))
    common(commands.add_parser('validate', help='Only validate the configuration'))
    return parser


def _overrides(args: argparse.Namespace) -> Dict[str, object]:
    overrides: Dict[str, object] = {}
    output_dir = args.output_dir or config['PERFUSIM_OUTPUT_DIR']
    if output_dir:
        overrides['output_dir'] = output_dir
    if args.seed is not None:
        overrides['seed'] = args.seed
    if args.command in STAGE_OPTIONS:
        for later in STAGE_ORDER[STAGE_ORDER.index(args.command) + 1:]:
            overrides[f'stages.{later}'] = False
        for flag, key, _, _ in STAGE_OPTIONS[args.command]:
            value = getattr(args, flag.lstrip('-').replace('-', '_'))
            if value is None:
                continue
            if key is None:
                overrides['treegen.portal.terminals'] = value
                overrides['treegen.hepatic.terminals'] = value
            else:
                overrides[key] = value
    return overrides


def cli(argv: Optional[List[str]] = None) -> int:
    logging.basicConfig(
        level=config['PERFUSIM_LOG_LEVEL'],
        format='%(asctime)s %(levelname)s %(name)s: %(message)s',
    )
    args = _parser().parse_args(argv)
    try:
        settings = validate_config(args.config, _overrides(args))
    except ConfigError as err:
        for violation in err.violations:
            logger.error(violation)
        return EXIT_INVALID
    if args.command == 'validate':
        return EXIT_OK
    try:
        manifest = run_pipeline(settings)
    except StageError as err:
        logger.error(str(err))
        return EXIT_STAGE_FAILED
    logger.info(f'Finished stages {manifest.stages}; outputs in {settings.output_dir}')
    return EXIT_OK


if __name__ == '__main__':
    sys.exit(cli())
