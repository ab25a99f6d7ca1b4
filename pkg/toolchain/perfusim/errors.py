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

from typing import List, Optional


class PerfusimError(Exception):
    'Base class for all errors raised by the toolchain'


class ConfigError(PerfusimError):
    '''
    A configuration failed validation.

    Carries every violation found, not just the first one.
    '''

    def __init__(self, violations: List[str]):
        self.violations = list(violations)
        super().__init__(
            f'{len(self.violations)} configuration violation(s): '
            + '; '.join(self.violations)
        )


class VolumeFormatError(PerfusimError):
    pass


class PhantomError(PerfusimError):
    pass


class SegmentationError(PerfusimError):
    pass


class MeshError(PerfusimError):
    pass


class TreeError(PerfusimError):
    pass


class FlowSolverError(PerfusimError):
    '''
    The Newton solve of a tree did not converge or hit a singular Jacobian.

    `history` holds the scaled residual norm per iteration, `node` the id of
    the node the failure could be attributed to, if any.
    '''

    def __init__(self, message: str, history: Optional[List[float]] = None,
                 node: Optional[int] = None):
        self.history = history or []
        self.node = node
        super().__init__(message)


class DarcyError(PerfusimError):
    pass


class CouplingError(PerfusimError):
    '''
    The 1D/3D fixed-point loop did not converge.

    `history` holds the relative terminal flux change per iteration.
    '''

    def __init__(self, message: str, history: Optional[List[float]] = None):
        self.history = history or []
        super().__init__(message)


class TransportError(PerfusimError):
    pass


class StageError(PerfusimError):
    'A pipeline stage failed; wraps the underlying error'

    def __init__(self, stage: str, cause: Exception):
        self.stage = stage
        self.cause = cause
        super().__init__(f'Stage {stage} failed: {cause}')
