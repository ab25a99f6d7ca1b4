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

import logging
import os
import numpy as np
from typing import Dict, Optional, TextIO

from perfusim.models import SurfaceMesh, TetMesh

logger = logging.getLogger(__name__)

FLOAT = '%.10e'
VTK_TETRA = 10


def _open(path: str) -> TextIO:
    directory = os.path.dirname(os.path.abspath(path))
    os.makedirs(directory, exist_ok=True)
    return open(path, 'w', newline='\n')


def _header(fh: TextIO, title: str, dataset: str):
    fh.write('# vtk DataFile Version 3.0\n')
    fh.write(f'{title}\n')
    fh.write('ASCII\n')
    fh.write(f'DATASET {dataset}\n')


def _points(fh: TextIO, vertices: np.ndarray):
    fh.write(f'POINTS {len(vertices)} double\n')
    for p in vertices:
        fh.write(' '.join(FLOAT % c for c in p) + '\n')


def _cells(fh: TextIO, keyword: str, cells: np.ndarray):
    width = cells.shape[1] if cells.ndim == 2 else 0
    fh.write(f'{keyword} {len(cells)} {len(cells) * (width + 1)}\n')
    for c in cells:
        fh.write(f'{width} ' + ' '.join(str(int(i)) for i in c) + '\n')


def _arrays(fh: TextIO, section: str, count: int, arrays: Optional[Dict[str, np.ndarray]]):
    if not arrays:
        return
    fh.write(f'{section} {count}\n')
    for name in arrays:
        data = np.asarray(arrays[name], dtype=np.float64)
        if len(data) != count:
            raise ValueError(f'{section} array {name} has {len(data)} entries, expected {count}')
        if data.ndim == 1:
            fh.write(f'SCALARS {name} double 1\nLOOKUP_TABLE default\n')
            for v in data:
                fh.write(FLOAT % v + '\n')
        elif data.ndim == 2 and data.shape[1] == 3:
            fh.write(f'VECTORS {name} double\n')
            for v in data:
                fh.write(' '.join(FLOAT % c for c in v) + '\n')
        else:
            raise ValueError(f'array {name} must be scalar or 3-vector per entry')


def write_polydata(mesh: SurfaceMesh, path: str, point_data: Optional[Dict[str, np.ndarray]] = None):
    with _open(path) as fh:
        _header(fh, 'perfusim surface', 'POLYDATA')
        _points(fh, mesh.vertices)
        _cells(fh, 'POLYGONS', mesh.triangles)
        _arrays(fh, 'POINT_DATA', len(mesh.vertices), point_data)
    logger.debug(f'Wrote {len(mesh.triangles)} triangles to {path}')


def write_unstructured_grid(
        mesh: TetMesh, path: str,
        point_data: Optional[Dict[str, np.ndarray]] = None,
        cell_data: Optional[Dict[str, np.ndarray]] = None):
    '''
    Legacy ASCII unstructured grid of tetrahedra. Point data precedes cell
    data; arrays keep the order of the dicts passed in.
    '''
    with _open(path) as fh:
        _header(fh, 'perfusim volume', 'UNSTRUCTURED_GRID')
        _points(fh, mesh.vertices)
        _cells(fh, 'CELLS', mesh.tets)
        fh.write(f'CELL_TYPES {len(mesh.tets)}\n')
        for _ in range(len(mesh.tets)):
            fh.write(f'{VTK_TETRA}\n')
        _arrays(fh, 'POINT_DATA', len(mesh.vertices), point_data)
        _arrays(fh, 'CELL_DATA', len(mesh.tets), cell_data)
    logger.debug(f'Wrote {len(mesh.tets)} tetrahedra to {path}')
