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
Volume file format, phantoms and the image filters shared by segmentation
and vessel extraction.

A volume on disk is a pair: a JSON header and a raw little-endian payload
next to it. The payload lists voxels with x varying fastest, then y, then z.
'''

import logging
import os
import numpy as np
import ujson
from scipy import ndimage
from typing import Optional, Sequence, Tuple, Union

from perfusim.errors import PhantomError, VolumeFormatError
from perfusim.models import BinaryMask, PhantomSpec, VoxelGrid

logger = logging.getLogger(__name__)

DTYPES = {
    'u8': np.dtype('<u1'),
    'i16': np.dtype('<i2'),
    'f32': np.dtype('<f4'),
}

Volume = Union[VoxelGrid, BinaryMask]


def _payload_path(header_path: str, data_file: Optional[str] = None) -> str:
    if data_file is None:
        data_file = os.path.splitext(os.path.basename(header_path))[0] + '.raw'
    return os.path.join(os.path.dirname(os.path.abspath(header_path)), data_file)


def _pick_dtype(values: np.ndarray) -> str:
    for name in ('u8', 'i16'):
        if _fits(values, name):
            return name
    return 'f32'


def _fits(values: np.ndarray, name: str) -> bool:
    with np.errstate(invalid='ignore', over='ignore'):
        cast = values.astype(DTYPES[name])
    return bool(np.array_equal(cast.astype(np.float64), values.astype(np.float64)))


def save_volume(grid: Volume, path: str, dtype: Optional[str] = None):
    '''
    Writes the header to `path` and the payload to the sibling `.raw` file,
    overwriting both. Masks are stored as u8. Without an explicit dtype the
    narrowest integer type holding the values exactly is chosen, else f32.
    f32 payloads hold the values rounded to single precision; an integer
    dtype that cannot hold them exactly is an error.
    '''
    if isinstance(grid, BinaryMask):
        dtype = dtype or 'u8'
        values = grid.values.astype(np.uint8)
    else:
        values = grid.values
        dtype = dtype or _pick_dtype(values)
    if dtype not in DTYPES:
        raise VolumeFormatError(f'unsupported dtype {dtype}')
    if not _fits(values, dtype):
        if dtype != 'f32':
            raise VolumeFormatError(f'values cannot be stored losslessly as {dtype}')
        logger.debug(f'Rounding volume values to single precision for {path}')

    payload = _payload_path(path)
    header = {
        'dims': list(grid.dims),
        'spacing': [float(s) for s in grid.spacing],
        'origin': [float(o) for o in grid.origin],
        'dtype': dtype,
        'byte_order': 'little',
        'data_file': os.path.basename(payload),
    }
    directory = os.path.dirname(os.path.abspath(path))
    os.makedirs(directory, exist_ok=True)
    with open(payload, 'wb') as fh:
        fh.write(values.astype(DTYPES[dtype]).tobytes(order='F'))
    with open(path, 'w', newline='\n') as fh:
        fh.write(ujson.dumps(header, sort_keys=True, indent=2))
        fh.write('\n')
    logger.debug(f'Saved {grid.dims} volume as {dtype} to {path}')


def _read_header(path: str) -> dict:
    if not os.path.exists(path):
        raise VolumeFormatError(f'volume header {path} does not exist')
    try:
        with open(path) as fh:
            header = ujson.load(fh)
    except ValueError as e:
        raise VolumeFormatError(f'volume header {path} is not valid JSON: {e}')
    for key in ('dims', 'spacing', 'dtype'):
        if key not in header:
            raise VolumeFormatError(f'volume header {path} has no {key}')
    if header['dtype'] not in DTYPES:
        raise VolumeFormatError(f'unsupported dtype {header["dtype"]}')
    if header.get('byte_order', 'little') != 'little':
        raise VolumeFormatError('only little-endian payloads are supported')
    if len(header['dims']) != 3 or any(int(d) < 1 for d in header['dims']):
        raise VolumeFormatError(f'bad dims {header["dims"]}')
    return header


def load_volume(path: str) -> VoxelGrid:
    header = _read_header(path)
    payload = _payload_path(path, header.get('data_file'))
    if not os.path.exists(payload):
        raise VolumeFormatError(f'volume payload {payload} does not exist')
    dims = tuple(int(d) for d in header['dims'])
    dtype = DTYPES[header['dtype']]
    with open(payload, 'rb') as fh:
        raw = fh.read()
    expected = int(np.prod(dims)) * dtype.itemsize
    if len(raw) != expected:
        raise VolumeFormatError(
            f'payload has {len(raw)} bytes, header {dims} x {header["dtype"]} needs {expected}'
        )
    values = np.frombuffer(raw, dtype=dtype).reshape(dims, order='F')
    try:
        return VoxelGrid(
            values=values.astype(np.float64),
            spacing=tuple(header['spacing']),
            origin=tuple(header.get('origin', (0.0, 0.0, 0.0))),
        )
    except ValueError as e:
        raise VolumeFormatError(f'invalid volume header {path}: {e}')


def load_mask(path: str) -> BinaryMask:
    grid = load_volume(path)
    return BinaryMask(values=grid.values != 0, spacing=grid.spacing, origin=grid.origin)


def _segment_distance(points: np.ndarray, a: np.ndarray, b: np.ndarray) -> np.ndarray:
    ab = b - a
    denom = float(ab @ ab)
    if denom == 0.0:
        return np.linalg.norm(points - a, axis=-1)
    t = np.clip(((points - a) @ ab) / denom, 0.0, 1.0)
    return np.linalg.norm(points - (a + t[..., None] * ab), axis=-1)


def phantom_inside(spec: PhantomSpec, centers: np.ndarray) -> np.ndarray:
    '''
    Analytic membership for points of shape (..., 3). Tubes are capsules
    around their axis segments.
    '''
    center = np.asarray(spec.center, dtype=float)
    if spec.kind == 'sphere':
        return np.linalg.norm(centers - center, axis=-1) < spec.radius
    if spec.kind == 'ellipsoid':
        axes = np.asarray(spec.semi_axes, dtype=float)
        if np.any(axes <= 0):
            return np.zeros(centers.shape[:-1], dtype=bool)
        return (((centers - center) / axes) ** 2).sum(axis=-1) < 1.0
    if spec.kind == 'tube':
        d = _segment_distance(centers, np.asarray(spec.start, float), np.asarray(spec.end, float))
        return d < spec.radius
    inside = np.zeros(centers.shape[:-1], dtype=bool)
    for arm in spec.branch_ends:
        inside |= _segment_distance(centers, center, np.asarray(arm, float)) < spec.radius
    return inside


def _extent(spec: PhantomSpec) -> Tuple[np.ndarray, np.ndarray]:
    center = np.asarray(spec.center, dtype=float)
    if spec.kind == 'sphere':
        r = np.full(3, spec.radius)
        return center - r, center + r
    if spec.kind == 'ellipsoid':
        r = np.abs(np.asarray(spec.semi_axes, dtype=float))
        return center - r, center + r
    if spec.kind == 'tube':
        pts = np.array([spec.start, spec.end], dtype=float)
    else:
        pts = np.array([spec.center] + list(spec.branch_ends), dtype=float)
    return pts.min(axis=0) - spec.radius, pts.max(axis=0) + spec.radius


def make_phantom(spec: PhantomSpec) -> VoxelGrid:
    grid = VoxelGrid(values=np.zeros(spec.dims), spacing=spec.spacing, origin=spec.origin)
    if spec.center is None:
        lo, hi = grid.bounds()
        spec = spec.model_copy(update={'center': tuple((lo + hi) / 2)})

    lo, hi = grid.bounds()
    shape_lo, shape_hi = _extent(spec)
    if np.any(shape_lo < lo - 1e-9) or np.any(shape_hi > hi + 1e-9):
        raise PhantomError(
            f'{spec.kind} spans {shape_lo.tolist()}..{shape_hi.tolist()} mm, '
            f'volume covers {lo.tolist()}..{hi.tolist()} mm'
        )

    inside = phantom_inside(spec, grid.grid_centers())
    values = np.where(inside, spec.inside_value, spec.outside_value).astype(np.float64)
    if spec.noise_sigma > 0:
        rng = np.random.default_rng(spec.seed)
        values = values + rng.normal(0.0, spec.noise_sigma, size=spec.dims)
    logger.debug(f'{spec.kind} phantom: {int(inside.sum())} voxels inside')
    return VoxelGrid(values=values, spacing=spec.spacing, origin=spec.origin)


def phantom_mask(spec: PhantomSpec) -> BinaryMask:
    'Ground-truth mask of a phantom, without noise'
    clean = make_phantom(spec.model_copy(update={
        'inside_value': 1.0, 'outside_value': 0.0, 'noise_sigma': 0.0
    }))
    return BinaryMask(values=clean.values > 0.5, spacing=clean.spacing, origin=clean.origin)


def gaussian_blur(grid: VoxelGrid, sigma: Union[float, Sequence[float]]) -> VoxelGrid:
    '''
    Separable Gaussian filter with sigma in mm, kernel truncated at 3 sigma
    and edge replication at the borders.
    '''
    sigma_mm = np.broadcast_to(np.asarray(sigma, dtype=float), (3,))
    if np.any(sigma_mm < 0):
        raise ValueError('sigma must be >= 0')
    if not np.any(sigma_mm > 0):
        return grid.model_copy(update={'values': grid.values.copy()})
    sigma_vox = sigma_mm / np.asarray(grid.spacing)
    values = ndimage.gaussian_filter(grid.values, sigma=sigma_vox, mode='nearest', truncate=3.0)
    return VoxelGrid(values=values, spacing=grid.spacing, origin=grid.origin)


def structuring_element(radius: int) -> np.ndarray:
    'Face-connected ball: voxels within city-block distance `radius` of the center'
    if radius < 0:
        raise ValueError('radius must be >= 0')
    return ndimage.iterate_structure(ndimage.generate_binary_structure(3, 1), radius)


def morph_open(mask: BinaryMask, radius: int) -> BinaryMask:
    if radius < 0:
        raise ValueError('radius must be >= 0')
    if radius == 0:
        return mask.like(mask.values.copy())
    values = ndimage.binary_opening(mask.values, structure=structuring_element(radius))
    return mask.like(values)


def morph_close(mask: BinaryMask, radius: int) -> BinaryMask:
    '''
    Closing as the complement of opening the complement, so voxels outside
    the volume count as foreground. This keeps the result a superset of the
    input at the volume border.
    '''
    if radius < 0:
        raise ValueError('radius must be >= 0')
    if radius == 0:
        return mask.like(mask.values.copy())
    opened = ndimage.binary_opening(~mask.values, structure=structuring_element(radius))
    return mask.like(~opened)


def crop(grid: Volume, lo: Sequence[int], hi: Sequence[int]) -> Volume:
    'Voxels with lo <= index < hi per axis; the origin follows the first kept voxel'
    lo = np.asarray(lo, dtype=int)
    hi = np.asarray(hi, dtype=int)
    dims = np.asarray(grid.dims)
    if lo.shape != (3,) or hi.shape != (3,):
        raise ValueError('crop bounds need three entries each')
    if np.any(lo < 0) or np.any(hi > dims) or np.any(hi <= lo):
        raise ValueError(f'crop bounds {lo.tolist()}..{hi.tolist()} outside {dims.tolist()}')
    values = grid.values[lo[0]:hi[0], lo[1]:hi[1], lo[2]:hi[2]].copy()
    origin = tuple(np.asarray(grid.origin) + lo * np.asarray(grid.spacing))
    return type(grid)(values=values, spacing=grid.spacing, origin=origin)


def downsample(grid: Volume, factor: int) -> Volume:
    '''
    Mean-pools factor^3 blocks. Trailing voxels that do not fill a block are
    dropped. Masks keep a voxel when at least half of its block is set.
    '''
    if factor < 1:
        raise ValueError('factor must be >= 1')
    if factor == 1:
        return grid.model_copy(update={'values': grid.values.copy()})
    dims = np.asarray(grid.dims)
    if np.any(dims < factor):
        raise ValueError(f'cannot downsample {dims.tolist()} by {factor}')
    n = dims // factor
    block = grid.values[:n[0] * factor, :n[1] * factor, :n[2] * factor].astype(np.float64)
    pooled = block.reshape(n[0], factor, n[1], factor, n[2], factor).mean(axis=(1, 3, 5))
    spacing = np.asarray(grid.spacing) * factor
    origin = np.asarray(grid.origin) + (factor - 1) / 2 * np.asarray(grid.spacing)
    if isinstance(grid, BinaryMask):
        return BinaryMask(values=pooled >= 0.5, spacing=tuple(spacing), origin=tuple(origin))
    return VoxelGrid(values=pooled, spacing=tuple(spacing), origin=tuple(origin))
