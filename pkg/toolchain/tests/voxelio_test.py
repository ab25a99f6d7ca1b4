import math
import numpy as np
import pytest
import ujson

from perfusim import voxelio
from perfusim.errors import PhantomError, VolumeFormatError
from perfusim.models import BinaryMask, PhantomSpec, VoxelGrid


def _write_raw(tmp_path, header, payload: bytes):
    path = tmp_path / 'vol.json'
    path.write_text(ujson.dumps(header))
    (tmp_path / 'vol.raw').write_bytes(payload)
    return str(path)


def test_load_zero_volume(tmp_path):
    'Eight zero bytes with a 2x2x2 u8 header'

    path = _write_raw(tmp_path, {'dims': [2, 2, 2], 'spacing': [1, 1, 1], 'dtype': 'u8'}, bytes(8))
    grid = voxelio.load_volume(path)
    assert grid.dims == (2, 2, 2)
    assert not grid.values.any()


def test_load_single_voxel_keeps_spacing(tmp_path):
    payload = np.array([100], dtype='<i2').tobytes()
    path = _write_raw(tmp_path, {'dims': [1, 1, 1], 'spacing': [0.5, 0.5, 0.5], 'dtype': 'i16'}, payload)
    grid = voxelio.load_volume(path)
    assert grid.spacing == (0.5, 0.5, 0.5)
    assert grid.values[0, 0, 0] == 100.0


def test_payload_is_x_fastest(tmp_path):
    payload = np.arange(6, dtype='<u1').tobytes()
    path = _write_raw(tmp_path, {'dims': [3, 2, 1], 'spacing': [1, 1, 1], 'dtype': 'u8'}, payload)
    grid = voxelio.load_volume(path)
    assert grid.values[1, 0, 0] == 1
    assert grid.values[0, 1, 0] == 3
    assert np.array_equal(grid.flat(), np.arange(6))


def test_load_errors(tmp_path):
    with pytest.raises(VolumeFormatError, match='does not exist'):
        voxelio.load_volume(str(tmp_path / 'missing.json'))

    path = _write_raw(tmp_path, {'dims': [2, 2, 2], 'spacing': [1, 1, 1], 'dtype': 'u8'}, bytes(7))
    with pytest.raises(VolumeFormatError, match='needs 8'):
        voxelio.load_volume(path)

    path = _write_raw(tmp_path, {'dims': [1, 1, 1], 'spacing': [1, 1, 1], 'dtype': 'f64'}, bytes(8))
    with pytest.raises(VolumeFormatError, match='unsupported dtype'):
        voxelio.load_volume(path)

    path = _write_raw(tmp_path, {'dims': [1, 1, 1], 'dtype': 'u8'}, bytes(1))
    with pytest.raises(VolumeFormatError, match='spacing'):
        voxelio.load_volume(path)


def test_round_trip_random(tmp_path):
    rng = np.random.default_rng(1)
    for n, dtype, values in [
        (8, 'f32', rng.random((8, 8, 8)).astype(np.float32)),
        (64, None, rng.integers(-500, 1500, size=(64, 64, 64))),
    ]:
        grid = VoxelGrid(values=values, spacing=(0.7, 0.8, 2.5), origin=(1.0, -2.0, 3.0))
        path = str(tmp_path / f'grid{n}.json')
        voxelio.save_volume(grid, path, dtype)
        back = voxelio.load_volume(path)
        assert np.array_equal(back.values, grid.values)
        assert back.spacing == grid.spacing
        assert back.origin == grid.origin


def test_save_picks_narrow_dtype(tmp_path):
    path = str(tmp_path / 'a.json')
    voxelio.save_volume(VoxelGrid(values=np.full((2, 2, 2), 3.0)), path)
    assert ujson.loads(open(path).read())['dtype'] == 'u8'
    voxelio.save_volume(VoxelGrid(values=np.full((2, 2, 2), -3.0)), path)
    assert ujson.loads(open(path).read())['dtype'] == 'i16'
    with pytest.raises(VolumeFormatError, match='losslessly'):
        voxelio.save_volume(VoxelGrid(values=np.full((2, 2, 2), 0.5)), path, 'u8')


def test_save_noisy_phantom_as_f32(tmp_path):
    spec = PhantomSpec(kind='sphere', dims=(10, 10, 10), radius=3.0, noise_sigma=1.0, seed=2)
    grid = voxelio.make_phantom(spec)
    blurred = voxelio.gaussian_blur(grid, 0.8)
    for n, volume in enumerate((grid, blurred)):
        path = str(tmp_path / f'noisy{n}.json')
        voxelio.save_volume(volume, path)
        assert ujson.loads(open(path).read())['dtype'] == 'f32'
        back = voxelio.load_volume(path)
        assert np.array_equal(back.values, volume.values.astype(np.float32))
        assert np.allclose(back.values, volume.values, rtol=1e-6, atol=1e-5)
        voxelio.save_volume(back, path)
        assert np.array_equal(voxelio.load_volume(path).values, back.values)
    with pytest.raises(VolumeFormatError, match='losslessly'):
        voxelio.save_volume(grid, str(tmp_path / 'noisy.json'), 'i16')


def test_save_into_new_directory_and_overwrite(tmp_path):
    path = str(tmp_path / 'nested' / 'one.json')
    voxelio.save_volume(VoxelGrid(values=[[[1.0]]]), path)
    assert voxelio.load_volume(path).values[0, 0, 0] == 1.0
    voxelio.save_volume(VoxelGrid(values=[[[9.0]]]), path)
    assert voxelio.load_volume(path).values[0, 0, 0] == 9.0


def test_mask_round_trip(tmp_path, small_sphere_mask):
    path = str(tmp_path / 'mask.json')
    voxelio.save_volume(small_sphere_mask, path)
    back = voxelio.load_mask(path)
    assert np.array_equal(back.values, small_sphere_mask.values)


def test_phantom_sphere_volume(sphere_grid, sphere_spec):
    inside = int((sphere_grid.values == sphere_spec.inside_value).sum())
    analytic = 4.0 / 3.0 * math.pi * 10 ** 3
    assert abs(inside - analytic) <= 0.02 * analytic


def test_phantom_empty_sphere():
    grid = voxelio.make_phantom(PhantomSpec(kind='sphere', dims=(8, 8, 8), radius=0.0))
    assert np.all(grid.values == 0.0)


def test_phantom_is_deterministic():
    spec = PhantomSpec(kind='sphere', dims=(10, 10, 10), radius=3.0, noise_sigma=5.0, seed=11)
    a = voxelio.make_phantom(spec)
    b = voxelio.make_phantom(spec)
    assert np.array_equal(a.values, b.values)
    c = voxelio.make_phantom(spec.model_copy(update={'seed': 12}))
    assert not np.array_equal(a.values, c.values)


def test_phantom_out_of_bounds():
    with pytest.raises(PhantomError):
        voxelio.make_phantom(PhantomSpec(kind='sphere', dims=(8, 8, 8), radius=6.0))
    with pytest.raises(PhantomError):
        voxelio.make_phantom(PhantomSpec(
            kind='tube', dims=(8, 8, 8), radius=1.0, start=(3.5, 3.5, 0.0), end=(3.5, 3.5, 12.0)
        ))


def test_phantom_spec_needs_geometry():
    with pytest.raises(ValueError, match='needs start'):
        PhantomSpec(kind='tube', dims=(8, 8, 8))
    with pytest.raises(ValueError, match='three arm'):
        PhantomSpec(kind='y_tube', branch_ends=[(0, 0, 0)])


def test_ellipsoid_and_tube_membership():
    ellipsoid = voxelio.phantom_mask(PhantomSpec(
        kind='ellipsoid', dims=(20, 12, 12), semi_axes=(8.0, 4.0, 4.0)
    ))
    center = (9, 5, 5)
    assert ellipsoid.values[center]
    assert ellipsoid.values[2, 5, 5]
    assert not ellipsoid.values[9, 0, 5]

    tube = voxelio.phantom_mask(PhantomSpec(
        kind='tube', dims=(9, 9, 20), radius=2.0, start=(4.0, 4.0, 3.0), end=(4.0, 4.0, 16.0)
    ))
    assert tube.values[4, 4, 10]
    assert tube.values[5, 5, 10]
    assert not tube.values[4, 7, 10]


def test_blur_identity_and_constants():
    rng = np.random.default_rng(2)
    grid = VoxelGrid(values=rng.random((6, 7, 8)))
    assert np.array_equal(voxelio.gaussian_blur(grid, 0.0).values, grid.values)

    constant = VoxelGrid(values=np.full((9, 9, 9), 7.0))
    blurred = voxelio.gaussian_blur(constant, (1.5, 0.5, 2.0))
    assert np.allclose(blurred.values, 7.0, rtol=0, atol=1e-12)


def test_blur_impulse_sums_to_one():
    values = np.zeros((9, 9, 9))
    values[4, 4, 4] = 1.0
    blurred = voxelio.gaussian_blur(VoxelGrid(values=values), 1.0)
    assert abs(blurred.values.sum() - 1.0) < 1e-6
    assert blurred.values[4, 4, 4] == blurred.values.max()


def test_blur_sigma_in_mm():
    values = np.zeros((9, 9, 9))
    values[4, 4, 4] = 1.0
    fine = voxelio.gaussian_blur(VoxelGrid(values=values, spacing=(2.0, 2.0, 2.0)), 2.0)
    coarse = voxelio.gaussian_blur(VoxelGrid(values=values), 1.0)
    assert np.allclose(fine.values, coarse.values)


def test_blur_rejects_negative_sigma():
    with pytest.raises(ValueError):
        voxelio.gaussian_blur(VoxelGrid(values=np.zeros((2, 2, 2))), -1.0)


def test_open_removes_isolated_voxel():
    values = np.zeros((5, 5, 5), dtype=bool)
    values[2, 2, 2] = True
    assert voxelio.morph_open(BinaryMask(values=values), 1).count() == 0


def test_close_fills_hole():
    values = np.ones((5, 5, 5), dtype=bool)
    values[2, 2, 2] = False
    closed = voxelio.morph_close(BinaryMask(values=values), 1)
    assert closed.values.all()


def test_radius_zero_is_identity(random_masks):
    m = random_masks[0]
    assert np.array_equal(voxelio.morph_open(m, 0).values, m.values)
    assert np.array_equal(voxelio.morph_close(m, 0).values, m.values)


def test_morphology_properties(random_masks):
    'Opening shrinks and closing grows; both are idempotent'

    for m in random_masks:
        opened = voxelio.morph_open(m, 1)
        closed = voxelio.morph_close(m, 1)
        assert not np.any(opened.values & ~m.values)
        assert not np.any(m.values & ~closed.values)
        assert np.array_equal(voxelio.morph_open(opened, 1).values, opened.values)
        assert np.array_equal(voxelio.morph_close(closed, 1).values, closed.values)


def test_structuring_element_is_face_connected():
    element = voxelio.structuring_element(1)
    assert element.sum() == 7
    assert not element[0, 0, 0]
    assert voxelio.structuring_element(2).sum() == 25


def test_crop():
    grid = VoxelGrid(values=np.arange(60.0).reshape(3, 4, 5), spacing=(1.0, 2.0, 3.0))
    part = voxelio.crop(grid, (1, 1, 2), (3, 3, 5))
    assert part.dims == (2, 2, 3)
    assert part.values[0, 0, 0] == grid.values[1, 1, 2]
    assert part.origin == (1.0, 2.0, 6.0)
    with pytest.raises(ValueError):
        voxelio.crop(grid, (0, 0, 0), (4, 4, 5))


def test_downsample():
    values = np.zeros((4, 4, 4))
    values[:2, :2, :2] = 8.0
    small = voxelio.downsample(VoxelGrid(values=values), 2)
    assert small.dims == (2, 2, 2)
    assert small.values[0, 0, 0] == 8.0
    assert small.values.sum() == 8.0
    assert small.spacing == (2.0, 2.0, 2.0)
    assert small.origin == (0.5, 0.5, 0.5)

    mask = voxelio.downsample(BinaryMask(values=values > 0), 2)
    assert mask.count() == 1
