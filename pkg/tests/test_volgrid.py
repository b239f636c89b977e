import numpy as np
import pytest

from voxdiff.volgrid import (
    BinaryMask,
    PatchPlacement,
    Volume,
    VolumeError,
    compose_full_map,
    extract_mask_patch,
    extract_patch,
    normalize_intensity,
    read_labels,
    read_mask,
    read_volume,
    resample_isotropic,
    resample_mask_isotropic,
    write_labels,
    write_mask,
    write_volume,
)


def quadratic_phantom(dims=(12, 10, 14)):
    ax = [np.linspace(-1, 1, n) for n in dims]
    X, Y, Z = np.meshgrid(*ax, indexing="ij")
    return 0.3 * X**2 + 0.2 * Y**2 - 0.1 * Z**2 + 0.1 * X * Y


def naive_trilinear(data, x, y, z):
    """Brute-force trilinear evaluation, independent of the module path."""
    nx, ny, nz = data.shape
    i = min(max(int(np.floor(x)), 0), max(nx - 2, 0))
    j = min(max(int(np.floor(y)), 0), max(ny - 2, 0))
    k = min(max(int(np.floor(z)), 0), max(nz - 2, 0))
    fx, fy, fz = x - i, y - j, z - k
    acc = 0.0
    for di in (0, 1):
        for dj in (0, 1):
            for dk in (0, 1):
                w = (fx if di else 1 - fx) * (fy if dj else 1 - fy) * (fz if dk else 1 - fz)
                acc += w * data[min(i + di, nx - 1), min(j + dj, ny - 1), min(k + dk, nz - 1)]
    return acc


class TestVolumeType:
    def test_rejects_nan(self):
        bad = np.zeros((2, 2, 2))
        bad[0, 0, 0] = np.nan
        with pytest.raises(VolumeError):
            Volume(bad)

    def test_rejects_bad_spacing(self):
        with pytest.raises(VolumeError):
            Volume(np.zeros((2, 2, 2)), spacing=(1.0, 0.0, 1.0))

    def test_mask_rejects_nonbinary(self):
        with pytest.raises(VolumeError):
            BinaryMask(np.full((2, 2, 2), 3))


class TestResample:
    def test_identity_is_bitwise(self):
        rng = np.random.default_rng(7)
        v = Volume(rng.normal(size=(6, 5, 4)), (1.0, 1.0, 1.0))
        r = resample_isotropic(v, 1.0)
        assert r.dims == v.dims
        assert np.array_equal(r.data, v.data)

    def test_constant_stays_constant(self):
        v = Volume(np.full((5, 4, 3), 2.5), (2.0, 1.0, 1.5))
        r = resample_isotropic(v, 0.7)
        assert np.allclose(r.data, 2.5)

    def test_two_sample_line_upsampled(self):
        # 2x1x1 grid [0, 10] at 2 mm along x -> 4 corner-anchored samples.
        v = Volume(np.array([0.0, 10.0]).reshape(2, 1, 1), (2.0, 1.0, 1.0))
        r = resample_isotropic(v, 1.0)
        assert r.dims == (4, 1, 1)
        assert np.allclose(r.data.ravel(), [0.0, 10.0 / 3.0, 20.0 / 3.0, 10.0])
        assert r.spacing == (1.0, 1.0, 1.0)

    def test_matches_naive_trilinear_oracle(self):
        rng = np.random.default_rng(0)
        data = rng.normal(size=(5, 4, 6))
        v = Volume(data, (1.3, 0.9, 1.1))
        r = resample_isotropic(v, 0.7)
        # recompute each sample with the naive oracle at the same corner-anchored coords
        def coords(n_in, n_out):
            if n_out == 1 or n_in == 1:
                return np.zeros(n_out)
            return np.arange(n_out) * ((n_in - 1) / (n_out - 1))

        cs = [coords(v.dims[a], r.dims[a]) for a in range(3)]
        for a, x in enumerate(cs[0]):
            for b, y in enumerate(cs[1]):
                for c, z in enumerate(cs[2]):
                    assert r.data[a, b, c] == pytest.approx(naive_trilinear(data, x, y, z), abs=1e-12)

    def test_round_trip_constant_exact(self):
        v = Volume(np.full((7, 6, 5), 3.25), (1.0, 1.0, 1.0))
        back = resample_isotropic(resample_isotropic(v, 0.6), 1.0)
        assert back.dims == v.dims
        assert np.array_equal(back.data, v.data)

    def test_round_trip_smooth_phantom(self):
        smooth = quadratic_phantom()
        v = Volume(smooth, (1.0, 1.0, 1.0))
        for target in (0.75, 1.2):
            back = resample_isotropic(resample_isotropic(v, target), 1.0)
            assert back.dims == v.dims
            value_range = smooth.max() - smooth.min()
            assert np.abs(back.data - smooth).mean() < 0.01 * value_range

    def test_mask_resample_stays_binary(self):
        rng = np.random.default_rng(3)
        m = BinaryMask((rng.random((6, 6, 6)) > 0.5).astype(np.uint8), (1.0, 1.0, 1.0))
        r = resample_mask_isotropic(m, 0.8)
        assert set(np.unique(r.data)) <= {0, 1}

    def test_rejects_nonpositive_target(self):
        v = Volume(np.zeros((2, 2, 2)))
        with pytest.raises(VolumeError):
            resample_isotropic(v, 0.0)


class TestNormalize:
    def test_endpoints_and_midpoint(self):
        v = Volume(np.array([-200.0, 50.0, 300.0, 175.0]).reshape(4, 1, 1))
        out = normalize_intensity(v, -200.0, 300.0)
        assert out.data[0, 0, 0] == pytest.approx(-1.0)
        assert out.data[1, 0, 0] == pytest.approx(0.0)
        assert out.data[2, 0, 0] == pytest.approx(1.0)
        assert out.data[3, 0, 0] == pytest.approx(0.5)

    def test_clips_outside_window(self):
        v = Volume(np.array([-1000.0, 1000.0]).reshape(2, 1, 1))
        out = normalize_intensity(v, -200.0, 300.0)
        assert out.data.min() == -1.0 and out.data.max() == 1.0

    def test_monotone_and_bounded(self):
        rng = np.random.default_rng(11)
        vals = np.sort(rng.uniform(-500, 500, size=40))
        out = normalize_intensity(Volume(vals.reshape(40, 1, 1)), -200.0, 300.0)
        flat = out.data.ravel()
        assert np.all(np.diff(flat) >= 0)
        assert flat.min() >= -1.0 and flat.max() <= 1.0

    def test_rejects_bad_window(self):
        with pytest.raises(VolumeError):
            normalize_intensity(Volume(np.zeros((2, 2, 2))), 5.0, 5.0)


class TestPatch:
    def test_full_grid_patch_is_identity(self):
        rng = np.random.default_rng(5)
        v = Volume(rng.normal(size=(8, 8, 8)), (1.0, 1.0, 1.0))
        center = v.voxel_to_world((3.5, 3.5, 3.5))
        patch, placement = extract_patch(v, center, (8.0, 8.0, 8.0))
        assert placement.offset_voxels == (0, 0, 0)
        assert np.array_equal(patch.data, v.data)

    def test_boundary_clamp_shifts_corner(self):
        rng = np.random.default_rng(6)
        v = Volume(rng.normal(size=(10, 10, 10)), (1.0, 1.0, 1.0))
        patch, placement = extract_patch(v, (0.0, 0.0, 0.0), (6.0, 6.0, 6.0))
        assert placement.offset_voxels == (0, 0, 0)
        # naive copy-loop comparison at the recorded window
        o = placement.offset_voxels
        for i in range(6):
            for j in range(6):
                for k in range(6):
                    assert patch.data[i, j, k] == v.data[o[0] + i, o[1] + j, o[2] + k]

    def test_paper_scale_patch_dims(self):
        v = Volume(np.zeros((120, 120, 160), dtype=np.float32), (1.0, 1.0, 1.0))
        patch, _ = extract_patch(v, (60.0, 60.0, 80.0), (96.0, 96.0, 128.0))
        assert patch.dims == (96, 96, 128)

    def test_oversized_patch_rejected(self):
        v = Volume(np.zeros((4, 4, 4)))
        with pytest.raises(VolumeError):
            extract_patch(v, (2.0, 2.0, 2.0), (8.0, 4.0, 4.0))

    def test_mask_patch_matches_image_patch(self):
        rng = np.random.default_rng(9)
        v = Volume(rng.normal(size=(9, 9, 9)))
        m = BinaryMask((rng.random((9, 9, 9)) > 0.6).astype(np.uint8))
        _, placement = extract_patch(v, (1.0, 7.0, 4.0), (5.0, 5.0, 5.0))
        mp = extract_mask_patch(m, placement)
        assert np.array_equal(mp.data, m.data[placement.slices()])


class TestCompose:
    def test_single_full_cover_is_identity(self):
        rng = np.random.default_rng(12)
        v = Volume(rng.random((6, 6, 6)).astype(np.float32))
        placement = PatchPlacement((0, 0, 0), (6, 6, 6))
        out = compose_full_map([(v, placement)], (6, 6, 6), (1.0, 1.0, 1.0))
        assert np.allclose(out.data, v.data)

    def test_disjoint_union_on_zero_background(self):
        a = Volume(np.ones((2, 2, 2), dtype=np.float32))
        b = Volume(np.full((2, 2, 2), 2.0, dtype=np.float32))
        out = compose_full_map(
            [(a, PatchPlacement((0, 0, 0), (2, 2, 2))), (b, PatchPlacement((4, 4, 4), (2, 2, 2)))],
            (6, 6, 6),
            (1.0, 1.0, 1.0),
        )
        assert out.data[0, 0, 0] == 1.0
        assert out.data[5, 5, 5] == 2.0
        assert out.data[3, 3, 3] == 0.0

    def test_overlap_takes_max(self):
        a = Volume(np.full((2, 2, 2), 0.3, dtype=np.float32))
        b = Volume(np.full((2, 2, 2), 0.7, dtype=np.float32))
        out = compose_full_map(
            [(a, PatchPlacement((0, 0, 0), (2, 2, 2))), (b, PatchPlacement((1, 0, 0), (2, 2, 2)))],
            (3, 2, 2),
            (1.0, 1.0, 1.0),
        )
        assert out.data[1, 0, 0] == pytest.approx(max(0.3, 0.7))

    def test_permutation_invariant(self):
        rng = np.random.default_rng(13)
        patches = []
        for corner in [(0, 0, 0), (2, 1, 0), (3, 3, 3), (1, 2, 2)]:
            patches.append(
                (Volume(rng.random((3, 3, 3)).astype(np.float32)), PatchPlacement(corner, (3, 3, 3)))
            )
        out1 = compose_full_map(patches, (6, 6, 6), (1.0, 1.0, 1.0))
        out2 = compose_full_map(patches[::-1], (6, 6, 6), (1.0, 1.0, 1.0))
        assert np.array_equal(out1.data, out2.data)

    def test_inconsistent_spacing_rejected(self):
        v = Volume(np.zeros((2, 2, 2)), (2.0, 2.0, 2.0))
        with pytest.raises(VolumeError):
            compose_full_map([(v, PatchPlacement((0, 0, 0), (2, 2, 2)))], (4, 4, 4), (1.0, 1.0, 1.0))


class TestVol1Format:
    def test_volume_round_trip(self, tmp_path):
        rng = np.random.default_rng(21)
        v = Volume(rng.normal(size=(3, 4, 5)).astype(np.float32), (1.5, 1.0, 2.0), (0.5, -1.0, 3.0))
        p = tmp_path / "v.vol1"
        write_volume(p, v)
        r = read_volume(p)
        assert np.array_equal(r.data, v.data)
        assert r.spacing == pytest.approx(v.spacing)
        assert r.origin == pytest.approx(v.origin)

    def test_mask_round_trip(self, tmp_path):
        rng = np.random.default_rng(22)
        m = BinaryMask((rng.random((4, 3, 2)) > 0.5).astype(np.uint8))
        p = tmp_path / "m.vol1"
        write_mask(p, m)
        r = read_mask(p)
        assert np.array_equal(r.data, m.data)

    def test_labels_round_trip(self, tmp_path):
        labels = np.arange(24, dtype=np.uint32).reshape(2, 3, 4)
        p = tmp_path / "l.vol1"
        write_labels(p, labels, (1.0, 1.0, 1.0))
        r, spacing, _ = read_labels(p)
        assert np.array_equal(r, labels)

    def test_payload_is_x_fastest(self, tmp_path):
        data = np.arange(8, dtype=np.float32).reshape(2, 2, 2)
        p = tmp_path / "o.vol1"
        write_volume(p, Volume(data))
        raw = p.read_bytes()
        payload = np.frombuffer(raw[41:], dtype="<f4")
        # index = ix + nx*(iy + ny*iz)
        expect = [data[ix, iy, iz] for iz in range(2) for iy in range(2) for ix in range(2)]
        assert np.array_equal(payload, np.array(expect, dtype=np.float32))

    def test_rejects_bad_magic(self, tmp_path):
        p = tmp_path / "bad.vol1"
        p.write_bytes(b"NOPE" + b"\x00" * 60)
        with pytest.raises(VolumeError, match="magic"):
            read_volume(p)

    def test_rejects_truncated_payload(self, tmp_path):
        v = Volume(np.zeros((4, 4, 4), dtype=np.float32))
        p = tmp_path / "t.vol1"
        write_volume(p, v)
        whole = p.read_bytes()
        p.write_bytes(whole[:-8])
        with pytest.raises(VolumeError, match="truncated"):
            read_volume(p)
