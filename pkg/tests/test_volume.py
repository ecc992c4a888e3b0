import numpy as np
import pytest

from voxdiff.errors import (
    BadMagic,
    ConfigError,
    DegenerateIntensityRange,
    HeaderMismatch,
    PatchOutOfBounds,
    TruncatedPayload,
)
from voxdiff.volume import (
    PatchSpec,
    Volume3D,
    extract_patch,
    load_volume,
    normalize_intensity,
    random_patch_spec,
    save_volume,
)


def ramp_volume(dims=(5, 6, 7), spacing=(1.0, 2.0, 0.5)):
    nx, ny, nz = dims
    data = np.zeros(dims, dtype=np.float32)
    for i in range(nx):
        for j in range(ny):
            for k in range(nz):
                data[i, j, k] = 100 * i + 10 * j + k
    return Volume3D(data, spacing)


class TestVolume3D:
    def test_rejects_nan(self):
        data = np.zeros((2, 2, 2))
        data[0, 0, 0] = np.nan
        with pytest.raises(ConfigError):
            Volume3D(data)

    def test_rejects_nonpositive_spacing(self):
        with pytest.raises(ConfigError):
            Volume3D(np.zeros((2, 2, 2)), spacing=(1.0, 0.0, 1.0))

    def test_immutable(self):
        v = Volume3D(np.zeros((2, 2, 2)))
        with pytest.raises((ValueError, AttributeError)):
            v.data[0, 0, 0] = 1.0

    def test_flat_is_x_fastest(self):
        v = ramp_volume((2, 2, 2))
        # flat index i + nx*(j + ny*k)
        assert v.flat()[0] == v.data[0, 0, 0]
        assert v.flat()[1] == v.data[1, 0, 0]
        assert v.flat()[2] == v.data[0, 1, 0]
        assert v.flat()[4] == v.data[0, 0, 1]


class TestNormalize:
    def test_min_max_endpoints(self):
        v = Volume3D(np.array([0.0, 5.0, 10.0, 5.0, 0.0, 10.0, 5.0, 5.0]).reshape(2, 2, 2))
        out = normalize_intensity(v, "min_max_01")
        assert set(np.unique(out.data)) == {0.0, 0.5, 1.0}

    def test_min_max_constant_raises(self):
        v = Volume3D(np.full((2, 2, 2), 3.25))
        with pytest.raises(DegenerateIntensityRange):
            normalize_intensity(v, "min_max_01")

    def test_min_max_bounds_attained(self):
        rng = np.random.default_rng(3)
        v = Volume3D(rng.uniform(-7, 13, size=(4, 4, 4)))
        out = normalize_intensity(v, "min_max_01")
        assert out.data.min() == 0.0
        assert out.data.max() == 1.0
        assert np.all((out.data >= 0.0) & (out.data <= 1.0))

    def test_zscore_hand_values(self):
        v = Volume3D(np.array([1.0, 2.0, 3.0, 4.0]).reshape(4, 1, 1))
        out = normalize_intensity(v, "zscore")
        # independent oracle: (x - mu) / sigma with sigma = sqrt(1.25)
        expected = (np.array([1.0, 2.0, 3.0, 4.0]) - 2.5) / np.sqrt(1.25)
        np.testing.assert_allclose(out.data.ravel(), expected, atol=1e-6)
        assert abs(out.data.mean(dtype=np.float64)) < 1e-6
        assert abs(out.data.std(dtype=np.float64) - 1.0) < 1e-6

    def test_preserves_dims_and_spacing(self):
        v = ramp_volume()
        out = normalize_intensity(v, "min_max_01")
        assert out.dims == v.dims and out.spacing == v.spacing

    def test_unknown_mode(self):
        with pytest.raises(ConfigError):
            normalize_intensity(ramp_volume(), "percentile")


class TestExtractPatch:
    def test_whole_volume_is_identity(self):
        v = ramp_volume()
        out = extract_patch(v, PatchSpec(size=v.dims, origin=(0, 0, 0)))
        assert out == v

    def test_single_voxel_against_nested_loop_reference(self):
        v = ramp_volume()
        spec = PatchSpec(size=(1, 1, 1), origin=(2, 3, 4))
        out = extract_patch(v, spec)
        # brute-force reference: walk indices by hand
        assert out.data[0, 0, 0] == v.data[2, 3, 4] == 100 * 2 + 10 * 3 + 4

    def test_interior_patch_matches_brute_force(self):
        v = ramp_volume()
        spec = PatchSpec(size=(2, 3, 2), origin=(1, 2, 3))
        out = extract_patch(v, spec)
        for i in range(2):
            for j in range(3):
                for k in range(2):
                    assert out.data[i, j, k] == v.data[1 + i, 2 + j, 3 + k]

    def test_out_of_bounds(self):
        v = ramp_volume((4, 4, 4))
        with pytest.raises(PatchOutOfBounds):
            extract_patch(v, PatchSpec(size=(2, 2, 2), origin=(3, 0, 0)))
        with pytest.raises(PatchOutOfBounds):
            extract_patch(v, PatchSpec(size=(2, 2, 2), origin=(-1, 0, 0)))


class TestRandomPatchSpec:
    def test_full_size_always_origin_zero(self):
        rng = np.random.default_rng(0)
        for _ in range(10):
            spec = random_patch_spec((4, 4, 4), (4, 4, 4), rng)
            assert spec.origin == (0, 0, 0)

    def test_too_large_raises(self):
        rng = np.random.default_rng(0)
        with pytest.raises(PatchOutOfBounds):
            random_patch_spec((4, 4, 4), (5, 4, 4), rng)

    def test_seeded_determinism(self):
        rng1 = np.random.default_rng(7)
        rng2 = np.random.default_rng(7)
        seq1 = [random_patch_spec((10, 9, 8), (3, 3, 3), rng1) for _ in range(50)]
        seq2 = [random_patch_spec((10, 9, 8), (3, 3, 3), rng2) for _ in range(50)]
        assert seq1 == seq2

    def test_uniform_over_positions(self):
        # dims (4,4,4), size (3,3,3): 8 possible origins in {0,1}^3
        rng = np.random.default_rng(123)
        n = 100_000
        counts = {}
        for _ in range(n):
            spec = random_patch_spec((4, 4, 4), (3, 3, 3), rng)
            counts[spec.origin] = counts.get(spec.origin, 0) + 1
        assert set(counts) == {(i, j, k) for i in (0, 1) for j in (0, 1) for k in (0, 1)}
        p = 1.0 / 8.0
        sigma = np.sqrt(p * (1 - p) / n)
        for origin, c in counts.items():
            assert abs(c / n - p) <= 3 * sigma, f"origin {origin} frequency {c / n}"


class TestVvolRoundTrip:
    def test_bit_exact_round_trip(self, tmp_path):
        rng = np.random.default_rng(9)
        v = Volume3D(rng.standard_normal((3, 4, 5)), spacing=(0.7, 1.3, 2.9))
        path = tmp_path / "vol.vvol"
        save_volume(v, path)
        loaded = load_volume(path)
        assert loaded.dims == v.dims
        assert np.array_equal(loaded.data, v.data)
        assert loaded.data.tobytes() == v.data.tobytes()
        # spacing round-trips through f32
        np.testing.assert_allclose(loaded.spacing, v.spacing, rtol=1e-6)

    def test_save_load_save_identical_bytes(self, tmp_path):
        v = ramp_volume()
        p1, p2 = tmp_path / "a.vvol", tmp_path / "b.vvol"
        save_volume(v, p1)
        save_volume(load_volume(p1), p2)
        assert p1.read_bytes() == p2.read_bytes()

    def test_bad_magic(self, tmp_path):
        v = ramp_volume((2, 2, 2))
        path = tmp_path / "vol.vvol"
        save_volume(v, path)
        raw = bytearray(path.read_bytes())
        raw[:4] = b"JUNK"
        path.write_bytes(bytes(raw))
        with pytest.raises(BadMagic):
            load_volume(path)

    def test_truncated_payload(self, tmp_path):
        v = Volume3D(np.arange(8, dtype=np.float32).reshape(2, 2, 2))
        path = tmp_path / "vol.vvol"
        save_volume(v, path)
        raw = path.read_bytes()
        path.write_bytes(raw[:-4])  # drop the 8th voxel
        with pytest.raises(TruncatedPayload):
            load_volume(path)

    def test_trailing_garbage(self, tmp_path):
        v = Volume3D(np.zeros((2, 2, 2)))
        path = tmp_path / "vol.vvol"
        save_volume(v, path)
        path.write_bytes(path.read_bytes() + b"xx")
        with pytest.raises(HeaderMismatch):
            load_volume(path)

    def test_payload_layout_x_fastest(self, tmp_path):
        v = ramp_volume((2, 3, 4))
        path = tmp_path / "vol.vvol"
        save_volume(v, path)
        raw = path.read_bytes()
        header = 4 + 4 + 12 + 12
        payload = np.frombuffer(raw, dtype="<f4", offset=header)
        assert payload[0] == v.data[0, 0, 0]
        assert payload[1] == v.data[1, 0, 0]  # x moves fastest
        assert payload[2] == v.data[0, 1, 0]
