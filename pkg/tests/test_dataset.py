import json
import math

import numpy as np
import pytest

from brainage.dataset import (
    BadSexCodeError,
    DuplicateIdError,
    EmptyManifestError,
    Manifest,
    MissingFieldError,
    PhantomSpec,
    ScanRecord,
    Sex,
    ZeroDivisorError,
    aicbv_structure,
    load_manifest,
    normalize_top_percent,
    perfusion_peak,
    save_manifest,
    synth_phantoms,
    t1w_structure,
    ventricle_radius,
)
from brainage.imaging import Volume, read_nifti_file

EYE = np.eye(4, dtype=np.float32)


def make_record(i, **kw):
    defaults = dict(
        id=f"sub-{i:04d}", age=30.0 + i, sex=Sex.FEMALE, project="P",
        t1w_path=f"{i}_t.nii", aicbv_path=f"{i}_a.nii",
    )
    defaults.update(kw)
    return ScanRecord(**defaults)


class TestNormalizeTopPercent:
    def test_constant_volume_becomes_ones(self):
        v = Volume(np.full((3, 3, 3), 4.5, np.float32), EYE)
        out = normalize_top_percent(v)
        assert np.allclose(out.voxels, 1.0)

    def test_top_two_of_two_hundred(self):
        # oracle: full sort, k = ceil(0.01*200) = 2, divisor = (199+200)/2
        vox = np.arange(1, 201, dtype=np.float32).reshape(2, 10, 10)
        out = normalize_top_percent(Volume(vox, EYE))
        assert out.meta["norm_divisor"] == pytest.approx(199.5, rel=1e-12)
        assert np.allclose(out.voxels, vox / 199.5, rtol=1e-6)

    def test_divisor_matches_sort_oracle_on_random_volumes(self):
        rng = np.random.default_rng(8)
        for _ in range(50):
            dims = tuple(rng.integers(2, 9, size=3))
            vox = rng.random(dims).astype(np.float32) + 0.01
            out = normalize_top_percent(Volume(vox, EYE))
            vals = sorted(vox.ravel().tolist())
            k = max(1, math.ceil(0.01 * vox.size))
            oracle = math.fsum(vals[-k:]) / k
            assert out.meta["norm_divisor"] == pytest.approx(oracle, rel=1e-12)

    def test_all_zero_raises(self):
        with pytest.raises(ZeroDivisorError):
            normalize_top_percent(Volume(np.zeros((2, 2, 2), np.float32), EYE))

    def test_idempotent(self):
        rng = np.random.default_rng(1)
        v = Volume(rng.random((8, 8, 8)).astype(np.float32), EYE)
        once = normalize_top_percent(v)
        twice = normalize_top_percent(once)
        assert np.allclose(twice.voxels, once.voxels, atol=1e-6)

    def test_scale_equivariant(self):
        rng = np.random.default_rng(2)
        vox = rng.random((8, 8, 8)).astype(np.float32)
        a = normalize_top_percent(Volume(vox, EYE))
        b = normalize_top_percent(Volume(vox * np.float32(37.0), EYE))
        assert np.allclose(a.voxels, b.voxels, rtol=1e-6)

    def test_bad_fraction(self):
        v = Volume(np.ones((2, 2, 2), np.float32), EYE)
        with pytest.raises(ValueError):
            normalize_top_percent(v, fraction=0.0)


class TestManifest:
    def test_duplicate_ids_rejected(self):
        with pytest.raises(DuplicateIdError):
            Manifest((make_record(1), make_record(1)))

    def test_empty_rejected(self):
        with pytest.raises(EmptyManifestError):
            Manifest(())

    def test_age_range_enforced(self):
        with pytest.raises(Exception):
            make_record(1, age=0.0)
        with pytest.raises(Exception):
            make_record(1, age=140.0)

    def test_round_trip(self, tmp_path):
        m = Manifest((make_record(0), make_record(1, sex=Sex.MALE), make_record(2)))
        path = tmp_path / "manifest.json"
        save_manifest(m, path)
        back = load_manifest(path)
        assert [r.id for r in back] == [r.id for r in m]
        assert [r.age for r in back] == [r.age for r in m]
        assert [r.sex for r in back] == [r.sex for r in m]

    def test_empty_array_rejected(self, tmp_path):
        path = tmp_path / "m.json"
        path.write_text("[]")
        with pytest.raises(EmptyManifestError):
            load_manifest(path)

    def test_bad_sex_code(self, tmp_path):
        path = tmp_path / "m.json"
        row = {"id": "a", "age": 30, "sex": "X", "project": "P", "t1w": "t", "aicbv": "a"}
        path.write_text(json.dumps([row]))
        with pytest.raises(BadSexCodeError):
            load_manifest(path)

    def test_missing_field(self, tmp_path):
        path = tmp_path / "m.json"
        row = {"id": "a", "age": 30, "sex": "F", "project": "P", "t1w": "t"}
        path.write_text(json.dumps([row]))
        with pytest.raises(MissingFieldError):
            load_manifest(path)


class TestPhantoms:
    def test_ventricle_radius_formula(self):
        assert ventricle_radius(10.0) == pytest.approx(0.08)
        assert ventricle_radius(95.0) == pytest.approx(0.42)

    def test_structure_monotone_in_latent_ages(self):
        ages = [15.0, 35.0, 55.0, 75.0, 95.0]
        vent_sizes = [(t1w_structure(a, 32) == np.float32(0.1)).sum() for a in ages]
        assert all(a < b for a, b in zip(vent_sizes, vent_sizes[1:]))
        peaks = [aicbv_structure(a, 32).max() for a in ages]
        assert all(a > b for a, b in zip(peaks, peaks[1:]))
        # voxel centers quantize the blob position, so allow a small undershoot
        assert aicbv_structure(20.0, 32).max() == pytest.approx(perfusion_peak(20.0), abs=0.02)

    def test_determinism_byte_identical(self, tmp_path):
        spec = PhantomSpec(count=4, grid=16, seed=99)
        m1 = synth_phantoms(spec, tmp_path / "a")
        m2 = synth_phantoms(spec, tmp_path / "b")
        assert [r.age for r in m1] == [r.age for r in m2]
        for r in m1:
            for name in (r.t1w_path, r.aicbv_path):
                b1 = (tmp_path / "a" / name).read_bytes()
                b2 = (tmp_path / "b" / name).read_bytes()
                assert b1 == b2

    def test_sex_offset_shifts_structural_latent_age(self, tmp_path):
        # noise and modality jitter off: T1w must equal the pure structure
        # at a_T = age + 2*sex, bit for bit
        spec = PhantomSpec(count=8, grid=16, seed=5, sigma_modality=0.0, noise_sigma=0.0)
        m = synth_phantoms(spec, tmp_path)
        for r in m:
            vol = read_nifti_file(tmp_path / r.t1w_path)
            expected = t1w_structure(r.age + 2.0 * int(r.sex), 16)
            assert np.array_equal(vol.voxels, np.maximum(expected, 0.0))

    def test_volumes_clamped_nonnegative(self, tmp_path):
        spec = PhantomSpec(count=2, grid=16, seed=1, noise_sigma=0.5)
        m = synth_phantoms(spec, tmp_path)
        for r in m:
            assert read_nifti_file(tmp_path / r.t1w_path).voxels.min() >= 0.0

    def test_ages_within_project_profiles(self, tmp_path):
        spec = PhantomSpec(count=30, grid=8, seed=3)
        m = synth_phantoms(spec, tmp_path)
        ranges = {p[0]: (p[1], p[2]) for p in spec.project_profiles}
        for r in m:
            lo, hi = ranges[r.project]
            assert lo <= r.age < hi

    def test_invalid_spec(self):
        with pytest.raises(Exception):
            PhantomSpec(count=0)
        with pytest.raises(Exception):
            PhantomSpec(count=5, project_profiles=(("X", 50.0, 40.0, 1.0),))
