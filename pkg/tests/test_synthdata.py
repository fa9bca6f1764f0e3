"""Phantom generator checks: scenario semantics, determinism, label rules,
the volume container, and manifest/split integrity."""

import json

import numpy as np
import pytest

from lesionseq import lvol, synthdata
from lesionseq.lvol import VolumeFormatError
from lesionseq.synthdata import PhantomSpec, generate_case, generate_dataset


def quiet_spec(**overrides) -> PhantomSpec:
    base = dict(noise_sigma=0.0, warp_amplitude=0.0, lesion_contrast=(1.5, 3.0))
    base.update(overrides)
    return PhantomSpec(**base)


class TestGenerateCase:
    def test_stable_zero_noise_zero_warp_identical_volumes(self):
        case = generate_case(quiet_spec(), "stable", seed=11)
        np.testing.assert_array_equal(case.x_curr, case.x_prior)
        assert case.birads_prior == case.birads_curr == 3

    def test_new_lesion_absent_in_prior(self):
        case = generate_case(quiet_spec(), "new-lesion", seed=5)
        assert case.mask_curr.sum() > 0
        m = case.mask_curr.astype(bool)
        # prior volume at masked voxels carries only background (no lesion term)
        curr_vals = case.x_curr[0][m]
        prior_vals = case.x_prior[0][m]
        assert curr_vals.mean() > prior_vals.mean() + 0.3
        # without noise/warp the prior equals the raw background texture there
        assert float(np.abs(prior_vals).max()) < 3.0 * quiet_spec().texture_amplitude
        assert case.birads_curr == 4
        assert case.birads_prior in (2, 3)

    def test_growing_lesion_mask_grows(self):
        spec = quiet_spec()
        case = generate_case(spec, "growing-lesion", seed=7)
        stable_twin = generate_case(spec, "stable", seed=7)
        # same seed draws the same lesions; growth only scales the radii
        assert case.mask_curr.sum() > stable_twin.mask_curr.sum()
        assert case.birads_curr == case.birads_prior + 1
        assert case.birads_prior in (3, 4)

    def test_same_seed_bit_identical(self):
        spec = PhantomSpec()
        a = generate_case(spec, "growing-lesion", seed=42)
        b = generate_case(spec, "growing-lesion", seed=42)
        np.testing.assert_array_equal(a.x_curr, b.x_curr)
        np.testing.assert_array_equal(a.x_prior, b.x_prior)
        np.testing.assert_array_equal(a.mask_curr, b.mask_curr)
        assert (a.birads_prior, a.birads_curr) == (b.birads_prior, b.birads_curr)

    def test_mask_voxels_brighter_than_background(self):
        spec = PhantomSpec()
        for seed in range(4):
            case = generate_case(spec, "new-lesion", seed=seed)
            m = case.mask_curr.astype(bool)
            inside = case.x_curr[0][m].mean()
            outside = case.x_curr[0][~m].mean()
            assert inside > outside + 0.3, f"seed {seed}"

    def test_birads_label_consistency_rule(self):
        # whenever the lesion volume grows by more than the configured factor
        # the current score must not drop below the prior one
        spec = PhantomSpec()
        for seed in range(8):
            for scenario in synthdata.SCENARIOS:
                case = generate_case(spec, scenario, seed=seed)
                if scenario in ("new-lesion", "growing-lesion"):
                    assert case.birads_curr > case.birads_prior
                else:
                    assert case.birads_curr == case.birads_prior

    def test_unknown_scenario_rejected(self):
        with pytest.raises(ValueError, match="scenario"):
            generate_case(PhantomSpec(), "shrinking", seed=0)

    def test_oversized_lesion_rejected(self):
        spec = PhantomSpec(extents=(8, 8, 8), lesion_radius=(6.0, 7.0),
                           lesion_contrast=(1.5, 3.0))
        with pytest.raises(ValueError, match="does not fit"):
            generate_case(spec, "stable", seed=0)

    def test_spec_validation(self):
        with pytest.raises(ValueError, match="contrast"):
            PhantomSpec(lesion_contrast=(0.1, 0.2), noise_sigma=0.25)
        with pytest.raises(ValueError, match="radii"):
            PhantomSpec(lesion_radius=(0.5, 1.0))


class TestVolumeContainer:
    def test_float_roundtrip(self, tmp_path, rng):
        arr = rng.normal(0, 1, (1, 4, 6, 5)).astype(np.float32)
        path = tmp_path / "vol.lvol"
        lvol.write_volume(path, arr, (2.0, 0.7, 0.7))
        back, spacing = lvol.read_volume(path)
        np.testing.assert_array_equal(back, arr)
        assert spacing == (2.0, 0.7, 0.7)
        assert back.dtype == np.float32

    def test_mask_roundtrip(self, tmp_path, rng):
        mask = (rng.random((4, 6, 5)) < 0.3).astype(np.uint8)
        path = tmp_path / "mask.lvol"
        lvol.write_volume(path, mask, (1.0, 1.0, 1.0))
        back, _ = lvol.read_volume(path)
        np.testing.assert_array_equal(back, mask)
        assert back.dtype == np.uint8

    def test_header_layout(self, tmp_path):
        arr = np.zeros((1, 2, 2, 2), dtype=np.float32)
        path = tmp_path / "v.lvol"
        lvol.write_volume(path, arr, (2.0, 0.7, 0.7))
        raw = path.read_bytes()
        assert raw[:8] == b"LVOL\x00\x01\x00\x00"
        hlen = int.from_bytes(raw[8:12], "little")
        header = json.loads(raw[12:12 + hlen].decode("utf-8"))
        assert header == {"shape": [1, 2, 2, 2], "spacing": [2.0, 0.7, 0.7], "dtype": "f32"}
        assert len(raw) == 12 + hlen + arr.size * 4

    def test_bad_magic_rejected(self, tmp_path):
        path = tmp_path / "junk.lvol"
        path.write_bytes(b"NOTAVOLUME")
        with pytest.raises(VolumeFormatError, match="magic"):
            lvol.read_volume(path)

    def test_truncated_payload_rejected(self, tmp_path):
        path = tmp_path / "t.lvol"
        lvol.write_volume(path, np.zeros((2, 2, 2), dtype=np.uint8), (1, 1, 1))
        raw = path.read_bytes()
        path.write_bytes(raw[:-3])
        with pytest.raises(VolumeFormatError, match="truncated"):
            lvol.read_volume(path)

    def test_unsupported_dtype_rejected(self, tmp_path):
        with pytest.raises(VolumeFormatError, match="dtype"):
            lvol.write_volume(tmp_path / "x.lvol", np.zeros((2, 2), dtype=np.int32), (1, 1))


class TestGenerateDataset:
    def test_manifest_contents_and_mix(self, tmp_path):
        manifest = generate_dataset(PhantomSpec(), tmp_path / "ds", n_cases=10,
                                    mix={"stable": 0.5, "new-lesion": 0.5}, seed=3)
        rows = synthdata.load_manifest(manifest)
        assert len(rows) == 10
        scenarios = [r["scenario"] for r in rows]
        assert scenarios.count("stable") == 5
        assert scenarios.count("new-lesion") == 5
        for row in rows:
            assert set(row) == {"patient_id", "case_id", "current", "prior", "mask",
                                "birads_t", "birads_prev", "split", "scenario"}

    def test_patient_level_split_partition(self, tmp_path):
        manifest = generate_dataset(PhantomSpec(), tmp_path / "ds", n_cases=20, seed=1,
                                    splits={"train": 0.8, "val": 0.2})
        rows = synthdata.load_manifest(manifest)
        by_split: dict[str, set] = {}
        for r in rows:
            by_split.setdefault(r["split"], set()).add(r["patient_id"])
        assert len(by_split["train"]) == 16
        assert len(by_split["val"]) == 4
        assert not (by_split["train"] & by_split["val"])

    def test_masks_roundtrip_from_disk(self, tmp_path):
        out = tmp_path / "ds"
        manifest = generate_dataset(quiet_spec(), out, n_cases=3, seed=9,
                                    mix={"new-lesion": 1.0})
        rows = synthdata.load_manifest(manifest)
        for i, row in enumerate(rows):
            case = generate_case(quiet_spec(), row["scenario"], seed=9 * 1_000_000 + i)
            arrays = synthdata.load_case_arrays(manifest, row)
            np.testing.assert_array_equal(arrays["mask"], case.mask_curr)
            np.testing.assert_array_equal(arrays["current"], case.x_curr)

    def test_manifest_digest_reproducible(self, tmp_path):
        m1 = generate_dataset(PhantomSpec(), tmp_path / "a", n_cases=6, seed=4)
        m2 = generate_dataset(PhantomSpec(), tmp_path / "b", n_cases=6, seed=4)
        assert synthdata.manifest_digest(m1) == synthdata.manifest_digest(m2)
        m3 = generate_dataset(PhantomSpec(), tmp_path / "c", n_cases=6, seed=5)
        assert synthdata.manifest_digest(m1) != synthdata.manifest_digest(m3)

    def test_volumes_on_disk_reproducible(self, tmp_path):
        generate_dataset(PhantomSpec(), tmp_path / "a", n_cases=2, seed=4)
        generate_dataset(PhantomSpec(), tmp_path / "b", n_cases=2, seed=4)
        for name in ("case_0000_t1.lvol", "case_0001_mask.lvol"):
            assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()
