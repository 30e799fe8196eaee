"""Pipeline steps: preprocessing, stack reconstruction, mapping, artifacts."""

import json

import numpy as np
import pytest

from radpath.engine import RigidTransform2D
from radpath.evaluation import dice
from radpath.image import Grid2D, LabelMask2D, PointSet2D, RgbImage2D, resample_label
from radpath.io import read_nifti, write_landmarks, write_mask_image, write_rgb_image, write_nifti
from radpath.manifest import parse_manifest
from radpath.phantom import DegradationSpec, build_phantom_case, persist_case, load_reference
from radpath.pipeline import (load_chain, map_labels, preprocess, reconstruct_stack,
                              register_case, run_case)
from radpath.image import ScalarVolume3D


@pytest.fixture(scope="module")
def clean_case(tmp_path_factory, small_geometry):
    out = tmp_path_factory.mktemp("clean_case")
    case = build_phantom_case(small_geometry, DegradationSpec(seed=11), case_id="t_clean")
    manifest_path, reference_path = persist_case(case, out)
    return parse_manifest(manifest_path), load_reference(reference_path), case


@pytest.fixture(scope="module")
def degraded_case(tmp_path_factory, small_geometry):
    out = tmp_path_factory.mktemp("degraded_case")
    spec = DegradationSpec(rotation_deg=8.0, shrink=0.05, seed=12)
    case = build_phantom_case(small_geometry, spec, case_id="t_degraded")
    manifest_path, reference_path = persist_case(case, out)
    return parse_manifest(manifest_path), load_reference(reference_path), case


class TestPreprocess:
    def test_prepared_shapes_and_masking(self, clean_case, quick_profile):
        manifest, _, _ = clean_case
        prepared = preprocess(manifest, quick_profile)
        assert prepared.n_slices == 3
        for sl, mri in zip(prepared.slices, prepared.mri_slices):
            assert sl.gray.grid.spacing == (quick_profile.working_spacing_mm,) * 2
            assert mri.gray.grid.spacing == (quick_profile.working_spacing_mm,) * 2
            outside = sl.mask.values == 0
            assert np.all(sl.gray.values[outside] == 0.0)
            assert np.all(mri.gray.values[mri.mask.values == 0] == 0.0)

    def test_no_gross_correction_changes_nothing_but_resampling(self, clean_case, quick_profile):
        manifest, _, case = clean_case
        prepared = preprocess(manifest, quick_profile)
        assert all(s.gross is None for s in prepared.slices)
        # content preserved: prostate area within resampling tolerance
        src_mask = case.slides.prostate_masks[0]
        src_area = (src_mask.values > 0).sum() * src_mask.grid.spacing[0] * src_mask.grid.spacing[1]
        w = prepared.slices[0].mask
        w_area = (w.values > 0).sum() * w.grid.spacing[0] * w.grid.spacing[1]
        assert w_area == pytest.approx(src_area, rel=0.02)

    def test_flip_round_trip(self, tmp_path, quick_profile):
        # full-size gland: the double resampling tolerance of the spec
        # assumes a realistic boundary-to-area ratio
        from radpath.phantom import PhantomGeometry
        geom = PhantomGeometry(slice_indices=(5,))
        quick_profile = quick_profile.replace(working_spacing_mm=0.1)
        case = build_phantom_case(geom, DegradationSpec(seed=5), case_id="flip")
        manifest_path, _ = persist_case(case, tmp_path)
        doc = json.loads(manifest_path.read_text())
        doc["histology"]["slices"] = [dict(s, flip_lr=True) for s in doc["histology"]["slices"]]
        flipped_path = tmp_path / "manifest_flip.json"
        flipped_path.write_text(json.dumps(doc))
        flipped = preprocess(parse_manifest(flipped_path), quick_profile)
        plain = preprocess(parse_manifest(manifest_path), quick_profile)
        # flipping twice = flipping the flipped preparation once more
        from radpath.transforms import FlipLR
        from radpath.image import center_of_mass
        for f_sl, p_sl in zip(flipped.slices, plain.slices):
            com = center_of_mass(f_sl.mask)
            unflipped = resample_label(f_sl.mask, f_sl.mask.grid, FlipLR(com[0]))
            d = dice(unflipped, resample_label(p_sl.mask, f_sl.mask.grid))
            assert d >= 0.995

    def test_rotation_90_second_moments(self, tmp_path, quick_profile):
        # L-shaped mask: after a 90-degree gross rotation the principal
        # second moments swap axes while the centroid stays put
        n = 80
        grid = Grid2D(n, n, (0.5, 0.5))
        vals = np.zeros((n, n), dtype=np.int32)
        vals[20:60, 30:44] = 1   # vertical bar
        vals[46:60, 30:60] = 1   # foot
        mask = LabelMask2D(grid, vals)
        rgb = RgbImage2D(grid, np.repeat((vals * 200.0)[..., None], 3, axis=2))
        write_rgb_image(rgb, tmp_path / "h0.png")
        write_mask_image(mask, tmp_path / "h0_p.png")
        vol = ScalarVolume3D(np.zeros((3, n, n), dtype=np.float32) + 50.0, (0.5, 0.5, 3.0))
        mvol = ScalarVolume3D(np.tile(vals, (3, 1, 1)), (0.5, 0.5, 3.0))
        write_nifti(vol, tmp_path / "mri.nii.gz")
        write_nifti(mvol, tmp_path / "mask.nii.gz")
        doc = {"case_id": "rot", "mri": {"t2": "mri.nii.gz", "prostate_mask": "mask.nii.gz"},
               "histology": {"slices": [{"image": "h0.png", "prostate_mask": "h0_p.png",
                                         "mri_slice_index": 1, "rotation_deg": 90.0,
                                         "flip_lr": False, "pixel_spacing_mm": 0.5}]}}
        (tmp_path / "manifest.json").write_text(json.dumps(doc))
        prepared = preprocess(parse_manifest(tmp_path / "manifest.json"), quick_profile)

        def moments(m):
            rows, cols = np.nonzero(m.values > 0)
            xs, ys = m.grid.index_to_physical(cols, rows)
            return np.var(xs), np.var(ys), (xs.mean(), ys.mean())

        vx0, vy0, com0 = moments(mask)
        vx1, vy1, com1 = moments(prepared.slices[0].mask)
        assert com1 == pytest.approx(com0, abs=0.5)
        assert vx1 == pytest.approx(vy0, rel=0.05)
        assert vy1 == pytest.approx(vx0, rel=0.05)

    def test_missing_file_and_bad_index_errors(self, tmp_path, clean_case, quick_profile):
        manifest, _, _ = clean_case
        doc = json.loads((manifest.mri_t2.parent / "manifest.json").read_text())
        import shutil
        for p in manifest.mri_t2.parent.iterdir():
            if p.name != "manifest.json":
                shutil.copy(p, tmp_path / p.name)
        bad = dict(doc)
        bad["histology"] = {"slices": [dict(doc["histology"]["slices"][0], image="missing.png")]}
        (tmp_path / "m1.json").write_text(json.dumps(bad))
        with pytest.raises(FileNotFoundError, match="missing.png"):
            preprocess(parse_manifest(tmp_path / "m1.json"), quick_profile)

        bad2 = dict(doc)
        bad2["histology"] = {"slices": [dict(doc["histology"]["slices"][0], mri_slice_index=99)]}
        (tmp_path / "m2.json").write_text(json.dumps(bad2))
        with pytest.raises(IndexError, match="99"):
            preprocess(parse_manifest(tmp_path / "m2.json"), quick_profile)


class TestReconstruct:
    def test_single_slice_identity(self, clean_case, quick_profile):
        manifest, _, _ = clean_case
        prepared = preprocess(manifest, quick_profile)
        prepared.slices = prepared.slices[:1]
        prepared.mri_slices = prepared.mri_slices[:1]
        transforms = reconstruct_stack(prepared, quick_profile)
        assert len(transforms) == 1
        assert transforms[0].angle == 0.0 and transforms[0].translation == (0.0, 0.0)

    def test_identical_slices_near_identity(self, clean_case, quick_profile):
        manifest, _, _ = clean_case
        prepared = preprocess(manifest, quick_profile)
        middle = prepared.slices[1]
        prepared.slices = [middle] * 5
        prepared.mri_slices = [prepared.mri_slices[1]] * 5
        transforms = reconstruct_stack(prepared, quick_profile)
        for t in transforms:
            assert abs(t.angle) < np.deg2rad(0.2)
            assert np.hypot(*t.translation) < 0.2

    def test_recovers_one_rotated_slice(self, clean_case, quick_profile):
        manifest, _, _ = clean_case
        prepared = preprocess(manifest, quick_profile)
        base = prepared.slices[1]
        from radpath.image import center_of_mass
        com = center_of_mass(base.mask)
        rot = RigidTransform2D(np.deg2rad(-8.0), (0.0, 0.0), com)
        rotated_mask = resample_label(base.mask, base.mask.grid, rot)
        import dataclasses
        rotated = dataclasses.replace(base, mask=rotated_mask)
        prepared.slices = [base, base, base, rotated, base]
        prepared.mri_slices = [prepared.mri_slices[1]] * 5
        transforms = reconstruct_stack(prepared, quick_profile)
        # slice 3 should pick up about 8 degrees; the others stay near zero
        angles = [abs(np.rad2deg(t.angle)) for t in transforms]
        assert angles[3] == pytest.approx(8.0, abs=0.5)
        for k in (0, 1, 2, 4):
            assert angles[k] < 0.5


class TestMappingAndArtifacts:
    def test_full_case_artifacts_and_chain_reload(self, tmp_path, degraded_case, quick_profile):
        manifest, reference, _ = degraded_case
        out = tmp_path / "out"
        result, report = run_case(manifest, quick_profile, out_dir=out, reference=reference)
        assert report.dice > 0.98
        assert (out / "mapped_prostate.nii.gz").exists()
        assert (out / "registered_histology.nii.gz").exists()
        assert (out / "metrics.csv").exists()
        assert (out / "run_log.json").exists()

        # labels appear only on correspondence slices
        mapped = read_nifti(out / "mapped_prostate.nii.gz")
        indices = {r.mri_slice_index for r in manifest.slices}
        for k in range(mapped.n_slices):
            if k not in indices:
                assert not (mapped.values[k] > 0).any()

        # re-applying the serialized chains reproduces the mapped volumes
        prepared = preprocess(manifest, quick_profile)
        grid = prepared.native_slice_grid()
        for k, sl in enumerate(prepared.slices):
            chain = load_chain(out / "transforms" / f"slice_{k:02d}.json")
            remapped = resample_label(sl.mask, grid, chain)
            assert np.array_equal(remapped.values, mapped.values[sl.mri_slice_index])

    def test_identity_chain_matches_direct_resample(self, clean_case, quick_profile):
        manifest, _, _ = clean_case
        prepared = preprocess(manifest, quick_profile)
        from radpath.engine import SlicePairResult
        pairs = [SlicePairResult(rigid=RigidTransform2D()) for _ in prepared.slices]
        result = map_labels(prepared, None, pairs, quick_profile)
        grid = prepared.native_slice_grid()
        for sl in prepared.slices:
            direct = resample_label(sl.mask, grid)
            mapped = LabelMask2D(grid, result.mapped_prostate.values[sl.mri_slice_index])
            assert dice(direct, mapped) >= 0.999

    def test_cancer_blob_center_of_mass(self, degraded_case, quick_profile):
        manifest, reference, _ = degraded_case
        result, report = run_case(manifest, quick_profile, reference=reference)
        ref_cancer = reference["cancer_volume"]
        grid = result.mapped_cancer.slice_grid
        from radpath.image import center_of_mass
        for k in range(ref_cancer.n_slices):
            ref_slice = LabelMask2D(grid, ref_cancer.values[k])
            got_slice = LabelMask2D(grid, result.mapped_cancer.values[k])
            if not (ref_slice.values > 0).any() or not (got_slice.values > 0).any():
                continue
            dev = np.linalg.norm(np.array(center_of_mass(ref_slice)) -
                                 np.array(center_of_mass(got_slice)))
            assert dev < 0.4  # one native pixel

    def test_slice_order_independence(self, degraded_case, quick_profile):
        manifest, _, _ = degraded_case
        prepared = preprocess(manifest, quick_profile)
        recon = [RigidTransform2D() for _ in prepared.slices]
        pairs_fwd = register_case(prepared, recon, quick_profile)
        # process slices in reverse order by reversing, registering, undoing
        import copy
        prepared_rev = preprocess(manifest, quick_profile)
        prepared_rev.slices = list(reversed(prepared_rev.slices))
        prepared_rev.mri_slices = list(reversed(prepared_rev.mri_slices))
        pairs_rev = list(reversed(register_case(prepared_rev, list(reversed(recon)), quick_profile)))
        for a, b in zip(pairs_fwd, pairs_rev):
            assert a.stage_dice == b.stage_dice

    def test_landmark_mapping_against_reference(self, degraded_case, quick_profile):
        manifest, reference, _ = degraded_case
        result, report = run_case(manifest, quick_profile, reference=reference)
        assert report.landmark_dev_mm < 0.6
        assert report.urethra_dev_mm < 0.6
