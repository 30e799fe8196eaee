"""Phantom generation, degradations and the study harness."""

import numpy as np
import pytest

from radpath.engine import STANDARD
from radpath.image import center_of_mass
from radpath.phantom import (MRI_INTENSITIES, PATH_RGB, DegradationSpec,
                             PhantomGeometry, apply_degradations,
                             build_phantom_case, persist_case, load_reference,
                             render_mri_phantom, render_path_phantom, run_study,
                             synthesize_regions, write_study_tables,
                             LABEL_CANCER, LABEL_PROSTATE, LABEL_URETHRA)


@pytest.fixture(scope="module")
def geometry(small_geometry):
    return small_geometry


@pytest.fixture(scope="module")
def regions(geometry):
    return synthesize_regions(geometry)


class TestSynthesizeRegions:
    def test_sphere_volume_matches_analytic(self):
        geom = PhantomGeometry(size_px=(128, 128, 110), spacing=(0.4, 0.4, 0.4),
                               prostate_axes=(20.0, 20.0, 20.0), bump_axes=None,
                               cancer_center=None, slice_indices=(55,))
        regions = synthesize_regions(geom)
        count = int((regions.values > 0).sum())
        expected = 4.0 / 3.0 * np.pi * 50.0 ** 3  # radius 50 voxels
        assert abs(count - expected) / expected < 0.01

    def test_cancer_inside_prostate(self, regions):
        cancer = regions.values == LABEL_CANCER
        assert cancer.any()
        prostate_support = regions.values > 0
        assert np.all(prostate_support[cancer])

    def test_no_cancer_when_disabled(self, geometry):
        geom = PhantomGeometry(**{**vars(geometry), "cancer_center": None})
        regions = synthesize_regions(geom)
        assert not (regions.values == LABEL_CANCER).any()

    def test_urethra_and_pz_present(self, regions):
        assert (regions.values == LABEL_URETHRA).any()
        assert (regions.values == 2).any()

    def test_degenerate_geometry_rejected(self):
        with pytest.raises(ValueError):
            PhantomGeometry(prostate_axes=(0.0, 18.0, 20.0))


class TestRenderMri:
    def test_zero_noise_piecewise_constant(self, regions):
        vol = render_mri_phantom(regions, MRI_INTENSITIES, 0.0, seed=0)
        for label, mean in MRI_INTENSITIES.items():
            sel = regions.values == label
            if sel.any():
                assert np.all(vol.values[sel] == mean)

    def test_noise_statistics(self):
        # the default-size gland gives a region comfortably over 1e4 voxels
        regions = synthesize_regions(PhantomGeometry())
        vol = render_mri_phantom(regions, MRI_INTENSITIES, 5.0, seed=1)
        sel = regions.values == LABEL_PROSTATE
        assert sel.sum() >= 10_000
        sd = vol.values[sel].std()
        assert abs(sd - 5.0) / 5.0 < 0.05

    def test_seed_determinism(self, regions):
        a = render_mri_phantom(regions, MRI_INTENSITIES, 3.0, seed=7)
        b = render_mri_phantom(regions, MRI_INTENSITIES, 3.0, seed=7)
        assert np.array_equal(a.values, b.values)

    def test_missing_table_entry(self, regions):
        with pytest.raises(KeyError):
            render_mri_phantom(regions, {0: 10.0}, 0.0, seed=0)


class TestRenderPath:
    def test_offset_zero_matches_mri_masks(self, geometry, regions):
        slides = render_path_phantom(geometry, PATH_RGB, 0.0, seed=2)
        for i, idx in enumerate(slides.indices):
            mri_mask = regions.values[idx] > 0
            assert np.array_equal(slides.prostate_masks[i].values > 0, mri_mask)

    def test_offset_changes_boundary_but_midgland_overlaps(self, geometry):
        from radpath.evaluation import dice
        plain = render_path_phantom(geometry, PATH_RGB, 0.0, seed=3)
        offset = render_path_phantom(geometry, PATH_RGB, 0.0, seed=3, slice_offset_mm=2.0)
        mid = len(plain.indices) // 2
        d = dice(plain.prostate_masks[mid], offset.prostate_masks[mid])
        assert d < 1.0
        assert d > 0.9

    def test_zero_noise_piecewise_constant_rgb(self, geometry):
        slides = render_path_phantom(geometry, PATH_RGB, 0.0, seed=4)
        img = slides.images[0].values
        colors = {tuple(c) for c in img.reshape(-1, 3)}
        assert colors <= {tuple(map(float, v)) for v in PATH_RGB.values()}

    def test_offset_drops_out_of_volume_slices(self, geometry):
        slides = render_path_phantom(geometry, PATH_RGB, 0.0, seed=5,
                                     slice_offset_mm=20.0)
        assert len(slides.warnings) >= 1
        assert len(slides.indices) < len(geometry.slice_indices)
        with pytest.raises(ValueError):
            render_path_phantom(geometry, PATH_RGB, 0.0, seed=5, slice_offset_mm=500.0)


class TestDegradations:
    def test_identity_when_clean(self, geometry):
        slides = render_path_phantom(geometry, PATH_RGB, 0.0, seed=6)
        degraded, chain = apply_degradations(slides, DegradationSpec(seed=0))
        for a, b in zip(slides.images, degraded.images):
            assert np.allclose(a.values, b.values)
        for t in chain:
            assert np.allclose(t.matrix, np.eye(2))
            assert t.translation == (0.0, 0.0)

    def test_shrink_area_ratio(self, geometry):
        slides = render_path_phantom(geometry, PATH_RGB, 0.0, seed=7)
        degraded, _ = apply_degradations(slides, DegradationSpec(shrink=0.2, seed=1))
        for a, b in zip(slides.prostate_masks, degraded.prostate_masks):
            ratio = (b.values > 0).sum() / (a.values > 0).sum()
            assert ratio == pytest.approx(0.64, abs=0.01)

    def test_seeded_angles_reproducible(self, geometry):
        slides = render_path_phantom(geometry, PATH_RGB, 0.0, seed=8)
        _, chain1 = apply_degradations(slides, DegradationSpec(rotation_deg=15, seed=42))
        _, chain2 = apply_degradations(slides, DegradationSpec(rotation_deg=15, seed=42))
        for t1, t2 in zip(chain1, chain2):
            assert np.array_equal(t1.matrix, t2.matrix)
            assert t1.translation == t2.translation

    def test_no_translation_without_shrink(self, geometry):
        slides = render_path_phantom(geometry, PATH_RGB, 0.0, seed=9)
        _, chain = apply_degradations(slides, DegradationSpec(rotation_deg=20, seed=3))
        assert all(t.translation == (0.0, 0.0) for t in chain)

    def test_shrink_keeps_centroid(self):
        geom = PhantomGeometry()
        slides = render_path_phantom(geom, PATH_RGB, 0.0, seed=10)
        degraded, _ = apply_degradations(slides, DegradationSpec(
            shrink=0.15, translation_bound=0.0, seed=4))
        for a, b in zip(slides.prostate_masks, degraded.prostate_masks):
            ca = np.array(center_of_mass(a))
            cb = np.array(center_of_mass(b))
            assert np.linalg.norm(ca - cb) < 0.1 * a.grid.spacing[0]

    def test_landmarks_move_with_slides(self, geometry):
        slides = render_path_phantom(geometry, PATH_RGB, 0.0, seed=11)
        degraded, chain = apply_degradations(slides, DegradationSpec(
            rotation_deg=12, shrink=0.1, seed=5))
        for lm_in, lm_out, t in zip(slides.landmarks, degraded.landmarks, chain):
            if len(lm_in):
                assert np.allclose(lm_out.points, t.apply(lm_in.points))

    def test_warp_amplitude_produces_nonaffine_truth(self, geometry):
        from radpath.transforms import CompositeTransform2D
        slides = render_path_phantom(geometry, PATH_RGB, 0.0, seed=12)
        _, chain = apply_degradations(slides, DegradationSpec(warp_amplitude_mm=1.0, seed=6))
        assert all(isinstance(t, CompositeTransform2D) for t in chain)


class TestCaseAndStudy:
    def test_case_determinism_end_to_end(self, geometry):
        spec = DegradationSpec(rotation_deg=10, shrink=0.05, seed=99)
        a = build_phantom_case(geometry, spec)
        b = build_phantom_case(geometry, spec)
        assert np.array_equal(a.mri.values, b.mri.values)
        for ia, ib in zip(a.slides.images, b.slides.images):
            assert np.array_equal(ia.values, ib.values)
        for ta, tb in zip(a.true_transforms, b.true_transforms):
            assert np.array_equal(ta.apply([(1.0, 2.0)]), tb.apply([(1.0, 2.0)]))

    def test_persist_and_reference_round_trip(self, tmp_path, geometry):
        spec = DegradationSpec(rotation_deg=5, seed=13)
        case = build_phantom_case(geometry, spec)
        manifest_path, reference_path = persist_case(case, tmp_path)
        assert manifest_path.exists() and reference_path.exists()
        ref = load_reference(reference_path)
        assert set(ref["landmarks"]) == set(case.slides.indices)
        assert "prostate_volume" in ref and "urethra_volume" in ref
        for idx in case.slides.indices:
            assert "angle_deg" in ref["induced"][idx]

    def test_study_counts_and_aggregation(self, tmp_path, geometry, quick_profile):
        profile = quick_profile.replace(gd_iterations=30, lbfgsb_iterations=2)
        results = run_study(geometry, rotations=[0, 10, 20], shrinks=[0.0],
                            offsets=[0.0], reps=2, profile=profile,
                            out_dir=tmp_path, noise_sigma=2.0, base_seed=1)
        assert len(results) == 3
        assert all(len(cond.reports) + cond.failures == 2 for _, cond in results)

        import csv
        with open(tmp_path / "study_long.csv") as fh:
            long_rows = list(csv.DictReader(fh))
        with open(tmp_path / "study_summary.csv") as fh:
            summary_rows = list(csv.DictReader(fh))
        # summary mean equals the arithmetic mean of the long rows
        for row in summary_rows:
            vals = [float(r["value"]) for r in long_rows
                    if r["condition"] == row["condition"] and r["metric"] == row["metric"]]
            assert float(row["mean"]) == pytest.approx(np.mean(vals), abs=1e-12)
        conditions = {r["condition"] for r in summary_rows}
        assert len(conditions) == 3

    def test_study_rejects_empty_grid(self, geometry, quick_profile):
        with pytest.raises(ValueError):
            run_study(geometry, rotations=[], shrinks=[0.0], offsets=[0.0],
                      reps=1, profile=quick_profile)

    def test_spec_validation(self):
        with pytest.raises(ValueError):
            DegradationSpec(shrink=1.5)
        with pytest.raises(ValueError):
            DegradationSpec(rotation_deg=-1)
        with pytest.raises(ValueError):
            DegradationSpec(translation_bound=0.5)
