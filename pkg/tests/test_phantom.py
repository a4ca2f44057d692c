"""Phantom generation tests: analytic volumes, determinism, dataset splits."""

import hashlib

import numpy as np
import pytest

from vesselkit.errors import DomainError
from vesselkit.phantom import (
    Curve,
    DatasetRanges,
    PhantomSpec,
    generate_dataset,
    generate_phantom,
    load_manifest,
    make_bifurcation,
    make_helix,
    make_line,
    point_to_segment_distance,
    rasterize_mask,
)
from vesselkit.volume import read_nifti


def straight_cylinder_spec(n=64, radius=2.0, **kw):
    c = (n - 1) / 2.0
    curve = make_line((c, c, 0.0), (c, c, float(n - 1)), radius)
    return PhantomSpec(dims=(n, n, n), curves=(curve,), **kw)


class TestGeneratePhantom:
    def test_cylinder_volume_within_3pct_of_analytic(self):
        spec = straight_cylinder_spec(n=64, radius=2.0, blur_sigma_mm=0.0, noise_std=0.0)
        _, truth = generate_phantom(spec)
        voxels = truth.data.sum()
        analytic = np.pi * 2.0**2 * 64.0  # pi r^2 L at 1 mm spacing
        assert abs(voxels - analytic) / analytic < 0.03

    def test_zero_blur_zero_noise_is_exact_blend(self):
        spec = straight_cylinder_spec(n=32, radius=2.5, blur_sigma_mm=0.0, noise_std=0.0)
        img, truth = generate_phantom(spec)
        expected = 0.8 * truth.data + 0.2 * (1.0 - truth.data)
        np.testing.assert_allclose(img.data, expected, atol=1e-7)

    def test_same_seed_identical(self):
        spec = straight_cylinder_spec(n=24, radius=2.0, seed=123)
        a_img, a_truth = generate_phantom(spec)
        b_img, b_truth = generate_phantom(spec)
        np.testing.assert_array_equal(a_img.data, b_img.data)
        np.testing.assert_array_equal(a_truth.data, b_truth.data)

    def test_mask_matches_bruteforce_point_distance(self):
        # vectorized rasterization vs scalar point-to-segment oracle
        rng = np.random.default_rng(0)
        curve = Curve(np.array([[4.0, 4.0, 2.0], [10.0, 12.0, 14.0], [14.0, 6.0, 10.0]]),
                      radius_start=2.0, radius_end=2.0)
        spec = PhantomSpec(dims=(18, 18, 18), curves=(curve,))
        mask = rasterize_mask(spec)
        pts = curve.points
        for _ in range(300):
            v = tuple(int(x) for x in rng.integers(0, 18, 3))
            d = min(
                point_to_segment_distance(np.array(v, dtype=float), pts[i], pts[i + 1])
                for i in range(len(pts) - 1)
            )
            if abs(d - 2.0) < 1e-9:
                continue  # boundary voxel: both answers defensible
            assert mask[v] == (d <= 2.0)

    def test_tapered_radius(self):
        n = 32
        c = (n - 1) / 2.0
        curve = make_line((c, c, 0.0), (c, c, float(n - 1)), 1.0, 4.0)
        spec = PhantomSpec(dims=(n, n, n), curves=(curve,))
        mask = rasterize_mask(spec)
        thin = mask[:, :, 2].sum()
        thick = mask[:, :, n - 3].sum()
        assert thick > 4 * thin

    def test_helix_and_bifurcation_build(self):
        helix = make_helix((16, 16, 16), axis_length=20.0, coil_radius=6.0, pitch=10.0,
                           tube_radius=1.5)
        assert len(helix.points) >= 32
        tree = make_bifurcation((4, 4, 4), (16, 16, 16), (26, 8, 26), (8, 26, 26), 2.0, 1.4)
        assert len(tree) == 3
        spec = PhantomSpec(dims=(32, 32, 32), curves=(helix, *tree))
        img, truth = generate_phantom(spec)
        assert truth.data.sum() > 0

    def test_out_of_bounds_curve_rejected(self):
        curve = make_line((0.0, 0.0, 0.0), (100.0, 0.0, 0.0), 2.0)
        with pytest.raises(DomainError):
            PhantomSpec(dims=(32, 32, 32), curves=(curve,))

    def test_oversized_radius_rejected(self):
        curve = make_line((8.0, 8.0, 2.0), (8.0, 8.0, 14.0), 8.0)
        with pytest.raises(DomainError):
            PhantomSpec(dims=(16, 16, 16), curves=(curve,))


class TestGenerateDataset:
    def test_split_proportions_and_content(self, tmp_path):
        manifest = generate_dataset(tmp_path / "ds", n_volumes=20, seed=7)
        splits = load_manifest(manifest)
        assert len(splits["train"]) == 16
        assert len(splits["val"]) == 2
        assert len(splits["test"]) == 2
        img, mask = splits["train"][0]
        vi = read_nifti(img)
        vm = read_nifti(mask)
        assert vi.dims == (48, 48, 48)
        assert vm.kind == "binary-mask"

    def test_foreground_sparsity(self, tmp_path):
        manifest = generate_dataset(tmp_path / "ds", n_volumes=12, seed=3)
        for split, pairs in load_manifest(manifest).items():
            for _, mask_path in pairs:
                frac = read_nifti(mask_path).data.mean()
                assert 0.0 < frac < 0.05

    def test_volumes_are_distinct(self, tmp_path):
        manifest = generate_dataset(tmp_path / "ds", n_volumes=10, seed=11)
        digests = set()
        for pairs in load_manifest(manifest).values():
            for img_path, _ in pairs:
                digests.add(hashlib.sha256(read_nifti(img_path).data.tobytes()).hexdigest())
        assert len(digests) == 10

    def test_reproducible_bytes(self, tmp_path):
        m1 = generate_dataset(tmp_path / "a", n_volumes=4, seed=5)
        m2 = generate_dataset(tmp_path / "b", n_volumes=4, seed=5)
        for pairs1, pairs2 in zip(load_manifest(m1).values(), load_manifest(m2).values()):
            for (i1, s1), (i2, s2) in zip(pairs1, pairs2):
                np.testing.assert_array_equal(read_nifti(i1).data, read_nifti(i2).data)
                np.testing.assert_array_equal(read_nifti(s1).data, read_nifti(s2).data)
