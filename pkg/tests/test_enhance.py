"""Vesselness enhancement tests: analytic fields, eigenvalue identities,
closed-form filter values, and multiscale properties."""

import math

import numpy as np
import pytest
from scipy.ndimage import correlate

from vesselkit.enhance import (
    FrangiParams,
    frangi_multiscale,
    gamma_correct,
    gaussian_derivatives,
    gaussian_kernel,
    sym3_eigenvalues,
    sym3_eigenvalues_field,
    vesselness_voxel,
)
from vesselkit.errors import DomainError, ScaleError
from vesselkit.volume import Volume3D


def make_volume(fn, n=24, spacing=(1.0, 1.0, 1.0)):
    idx = np.indices((n, n, n)).astype(np.float64)
    return Volume3D(fn(idx[0], idx[1], idx[2]).astype(np.float32), spacing)


def interior(arr, margin):
    return arr[margin:-margin, margin:-margin, margin:-margin]


class TestGaussianKernels:
    @pytest.mark.parametrize("sigma", [0.4, 0.5, 0.8, 1.0, 2.0, 3.5])
    def test_discrete_moments(self, sigma):
        k0 = gaussian_kernel(sigma, 0)
        k1 = gaussian_kernel(sigma, 1)
        k2 = gaussian_kernel(sigma, 2)
        t = np.arange(-(len(k0) // 2), len(k0) // 2 + 1, dtype=np.float64)
        assert k0.sum() == pytest.approx(1.0, abs=1e-12)
        assert (t * k1).sum() == pytest.approx(1.0, abs=1e-12)
        assert k1.sum() == pytest.approx(0.0, abs=1e-12)
        assert k2.sum() == pytest.approx(0.0, abs=1e-12)
        assert (t * t * k2).sum() == pytest.approx(2.0, abs=1e-12)

    def test_degenerate_scale_rejected(self):
        with pytest.raises(ScaleError):
            gaussian_kernel(0.1, 2)
        with pytest.raises(ScaleError):
            gaussian_kernel(-1.0, 0)


class TestGaussianDerivatives:
    def test_quadratic_ramp_xx(self):
        # d2/dx2 of x^2 is 2; scale-normalized response is 2 sigma^2
        sigma = 1.5
        v = make_volume(lambda x, y, z: x * x)
        h = gaussian_derivatives(v, sigma)
        m = math.ceil(3 * sigma) + 1
        np.testing.assert_allclose(interior(h.hxx, m), 2 * sigma**2, rtol=1e-3)
        for comp in (h.hyy, h.hzz, h.hxy, h.hxz, h.hyz):
            np.testing.assert_allclose(interior(comp, m), 0.0, atol=1e-6 * sigma**2)

    def test_quadratic_each_axis(self):
        sigma = 1.0
        for axis, comp_name in [(0, "hxx"), (1, "hyy"), (2, "hzz")]:
            v = make_volume(lambda x, y, z, a=axis: (x, y, z)[a] ** 2)
            h = gaussian_derivatives(v, sigma)
            m = math.ceil(3 * sigma) + 1
            np.testing.assert_allclose(
                interior(getattr(h, comp_name), m), 2 * sigma**2, rtol=1e-3
            )

    def test_constant_volume_zero(self):
        v = Volume3D(np.full((16, 16, 16), 7.0, dtype=np.float32))
        h = gaussian_derivatives(v, 1.0)
        for comp in h.components():
            np.testing.assert_allclose(comp, 0.0, atol=1e-6)

    def test_bilinear_xy(self):
        sigma = 1.2
        v = make_volume(lambda x, y, z: x * y)
        h = gaussian_derivatives(v, sigma)
        m = math.ceil(3 * sigma) + 1
        np.testing.assert_allclose(interior(h.hxy, m), sigma**2, rtol=1e-3)
        for comp in (h.hxx, h.hyy, h.hzz, h.hxz, h.hyz):
            np.testing.assert_allclose(interior(comp, m), 0.0, atol=1e-5 * sigma**2)

    def test_matches_direct_3d_convolution(self):
        # oracle: full 3D kernel correlation, no separability
        rng = np.random.default_rng(0)
        v = Volume3D(rng.normal(size=(12, 12, 12)).astype(np.float32))
        sigma = 1.0
        h = gaussian_derivatives(v, sigma)
        data = v.data.astype(np.float64)
        for comp, orders in [
            (h.hxx, (2, 0, 0)),
            (h.hxy, (1, 1, 0)),
            (h.hyz, (0, 1, 1)),
            (h.hzz, (0, 0, 2)),
        ]:
            kx = gaussian_kernel(sigma, orders[0])
            ky = gaussian_kernel(sigma, orders[1])
            kz = gaussian_kernel(sigma, orders[2])
            full = np.einsum("i,j,k->ijk", kx, ky, kz)
            ref = correlate(data, full, mode="reflect") * sigma**2
            np.testing.assert_allclose(comp, ref, rtol=1e-10, atol=1e-10)

    def test_anisotropic_spacing(self):
        # physical curvature of (x * sx)^2 along x is 2 regardless of grid
        sigma = 1.6
        sx = 2.0
        v = make_volume(lambda x, y, z: (x * sx) ** 2, spacing=(sx, 1.0, 1.0))
        h = gaussian_derivatives(v, sigma)
        m = math.ceil(3 * sigma) + 1
        np.testing.assert_allclose(interior(h.hxx, m), 2 * sigma**2, rtol=1e-3)

    def test_tiny_sigma_on_coarse_axis_rejected(self):
        v = Volume3D(np.zeros((8, 8, 8), dtype=np.float32), spacing=(4.0, 1.0, 1.0))
        with pytest.raises(ScaleError):
            gaussian_derivatives(v, 0.5)  # 0.125 voxels on the x axis


class TestSym3Eigenvalues:
    def test_diagonal(self):
        assert sym3_eigenvalues(np.diag([2.0, 4.0, 6.0])) == pytest.approx((2, 4, 6))

    def test_tube_signature_tie_break(self):
        lams = sym3_eigenvalues(np.diag([0.0, -3.0, -3.0]))
        assert lams == pytest.approx((0.0, -3.0, -3.0))

    def test_magnitude_tie_prefers_negative(self):
        lams = sym3_eigenvalues(np.diag([3.0, -3.0, 0.0]))
        assert lams == pytest.approx((0.0, -3.0, 3.0))

    def test_rejects_nonfinite(self):
        m = np.eye(3)
        m[0, 1] = m[1, 0] = np.nan
        with pytest.raises(DomainError):
            sym3_eigenvalues(m)

    def test_against_cubic_root_oracle(self):
        # characteristic-polynomial roots via numpy.roots, 1000 matrices
        rng = np.random.default_rng(42)
        for _ in range(1000):
            m = rng.normal(size=(3, 3))
            m = (m + m.T) / 2.0
            lams = np.array(sym3_eigenvalues(m))
            tr = np.trace(m)
            minors = (
                m[0, 0] * m[1, 1] - m[0, 1] ** 2
                + m[0, 0] * m[2, 2] - m[0, 2] ** 2
                + m[1, 1] * m[2, 2] - m[1, 2] ** 2
            )
            det = np.linalg.det(m)
            roots = np.roots([-1.0, tr, -minors, det]).real
            np.testing.assert_allclose(np.sort(lams), np.sort(roots), rtol=1e-8, atol=1e-8)

    def test_trace_and_determinant_identities(self):
        rng = np.random.default_rng(7)
        n = 2000
        m = rng.normal(size=(n, 3, 3))
        m = (m + np.swapaxes(m, 1, 2)) / 2.0
        eigs = sym3_eigenvalues_field(
            m[:, 0, 0], m[:, 1, 1], m[:, 2, 2], m[:, 0, 1], m[:, 0, 2], m[:, 1, 2]
        )
        tr = np.trace(m, axis1=1, axis2=2)
        det = np.linalg.det(m)
        np.testing.assert_allclose(eigs.sum(axis=-1), tr, rtol=1e-8, atol=1e-10)
        np.testing.assert_allclose(eigs.prod(axis=-1), det, rtol=1e-8, atol=1e-10)

    def test_residual_bound(self):
        rng = np.random.default_rng(3)
        for _ in range(200):
            m = rng.normal(size=(3, 3)) * rng.choice([0.01, 1.0, 100.0])
            m = (m + m.T) / 2.0
            fro = np.linalg.norm(m)
            for lam in sym3_eigenvalues(m):
                res = abs(np.linalg.det(m - lam * np.eye(3)))
                assert res <= 1e-6 * (1.0 + fro**3)


class TestVesselnessVoxel:
    PARAMS = FrangiParams(scales=(1.0,), alpha=0.5, beta=0.5)

    def test_zero_eigenvalues_scores_zero(self):
        assert vesselness_voxel((0.0, 0.0, 0.0), self.PARAMS, c=2.0) == 0.0

    def test_tube_closed_form(self):
        # oracle: direct evaluation of the closed form (frozen via mpmath)
        expected = (1 - math.exp(-2.0)) * 1.0 * (1 - math.exp(-18.0 / 8.0))
        assert expected == pytest.approx(0.773529726111, abs=1e-9)
        got = vesselness_voxel((0.0, -3.0, -3.0), self.PARAMS, c=2.0)
        assert got == pytest.approx(expected, abs=1e-12)

    def test_blob_scores_below_tube(self):
        blob = vesselness_voxel((-3.0, -3.0, -3.0), self.PARAMS, c=2.0)
        tube = vesselness_voxel((0.0, -3.0, -3.0), self.PARAMS, c=2.0)
        expected_blob = (1 - math.exp(-2.0)) * math.exp(-2.0) * (1 - math.exp(-27.0 / 8.0))
        assert blob == pytest.approx(expected_blob, abs=1e-12)
        assert blob == pytest.approx(0.113015452313, abs=1e-9)
        assert blob < tube

    def test_polarity_gate(self):
        assert vesselness_voxel((0.0, -1.0, 3.0), self.PARAMS, c=2.0) == 0.0
        assert vesselness_voxel((0.0, 1.0, 3.0), self.PARAMS, c=2.0) == 0.0
        dark = FrangiParams(scales=(1.0,), polarity="dark-on-bright")
        assert vesselness_voxel((0.0, 1.0, 3.0), dark, c=2.0) > 0.0

    def test_range(self):
        rng = np.random.default_rng(1)
        for _ in range(500):
            lams = np.sort(rng.normal(scale=5.0, size=3))
            lams = lams[np.argsort(np.abs(lams), kind="stable")]
            v = vesselness_voxel(tuple(lams), self.PARAMS, c=2.0)
            assert 0.0 <= v <= 1.0


def cylinder_volume(n=40, radius=2.0, axis=0, smooth=1.0):
    """Axis-aligned cylinder of given voxel radius through the volume center."""
    idx = np.indices((n, n, n)).astype(np.float64)
    planes = [idx[a] for a in range(3) if a != axis]
    center = (n - 1) / 2.0
    d2 = (planes[0] - center) ** 2 + (planes[1] - center) ** 2
    data = (d2 <= radius * radius).astype(np.float64)
    if smooth:
        from scipy.ndimage import gaussian_filter

        data = gaussian_filter(data, smooth)
    return Volume3D(data.astype(np.float32))


class TestFrangiMultiscale:
    def test_constant_volume_all_zero(self):
        v = Volume3D(np.full((16, 16, 16), 2.5, dtype=np.float32))
        out = frangi_multiscale(v, FrangiParams(scales=(1.0, 2.0)))
        assert out.kind == "probability"
        np.testing.assert_array_equal(out.data, 0.0)

    def test_cylinder_centerline_contrast(self):
        v = cylinder_volume(n=40, radius=2.0, axis=2)
        out = frangi_multiscale(v, FrangiParams(scales=(1.0, 1.5, 2.0)))
        center = (v.dims[0] - 1) // 2
        line = out.data[center, center, 6:-6]
        idx = np.indices(v.dims)
        d2 = (idx[0] - (v.dims[0] - 1) / 2.0) ** 2 + (idx[1] - (v.dims[1] - 1) / 2.0) ** 2
        bg = out.data[d2 > 8.0**2]
        assert line.mean() > 10.0 * max(bg.mean(), 1e-12)

    def test_single_scale_equals_singleton_max(self):
        v = cylinder_volume(n=24, radius=2.0)
        a = frangi_multiscale(v, FrangiParams(scales=(1.5,)))
        b = frangi_multiscale(v, FrangiParams(scales=(1.5,)))
        np.testing.assert_array_equal(a.data, b.data)

    def test_output_in_unit_interval(self):
        rng = np.random.default_rng(5)
        v = Volume3D(rng.normal(size=(20, 20, 20)).astype(np.float32))
        out = frangi_multiscale(v, FrangiParams(scales=(0.8, 1.3)))
        assert out.data.min() >= 0.0 and out.data.max() <= 1.0

    def test_adding_scale_never_decreases(self):
        v = cylinder_volume(n=24, radius=2.0)
        one = frangi_multiscale(v, FrangiParams(scales=(1.0,), c=3.0))
        two = frangi_multiscale(v, FrangiParams(scales=(1.0, 2.0), c=3.0))
        assert (two.data >= one.data - 1e-7).all()

    def test_intensity_shift_invariance(self):
        rng = np.random.default_rng(9)
        base = rng.normal(size=(18, 18, 18)).astype(np.float32)
        a = frangi_multiscale(Volume3D(base), FrangiParams(scales=(1.0, 1.5)))
        b = frangi_multiscale(Volume3D(base + 100.0), FrangiParams(scales=(1.0, 1.5)))
        np.testing.assert_allclose(a.data, b.data, atol=1e-5)

    def test_rotation_equivariance_isotropic(self):
        rng = np.random.default_rng(17)
        base = Volume3D(rng.normal(size=(16, 16, 16)).astype(np.float32))
        params = FrangiParams(scales=(1.0, 1.5))
        out = frangi_multiscale(base, params)
        for axes in [(0, 1), (0, 2), (1, 2)]:
            rot_in = Volume3D(np.ascontiguousarray(np.rot90(base.data, k=1, axes=axes)))
            rot_out = frangi_multiscale(rot_in, params)
            np.testing.assert_array_equal(rot_out.data, np.rot90(out.data, k=1, axes=axes))

    def test_rejects_probability_volume(self):
        v = Volume3D(np.full((8, 8, 8), 0.5, dtype=np.float32), kind="probability")
        with pytest.raises(DomainError):
            frangi_multiscale(v)


class TestFrangiParams:
    def test_validation(self):
        with pytest.raises(DomainError):
            FrangiParams(scales=())
        with pytest.raises(DomainError):
            FrangiParams(scales=(1.0, 1.0))
        with pytest.raises(DomainError):
            FrangiParams(scales=(2.0, 1.0))
        with pytest.raises(DomainError):
            FrangiParams(alpha=0.0)
        with pytest.raises(DomainError):
            FrangiParams(c=-1.0)
        with pytest.raises(DomainError):
            FrangiParams(polarity="sideways")


class TestGammaCorrect:
    def test_identity_at_one(self):
        rng = np.random.default_rng(2)
        v = Volume3D(rng.random((6, 6, 6)).astype(np.float32))
        out = gamma_correct(v, 1.0)
        np.testing.assert_allclose(out.data, v.data, atol=1e-7)

    def test_analytic_value(self):
        v = Volume3D(np.full((2, 2, 2), 0.25, dtype=np.float32))
        assert gamma_correct(v, 0.5).data[0, 0, 0] == pytest.approx(0.5, abs=1e-7)

    def test_monotonic_over_ramp(self):
        ramp = np.linspace(0, 1, 64, dtype=np.float32).reshape(4, 4, 4)
        for gamma in (0.4, 1.0, 2.2):
            out = gamma_correct(Volume3D(ramp), gamma).data.reshape(-1)
            assert (np.diff(out) > 0).all()

    def test_domain_check(self):
        v = Volume3D(np.full((2, 2, 2), 1.5, dtype=np.float32))
        with pytest.raises(DomainError):
            gamma_correct(v, 2.0)
        with pytest.raises(DomainError):
            gamma_correct(Volume3D(np.zeros((2, 2, 2), dtype=np.float32)), 0.0)
