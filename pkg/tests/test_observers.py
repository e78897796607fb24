import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from obslab import phantoms as ph
from obslab.evalkit import ScoreSet, auc
from obslab.observers import (ConvergenceError, CovarianceOracle, analytic_laplacian_ho_template,
                              centered, conjugate_gradient, gaussian_bke_log_lr,
                              laplacian_io_log_lr, linear_test_statistic, snr_ho_squared,
                              solve_ho_template_cg, woodbury_ho_template)

C = 30 / np.sqrt(2)
SIGNAL = ph.render_ske_signal(ph.SkeSignalSpec(), ph.GaussianKernelSpec(), ph.PixelGrid())


class TestLaplacianIO:
    def test_zero_signal(self):
        g = np.random.default_rng(0).normal(size=(4, 4))
        assert laplacian_io_log_lr(g, np.zeros((4, 4)), np.zeros((4, 4)), C) == 0.0

    def test_one_pixel(self):
        val = laplacian_io_log_lr(np.array([10.0]), np.array([0.0]), np.array([5.0]), C)
        assert val == pytest.approx(5 / C)
        assert val == pytest.approx(0.23570, abs=1e-5)

    @given(st.integers(0, 2 ** 32 - 1), st.floats(-1e3, 1e3))
    @settings(max_examples=30, deadline=None)
    def test_bounded_and_shift_invariant(self, seed, shift):
        rng = np.random.default_rng(seed)
        g = rng.normal(0, 50, size=(6, 6))
        b = rng.uniform(0, 20, size=(6, 6))
        s = rng.uniform(0, 10, size=(6, 6))
        v = laplacian_io_log_lr(g, b, s, C)
        bound = np.abs(s).sum() / C
        assert -bound - 1e-12 <= v <= bound + 1e-12
        assert laplacian_io_log_lr(g + shift, b + shift, s, C) == pytest.approx(v, abs=1e-9 * max(1, abs(shift)))

    def test_batch_matches_loop(self):
        g = np.random.default_rng(1).normal(0, 30, size=(5, 8, 8))
        s = np.ones((8, 8))
        out = laplacian_io_log_lr(g, np.zeros((8, 8)), s, C)
        np.testing.assert_allclose(out, [laplacian_io_log_lr(x, np.zeros((8, 8)), s, C) for x in g])

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            laplacian_io_log_lr(np.zeros(4), np.zeros(5), np.zeros(5), C)


class TestGaussianBke:
    def test_one_pixel(self):
        assert gaussian_bke_log_lr(np.array([3.0]), np.array([0.0]), np.array([2.0]), 1.0) == pytest.approx(4.0)

    def test_zero_signal(self):
        assert gaussian_bke_log_lr(np.ones(3), np.zeros(3), np.zeros(3), 2.0) == 0.0

    def test_antisymmetry(self):
        rng = np.random.default_rng(2)
        b, s = rng.normal(size=9), rng.normal(size=9)
        half = 0.5 * s @ s / 4.0
        assert gaussian_bke_log_lr(b + s, b, s, 2.0) == pytest.approx(half)
        assert gaussian_bke_log_lr(b, b, s, 2.0) == pytest.approx(-half)


class TestAnalyticHO:
    def test_template_peak(self):
        w = analytic_laplacian_ho_template(SIGNAL, C)
        assert w.max() == pytest.approx(7.78378 / 900, rel=1e-5)
        assert w.max() == pytest.approx(8.6487e-3, rel=1e-4)

    def test_zero_signal(self):
        assert not analytic_laplacian_ho_template(np.zeros(4), C).any()

    def test_snr(self):
        w = analytic_laplacian_ho_template(SIGNAL, C)
        assert snr_ho_squared(w, SIGNAL) == pytest.approx(np.sum(SIGNAL ** 2) / 900, rel=1e-12)
        assert snr_ho_squared(w, SIGNAL) == pytest.approx(1.95628, abs=1e-5)
        assert snr_ho_squared(w, np.zeros_like(SIGNAL)) == 0.0


class TestLinearStatistic:
    def test_zero_and_unit_templates(self):
        g = np.random.default_rng(3).normal(size=(7, 4, 4))
        assert not linear_test_statistic(np.zeros((4, 4)), g).any()
        e = np.zeros((4, 4))
        e[2, 1] = 1
        np.testing.assert_array_equal(linear_test_statistic(e, g), g[:, 2, 1])

    def test_auc_invariant_to_scaling(self):
        rng = np.random.default_rng(4)
        g = rng.normal(size=(40, 3, 3)) + np.repeat([0, 1], 20)[:, None, None] * 0.3
        w = rng.normal(size=(3, 3))
        labels = np.repeat([0, 1], 20)
        a = auc(ScoreSet.from_labels(linear_test_statistic(w, g), labels))
        b = auc(ScoreSet.from_labels(linear_test_statistic(7.5 * w, g), labels))
        assert a == b


def _toy(m=9, n=2, seed=0):
    rng = np.random.default_rng(seed)
    bg = rng.normal(size=(n, m))
    noise = rng.uniform(0.5, 2.0, size=m)
    d = rng.normal(size=m)
    return bg, noise, d


class TestHotellingSolvers:
    def test_cg_scalar_system(self):
        oracle = CovarianceOracle(np.zeros((0, 64, 64)), np.full((64, 64), 900.0))
        w = solve_ho_template_cg(oracle, SIGNAL)
        np.testing.assert_allclose(w, analytic_laplacian_ho_template(SIGNAL, C), rtol=1e-10)

    def test_cg_matches_dense_on_3x3(self):
        bg = np.array([[1.0, 0, 2, 0, 1, 0, 0, 3, 1], [0.0, 1, 0, 2, 0, 1, 1, 0, 2]])
        noise = np.ones(9)
        d = np.arange(9.0)
        oracle = CovarianceOracle.from_samples(bg, noise)
        dev = bg - bg.mean(axis=0)
        k = np.eye(9) + dev.T @ dev / 2
        w = solve_ho_template_cg(oracle, d)
        np.testing.assert_allclose(w, np.linalg.solve(k, d), rtol=1e-10, atol=1e-12)

    def test_cg_residual_postcondition(self):
        rng = np.random.default_rng(5)
        grid = ph.PixelGrid(64, 64)
        bgs = np.stack([ph.render_lumpy(ph.sample_lumpy(rng, ph.LumpyModel(), grid)) for _ in range(300)])
        oracle = CovarianceOracle.from_samples(bgs, np.full(grid.shape, 400.0))
        w = solve_ho_template_cg(oracle, SIGNAL, tol=1e-8)
        res = np.linalg.norm(oracle.apply(w) - SIGNAL.ravel()) / np.linalg.norm(SIGNAL)
        assert res <= 1e-8

    def test_cg_reports_nonconvergence(self):
        bg, noise, d = _toy(m=30, n=10)
        oracle = CovarianceOracle.from_samples(bg, noise)
        with pytest.raises(ConvergenceError) as info:
            conjugate_gradient(oracle.apply, d, tol=1e-14, max_iters=2)
        assert info.value.residual > 1e-14
        assert info.value.iterate.shape == (30,)

    def test_woodbury_zero_deviation(self):
        noise = np.array([1.0, 2.0, 4.0])
        d = np.array([1.0, 1.0, 1.0])
        w = woodbury_ho_template(np.zeros((3, 3)), noise, d)
        np.testing.assert_allclose(w, d / noise)

    def test_woodbury_sherman_morrison(self):
        d = np.array([2.0, 3.0, 5.0])
        e1 = np.array([[1.0, 0.0, 0.0]])
        w = woodbury_ho_template(e1, np.ones(3), d)
        np.testing.assert_allclose(w, [1.0, 3.0, 5.0])

    def test_woodbury_matches_cg_16x16(self):
        rng = np.random.default_rng(6)
        grid = ph.PixelGrid(16, 16)
        bgs = np.stack([ph.render_lumpy(ph.sample_lumpy(rng, ph.LumpyModel(mean_count=3), grid),
                                        grid=grid) for _ in range(50)])
        s = ph.render_ske_signal(ph.SkeSignalSpec(0.2, (8, 8), 3.0), grid=grid)
        noise = np.full(grid.shape, 400.0)
        wc = solve_ho_template_cg(CovarianceOracle.from_samples(bgs, noise), s, tol=1e-12)
        ww = woodbury_ho_template(centered(bgs), noise, s)
        np.testing.assert_allclose(ww, wc, rtol=1e-6, atol=1e-6 * np.abs(wc).max())

    @given(st.integers(0, 2 ** 32 - 1), st.integers(1, 12), st.booleans())
    @settings(max_examples=30, deadline=None)
    def test_three_solvers_agree(self, seed, n, with_signal):
        bg, noise, d = _toy(m=16, n=n, seed=seed)
        sig = np.random.default_rng(seed + 1).normal(size=(4, 16)) if with_signal else None
        oracle = CovarianceOracle.from_samples(bg, noise, sig)
        dense = np.linalg.solve(oracle.matrix(), d)
        cg = solve_ho_template_cg(oracle, d, tol=1e-12)
        wb = woodbury_ho_template(centered(bg), noise, d, None if sig is None else centered(sig))
        scale = np.abs(dense).max()
        np.testing.assert_allclose(cg, dense, rtol=1e-6, atol=1e-6 * scale)
        np.testing.assert_allclose(wb, dense, rtol=1e-6, atol=1e-6 * scale)

    @given(st.integers(0, 2 ** 32 - 1))
    @settings(max_examples=20, deadline=None)
    def test_hotelling_maximises_snr(self, seed):
        bg, noise, d = _toy(m=12, n=5, seed=seed)
        oracle = CovarianceOracle.from_samples(bg, noise)
        w = solve_ho_template_cg(oracle, d, tol=1e-12)

        def snr2(v):
            return (v @ d) ** 2 / oracle.quadratic(v)
        best = snr2(w)
        assert best == pytest.approx(snr_ho_squared(w, d), rel=1e-8)
        rng = np.random.default_rng(seed)
        for _ in range(200):
            assert snr2(w + rng.normal(size=12) * rng.uniform(0.01, 1)) <= best * (1 + 1e-10)

    def test_oracle_is_positive_definite(self):
        bg, noise, _ = _toy(m=10, n=4)
        oracle = CovarianceOracle.from_samples(bg, noise)
        v = np.random.default_rng(7).normal(size=(50, 10))
        assert all(oracle.quadratic(x) > 0 for x in v)

    def test_woodbury_rejects_bad_noise(self):
        with pytest.raises(ValueError):
            woodbury_ho_template(np.ones((1, 2)), np.array([1.0, 0.0]), np.ones(2))
