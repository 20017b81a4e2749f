import dataclasses
import math

import numpy as np
import pytest

from snnbp.core import make_grid, make_rng
from snnbp.problems import (
    DerivativeInconsistency,
    LqParams,
    SnnArch,
    check_problem_derivatives,
    default_bounds,
    initial_control,
    load_dataset_csv,
    lq_a,
    lq_beta,
    lq_constants,
    lq_ustar,
    lq_xstar,
    make_dataset_1d,
    make_dataset_8d,
    make_lq_problem,
    make_snn_problem,
    save_dataset_csv,
    truth_1d,
    truth_8d,
)

# Frozen by hand from the printed closed-form expressions.
BETA_T0 = 1.5
BETA_THALF = 1.375
A6_T0 = -2.0 / 3.0
U8_T0 = 0.8
D_SIGMA_HALF = math.log(1.2) / (0.25 + math.log(1.2))  # 0.42172...


class TestLqClosedForm:
    def test_beta(self):
        assert lq_beta(1.0, 0.7) == pytest.approx(1 + 0.49, abs=1e-15)
        assert lq_beta(0.0, 0.5) == BETA_T0
        assert lq_beta(0.5, 0.5) == BETA_THALF

    def test_a(self):
        a0 = lq_a(0.0, 0.5)
        assert a0.shape == (8,)
        assert a0[0] == 0.0 and a0[3] == 0.0
        assert a0[5] == pytest.approx(A6_T0, abs=1e-15)
        assert lq_a(1.0, 0.5)[7] == 0.0

    def test_a_rejects_tan_pole(self):
        with pytest.raises(ValueError):
            lq_a(np.pi / 2, 0.5)

    def test_ustar(self):
        assert lq_ustar(1.0, 0.5)[7] == 0.0
        assert lq_ustar(0.0, 0.5)[7] == pytest.approx(U8_T0, abs=1e-15)

    def test_D(self):
        D, x_T, alpha = lq_constants(0.5)
        assert D == pytest.approx(D_SIGMA_HALF, rel=1e-14)
        # the quoted 0.42172 is the value truncated to five decimals
        assert math.floor(D * 1e5) == 42172
        assert x_T.shape == (7,)
        assert alpha(0.0) == 0.0
        assert alpha(1.0) == pytest.approx(math.log(1.2), rel=1e-14)

    def test_continuous_without_poles(self):
        t = np.linspace(0.0, 1.0, 10_001)
        assert np.all(lq_beta(t, 0.5) >= 1.0)
        u = lq_ustar(t, 0.5)
        assert np.all(np.isfinite(u))
        assert np.max(np.abs(np.diff(u, axis=0))) < 1e-2
        assert np.all(np.isfinite(lq_xstar(t, 0.5)))

    def test_vectorised_matches_scalar(self):
        t = np.array([0.0, 0.3, 0.9])
        for fn in (lq_a, lq_xstar, lq_ustar):
            np.testing.assert_array_equal(fn(t, 0.5), np.stack([fn(s, 0.5) for s in t]))

    def test_params_validated(self):
        with pytest.raises(ValueError):
            LqParams(sigma=0.0)
        with pytest.raises(ValueError):
            LqParams(T=2.0)


class TestLqProblem:
    spec = make_lq_problem(LqParams())

    def test_drift_at_zero_control(self):
        np.testing.assert_array_equal(self.spec.f(np.ones(8), np.zeros(8), 0.0), -lq_a(0.0, 0.5))

    def test_terminal_gradient(self):
        np.testing.assert_array_equal(self.spec.phi_x(np.zeros(8), None), np.zeros(8))

    def test_gu_dot_z_identity(self):
        np.testing.assert_array_equal(self.spec.gu_dot_z(np.ones(8), 0.0, np.eye(8)), 0.5 * np.ones(8))

    def test_dimensions(self):
        assert (self.spec.d, self.spec.p, self.spec.m) == (8, 8, 8)

    def test_fused_products(self):
        rng = np.random.default_rng(0)
        u, w, y = rng.normal(size=(3, 8))
        np.testing.assert_allclose(self.spec.g_apply(u, 0.2, w), self.spec.g(u, 0.2) @ w)
        np.testing.assert_allclose(self.spec.gu_dot_yw(u, 0.2, y, w), self.spec.gu_dot_z(u, 0.2, np.outer(y, w)))

    def test_derivatives(self):
        worst = check_problem_derivatives(self.spec, trials=20, tol=1e-6)
        assert max(worst.values()) <= 1e-6


def _snn(L=4, layers=3, d_in=1, floor=0.01):
    data = make_dataset_1d(50, 0.05, seed=1) if d_in == 1 else make_dataset_8d(2, 0.05, seed=1)
    return make_snn_problem(SnnArch(L=L, N_layers=layers, d_in=d_in), data, floor)


class TestSnnProblem:
    def test_p_layout(self):
        arch = SnnArch(L=5, N_layers=2, n_sig=3)
        assert arch.p == 3 + 15 + 3 + 15 + 1
        sl = arch.slices()
        assert [sl[k].stop - sl[k].start for k in ("a", "W", "V", "mix", "c")] == [3, 15, 3, 15, 1]

    def test_zero_amplitude_means_zero_drift(self):
        spec = _snn()
        u = make_rng(0, 1).normal(size=spec.p)
        u[spec.meta["arch"].slices()["a"]] = 0.0
        np.testing.assert_array_equal(spec.f(np.ones(4), u, 0.0), np.zeros(4))

    def test_diffusion_floor_limit(self):
        spec = _snn(floor=0.03)
        u = np.zeros(spec.p)
        u[-1] = -800.0
        np.testing.assert_allclose(spec.g(u, 0.0), 0.03 * np.eye(4), rtol=1e-15)

    def test_f_u_against_finite_differences(self):
        spec = _snn()
        rng = make_rng(0, 2)
        eps = 1e-6
        for _ in range(10):
            x, u = rng.normal(size=4), rng.uniform(-1, 1, spec.p)
            fd = np.stack(
                [(spec.f(x, u + eps * e, 0.0) - spec.f(x, u - eps * e, 0.0)) / (2 * eps) for e in np.eye(spec.p)], -1
            )
            J = spec.f_u(x, u, 0.0)
            assert np.max(np.abs(J - fd)) / np.max(np.abs(fd)) < 1e-5

    def test_drift_bounded(self):
        spec = _snn()
        arch = spec.meta["arch"]
        rng = make_rng(0, 3)
        for _ in range(20):
            u = rng.uniform(-3, 3, spec.p)
            a, _, _, mix, _ = arch.unpack(u)
            bound = np.linalg.norm(mix, 2) * np.sum(np.abs(a))
            x = rng.normal(scale=100.0, size=(50, 4))
            assert np.all(np.linalg.norm(spec.f(x, u, 0.0), axis=-1) <= bound + 1e-12)

    def test_elliptic(self):
        spec = _snn(floor=0.02)
        for c in (-50.0, -1.0, 0.0, 3.0):
            u = np.zeros(spec.p)
            u[-1] = c
            assert np.min(np.linalg.eigvalsh(spec.g(u, 0.0))) >= 0.02

    def test_initial_state_pads_input(self):
        spec = _snn(L=4)
        x0 = spec.initial_state(spec.meta["dataset"].take(np.array([3, 4])))
        assert x0.shape == (2, 4)
        np.testing.assert_array_equal(x0[:, 1:], 0.0)

    def test_dimension_mismatch(self):
        with pytest.raises(ValueError):
            make_snn_problem(SnnArch(L=8, N_layers=2, d_in=8), make_dataset_1d(10))
        with pytest.raises(ValueError):
            SnnArch(L=4, d_in=8)

    def test_empty_dataset(self):
        with pytest.raises(ValueError):
            make_snn_problem(SnnArch(), make_dataset_1d(10).__class__(np.zeros((0, 1)), np.zeros((0, 1))))

    def test_derivatives(self):
        worst = check_problem_derivatives(_snn(), trials=20, tol=1e-4)
        assert max(worst.values()) <= 1e-4

    def test_relu_variant(self):
        spec = make_snn_problem(SnnArch(L=4, N_layers=2, activation="relu"), make_dataset_1d(10))
        assert np.all(np.isfinite(spec.f(np.ones(4), np.full(spec.p, 0.3), 0.0)))


class TestDerivativeCheck:
    def test_wrong_f_u_is_named(self):
        spec = make_lq_problem()
        broken = dataclasses.replace(spec, f_u=lambda x, u, t: 2.0 * spec.f_u(x, u, t))
        with pytest.raises(DerivativeInconsistency) as err:
            check_problem_derivatives(broken, trials=3, tol=1e-6)
        assert err.value.callback == "f_u"
        assert "f_u" in str(err.value)

    def test_report_without_raising(self):
        spec = make_lq_problem()
        broken = dataclasses.replace(spec, r_x=lambda x, u, t: 0.0 * x)
        worst = check_problem_derivatives(broken, trials=3, tol=1e-6, raise_on_failure=False)
        assert worst["r_x"] > 1e-3

    def test_trials_validated(self):
        with pytest.raises(ValueError):
            check_problem_derivatives(make_lq_problem(), trials=0)


class TestDatasets:
    def test_truth_1d(self):
        assert truth_1d(0.25) == 1.0
        assert abs(truth_1d(0.5)) < 1e-15

    def test_noise_free_1d(self):
        data = make_dataset_1d(200, noise=0.0, seed=3)
        np.testing.assert_array_equal(data.targets[:, 0], truth_1d(data.inputs[:, 0]))
        assert np.all((data.inputs >= 0) & (data.inputs <= 1))

    def test_noise_level_1d(self):
        n = 100_000
        data = make_dataset_1d(n, noise=0.05, seed=4)
        resid = data.targets[:, 0] - truth_1d(data.inputs[:, 0])
        assert abs(resid.mean()) <= 3 * 0.05 / np.sqrt(n)
        assert resid.std() == pytest.approx(0.05, rel=0.02)

    def test_truth_8d(self):
        assert truth_8d(np.zeros(8)) == pytest.approx(1 + math.log(2), abs=1e-15)
        x = np.zeros(8)
        x[3] = 0.5
        assert truth_8d(x) == pytest.approx(1 + math.log(2), abs=1e-15)

    def test_mesh_size_and_lazy_points(self):
        data = make_dataset_8d(6, noise=0.0, seed=0)
        assert len(data) == 6**8
        assert data.targets.shape == (6**8, 1)
        idx = np.array([0, 1, 6, 6**8 - 1])
        pts = data.points(idx)
        np.testing.assert_allclose(pts[0], 0.0)
        np.testing.assert_allclose(pts[1], [0, 0, 0, 0, 0, 0, 0, 0.2])
        np.testing.assert_allclose(pts[2], [0, 0, 0, 0, 0, 0, 0.2, 0])
        np.testing.assert_allclose(pts[3], 1.0)
        np.testing.assert_allclose(data.take(idx).target[:, 0], truth_8d(pts), rtol=1e-14)

    def test_mesh_validated(self):
        with pytest.raises(ValueError):
            make_dataset_8d(1)

    def test_csv_round_trip(self, tmp_path):
        data = make_dataset_1d(20, seed=5)
        path = save_dataset_csv(data, tmp_path / "d.csv")
        assert path.read_text().splitlines()[0] == "x_1,y_1"
        back = load_dataset_csv(path)
        np.testing.assert_array_equal(back.inputs, data.inputs)
        np.testing.assert_array_equal(back.targets, data.targets)

    def test_sampler_is_uniform_over_dataset(self):
        spec = _snn()
        draws = spec.sample_data(make_rng(0, 9), 50_000)
        counts = np.unique(draws.input[:, 0], return_counts=True)[1]
        assert len(counts) == 50
        assert counts.min() > 800 and counts.max() < 1200


class TestDefaults:
    def test_lq_bounds_and_start(self):
        spec = make_lq_problem()
        lo, hi = default_bounds(spec)
        np.testing.assert_array_equal(lo, -1e6)
        np.testing.assert_array_equal(hi, 1e6)
        np.testing.assert_array_equal(initial_control(spec, make_grid(1.0, 5)).values, 0.0)

    def test_snn_bounds(self):
        spec = _snn()
        sl = spec.meta["arch"].slices()
        lo, hi = default_bounds(spec)
        assert np.all(hi[sl["a"]] == 4.5) and np.all(lo[sl["a"]] == -4.5)
        assert np.all(hi[sl["W"]] == 10.0)
        assert np.isinf(hi[sl["c"]]).all()

    def test_snn_start(self):
        spec = _snn(floor=0.01)
        grid = spec.meta["arch"].grid()
        u = initial_control(spec, grid, seed=3, noise_init=0.05)
        assert np.all(np.abs(u.values[:, :-1]) <= 0.5)
        np.testing.assert_allclose(np.diagonal(spec.g(u.values, 0.0), axis1=-2, axis2=-1), 0.05)
        np.testing.assert_array_equal(u.values, initial_control(spec, grid, seed=3).values)
