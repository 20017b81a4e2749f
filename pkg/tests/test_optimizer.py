import dataclasses
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from _toys import toy_problem
from snnbp.core import ControlPath, make_grid, path_norm
from snnbp.optimizer import (
    ITER_BLOCK,
    BoxBounds,
    Constant,
    Harmonic,
    SgdConfig,
    TrainingDiverged,
    load_control,
    lr,
    project,
    run_sgd,
    run_sgd_repeats,
    save_control,
    sgd_step,
)
from snnbp.problems import SnnArch, lq_ustar, make_dataset_1d, make_lq_problem, make_snn_problem
from snnbp.solver import DivergenceError, GradientPath

LQ = make_lq_problem()


class TestSchedules:
    def test_harmonic_start(self):
        assert lr(Harmonic(2, 3), 0) == pytest.approx(2 / 3, abs=1e-16)

    def test_harmonic_decays_to_zero(self):
        etas = np.array([lr(Harmonic(2, 3), k) for k in range(0, 10**6, 1000)])
        assert np.all(np.diff(etas) < 0)
        assert etas[-1] < 3e-6

    def test_constant(self):
        assert all(lr(Constant(0.01), k) == 0.01 for k in (0, 5, 10**9))

    @pytest.mark.parametrize("bad", [lambda: Harmonic(0, 3), lambda: Harmonic(2, -1), lambda: Constant(0.0)])
    def test_validated(self, bad):
        with pytest.raises(ValueError):
            bad()

    def test_negative_index(self):
        with pytest.raises(ValueError):
            lr(Constant(1.0), -1)

    def test_robbins_monro_sums(self):
        k = np.arange(10**6, dtype=float)
        eta = 2.0 / (k + 3.0)
        partial = np.cumsum(eta)
        # partial sums keep growing by about theta * ln 10 per decade
        gains = np.diff(partial[[10**3 - 1, 10**4 - 1, 10**5 - 1, 10**6 - 1]])
        np.testing.assert_allclose(gains, 2 * math.log(10), rtol=0.01)
        assert np.sum(eta[10**5:] ** 2) < 1e-3


def _u(values, N=None):
    values = np.atleast_2d(np.asarray(values, dtype=float))
    return ControlPath(make_grid(1.0, values.shape[0]), values)


class TestProjection:
    def test_clamp(self):
        np.testing.assert_array_equal(project(_u([[5.0, -5.0]]), BoxBounds(-4.5, 4.5)).values, [[4.5, -4.5]])

    def test_interior_unchanged(self):
        u = _u(np.random.default_rng(0).uniform(-1, 1, (4, 3)))
        assert project(u, BoxBounds(-2, 2)).values.tobytes() == u.values.tobytes()

    def test_per_coordinate(self):
        b = BoxBounds(np.array([0.0, -1.0]), np.array([1.0, 0.0]))
        np.testing.assert_array_equal(project(_u([[3.0, 3.0], [-3.0, -3.0]]), b).values, [[1, 0], [0, -1]])

    def test_bounds_validated(self):
        with pytest.raises(ValueError):
            BoxBounds(1.0, 0.0)
        with pytest.raises(ValueError):
            BoxBounds(np.array([0.0, np.nan]), 1.0)


pairs = st.integers(1, 5).flatmap(
    lambda N: st.tuples(*[arrays(float, (N, 3), elements=st.floats(-50, 50)) for _ in range(2)])
)


@settings(max_examples=80, deadline=None)
@given(pairs)
def test_projection_idempotent_and_nonexpansive(pair):
    b = BoxBounds(np.array([-1.0, 0.0, -20.0]), np.array([1.0, 5.0, 3.0]))
    u, v = map(_u, pair)
    pu, pv = project(u, b), project(v, b)
    np.testing.assert_array_equal(project(pu, b).values, pu.values)
    assert path_norm(pu.values - pv.values, u.grid.h) <= path_norm(u.values - v.values, u.grid.h) + 1e-12
    assert b.contains(pu.values)


class TestSgdStep:
    def _grad(self, u, values):
        return GradientPath(u.grid, np.asarray(values, dtype=float))

    def test_zero_gradient(self):
        u = _u(np.ones((3, 2)))
        assert sgd_step(u, self._grad(u, np.zeros((3, 2))), 0.3, BoxBounds()).values.tobytes() == u.values.tobytes()

    def test_interior_step_length(self):
        rng = np.random.default_rng(1)
        u = _u(rng.uniform(-1, 1, (5, 2)))
        g = self._grad(u, rng.normal(size=(5, 2)))
        step = sgd_step(u, g, 1e-3, BoxBounds(-10, 10))
        assert path_norm(step.values - u.values, u.grid.h) == pytest.approx(1e-3 * g.norm, rel=1e-12)

    def test_outward_gradient_stays_clamped(self):
        u = _u([[4.5, 0.0]])
        out = sgd_step(u, self._grad(u, [[-1.0, 0.0]]), 0.5, BoxBounds(-4.5, 4.5))
        np.testing.assert_array_equal(out.values, [[4.5, 0.0]])

    def test_rejects_nonfinite(self):
        u = _u(np.zeros((3, 1)))
        with pytest.raises(DivergenceError) as err:
            sgd_step(u, self._grad(u, [[0.0], [np.nan], [0.0]]), 0.1, BoxBounds())
        assert err.value.step == 1

    def test_rejects_bad_step(self):
        u = _u(np.zeros((2, 1)))
        with pytest.raises(ValueError):
            sgd_step(u, self._grad(u, np.zeros((2, 1))), 0.0, BoxBounds())
        with pytest.raises(ValueError):
            sgd_step(u, self._grad(u, np.zeros((3, 1))), 0.1, BoxBounds())


class TestRunSgd:
    def test_zero_gradient_field(self):
        spec = toy_problem(d=2, run=0.0, noise=0.3)
        u0 = _u(np.random.default_rng(2).normal(size=(4, 2)))
        u, trace = run_sgd(spec, u0, SgdConfig(K=100, schedule=Constant(0.5)))
        assert u.values.tobytes() == u0.values.tobytes()

    def test_quadratic_toy_contracts(self):
        spec = toy_problem(d=1, center=1.0)
        u0 = ControlPath.zeros(make_grid(1.0, 4), 1)
        u, _ = run_sgd(spec, u0, SgdConfig(K=500, schedule=Constant(0.1)))
        assert np.max(np.abs(u.values - 1.0)) < 1e-3
        # closed form: u_K = 1 - (1 - eta)^K
        np.testing.assert_allclose(u.values, 1 - 0.9**500, rtol=1e-12)

    @pytest.mark.parametrize("fast", [False, None])
    def test_same_seed_same_result(self, fast):
        u0 = ControlPath.zeros(make_grid(1.0, 6), 8)
        cfg = SgdConfig(K=150, B=2, schedule=Harmonic(2, 3), seed=11)
        a, _ = run_sgd(LQ, u0, cfg, fast=fast)
        b, _ = run_sgd(LQ, u0, cfg, fast=fast)
        assert a.values.tobytes() == b.values.tobytes()
        c, _ = run_sgd(LQ, u0, dataclasses.replace(cfg, seed=12), fast=fast)
        assert not np.array_equal(a.values, c.values)

    def test_diagnostics_are_read_only(self):
        u0 = ControlPath.zeros(make_grid(1.0, 6), 8)
        ref = ControlPath(u0.grid, lq_ustar(u0.grid.nodes[:-1], 0.5))
        base = SgdConfig(K=200, B=3, seed=4)
        a, ta = run_sgd(LQ, u0, base)
        b, tb = run_sgd(LQ, u0, dataclasses.replace(base, diagnostics_every=7, oracle_M=200), reference=ref)
        assert a.values.tobytes() == b.values.tobytes()
        assert len(ta) == 2
        k = tb.column("k")
        assert np.all(np.diff(k) > 0) and k[0] == 0 and k[-1] == 200
        assert np.all(np.isfinite(tb.column("grad_norm")))
        assert np.all(np.isfinite(tb.column("ref_distance")))
        assert math.isnan(tb.records[0].cost) and np.all(np.isfinite(tb.column("cost")[1:]))
        assert tb.records[-1].control_norm == pytest.approx(path_norm(b.values, u0.grid.h))
        assert tb.records[-1].ref_distance == pytest.approx(path_norm(b.values - ref.values, u0.grid.h))

    def test_iterates_respect_bounds(self):
        u0 = ControlPath.zeros(make_grid(1.0, 5), 8)
        bounds = BoxBounds(-0.05, 0.05)
        res = run_sgd_repeats(LQ, u0, SgdConfig(K=100, bounds=bounds), seeds=[0, 1], snapshots=range(0, 101, 10))
        for snap in res.snapshots.values():
            assert bounds.contains(snap)
        assert np.any(np.abs(res.controls) == 0.05)

    def test_snapshots_equal_shorter_runs(self):
        u0 = ControlPath.zeros(make_grid(1.0, 5), 8)
        cfg = SgdConfig(K=300, seed=0)
        res = run_sgd_repeats(LQ, u0, cfg, seeds=[3, 4], snapshots=[70, 300])
        short = run_sgd_repeats(LQ, u0, dataclasses.replace(cfg, K=70), seeds=[3, 4])
        np.testing.assert_array_equal(res.snapshots[70], short.controls)
        np.testing.assert_array_equal(res.snapshots[300], res.controls)

    def test_repeats_match_single_runs(self):
        u0 = ControlPath.zeros(make_grid(1.0, 5), 8)
        cfg = SgdConfig(K=ITER_BLOCK + 9, B=2)
        res = run_sgd_repeats(LQ, u0, cfg, seeds=[5, 6], fast=False)
        for r, s in enumerate([5, 6]):
            u, _ = run_sgd(LQ, u0, dataclasses.replace(cfg, seed=s), fast=False)
            np.testing.assert_array_equal(res.controls[r], u.values)

    def test_K_zero(self):
        u0 = ControlPath.zeros(make_grid(1.0, 5), 8)
        u, trace = run_sgd(LQ, u0, SgdConfig(K=0))
        np.testing.assert_array_equal(u.values, u0.values)
        assert len(trace) == 1

    def test_start_outside_box(self):
        u0 = ControlPath(make_grid(1.0, 2), np.full((2, 8), 2.0))
        with pytest.raises(ValueError):
            run_sgd(LQ, u0, SgdConfig(K=1, bounds=BoxBounds(-1, 1)))

    def test_config_validated(self):
        for bad in (dict(K=-1), dict(B=0), dict(K=2.5), dict(diagnostics_every=-1), dict(schedule=0.1)):
            with pytest.raises((ValueError, TypeError)):
                SgdConfig(**bad)

    @pytest.mark.parametrize("fast", [False, None])
    def test_divergence_aborts_with_trace(self, fast):
        u0 = ControlPath.zeros(make_grid(1.0, 5), 8)
        with pytest.raises(TrainingDiverged) as err:
            run_sgd(LQ, u0, SgdConfig(K=400, schedule=Constant(1e3), bounds=BoxBounds(), diagnostics_every=1), fast=fast)
        assert 0 < err.value.k < 400
        assert np.all(np.isfinite(err.value.control.values))
        assert len(err.value.trace) >= 1

    def test_diverged_repeat_is_frozen_and_counted(self):
        u0 = ControlPath.zeros(make_grid(1.0, 5), 8)
        cfg = SgdConfig(K=300, schedule=Constant(1e3), bounds=BoxBounds(), diagnostics_every=1)
        res = run_sgd_repeats(LQ, u0, cfg, seeds=[0, 1, 2])
        assert np.all(res.diverged >= 0)
        assert np.all(np.isfinite(res.controls))
        for r, tr in enumerate(res.traces):
            assert tr.records[-1].k <= res.diverged[r]

    def test_trace_csv(self, tmp_path):
        u0 = ControlPath.zeros(make_grid(1.0, 4), 8)
        _, trace = run_sgd(LQ, u0, SgdConfig(K=20, diagnostics_every=10))
        path = tmp_path / "trace.csv"
        trace.to_csv(path)
        lines = path.read_text().splitlines()
        assert lines[0].split(",")[:4] == ["k", "eta", "cost", "control_norm"]
        assert len(lines) == 4
        assert float(lines[-1].split(",")[3]) == trace.records[-1].control_norm


class TestCheckpoint:
    def test_round_trip(self, tmp_path):
        u = ControlPath(make_grid(2.0, 3), np.random.default_rng(0).normal(size=(3, 4)) * 1e-7)
        path = save_control(tmp_path / "u.txt", u)
        lines = path.read_text().splitlines()
        assert lines[0] == "SNNBP-CTRL v1"
        assert lines[1].split()[:2] == ["3", "4"]
        back = load_control(path)
        assert back.values.tobytes() == u.values.tobytes()
        assert back.grid.N == 3 and back.grid.h == pytest.approx(u.grid.h, rel=1e-15)

    @pytest.mark.parametrize(
        "text",
        [
            "",
            "SNNBP-CTRL v2\n1 1 1.0\n0.0\n",
            "SNNBP-CTRL v1\n1 1\n0.0\n",
            "SNNBP-CTRL v1\n2 1 0.5\n0.0\n",
            "SNNBP-CTRL v1\n1 2 1.0\n0.0\n",
            "SNNBP-CTRL v1\n1 1 1.0\nzero\n",
            "SNNBP-CTRL v1\n1 1 1.0\nnan\n",
        ],
    )
    def test_rejects_malformed(self, tmp_path, text):
        path = tmp_path / "bad.txt"
        path.write_text(text)
        with pytest.raises(ValueError):
            load_control(path)

    def test_batched_control_rejected(self, tmp_path):
        with pytest.raises(ValueError):
            save_control(tmp_path / "u.txt", ControlPath(make_grid(1.0, 2), np.zeros((3, 2, 1))))


def test_snn_training_reduces_cost():
    spec = make_snn_problem(SnnArch(L=4, N_layers=3), make_dataset_1d(200, seed=2))
    from snnbp.problems import initial_control

    u0 = initial_control(spec, spec.meta["arch"].grid(), seed=0)
    _, trace = run_sgd(spec, u0, SgdConfig(K=4000, B=4, schedule=Harmonic(50, 500), diagnostics_every=1000))
    cost = trace.column("cost")
    assert cost[-1] < 0.6 * cost[1]
