"""Feature map forward/backward checks against straight-line and FD oracles."""

import numpy as np
import pytest

from fdcheck import assert_grad_close, fd_grad
from stochgp.features import (
    ComposedMap,
    FeatureBatch,
    FeatureMap,
    FeatureMapParams,
    LinearMap,
    MLPMap,
    MLPSpec,
    RFFMap,
    compose,
    rff_init,
)


class ScaleMap(FeatureMap):
    """phi(x) = a * x with a single scalar parameter, for hand-derivative checks."""

    def __init__(self, dim):
        self.input_dim = dim
        self.output_dim = dim

    @property
    def n_params(self):
        return 1

    def layout(self):
        return (("a", 0, (1,)),)

    def init_params(self, seed):
        return FeatureMapParams(np.array([1.0]), self.layout())

    def forward(self, params, X):
        X = self._check_input(X)
        return FeatureBatch(params.flat[0] * X, {"X": X}, params.version)

    def backward_with_inputs(self, params, batch, upstream):
        U = np.asarray(upstream, dtype=np.float64)
        X = batch.cache["X"]
        return np.array([np.sum(U * X)]), params.flat[0] * U


def upstream_scalar(fmap, X, U):
    """f(flat) = sum_i <U_i, phi(x_i)> as a plain function of the flat vector."""

    def f(flat):
        params = fmap.params_from_flat(flat)
        return float(np.sum(U * fmap.forward(params, X).Z))

    return f


class TestParamsLayout:
    def test_round_trip_flat_named_flat(self):
        fmap = MLPMap(MLPSpec(3, (4, 5)))
        params = fmap.init_params(seed=0)
        rebuilt = np.concatenate(
            [params.get(name).ravel() for name, _, _ in params.layout]
        )
        assert np.array_equal(rebuilt, params.flat)

    def test_layout_lengths_sum(self):
        fmap = MLPMap(MLPSpec(3, (4, 5)))
        total = sum(int(np.prod(shape)) for _, _, shape in fmap.layout())
        assert total == fmap.n_params

    def test_bad_layout_rejected(self):
        with pytest.raises(ValueError, match="layout covers"):
            FeatureMapParams(np.zeros(3), (("a", 0, (2,)),))

    def test_version_bumps_on_with_flat(self):
        fmap = RFFMap(2, 8, seed=0)
        params = fmap.init_params(0)
        assert params.with_flat(params.flat + 1.0).version == params.version + 1


class TestLinearMap:
    def test_identity(self):
        fmap = LinearMap(2)
        params = fmap.init_params(0)
        out = fmap.forward(params, np.array([[1.0, 2.0]]))
        np.testing.assert_array_equal(out.Z, [[1.0, 2.0]])

    def test_backward_is_empty_and_passes_upstream(self):
        fmap = LinearMap(3)
        params = fmap.init_params(0)
        X = np.random.default_rng(0).normal(size=(4, 3))
        batch = fmap.forward(params, X)
        U = np.ones((4, 3))
        g, gx = fmap.backward_with_inputs(params, batch, U)
        assert g.shape == (0,)
        np.testing.assert_array_equal(gx, U)


class TestScaleMap:
    def test_hand_derivative(self):
        # phi(x) = a x, upstream u: d/da sum(u * a * x) = sum(u * x)
        fmap = ScaleMap(2)
        params = FeatureMapParams(np.array([1.7]), fmap.layout())
        X = np.array([[2.0, -1.0]])
        U = np.array([[3.0, 5.0]])
        batch = fmap.forward(params, X)
        g = fmap.backward(params, batch, U)
        assert g[0] == pytest.approx(3.0 * 2.0 + 5.0 * (-1.0))


class TestMLP:
    def test_zero_network_maps_to_zero(self):
        fmap = MLPMap(MLPSpec(3, (4, 2)))
        params = fmap.params_from_flat(np.zeros(fmap.n_params))
        X = np.random.default_rng(1).normal(size=(5, 3))
        np.testing.assert_array_equal(fmap.forward(params, X).Z, np.zeros((5, 2)))

    def test_single_sample_straight_line_oracle(self):
        fmap = MLPMap(MLPSpec(3, (4, 2)))
        params = fmap.init_params(seed=7)
        x = np.random.default_rng(2).normal(size=3)
        z = fmap.forward(params, x[None, :]).Z[0]
        # scalar recomputation, no matrix ops
        w1, b1 = params.get("w1"), params.get("b1")
        w2, b2 = params.get("w2"), params.get("b2")
        hidden = [max(sum(w1[j, k] * x[k] for k in range(3)) + b1[j], 0.0) for j in range(4)]
        expect = [
            sum(w2[o, j] * hidden[j] for j in range(4)) + b2[o] for o in range(2)
        ]
        np.testing.assert_allclose(z, expect, rtol=1e-12)

    def test_zero_upstream_zero_gradient(self):
        fmap = MLPMap(MLPSpec(2, (3, 2)))
        params = fmap.init_params(0)
        X = np.random.default_rng(3).normal(size=(4, 2))
        batch = fmap.forward(params, X)
        g = fmap.backward(params, batch, np.zeros((4, 2)))
        np.testing.assert_array_equal(g, np.zeros(fmap.n_params))

    def test_backward_matches_finite_differences(self):
        rng = np.random.default_rng(11)
        fmap = MLPMap(MLPSpec(3, (4, 2)))
        params = fmap.init_params(seed=5)
        X = rng.normal(size=(6, 3))
        U = rng.normal(size=(6, 2))
        batch = fmap.forward(params, X)
        analytic = fmap.backward(params, batch, U)
        numeric = fd_grad(upstream_scalar(fmap, X, U), params.flat)
        assert_grad_close(analytic, numeric, label="mlp backward")

    def test_init_is_seeded(self):
        fmap = MLPMap(MLPSpec(3, (4, 2)))
        assert np.array_equal(fmap.init_params(9).flat, fmap.init_params(9).flat)
        assert not np.array_equal(fmap.init_params(9).flat, fmap.init_params(10).flat)

    def test_stale_cache_rejected(self):
        fmap = MLPMap(MLPSpec(2, (3, 2)))
        params = fmap.init_params(0)
        batch = fmap.forward(params, np.zeros((1, 2)))
        newer = params.with_flat(params.flat * 2.0)
        with pytest.raises(ValueError, match="stale feature cache"):
            fmap.backward(newer, batch, np.zeros((1, 2)))

    def test_dimension_mismatch(self):
        fmap = MLPMap(MLPSpec(3, (4, 2)))
        with pytest.raises(ValueError, match="columns"):
            fmap.forward(fmap.init_params(0), np.zeros((2, 5)))


class TestRFF:
    def test_deterministic_draw(self):
        a = RFFMap(3, 16, seed=4)
        b = RFFMap(3, 16, seed=4)
        assert np.array_equal(a.frequencies, b.frequencies)
        assert np.array_equal(a.phases, b.phases)

    def test_magnitude_doubling_scales_features(self):
        fmap = rff_init(q=2, D=32, u1=1.3, u2=1.0, seed=0)
        X = np.random.default_rng(5).normal(size=(4, 2))
        base = fmap.forward(fmap.init_params(0), X).Z
        doubled_params = FeatureMapParams(
            np.array([np.log(1.3), np.log(2.0)]), fmap.layout()
        )
        doubled = fmap.forward(doubled_params, X).Z
        np.testing.assert_allclose(doubled, np.sqrt(2.0) * base, rtol=1e-12)
        np.testing.assert_allclose(
            doubled @ doubled.T, 2.0 * (base @ base.T), rtol=1e-12
        )

    def test_self_inner_product_concentrates_on_magnitude(self):
        # Monte-Carlo mean of phi(z)^T phi(z) over 200 seeds at D=1000
        u2 = 1.7
        z = np.random.default_rng(6).normal(size=(1, 3))
        vals = []
        for seed in range(200):
            fmap = rff_init(q=3, D=1000, u1=0.9, u2=u2, seed=seed)
            Z = fmap.forward(fmap.init_params(0), z).Z[0]
            vals.append(float(Z @ Z))
        assert abs(np.mean(vals) - u2) < 0.02 * u2

    def test_cross_inner_product_is_unbiased_for_the_kernel(self):
        u1, u2 = 1.4, 0.8
        rng = np.random.default_rng(7)
        z1 = rng.normal(size=3)
        z2 = z1 + 1.2 * u1 * rng.normal(size=3) / np.sqrt(3)
        truth = u2 * np.exp(-np.sum((z1 - z2) ** 2) / (2 * u1 ** 2))
        vals = []
        for seed in range(300):
            fmap = rff_init(q=3, D=500, u1=u1, u2=u2, seed=seed)
            batch = fmap.forward(fmap.init_params(0), np.stack([z1, z2]))
            vals.append(float(batch.Z[0] @ batch.Z[1]))
        se = np.std(vals) / np.sqrt(len(vals))
        assert abs(np.mean(vals) - truth) < 4 * se + 1e-4

    def test_backward_matches_finite_differences(self):
        rng = np.random.default_rng(8)
        fmap = rff_init(q=3, D=20, u1=0.7, u2=1.9, seed=1)
        params = fmap.init_params(0)
        X = rng.normal(size=(5, 3))
        U = rng.normal(size=(5, 20))
        batch = fmap.forward(params, X)
        analytic = fmap.backward(params, batch, U)
        numeric = fd_grad(upstream_scalar(fmap, X, U), params.flat)
        assert_grad_close(analytic, numeric, label="rff backward")

    def test_positive_scale_validation(self):
        with pytest.raises(ValueError):
            rff_init(q=2, D=8, u1=-1.0, u2=1.0, seed=0)
        with pytest.raises(ValueError):
            rff_init(q=2, D=8, u1=1.0, u2=0.0, seed=0)


class TestCompose:
    def test_identity_of_identities(self):
        fmap = compose(LinearMap(3), LinearMap(3))
        X = np.random.default_rng(9).normal(size=(4, 3))
        out = fmap.forward(fmap.init_params(0), X)
        np.testing.assert_array_equal(out.Z, X)

    def test_dimension_mismatch_rejected(self):
        with pytest.raises(ValueError, match="does not match"):
            compose(LinearMap(3), LinearMap(2))

    def test_two_stage_oracle(self):
        inner = MLPMap(MLPSpec(3, (4, 2)))
        outer = rff_init(q=2, D=16, u1=1.1, u2=0.9, seed=3)
        fmap = compose(outer, inner)
        params = fmap.init_params(seed=12)
        X = np.random.default_rng(10).normal(size=(5, 3))
        staged_inner = inner.forward(
            inner.params_from_flat(params.flat[: inner.n_params]), X
        )
        staged = outer.forward(
            outer.params_from_flat(params.flat[inner.n_params :]), staged_inner.Z
        )
        np.testing.assert_allclose(fmap.forward(params, X).Z, staged.Z, rtol=1e-12)

    def test_composed_backward_matches_finite_differences(self):
        rng = np.random.default_rng(13)
        inner = MLPMap(MLPSpec(3, (4, 2)))
        outer = rff_init(q=2, D=10, u1=0.8, u2=1.2, seed=2)
        fmap = compose(outer, inner)
        params = fmap.init_params(seed=21)
        X = rng.normal(size=(4, 3))
        U = rng.normal(size=(4, 10))
        batch = fmap.forward(params, X)
        analytic = fmap.backward(params, batch, U)
        numeric = fd_grad(upstream_scalar(fmap, X, U), params.flat)
        assert_grad_close(analytic, numeric, label="composed backward")

    def test_param_concatenation_order(self):
        inner = MLPMap(MLPSpec(2, (3, 2)))
        outer = rff_init(q=2, D=8, u1=1.0, u2=1.0, seed=0)
        fmap = compose(outer, inner)
        params = fmap.init_params(seed=1)
        assert params.flat.shape == (inner.n_params + 2,)
        np.testing.assert_array_equal(
            params.flat[inner.n_params :], outer.init_params(2).flat
        )


class TestForwardRecomputationInvariant:
    def test_batch_rows_equal_per_sample_recompute(self):
        rng = np.random.default_rng(14)
        inner = MLPMap(MLPSpec(3, (5, 4)))
        outer = rff_init(q=4, D=12, u1=1.0, u2=1.0, seed=5)
        for fmap in (LinearMap(3), inner, compose(outer, inner)):
            params = fmap.init_params(seed=3)
            X = rng.normal(size=(6, 3))
            Z = fmap.forward(params, X).Z
            for i in range(6):
                row = fmap.forward(params, X[i : i + 1]).Z[0]
                np.testing.assert_allclose(Z[i], row, atol=1e-12)
