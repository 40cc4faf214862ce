import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from haltpred.errors import BetaOutOfRange, EmptyMinority
from haltpred.imbalance import (
    LossSpec,
    class_aware_batches,
    effective_number_weights,
    ldam_margins,
    loss_bce_effnum,
    loss_ce,
    loss_focal,
    loss_ldam,
)

from .oracles import central_difference

LN2 = math.log(2.0)
logit_pairs = st.tuples(*[st.floats(-30, 30, allow_nan=False)] * 2)
labels = st.sampled_from([0, 1])


class TestEffectiveNumber:
    def test_balanced_counts(self):
        assert effective_number_weights((10, 10), 0.9) == (1.0, 1.0)

    def test_beta_zero(self):
        assert effective_number_weights((100, 5), 0.0) == (1.0, 1.0)

    def test_imbalanced_value(self):
        # oracle: mpmath at 50 digits, normalised to sum 2
        w = effective_number_weights((9800, 200), 0.999)
        assert w == pytest.approx((0.3070376468445508, 1.6929623531554492), abs=1e-12)

    @pytest.mark.parametrize("beta", [-0.1, 1.0, 1.5])
    def test_beta_out_of_range(self, beta):
        with pytest.raises(BetaOutOfRange):
            effective_number_weights((10, 2), beta)

    def test_ratio_monotone_in_beta(self):
        betas = np.linspace(0.0, 0.99999, 60)
        ratios = [w1 / w0 for w0, w1 in (effective_number_weights((9800, 200), b) for b in betas)]
        assert all(b >= a - 1e-12 for a, b in zip(ratios, ratios[1:]))
        assert ratios[-1] == pytest.approx(9800 / 200, rel=0.1)

    @given(st.integers(1, 5000), st.integers(1, 5000), st.floats(0, 0.9999))
    def test_larger_class_gets_smaller_weight(self, n0, n1, beta):
        w0, w1 = effective_number_weights((n0, n1), beta)
        assert w0 > 0 and w1 > 0 and abs(w0 + w1 - 2) < 1e-12
        if n0 > n1:
            assert w0 <= w1 + 1e-12


class TestCE:
    def test_uniform(self):
        assert loss_ce((0.0, 0.0), 1)[0] == pytest.approx(LN2, abs=1e-15)

    def test_confident(self):
        # oracle: -log(sigmoid(10)) at 50 digits
        assert loss_ce((0.0, 10.0), 1)[0] == pytest.approx(4.5398899216864646e-5, rel=1e-12)

    def test_gradient_is_p_minus_onehot(self):
        _, g = loss_ce((0.3, -1.2), 0)
        p = np.exp([0.3, -1.2]) / np.exp([0.3, -1.2]).sum()
        np.testing.assert_allclose(g, p - [1, 0], atol=1e-15)


class TestBCEEffnum:
    @given(logit_pairs, labels)
    def test_unit_weights(self, z, y):
        assert loss_bce_effnum(z, y, (1.0, 1.0))[0] == loss_ce(z, y)[0]

    def test_scaled(self):
        assert loss_bce_effnum((0.0, 0.0), 1, (0.5, 1.5))[0] == pytest.approx(1.5 * LN2, abs=1e-15)

    def test_weight_linearity(self):
        l1, g1 = loss_bce_effnum((0.4, -0.2), 1, (0.5, 0.7))
        l2, g2 = loss_bce_effnum((0.4, -0.2), 1, (0.5, 1.4))
        assert l2 == pytest.approx(2 * l1, rel=1e-15)
        np.testing.assert_allclose(g2, 2 * np.asarray(g1), rtol=1e-15)


class TestFocal:
    def test_well_classified_vanishes(self):
        assert loss_focal((-20.0, 20.0), 1, 2.0)[0] < 1e-8

    def test_formula_value(self):
        # p_t = 0.9 means a logit gap of ln 9; oracle: 0.01 * -ln 0.9 at 50 digits
        assert loss_focal((0.0, math.log(9.0)), 1, 2.0)[0] == pytest.approx(1.0536051565782630e-3, rel=1e-12)

    @given(logit_pairs, labels)
    def test_gamma_zero_is_ce(self, z, y):
        lf, gf = loss_focal(z, y, 0.0)
        lc, gc = loss_ce(z, y)
        assert abs(lf - lc) < 1e-12
        np.testing.assert_allclose(gf, gc, atol=1e-12)

    @given(logit_pairs, labels, st.floats(0.01, 5))
    def test_never_exceeds_ce(self, z, y, gamma):
        assert loss_focal(z, y, gamma)[0] <= loss_ce(z, y)[0] + 1e-15


class TestLDAM:
    def test_margins(self):
        assert ldam_margins((1, 1), 0.7) == (0.7, 0.7)
        assert ldam_margins((16, 1), 0.5) == (0.25, 0.5)
        d0, d1 = ldam_margins((10000, 100), 0.5)
        assert d0 == pytest.approx(0.05, abs=1e-15)
        assert d1 == pytest.approx(0.15811388300841897, abs=1e-15)

    @given(logit_pairs, labels)
    def test_zero_margin_is_ce(self, z, y):
        assert abs(loss_ldam(z, y, (0.0, 0.0), 1.0)[0] - loss_ce(z, y)[0]) < 1e-12

    def test_margin_shift_cancels(self):
        d = ldam_margins((16, 1), 0.5)
        assert loss_ldam((0.0, d[1]), 1, d, 1.0)[0] == pytest.approx(LN2, abs=1e-15)

    @given(logit_pairs, labels, st.floats(0, 2), st.floats(0, 2))
    def test_shift_identity_and_monotonicity(self, z, y, d0, d1):
        shifted = list(z)
        shifted[y] -= (d0, d1)[y]
        ldam = loss_ldam(z, y, (d0, d1), 1.0)[0]
        assert ldam == loss_ce(shifted, y)[0]
        assert ldam >= loss_ce(z, y)[0] - 1e-15


class TestGradients:
    @pytest.mark.parametrize(
        "fn",
        [
            lambda z, y: loss_ce(z, y),
            lambda z, y: loss_bce_effnum(z, y, (0.31, 1.69)),
            lambda z, y: loss_focal(z, y, 2.0),
            lambda z, y: loss_ldam(z, y, (0.05, 0.16), 10.0),
        ],
        ids=["ce", "bce_effnum", "focal", "ldam"],
    )
    def test_finite_differences(self, fn):
        rng = np.random.default_rng(1)
        for _ in range(100):
            z = rng.normal(scale=2.0, size=2)
            y = int(rng.integers(2))
            _, analytic = fn(z, y)
            numeric = central_difference(lambda x: fn(x, y)[0], z, 1e-5)
            scale = np.maximum(np.abs(numeric) + np.abs(analytic), 1e-6)
            assert np.max(np.abs(numeric - analytic) / scale) < 1e-5

    def test_loss_spec_batch_is_mean(self):
        spec = LossSpec("focal", class_counts=(90, 10))
        z = np.array([[0.1, 0.4], [1.0, -1.0], [0.0, 2.0]])
        y = np.array([1, 0, 1])
        loss, grad = spec.batch(z, y)
        singles = [loss_focal(z[i], y[i], 2.0) for i in range(3)]
        assert loss == pytest.approx(np.mean([s[0] for s in singles]), abs=1e-15)
        np.testing.assert_allclose(grad, np.array([s[1] for s in singles]) / 3, atol=1e-15)

    def test_loss_spec_json(self):
        spec = LossSpec("LDAM", margin_c=0.3, class_counts=(5, 2))
        assert spec.kind == "ldam"
        assert LossSpec.from_json(spec.to_json()) == spec


class TestClassAwareBatches:
    def test_98_plus_2(self):
        y = [0] * 98 + [1] * 2
        plan = class_aware_batches(y, 10, 1, seed=0)
        assert len(plan) == 10
        assert all(any(y[i] == 1 for i in b) for b in plan)

    def test_single_minority_everywhere(self):
        y = [0] * 60 + [1]
        plan = class_aware_batches(y, 8, 1, seed=3)
        assert all(60 in b for b in plan)

    def test_empty_minority(self):
        with pytest.raises(EmptyMinority):
            class_aware_batches([0] * 20, 4, 1, seed=0)

    def test_deterministic(self):
        y = [0] * 50 + [1] * 3
        assert class_aware_batches(y, 8, 2, seed=5) == class_aware_batches(y, 8, 2, seed=5)

    @settings(max_examples=60)
    @given(st.integers(20, 400), st.floats(0.01, 0.1), st.integers(2, 40), st.integers(1, 3), st.integers(0, 10**6))
    def test_contract(self, n, ratio, batch_size, min_minority, seed):
        if batch_size <= min_minority:
            return
        n1 = max(1, round(n * ratio))
        rng = np.random.default_rng(seed)
        y = [0] * (n - n1) + [1] * n1
        rng.shuffle(y)
        plan = class_aware_batches(y, batch_size, min_minority, seed)
        maj = sorted(i for b in plan for i in b if y[i] == 0)
        assert maj == [i for i, v in enumerate(y) if v == 0]
        assert all(sum(y[i] for i in b) >= min_minority for b in plan)
        assert {i for b in plan for i in b} == set(range(n))
