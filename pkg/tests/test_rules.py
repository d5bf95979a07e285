"""Rule kinds, mask sampling, schedules, reductions, deterministic transform."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from swapnet import tensor as T
from swapnet.rules import (
    MaskSet,
    Schedule,
    StochasticRule,
    apply_rule,
    apply_rule_general,
    deterministic_transform,
    format_schedule,
    parse_schedule,
    resolve_schedule,
    sample_masks,
)


class TestStochasticRuleType:
    def test_theta_range_enforced(self):
        with pytest.raises(ValueError):
            StochasticRule("dropout", (1.5,))
        with pytest.raises(ValueError):
            StochasticRule("swapout_pair", (-0.1, 0.5))

    def test_arity_enforced(self):
        with pytest.raises(ValueError):
            StochasticRule("swapout_pair", (0.5,))
        with pytest.raises(ValueError):
            StochasticRule("dropout", (0.5, 0.5))
        with pytest.raises(ValueError):
            StochasticRule("swapout_general", (0.5,))

    def test_layer_dropout_forces_block_granularity(self):
        assert StochasticRule("layer_dropout", (0.5,)).granularity == "block"
        with pytest.raises(ValueError):
            StochasticRule("layer_dropout", (0.5,), granularity="channel")

    def test_unknown_kind(self):
        with pytest.raises(ValueError):
            StochasticRule("zapout", (0.5,))


class TestMaskSampling:
    def test_theta_one_all_ones(self):
        ms = sample_masks(StochasticRule("dropout", (1.0,)), (2, 3, 4, 4), (0, 0))
        assert np.all(ms.masks[0].array == 1.0)

    def test_theta_zero_all_zeros(self):
        ms = sample_masks(StochasticRule("dropout", (0.0,)), (2, 3, 4, 4), (0, 0))
        assert np.all(ms.masks[0].array == 0.0)

    def test_entries_binary(self):
        ms = sample_masks(StochasticRule("swapout_pair", (0.3, 0.7)), (4, 2, 5, 5), (9,))
        for m in ms.masks:
            assert np.all((m.array == 0.0) | (m.array == 1.0))

    def test_empirical_mean(self):
        # binomial standard error bound at 1e5 entries
        n = 100_000
        ms = sample_masks(StochasticRule("dropout", (0.7,)), (n,), (5,))
        se = np.sqrt(0.7 * 0.3 / n)
        assert abs(ms.masks[0].array.mean() - 0.7) < 3 * se

    def test_same_key_reproducible(self):
        rule = StochasticRule("swapout_pair", (0.5, 0.5))
        a = sample_masks(rule, (2, 2, 3, 3), (1, 2, 3))
        b = sample_masks(rule, (2, 2, 3, 3), (1, 2, 3))
        for ma, mb in zip(a.masks, b.masks):
            assert np.array_equal(ma.array, mb.array)

    def test_streams_independent_across_slots(self):
        rule = StochasticRule("swapout_pair", (0.5, 0.5))
        ms = sample_masks(rule, (1, 1, 16, 16), (7,))
        assert not np.array_equal(ms.masks[0].array, ms.masks[1].array)

    def test_skip_forward_masks_complement(self):
        ms = sample_masks(StochasticRule("skip_forward", (0.4,)), (2, 3, 4, 4), (11,))
        assert np.all(ms.masks[0].array + ms.masks[1].array == 1.0)

    def test_block_granularity_one_value_per_example(self):
        rule = StochasticRule("layer_dropout", (0.5,))
        ms = sample_masks(rule, (8, 3, 4, 4), (2,))
        m = ms.masks[0].array
        assert m.shape == (8, 3, 4, 4)
        for b in range(8):
            assert m[b].min() == m[b].max()

    def test_channel_granularity_constant_within_channel(self):
        rule = StochasticRule("swapout_pair", (0.5, 0.5), granularity="channel")
        ms = sample_masks(rule, (2, 6, 5, 5), (3,))
        m = ms.masks[0].array
        for b in range(2):
            for c in range(6):
                assert m[b, c].min() == m[b, c].max()

    def test_shared_across_batch(self):
        rule = StochasticRule("dropout", (0.5,))
        ms = sample_masks(rule, (4, 2, 3, 3), (1,), per_example=False)
        m = ms.masks[0].array
        for b in range(1, 4):
            assert np.array_equal(m[0], m[b])

    def test_mask_set_validates_binary(self):
        with pytest.raises(ValueError):
            MaskSet((T.tensor([0.5]),), (0.5,))


class TestApplyRule:
    def test_hand_case_four_choices(self):
        # per-unit choices 0, x, fx, x+fx
        rule = StochasticRule("swapout_pair", (0.5, 0.5))
        masks = MaskSet((T.tensor([1.0, 0.0, 1.0, 0.0]), T.tensor([1.0, 1.0, 0.0, 0.0])),
                        (0.5, 0.5))
        out = apply_rule(rule, T.tensor([1.0, 2.0, 3.0, 4.0]),
                         T.tensor([10.0, 20.0, 30.0, 40.0]), masks)
        assert out.tolist() == [11.0, 20.0, 3.0, 0.0]

    def test_none_is_plain_residual(self):
        x, fx = T.tensor([1.0, 2.0]), T.tensor([3.0, 4.0])
        assert apply_rule(StochasticRule("none"), x, fx, None).tolist() == [4.0, 6.0]

    def test_all_ones_reduces_to_residual(self):
        rng = np.random.default_rng(0)
        x = T.tensor(rng.standard_normal((2, 3, 4, 4)))
        fx = T.tensor(rng.standard_normal((2, 3, 4, 4)))
        rule = StochasticRule("swapout_pair", (1.0, 1.0))
        ms = sample_masks(rule, x.shape, (0,))
        got = apply_rule(rule, x, fx, ms)
        want = apply_rule(StochasticRule("none"), x, fx, None)
        assert np.array_equal(got.array, want.array)

    def test_theta1_zero_reduces_to_dropout(self):
        rng = np.random.default_rng(1)
        x = T.tensor(rng.standard_normal((2, 3, 4, 4)))
        fx = T.tensor(rng.standard_normal((2, 3, 4, 4)))
        key = (42, 7)
        pair = StochasticRule("swapout_pair", (0.0, 0.6))
        drop = StochasticRule("dropout", (0.6,))
        got = apply_rule(pair, x, fx, sample_masks(pair, x.shape, key))
        want = apply_rule(drop, x, fx, sample_masks(drop, x.shape, key))
        assert np.array_equal(got.array, want.array)

    def test_block_scalar_pair_reduces_to_layer_dropout(self):
        rng = np.random.default_rng(2)
        x = T.tensor(rng.standard_normal((4, 2, 3, 3)))
        fx = T.tensor(rng.standard_normal((4, 2, 3, 3)))
        key = (13, 5)
        pair = StochasticRule("swapout_pair", (1.0, 0.5), granularity="block")
        ld = StochasticRule("layer_dropout", (0.5,))
        got = apply_rule(pair, x, fx, sample_masks(pair, x.shape, key))
        want = apply_rule(ld, x, fx, sample_masks(ld, x.shape, key))
        assert np.array_equal(got.array, want.array)

    def test_wrong_mask_count(self):
        rule = StochasticRule("swapout_pair", (0.5, 0.5))
        one_mask = MaskSet((T.ones((2,)),), (0.5,))
        with pytest.raises(ValueError):
            apply_rule(rule, T.ones((2,)), T.ones((2,)), one_mask)

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            apply_rule(StochasticRule("none"), T.ones((2,)), T.ones((3,)), None)

    @given(st.integers(0, 2**31 - 1), st.floats(0.0, 1.0), st.floats(0.0, 1.0),
           st.integers(1, 4), st.integers(1, 4))
    @settings(max_examples=30, deadline=None)
    def test_reduction_lattice_property(self, seed, t1, t2, B, C):
        """The reductions hold bit-exactly for any seed, theta, and shape."""
        rng = np.random.default_rng(seed)
        shape = (B, C, 3, 3)
        x = T.tensor(rng.standard_normal(shape))
        fx = T.tensor(rng.standard_normal(shape))
        key = (seed, 0)
        pair0 = StochasticRule("swapout_pair", (0.0, t2))
        drop = StochasticRule("dropout", (t2,))
        a = apply_rule(pair0, x, fx, sample_masks(pair0, shape, key))
        b = apply_rule(drop, x, fx, sample_masks(drop, shape, key))
        assert np.array_equal(a.array, b.array)
        sf = StochasticRule("skip_forward", (t1,))
        ms = sample_masks(sf, shape, key)
        assert np.all(ms.masks[0].array + ms.masks[1].array == 1.0)


class TestApplyRuleGeneral:
    def test_pair_is_special_case(self):
        rng = np.random.default_rng(3)
        x = T.tensor(rng.standard_normal((2, 2, 2, 2)))
        fx = T.tensor(rng.standard_normal((2, 2, 2, 2)))
        key = (8, 1)
        pair = StochasticRule("swapout_pair", (0.5, 0.5))
        gen = StochasticRule("swapout_general", (0.5, 0.5))
        ms_pair = sample_masks(pair, x.shape, key)
        ms_gen = sample_masks(gen, x.shape, key)
        a = apply_rule(pair, x, fx, ms_pair)
        b = apply_rule_general([x, fx], ms_gen)
        assert np.array_equal(a.array, b.array)

    def test_all_zero_masks(self):
        ms = MaskSet((T.zeros((3,)), T.zeros((3,))), (0.0, 0.0))
        out = apply_rule_general([T.ones((3,)), T.ones((3,))], ms)
        assert np.all(out.array == 0.0)

    def test_subset_sum(self):
        ms = MaskSet((T.tensor([1.0]), T.tensor([0.0]), T.tensor([1.0])), (0.5, 0.5, 0.5))
        out = apply_rule_general([T.tensor([1.0]), T.tensor([2.0]), T.tensor([4.0])], ms)
        assert out.tolist() == [5.0]

    def test_length_mismatch(self):
        ms = MaskSet((T.ones((1,)),), (1.0,))
        with pytest.raises(ValueError):
            apply_rule_general([T.ones((1,)), T.ones((1,))], ms)


class TestSchedules:
    def test_endpoints_and_midpoint(self):
        s = Schedule.linear(1.0, 0.5)
        assert resolve_schedule(s, 0, 9) == 1.0
        assert resolve_schedule(s, 8, 9) == 0.5
        assert resolve_schedule(s, 4, 9) == 0.75

    def test_constant(self):
        s = Schedule.constant(0.5)
        for i in range(5):
            assert resolve_schedule(s, i, 5) == 0.5

    def test_single_block_returns_first_endpoint(self):
        assert resolve_schedule(Schedule.linear(1.0, 0.5), 0, 1) == 1.0

    def test_out_of_range(self):
        with pytest.raises(ValueError):
            resolve_schedule(Schedule.constant(0.5), 5, 5)
        with pytest.raises(ValueError):
            resolve_schedule(Schedule.constant(0.5), -1, 5)

    def test_endpoints_validated(self):
        with pytest.raises(ValueError):
            Schedule.linear(1.2, 0.5)

    @given(st.floats(0.0, 1.0), st.floats(0.0, 1.0), st.integers(2, 20))
    @settings(max_examples=40, deadline=None)
    def test_monotone_and_bounded(self, a, b, n):
        s = Schedule.linear(a, b)
        vals = [resolve_schedule(s, i, n) for i in range(n)]
        lo, hi = min(a, b), max(a, b)
        assert all(lo - 1e-12 <= v <= hi + 1e-12 for v in vals)
        diffs = np.diff(vals)
        if a <= b:
            assert np.all(diffs >= -1e-12)
        else:
            assert np.all(diffs <= 1e-12)

    def test_parse_format_round_trip(self):
        for text in ("constant:0.5", "linear:1.0:0.5"):
            s = parse_schedule(text)
            assert parse_schedule(format_schedule(s)) == s
        with pytest.raises(ValueError):
            parse_schedule("cosine:0.5")


class TestDeterministicTransform:
    def test_pair_all_ones_is_residual(self):
        det = deterministic_transform(StochasticRule("swapout_pair", (1.0, 1.0)))
        x, fx = T.tensor([1.5, -2.0]), T.tensor([0.5, 1.0])
        assert np.array_equal(det.apply(x, fx).array, (x.array + fx.array))

    def test_dropout_scaling(self):
        det = deterministic_transform(StochasticRule("dropout", (0.5,)))
        out = det.apply(T.tensor([9.0, 9.0]), T.tensor([2.0, 4.0]))
        assert out.tolist() == [1.0, 2.0]

    def test_skip_forward_coefficients(self):
        det = deterministic_transform(StochasticRule("skip_forward", (0.25,)))
        out = det.apply(T.tensor([4.0]), T.tensor([8.0]))
        assert out.tolist() == [0.25 * 4.0 + 0.75 * 8.0]

    def test_layer_dropout(self):
        det = deterministic_transform(StochasticRule("layer_dropout", (0.5,)))
        out = det.apply(T.tensor([1.0]), T.tensor([4.0]))
        assert out.tolist() == [3.0]

    def test_linear_block_matches_enumeration(self):
        # no nonlinearity after the combination, so E[Y] = det transform exactly
        rng = np.random.default_rng(4)
        x = T.tensor(rng.standard_normal(3))
        fx = T.tensor(rng.standard_normal(3))
        rule = StochasticRule("swapout_pair", (0.3, 0.8))
        det = deterministic_transform(rule).apply(x, fx).array
        exact = np.zeros(3)
        for b1 in (0.0, 1.0):
            for b2 in (0.0, 1.0):
                p = (0.3 if b1 else 0.7) * (0.8 if b2 else 0.2)
                ms = MaskSet((T.full((3,), b1), T.full((3,), b2)), (0.3, 0.8))
                exact += p * apply_rule(rule, x, fx, ms).array
        np.testing.assert_allclose(det, exact, rtol=1e-12, atol=1e-15)

    def test_general_coefficients(self):
        det = deterministic_transform(StochasticRule("swapout_general", (0.5, 1.0, 0.25)))
        out = det.apply_general([T.tensor([2.0]), T.tensor([3.0]), T.tensor([4.0])])
        assert out.tolist() == [1.0 + 3.0 + 1.0]


class TestMoments:
    def test_constant_mean_variance_monte_carlo(self):
        # E = t1 x + t2 y, Var = t1(1-t1)x^2 + t2(1-t2)y^2 for constants x, y
        n = 100_000
        x, y, t1, t2 = 1.0, -2.0, 0.3, 0.8
        rule = StochasticRule("swapout_pair", (t1, t2))
        ms = sample_masks(rule, (n,), (21,))
        draws = ms.masks[0].array * x + ms.masks[1].array * y
        mean = t1 * x + t2 * y
        var = t1 * (1 - t1) * x**2 + t2 * (1 - t2) * y**2
        se_mean = np.sqrt(var / n)
        assert abs(draws.mean() - mean) < 4 * se_mean
        m4 = ((draws - draws.mean()) ** 4).mean()
        se_var = np.sqrt(max(m4 - draws.var() ** 2, 0.0) / n)
        assert abs(draws.var() - var) < 4 * se_var

    def test_degenerate_thetas_zero_variance(self):
        for t1, t2 in [(0.0, 0.0), (0.0, 1.0), (1.0, 0.0), (1.0, 1.0)]:
            rule = StochasticRule("swapout_pair", (t1, t2))
            ms = sample_masks(rule, (1000,), (3,))
            draws = ms.masks[0].array * 1.7 + ms.masks[1].array * (-0.9)
            # every draw is the same value: the combination is degenerate
            assert draws.min() == draws.max()
            analytic_var = t1 * (1 - t1) * 1.7**2 + t2 * (1 - t2) * 0.9**2
            assert analytic_var == 0.0

    def test_relu_noncommutation_witness(self):
        # E[relu(M1*1 + M2*(-2))] = 0.25 over the 4 outcomes; relu(E) = 0
        x, y, t = 1.0, -2.0, 0.5
        expect = 0.0
        for b1 in (0.0, 1.0):
            for b2 in (0.0, 1.0):
                expect += 0.25 * max(b1 * x + b2 * y, 0.0)
        assert expect == 0.25
        mean = t * x + t * y
        assert max(mean, 0.0) == 0.0
