import math
import warnings

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from hybridattn.rl_objective import (
    BatchParseError,
    RlBatch,
    batch_to_csv,
    comparison_rows,
    disparity_fraction,
    estimator_gap,
    parse_batch_csv,
    ppo_recompute_objective,
    ppo_rollout_objective,
    synthetic_batch,
)


def literal_ppo(lp_new, lp_den, adv, eps):
    """Per-token min(r A, clip(r, 1-eps, 1+eps) A), one Python float at a time."""
    terms = []
    for a, b, A in zip(lp_new, lp_den, adv):
        r = math.exp(a - b)
        clipped = min(max(r, 1 - eps), 1 + eps)
        terms.append(min(r * A, clipped * A))
    return terms


def random_batch(rng, n=200, eps=0.2):
    lp_old = np.log(rng.uniform(0.01, 1.0, n))
    lp_roll = np.minimum(lp_old + rng.normal(0, 0.2, n), 0.0)
    lp_new = np.minimum(lp_old + rng.normal(0, 0.3, n), 0.0)
    return RlBatch(lp_roll, lp_old, lp_new, rng.standard_normal(n), eps)


class TestBatch:
    def test_rejects_positive_logprob(self):
        with pytest.raises(ValueError):
            RlBatch([0.1], [0.0], [0.0], [1.0])

    def test_rejects_epsilon(self):
        with pytest.raises(ValueError):
            RlBatch([0.0], [0.0], [0.0], [1.0], epsilon=1.0)

    def test_rejects_ragged(self):
        with pytest.raises(ValueError):
            RlBatch([0.0, 0.0], [0.0], [0.0], [1.0])


class TestRollout:
    def test_on_policy(self, rng):
        lp = np.log(rng.uniform(0.1, 1, 10))
        adv = rng.standard_normal(10)
        out = ppo_rollout_objective(RlBatch(lp, lp, lp, adv))
        assert np.array_equal(out.surrogate, adv)

    def test_upper_clip(self):
        out = ppo_rollout_objective(RlBatch([math.log(0.25)], [math.log(0.25)], [math.log(0.5)], [1.0], 0.2))
        assert out.surrogate[0] == pytest.approx(1.2, abs=1e-15) and out.clip_active[0]

    def test_lower_clip_negative_advantage(self):
        out = ppo_rollout_objective(RlBatch([math.log(0.5)], [math.log(0.5)], [math.log(0.25)], [-1.0], 0.2))
        assert out.surrogate[0] == pytest.approx(-0.8, abs=1e-15)

    def test_matches_literal_formula(self, rng):
        b = random_batch(rng)
        out = ppo_rollout_objective(b)
        want = literal_ppo(b.lp_train_new, b.lp_rollout, b.advantage, b.epsilon)
        assert np.allclose(out.surrogate, want, rtol=0, atol=1e-15)
        assert out.objective == pytest.approx(sum(want) / len(want), abs=1e-15)

    def test_nonfinite_excluded(self):
        b = RlBatch([-np.inf, -1.0, -1.0], [-1.0, -1.0, -1.0], [-0.5, -1.0, -1.0], [1.0, 2.0, 4.0])
        with pytest.warns(RuntimeWarning, match="1 tokens"):
            out = ppo_rollout_objective(b)
        assert out.n_excluded == 1 and np.isnan(out.surrogate[0])
        assert out.objective == 3.0


class TestRecompute:
    def test_matches_literal_formula(self, rng):
        b = random_batch(rng)
        out = ppo_recompute_objective(b)
        want = literal_ppo(b.lp_train_new, b.lp_train_old, b.advantage, b.epsilon)
        assert np.allclose(out.surrogate, want, rtol=0, atol=1e-15)

    def test_aligned_is_bitwise_rollout(self, rng):
        b = random_batch(rng)
        aligned = RlBatch(b.lp_train_old, b.lp_train_old, b.lp_train_new, b.advantage)
        a, c = ppo_rollout_objective(aligned), ppo_recompute_objective(aligned)
        assert np.array_equal(a.surrogate, c.surrogate) and a.objective == c.objective

    def test_same_parameters(self, rng):
        b = random_batch(rng)
        same = RlBatch(b.lp_rollout, b.lp_train_old, b.lp_train_old, b.advantage)
        assert ppo_recompute_objective(same).objective == pytest.approx(float(np.mean(b.advantage)), abs=1e-15)

    def test_bias_reported(self, rng):
        b = random_batch(rng)
        g = estimator_gap(b)
        want = ppo_recompute_objective(b).objective - ppo_rollout_objective(b).objective
        assert g.bias == want and g.bias != 0.0


class TestProperties:
    @settings(max_examples=100, deadline=None)
    @given(st.integers(0, 2**32 - 1), st.floats(0.05, 0.95))
    def test_clip_bounds(self, seed, eps):
        b = random_batch(np.random.default_rng(seed), 50, eps)
        for out, den in ((ppo_rollout_objective(b), b.lp_rollout), (ppo_recompute_objective(b), b.lp_train_old)):
            r = np.exp(b.lp_train_new - den)
            cands = np.stack([r * b.advantage, (1 - eps) * b.advantage, (1 + eps) * b.advantage])
            assert np.all(out.surrogate >= cands.min(0)) and np.all(out.surrogate <= cands.max(0))

    @settings(max_examples=50, deadline=None)
    @given(st.integers(0, 2**32 - 1), st.integers(-6, 6))
    def test_power_of_two_scale_exact(self, seed, e):
        b = random_batch(np.random.default_rng(seed), 64)
        c = 2.0**e
        scaled = RlBatch(b.lp_rollout, b.lp_train_old, b.lp_train_new, b.advantage * c, b.epsilon)
        assert ppo_rollout_objective(scaled).objective == c * ppo_rollout_objective(b).objective
        assert ppo_recompute_objective(scaled).objective == c * ppo_recompute_objective(b).objective

    @settings(max_examples=50, deadline=None)
    @given(st.integers(0, 2**32 - 1), st.floats(0.01, 100.0))
    def test_general_scale(self, seed, c):
        b = random_batch(np.random.default_rng(seed), 64)
        scaled = RlBatch(b.lp_rollout, b.lp_train_old, b.lp_train_new, b.advantage * c, b.epsilon)
        base = ppo_rollout_objective(b).objective
        assert ppo_rollout_objective(scaled).objective == pytest.approx(c * base, rel=1e-12, abs=1e-14)

    def test_zero_gap_when_aligned(self, rng):
        b = random_batch(rng)
        aligned = RlBatch(b.lp_train_old, b.lp_train_old, b.lp_train_new, b.advantage)
        g = estimator_gap(aligned)
        assert g.max == 0.0 and g.clip_flip_fraction == 0.0 and len(g.nonzero_tokens()) == 0


class TestDisparity:
    def test_synthetic_aligned(self):
        b, bad = synthetic_batch(1000, disparity_rate=0.0, seed=3)
        assert bad.size == 0 and disparity_fraction(b) == 0.0
        assert np.array_equal(b.lp_rollout, b.lp_train_old)

    def test_synthetic_localized(self):
        b, bad = synthetic_batch(1000, disparity_rate=0.1, seed=3)
        assert bad.size == 100
        assert np.array_equal(estimator_gap(b).nonzero_tokens(), bad)
        assert disparity_fraction(b, 0.8) == 0.1

    def test_threshold(self):
        b = RlBatch([math.log(0.1)], [math.log(0.85)], [math.log(0.85)], [1.0])
        assert disparity_fraction(b, 0.7) == 1.0 and disparity_fraction(b, 0.8) == 0.0


class TestCsv:
    def test_round_trip(self, rng):
        b = random_batch(rng, 20)
        back = parse_batch_csv(batch_to_csv(b), b.epsilon)
        for name in ("lp_rollout", "lp_train_old", "lp_train_new", "advantage", "token_id"):
            assert np.array_equal(getattr(back, name), getattr(b, name))

    def test_empty(self):
        with pytest.raises(BatchParseError, match="empty input"):
            parse_batch_csv("")
        with pytest.raises(BatchParseError, match="empty input"):
            parse_batch_csv("token_id,lp_rollout,lp_train_old,lp_train_new,advantage\n")

    @pytest.mark.parametrize(
        "body,line",
        [
            ("0,-1,-1,-1,1\n1,-1,-1,-1\n", 3),
            ("0,-1,-1,-1,1\n1,-1,x,-1,1\n", 3),
            ("0,0.5,-1,-1,1\n", 2),
            ("0,nan,-1,-1,1\n", 2),
        ],
    )
    def test_line_numbers(self, body, line):
        text = "token_id,lp_rollout,lp_train_old,lp_train_new,advantage\n" + body
        with pytest.raises(BatchParseError) as info:
            parse_batch_csv(text)
        assert info.value.line == line and f"line {line}" in str(info.value)

    def test_bad_header(self):
        with pytest.raises(BatchParseError, match="line 1"):
            parse_batch_csv("a,b,c\n")

    def test_comparison_rows(self):
        b, _ = synthetic_batch(50, disparity_rate=0.0, seed=1)
        rows = dict(comparison_rows(b))
        assert rows["tokens"] == 50 and float(rows["gap_max"]) == 0.0
        with warnings.catch_warnings():
            warnings.simplefilter("error")
            comparison_rows(b)
