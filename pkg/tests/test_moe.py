import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from hybridattn.moe import (
    MlpParams,
    MoeConfig,
    RouterPrecision,
    RoutingDecision,
    moe_forward,
    route,
    route_precision_delta,
    select_top_k,
    sigmoid,
)
from hybridattn.numerics import ConfigError, ShapeError


def sort_oracle(scores, k):
    """Full Python sort on (-score, index); the k best, returned ascending."""
    out = []
    for row in scores:
        ranked = sorted(range(len(row)), key=lambda e: (-row[e], e))
        out.append(sorted(ranked[:k]))
    return np.array(out)


def make_experts(rng, cfg):
    d, h = cfg.d_model, cfg.d_expert_hidden
    return [
        MlpParams(rng.standard_normal((d, h)), rng.standard_normal((d, h)), rng.standard_normal((h, d)))
        for _ in range(cfg.n_experts)
    ]


def logits_router(logits):
    """Identity hidden plus router = logits, so route sees these logits exactly."""
    n = logits.shape[0]
    return np.eye(n), np.asarray(logits, dtype=np.float64)


@pytest.fixture
def cfg():
    return MoeConfig(n_experts=8, n_top_k=2, d_model=12, d_expert_hidden=6)


class TestConfig:
    def test_rejects_k(self):
        with pytest.raises(ConfigError):
            MoeConfig(n_experts=4, n_top_k=5)
        with pytest.raises(ConfigError):
            MoeConfig(n_top_k=0)


class TestTopK:
    def test_matches_sort_oracle(self, rng):
        scores = rng.standard_normal((50, 8))
        for k in (1, 2, 5, 8):
            assert np.array_equal(select_top_k(scores, k), sort_oracle(scores, k))

    def test_ties_prefer_lower_index(self):
        assert select_top_k(np.zeros((1, 6)), 3).tolist() == [[0, 1, 2]]
        assert select_top_k(np.array([[1.0, 2.0, 2.0, 2.0]]), 2).tolist() == [[1, 2]]

    @settings(max_examples=100, deadline=None)
    @given(st.lists(st.sampled_from([-1.0, 0.0, 0.5, 1.0]), min_size=4, max_size=12), st.integers(1, 4))
    def test_heavy_ties_match_oracle(self, values, k):
        scores = np.array([values])
        assert np.array_equal(select_top_k(scores, k), sort_oracle(scores, k))


class TestRoute:
    def test_all_experts(self, rng):
        cfg = MoeConfig(n_experts=4, n_top_k=4, d_model=3)
        d = route(rng.standard_normal((5, 3)), rng.standard_normal((3, 4)), cfg)
        assert d.experts.tolist() == [[0, 1, 2, 3]] * 5

    def test_equal_logits(self, cfg):
        h, w = logits_router(np.full((3, 8), 0.7))
        assert route(h, w, cfg).experts.tolist() == [[0, 1]] * 3

    def test_brute_force(self, rng, cfg):
        hidden, w = rng.standard_normal((30, 12)), rng.standard_normal((12, 8))
        d = route(hidden, w, cfg)
        scores = 1.0 / (1.0 + np.exp(-(hidden @ w)))
        assert np.array_equal(d.experts, sort_oracle(scores, 2))
        assert np.allclose(d.gates, np.take_along_axis(scores, d.experts, 1), atol=1e-15)

    def test_gates_in_open_interval(self, rng, cfg):
        # float64 sigmoid rounds to 1.0 beyond ~37, so stay inside that range
        h, w = logits_router(np.clip(rng.standard_normal((20, 8)) * 15, -36, 36))
        g = route(h, w, cfg).gates
        assert np.all((g > 0) & (g < 1))

    def test_large_logits_still_ranked(self, cfg):
        h, w = logits_router(np.array([[40.0, 45.0, 50.0, 38.0, 0.0, 0.0, 0.0, 0.0]]))
        assert route(h, w, cfg).experts.tolist() == [[1, 2]]

    def test_sigmoid_extremes(self):
        s = sigmoid(np.array([-800.0, 0.0, 800.0]))
        assert s[1] == 0.5 and 0.0 <= s[0] < 1e-300 and s[2] == 1.0

    @settings(max_examples=60, deadline=None)
    @given(st.integers(0, 2**32 - 1), st.floats(-50, 50))
    def test_constant_shift_keeps_set(self, seed, c):
        cfg = MoeConfig(n_experts=8, n_top_k=3, d_model=8)
        logits = np.random.default_rng(seed).integers(-20, 20, (6, 8)) / 4.0
        a = route(*logits_router(logits), cfg).expert_sets()
        b = route(*logits_router(logits + c), cfg).expert_sets()
        assert a == b

    def test_shape_errors(self, rng, cfg):
        with pytest.raises(ShapeError):
            route(rng.standard_normal((2, 5)), rng.standard_normal((12, 8)), cfg)
        with pytest.raises(ShapeError):
            route(rng.standard_normal((2, 12)), rng.standard_normal((12, 7)), cfg)


class TestForward:
    def test_single_expert(self, rng):
        cfg = MoeConfig(n_experts=3, n_top_k=1, d_model=4, d_expert_hidden=5)
        experts = make_experts(rng, cfg)
        x = rng.standard_normal((1, 4))
        d = RoutingDecision(np.array([[2]]), np.array([[0.3]]))
        assert np.array_equal(moe_forward(x, d, experts, cfg), 0.3 * experts[2](x))

    def test_identical_experts(self, rng, cfg):
        one = make_experts(rng, cfg)[0]
        x = rng.standard_normal((4, 12))
        gates = np.full((4, 2), 0.25)
        a = moe_forward(x, RoutingDecision(np.array([[0, 1]] * 4), gates), [one] * 8, cfg)
        b = moe_forward(x, RoutingDecision(np.array([[3, 7]] * 4), gates), [one] * 8, cfg)
        assert np.array_equal(a, b)

    def test_matches_direct_sum(self, rng, cfg):
        experts = make_experts(rng, cfg)
        x, w = rng.standard_normal((10, 12)), rng.standard_normal((12, 8))
        d = route(x, w, cfg)
        out = moe_forward(x, d, experts, cfg)
        for t in range(10):
            want = sum(g * experts[e](x[t : t + 1])[0] for e, g in zip(d.experts[t], d.gates[t]))
            assert np.array_equal(out[t], want)

    def test_permutation_bitwise(self, rng, cfg):
        experts = make_experts(rng, cfg)
        x, w = rng.standard_normal((64, 12)), rng.standard_normal((12, 8))
        base = moe_forward(x, route(x, w, cfg), experts, cfg)
        for _ in range(5):
            perm = rng.permutation(64)
            xp = x[perm]
            out = moe_forward(xp, route(xp, w, cfg), experts, cfg)
            back = np.empty_like(out)
            back[perm] = out
            assert np.array_equal(back, base)

    def test_repeatable(self, rng, cfg):
        experts = make_experts(rng, cfg)
        x, w = rng.standard_normal((16, 12)), rng.standard_normal((12, 8))
        runs = [moe_forward(x, route(x, w, cfg), experts, cfg) for _ in range(3)]
        assert all(np.array_equal(r, runs[0]) for r in runs)

    def test_rejects_bad_index(self, rng, cfg):
        d = RoutingDecision(np.array([[0, 9]]), np.array([[0.5, 0.5]]))
        with pytest.raises(ShapeError):
            moe_forward(rng.standard_normal((1, 12)), d, make_experts(rng, cfg), cfg)

    def test_rejects_token_mismatch(self, rng, cfg):
        d = RoutingDecision(np.array([[0, 1]]), np.array([[0.5, 0.5]]))
        with pytest.raises(ShapeError):
            moe_forward(rng.standard_normal((2, 12)), d, make_experts(rng, cfg), cfg)


class TestPrecisionDelta:
    def test_separated_logits(self, rng, cfg):
        logits = np.tile(np.arange(8) * 0.125, (10, 1))
        for row in logits:
            rng.shuffle(row)
        assert route_precision_delta(*logits_router(logits), cfg) == 0

    def test_near_tie_flips(self):
        cfg = MoeConfig(n_experts=4, n_top_k=1, d_model=3)
        # expert 1 leads by 2^-10, below bf16 spacing at 1.0, so rounding creates a tie
        logits = np.array([[1.0, 1.0 + 2.0**-10, 0.0, -1.0]] * 3)
        assert route_precision_delta(*logits_router(logits), cfg) == 3

    def test_same_precision(self, rng, cfg):
        h, w = logits_router(rng.standard_normal((5, 8)))
        assert route_precision_delta(h, w, cfg, RouterPrecision.LOW_UNSAFE, RouterPrecision.LOW_UNSAFE) == 0
        assert route_precision_delta(h, w, cfg, RouterPrecision.HIGH, RouterPrecision.HIGH) == 0
