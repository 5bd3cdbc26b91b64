"""Sigmoid-routed mixture-of-experts with deterministic top-k and combine."""
from __future__ import annotations

import enum
from dataclasses import dataclass

import numpy as np

from .numerics import ConfigError, ShapeError, matmul, round_bf16


class RouterPrecision(enum.Enum):
    HIGH = "high"
    LOW_UNSAFE = "low"


@dataclass(frozen=True)
class MoeConfig:
    n_experts: int = 8
    n_top_k: int = 2
    d_model: int = 64
    d_expert_hidden: int = 32
    router_precision: RouterPrecision = RouterPrecision.HIGH

    def __post_init__(self):
        if not 1 <= self.n_top_k <= self.n_experts:
            raise ConfigError(f"need 1 <= n_top_k ({self.n_top_k}) <= n_experts ({self.n_experts})")
        if self.d_model < 1 or self.d_expert_hidden < 1:
            raise ConfigError("MoE dims must be >= 1")


@dataclass(frozen=True)
class MlpParams:
    """SiLU-gated MLP: ``down(silu(x @ gate) * (x @ up))``."""

    gate: np.ndarray
    up: np.ndarray
    down: np.ndarray

    def __call__(self, x: np.ndarray) -> np.ndarray:
        return matmul(silu(matmul(x, self.gate)) * matmul(x, self.up), self.down)


@dataclass(frozen=True)
class RoutingDecision:
    experts: np.ndarray  # (n_tokens, k) int, ascending within each row
    gates: np.ndarray  # (n_tokens, k) sigmoid scores aligned with experts

    def expert_sets(self) -> list[frozenset[int]]:
        return [frozenset(int(e) for e in row) for row in self.experts]


def silu(x: np.ndarray) -> np.ndarray:
    return x * sigmoid(x)


def sigmoid(x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    # split by sign so exp never overflows
    pos = x >= 0
    z = np.exp(-np.abs(x))
    return np.where(pos, 1.0 / (1.0 + z), z / (1.0 + z))


def select_top_k(scores: np.ndarray, k: int) -> np.ndarray:
    """Indices of the k best scores per row, ordered by (score desc, index asc).

    This is a total order, so exact ties always resolve to the lower
    expert index. The returned indices are sorted ascending.
    """
    scores = np.asarray(scores, dtype=np.float64)
    n, e = scores.shape
    idx = np.broadcast_to(np.arange(e), (n, e))
    # lexsort: last key is primary
    order = np.lexsort((idx, -scores), axis=-1)
    return np.sort(order[:, :k], axis=1)


def router_logits(hidden, router_weights, precision: RouterPrecision = RouterPrecision.HIGH) -> np.ndarray:
    logits = matmul(hidden, router_weights)
    if precision is RouterPrecision.LOW_UNSAFE:
        logits = round_bf16(logits)
    return logits


def route(hidden, router_weights, cfg: MoeConfig, precision: RouterPrecision | None = None) -> RoutingDecision:
    """Sigmoid routing with a stable top-k.

    Logits are formed in float64 (``HIGH``) or rounded to bf16
    (``LOW_UNSAFE``); gates are the raw sigmoid scores of the chosen
    experts, not renormalized.
    """
    hidden = np.asarray(hidden, dtype=np.float64)
    router_weights = np.asarray(router_weights, dtype=np.float64)
    if hidden.ndim != 2 or hidden.shape[1] != router_weights.shape[0]:
        raise ShapeError(f"hidden {hidden.shape} does not match router {router_weights.shape}")
    if router_weights.shape[1] != cfg.n_experts:
        raise ShapeError(f"router has {router_weights.shape[1]} experts, config says {cfg.n_experts}")
    logits = router_logits(hidden, router_weights, precision or cfg.router_precision)
    # rank on logits: same order as sigmoid scores, which saturate to 1.0 past ~37
    experts = select_top_k(logits, cfg.n_top_k)
    gates = sigmoid(np.take_along_axis(logits, experts, axis=1))
    return RoutingDecision(experts, gates)


def moe_forward(hidden, decision: RoutingDecision, experts: list[MlpParams], cfg: MoeConfig) -> np.ndarray:
    """Dispatch tokens to experts and combine in ascending expert order.

    Expert e processes its tokens as one batch; because the matmul is
    row-independent, a token's result does not depend on which other tokens
    share the batch, and each output row sums ``gate * expert(x)`` over
    experts in index order. Output is therefore invariant, bit for bit, to
    token order.
    """
    hidden = np.asarray(hidden, dtype=np.float64)
    n = hidden.shape[0]
    if decision.experts.shape[0] != n:
        raise ShapeError(f"routing covers {decision.experts.shape[0]} tokens, hidden has {n}")
    if len(experts) != cfg.n_experts:
        raise ShapeError(f"{len(experts)} expert param sets for {cfg.n_experts} experts")
    if decision.experts.size and (decision.experts.min() < 0 or decision.experts.max() >= cfg.n_experts):
        raise ShapeError("expert index out of range")
    out = np.zeros_like(hidden)
    for e in range(cfg.n_experts):
        rows, slot = np.nonzero(decision.experts == e)
        if rows.size == 0:
            continue
        y = experts[e](hidden[rows])
        out[rows] += decision.gates[rows, slot][:, None] * y
    return out


def route_precision_delta(hidden, router_weights, cfg: MoeConfig,
                          a: RouterPrecision = RouterPrecision.HIGH,
                          b: RouterPrecision = RouterPrecision.LOW_UNSAFE) -> int:
    """Number of tokens whose chosen expert set differs between two router precisions."""
    da = route(hidden, router_weights, cfg, a)
    db = route(hidden, router_weights, cfg, b)
    return int(sum(x != y for x, y in zip(da.expert_sets(), db.expert_sets())))
