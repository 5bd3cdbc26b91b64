"""Fixed-decay linear attention in quadratic, recurrent and chunked forms.

Single-head operations take ``(n, d)`` matrices and a scalar decay. Multi-head
callers pass ``(H, n, d)`` arrays and one decay per head; the state always
stores ``(H, d_k, d_v)``.

The head-wise power-law schedule used here is a stand-in: the exponent
family ``1 - 2**-(start + (end - start) * h / (H - 1))`` is a
retention-style choice, not a published production schedule.
"""
from __future__ import annotations

import enum
from dataclasses import dataclass, field

import numpy as np

from . import _kernels
from .numerics import ConfigError, Precision, PrecisionMode, ShapeError, matmul

# --- decay schedules ------------------------------------------------------


class DecayKind(enum.Enum):
    POWER_LAW = "power_law"
    LINEAR = "linear"
    UNIFORM = "uniform"


@dataclass(frozen=True)
class DecaySchedule:
    rates: tuple[float, ...]
    kind: DecayKind

    def __post_init__(self):
        if not self.rates:
            raise ConfigError("decay schedule needs at least one head")
        for r in self.rates:
            if not 0.0 < r <= 1.0:
                raise ConfigError(f"decay rate {r} outside (0, 1]")

    @property
    def n_heads(self) -> int:
        return len(self.rates)

    def as_array(self) -> np.ndarray:
        return np.array(self.rates, dtype=np.float64)


def make_decay_schedule(
    n_heads: int,
    kind: DecayKind | str = DecayKind.POWER_LAW,
    *,
    uniform_rate: float = 0.9,
    exp_start: float = 5.0,
    exp_end: float = 8.0,
) -> DecaySchedule:
    """Per-head decay rates.

    ``POWER_LAW`` spaces the exponent of ``1 - lambda`` evenly, so the
    rates run from ``1 - 2**-exp_start`` to ``1 - 2**-exp_end``. ``LINEAR``
    spaces the rates themselves evenly between the same endpoints.
    """
    kind = DecayKind(kind)
    if n_heads < 1:
        raise ConfigError("n_heads must be >= 1")
    h = np.arange(n_heads, dtype=np.float64)
    frac = h / (n_heads - 1) if n_heads > 1 else np.zeros(1)
    if kind is DecayKind.POWER_LAW:
        rates = 1.0 - 2.0 ** -(exp_start + (exp_end - exp_start) * frac)
    elif kind is DecayKind.LINEAR:
        lo, hi = 1.0 - 2.0**-exp_start, 1.0 - 2.0**-exp_end
        rates = lo + (hi - lo) * frac
    else:
        rates = np.full(n_heads, float(uniform_rate))
    return DecaySchedule(tuple(float(r) for r in rates), kind)


# --- state ----------------------------------------------------------------


@dataclass(frozen=True)
class LinearAttnState:
    """Accumulated key-value state, one ``d_k x d_v`` matrix per head."""

    kv: np.ndarray
    step: int = 0

    def __post_init__(self):
        if self.kv.ndim != 3:
            raise ShapeError(f"state must be (heads, d_k, d_v), got {self.kv.shape}")
        self.kv.setflags(write=False)

    @classmethod
    def fresh(cls, n_heads: int, d_k: int, d_v: int | None = None) -> "LinearAttnState":
        return cls(np.zeros((n_heads, d_k, d_k if d_v is None else d_v)), 0)

    @property
    def n_heads(self) -> int:
        return self.kv.shape[0]

    @property
    def nbytes(self) -> int:
        return self.kv.nbytes


def _heads(x, name: str) -> np.ndarray:
    a = np.asarray(x, dtype=np.float64)
    if a.ndim == 1:
        a = a[None, None, :]
    elif a.ndim == 2:
        a = a[None]
    if a.ndim != 3:
        raise ShapeError(f"{name} must be (n, d) or (heads, n, d), got {a.shape}")
    return np.ascontiguousarray(a)


def _rates(lam, n_heads: int) -> np.ndarray:
    r = np.atleast_1d(np.asarray(lam, dtype=np.float64))
    if r.size == 1:
        r = np.full(n_heads, float(r[0]))
    if r.shape != (n_heads,):
        raise ShapeError(f"need {n_heads} decay rates, got {r.shape}")
    if np.any(r < 0.0) or np.any(r > 1.0):
        raise ConfigError("decay rates must lie in [0, 1]")
    return r


def _check_qkv(q, k, v):
    q, k, v = _heads(q, "q"), _heads(k, "k"), _heads(v, "v")
    if q.shape != k.shape or q.shape[:2] != v.shape[:2]:
        raise ShapeError(f"q/k/v shapes disagree: {q.shape}, {k.shape}, {v.shape}")
    return q, k, v


def _unhead(out: np.ndarray, like) -> np.ndarray:
    return out[0] if np.asarray(like).ndim == 2 else out


# --- quadratic oracle -----------------------------------------------------


def attn_quadratic_oracle(q, k, v, lam) -> np.ndarray:
    """Reference output ``o_t = q_t sum_{s<=t} lam**(t-s) k_s^T v_s``.

    Evaluated as an explicit double sum over (t, s); used only as ground
    truth. ``lam = 0`` keeps only the current token (``0**0 == 1``).
    """
    qh, kh, vh = _check_qkv(q, k, v)
    rates = _rates(lam, qh.shape[0])
    H, n, _ = qh.shape
    out = np.zeros((H, n, vh.shape[2]))
    for h in range(H):
        for t in range(n):
            acc = np.zeros((kh.shape[2], vh.shape[2]))
            for s in range(t + 1):
                acc += rates[h] ** (t - s) * np.outer(kh[h, s], vh[h, s])
            out[h, t] = qh[h, t] @ acc
    return _unhead(out, q)


# --- recurrence -----------------------------------------------------------


def _write_back(kv: np.ndarray, state_precision: PrecisionMode | None) -> np.ndarray:
    if state_precision is None or state_precision.is_exact:
        return kv
    return state_precision.apply(kv)


def attn_recurrent_step(
    state: LinearAttnState, q_t, k_t, v_t, lam, state_precision: PrecisionMode | None = None
) -> tuple[np.ndarray, LinearAttnState]:
    """One decode step: ``kv = lam*kv + k^T v`` then ``o = q kv``.

    ``q_t``/``k_t``/``v_t`` are ``(d,)`` for one head or ``(H, d)``.
    ``state_precision`` rounds the stored state after the update.
    """
    single = np.asarray(q_t).ndim == 1
    qh = np.atleast_2d(np.asarray(q_t, dtype=np.float64))
    kh = np.atleast_2d(np.asarray(k_t, dtype=np.float64))
    vh = np.atleast_2d(np.asarray(v_t, dtype=np.float64))
    H, dk, dv = state.kv.shape
    if qh.shape != (H, dk) or kh.shape != (H, dk) or vh.shape != (H, dv):
        raise ShapeError(f"token vectors {qh.shape}/{kh.shape}/{vh.shape} do not match state {state.kv.shape}")
    rates = _rates(lam, H)
    kv = np.empty_like(state.kv)
    out = np.empty((H, dv))
    for h in range(H):
        kv[h] = _write_back(rates[h] * state.kv[h] + kh[h][:, None] * vh[h][None, :], state_precision)
        out[h] = matmul(qh[h][None, :], kv[h])[0]
    new = LinearAttnState(kv, state.step + 1)
    return (out[0] if single else out), new


def attn_recurrent(
    q, k, v, lam, state: LinearAttnState | None = None, state_precision: PrecisionMode | None = None
) -> tuple[np.ndarray, LinearAttnState]:
    """Token-by-token recurrence over a whole sequence."""
    qh, kh, vh = _check_qkv(q, k, v)
    H, n, dk = qh.shape
    dv = vh.shape[2]
    if state is None:
        state = LinearAttnState.fresh(H, dk, dv)
    if state.kv.shape != (H, dk, dv):
        raise ShapeError(f"state {state.kv.shape} does not match inputs")
    rates = _rates(lam, H)
    out = np.empty((H, n, dv))
    kv = np.empty_like(state.kv)
    prec = state_precision if state_precision is not None else PrecisionMode.exact()
    for h in range(H):
        if prec.kind in (Precision.EXACT64, Precision.BF16):
            out[h], kv[h] = _kernels.decay_scan(
                qh[h], kh[h], vh[h], float(rates[h]), np.ascontiguousarray(state.kv[h]), not prec.is_exact
            )
        else:
            s = state.kv[h]
            for t in range(n):
                s = prec.apply(rates[h] * s + kh[h, t][:, None] * vh[h, t][None, :])
                out[h, t] = matmul(qh[h, t][None, :], s)[0]
            kv[h] = s
    return _unhead(out, q), LinearAttnState(kv, state.step + n)


# --- chunked prefill ------------------------------------------------------


def attn_chunked_prefill(
    q, k, v, lam, chunk: int, state: LinearAttnState | None = None,
    state_precision: PrecisionMode | None = None,
) -> tuple[np.ndarray, LinearAttnState]:
    """Chunk-parallel form: exact intra-chunk decay matrix plus carried state.

    Within a chunk of length c starting with state S,
    ``O = ((Q K^T) * D) V + diag(lam**(i+1)) Q S`` with ``D[i,j] = lam**(i-j)``
    for ``i >= j``, and the state leaving the chunk is
    ``lam**c S + (K * lam**(c-1-j))^T V``. With a non-exact
    ``state_precision`` the carried state is rounded at chunk boundaries.
    """
    if chunk < 1:
        raise ConfigError("chunk must be >= 1")
    qh, kh, vh = _check_qkv(q, k, v)
    H, n, dk = qh.shape
    dv = vh.shape[2]
    if state is None:
        state = LinearAttnState.fresh(H, dk, dv)
    if state.kv.shape != (H, dk, dv):
        raise ShapeError(f"state {state.kv.shape} does not match inputs")
    rates = _rates(lam, H)
    out = np.empty((H, n, dv))
    kv = np.empty_like(state.kv)
    for h in range(H):
        lam_h = rates[h]
        s = state.kv[h]
        for a in range(0, n, chunk):
            b = min(a + chunk, n)
            c = b - a
            idx = np.arange(c)
            gap = idx[:, None] - idx[None, :]
            decay = np.where(gap >= 0, lam_h ** np.maximum(gap, 0), 0.0)
            qc, kc, vc = qh[h, a:b], kh[h, a:b], vh[h, a:b]
            scores = matmul(qc, kc.T) * decay
            intra = matmul(scores, vc)
            inter = lam_h ** (idx + 1)[:, None] * matmul(qc, s)
            out[h, a:b] = intra + inter
            k_decayed = kc * (lam_h ** (c - 1 - idx))[:, None]
            s = _write_back(lam_h**c * s + matmul(k_decayed.T, vc), state_precision)
        kv[h] = s
    return _unhead(out, q), LinearAttnState(kv, state.step + n)


# --- tree decode ----------------------------------------------------------


@dataclass(frozen=True)
class TokenTree:
    """Speculative token tree in topological order; ``parents[root] == -1``."""

    parents: tuple[int, ...]
    depths: tuple[int, ...] = field(init=False)

    def __post_init__(self):
        parents = tuple(int(p) for p in self.parents)
        if not parents:
            raise ShapeError("tree must have at least one node")
        if parents[0] != -1 or sum(p == -1 for p in parents) != 1:
            raise ShapeError("tree must have exactly one root, at index 0")
        depths = []
        for i, p in enumerate(parents):
            if p == -1:
                depths.append(0)
                continue
            if not 0 <= p < i:
                raise ShapeError(f"node {i} has forward or cyclic parent {p}")
            depths.append(depths[p] + 1)
        object.__setattr__(self, "parents", parents)
        object.__setattr__(self, "depths", tuple(depths))

    def __len__(self) -> int:
        return len(self.parents)

    def path(self, node: int) -> list[int]:
        """Root-to-node list of node indices."""
        out = []
        while node != -1:
            out.append(node)
            node = self.parents[node]
        return out[::-1]

    def ancestor_mask(self) -> np.ndarray:
        """``mask[i, j]`` is True when j is i or an ancestor of i."""
        n = len(self)
        mask = np.zeros((n, n), dtype=bool)
        for i in range(n):
            mask[i, self.path(i)] = True
        return mask


def attn_tree_decode(
    state: LinearAttnState, tree: TokenTree, q, k, v, lam,
    state_precision: PrecisionMode | None = None,
) -> np.ndarray:
    """Per-node outputs for a token tree decoded on top of a shared prefix state.

    Node i sees exactly its root-to-i path. Per-node states are cloned from
    the parent's, so ``state`` itself is never touched.
    """
    single = np.asarray(q).ndim == 2
    qh, kh, vh = _check_qkv(q, k, v)
    if qh.shape[1] != len(tree):
        raise ShapeError(f"{qh.shape[1]} token rows for a tree of {len(tree)} nodes")
    node_states: list[LinearAttnState] = []
    out = np.empty((qh.shape[0], len(tree), vh.shape[2]))
    for i, p in enumerate(tree.parents):
        parent = state if p == -1 else node_states[p]
        o, s = attn_recurrent_step(parent, qh[:, i], kh[:, i], vh[:, i], lam, state_precision)
        node_states.append(s)
        out[:, i] = o
    return out[0] if single else out


def attn_tree_masked(state: LinearAttnState, tree: TokenTree, q, k, v, lam) -> np.ndarray:
    """Tree decode written as one masked attention over all nodes.

    ``o_i = lam**(depth_i+1) q_i S + sum_{j in path(i)} lam**(depth_i-depth_j) (q_i.k_j) v_j``.
    This is the parallel formulation a tree-mask kernel would evaluate.
    """
    single = np.asarray(q).ndim == 2
    qh, kh, vh = _check_qkv(q, k, v)
    rates = _rates(lam, qh.shape[0])
    mask = tree.ancestor_mask()
    depth = np.array(tree.depths)
    gap = np.maximum(depth[:, None] - depth[None, :], 0)
    out = np.empty((qh.shape[0], len(tree), vh.shape[2]))
    for h in range(qh.shape[0]):
        weights = np.where(mask, rates[h] ** gap, 0.0)
        scores = matmul(qh[h], kh[h].T) * weights
        prefix = (rates[h] ** (depth + 1))[:, None] * matmul(qh[h], state.kv[h])
        out[h] = matmul(scores, vh[h]) + prefix
    return out[0] if single else out


# --- backward -------------------------------------------------------------


def linear_attn_backward(q, k, v, lam, grad_out) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Analytic gradients of the quadratic-form forward.

    With ``A = (Q K^T) * D`` and ``O = A V``:
    ``dV = A^T dO``, ``G = (dO V^T) * D``, ``dQ = G K``, ``dK = G^T Q``.
    """
    qh, kh, vh = _check_qkv(q, k, v)
    gh = _heads(grad_out, "grad_out")
    if gh.shape != vh.shape:
        raise ShapeError(f"grad_out {gh.shape} does not match output {vh.shape}")
    rates = _rates(lam, qh.shape[0])
    n = qh.shape[1]
    gap = np.arange(n)[:, None] - np.arange(n)[None, :]
    dq, dk, dv = np.empty_like(qh), np.empty_like(kh), np.empty_like(vh)
    for h in range(qh.shape[0]):
        decay = np.where(gap >= 0, rates[h] ** np.maximum(gap, 0), 0.0)
        attn = matmul(qh[h], kh[h].T) * decay
        dv[h] = matmul(attn.T, gh[h])
        g = matmul(gh[h], vh[h].T) * decay
        dq[h] = matmul(g, kh[h])
        dk[h] = matmul(g.T, qh[h])
    return _unhead(dq, q), _unhead(dk, k), _unhead(dv, v)

