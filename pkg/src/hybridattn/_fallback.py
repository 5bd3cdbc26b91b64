"""Pure numpy versions of the compiled kernels in ``_core.pyx``.

Operation order matches the compiled code exactly: sums accumulate in
ascending index order from 0.0 and products are rounded before addition.
"""
import numpy as np

BF16_MAX = float.fromhex("0x1.fep127")


def _bf16(x: np.ndarray) -> np.ndarray:
    finite = np.isfinite(x)
    safe = np.where(finite, x, 0.0)
    _, e = np.frexp(safe)
    e = np.maximum(e, -125)
    q = np.ldexp(1.0, e - 8)
    y = np.rint(safe / q) * q
    y = np.where(np.abs(y) > BF16_MAX, np.copysign(np.inf, y), y)
    return np.where(finite, y, x)


def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    out = np.zeros((a.shape[0], b.shape[1]), dtype=np.float64)
    for k in range(a.shape[1]):
        out += a[:, k, None] * b[None, k, :]
    return out


def decay_scan(q, k, v, lam, kv0, round_state):
    n, dv = q.shape[0], v.shape[1]
    out = np.zeros((n, dv), dtype=np.float64)
    state = np.array(kv0, dtype=np.float64, copy=True)
    for t in range(n):
        state = lam * state + k[t][:, None] * v[t][None, :]
        if round_state:
            state = _bf16(state)
        out[t] = matmul(q[t][None, :], state)[0]
    return out, state


def round_bf16(x: np.ndarray) -> np.ndarray:
    return _bf16(x)
