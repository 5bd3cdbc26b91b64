"""Token-level PPO clipped surrogates with rollout vs recomputed old-policy ratios.

The rollout estimator divides by the inference engine's probability of the
sampled token; the recompute estimator divides by the training engine's
re-forwarded probability at the old parameters. They coincide exactly when
the two engines agree. Objectives are token means.
"""
from __future__ import annotations

import csv
import io
import warnings
from dataclasses import dataclass
from pathlib import Path
from typing import Union

import numpy as np

from .numerics import ShapeError

DEFAULT_EPSILON = 0.2
BATCH_HEADER = ("token_id", "lp_rollout", "lp_train_old", "lp_train_new", "advantage")


class BatchParseError(ValueError):
    def __init__(self, message: str, line: int | None = None):
        self.line = line
        super().__init__(f"line {line}: {message}" if line is not None else message)


@dataclass(frozen=True)
class RlBatch:
    lp_rollout: np.ndarray
    lp_train_old: np.ndarray
    lp_train_new: np.ndarray
    advantage: np.ndarray
    epsilon: float = DEFAULT_EPSILON
    token_id: np.ndarray | None = None

    def __post_init__(self):
        arrays = [np.asarray(a, dtype=np.float64) for a in
                  (self.lp_rollout, self.lp_train_old, self.lp_train_new, self.advantage)]
        n = arrays[0].shape
        if any(a.shape != n or a.ndim != 1 for a in arrays):
            raise ShapeError("batch columns must be 1-D and equally long")
        for name, a in zip(("lp_rollout", "lp_train_old", "lp_train_new"), arrays):
            if np.any(a > 0.0):
                raise ValueError(f"{name} has positive log-probabilities")
        if not 0.0 < self.epsilon < 1.0:
            raise ValueError("epsilon must lie in (0, 1)")
        for name, a in zip(("lp_rollout", "lp_train_old", "lp_train_new", "advantage"), arrays):
            object.__setattr__(self, name, a)
        tid = np.arange(n[0]) if self.token_id is None else np.asarray(self.token_id, dtype=np.int64)
        object.__setattr__(self, "token_id", tid)

    def __len__(self) -> int:
        return len(self.advantage)


@dataclass(frozen=True)
class EstimatorOutput:
    surrogate: np.ndarray  # per token; NaN where excluded
    clip_active: np.ndarray  # clipped branch strictly below unclipped
    valid: np.ndarray
    objective: float  # mean over valid tokens

    @property
    def n_excluded(self) -> int:
        return int(np.count_nonzero(~self.valid))


def clipped_surrogate(log_ratio: np.ndarray, advantage: np.ndarray, epsilon: float) -> EstimatorOutput:
    with np.errstate(over="ignore", invalid="ignore"):
        ratio = np.exp(log_ratio)
        valid = np.isfinite(ratio) & np.isfinite(advantage)
        r = np.where(valid, ratio, 1.0)
        unclipped = r * advantage
        clipped = np.clip(r, 1.0 - epsilon, 1.0 + epsilon) * advantage
    surrogate = np.minimum(unclipped, clipped)
    clip_active = valid & (clipped < unclipped)
    n_bad = int(np.count_nonzero(~valid))
    if n_bad:
        warnings.warn(f"{n_bad} tokens with non-finite ratio excluded", RuntimeWarning, stacklevel=3)
    surrogate = np.where(valid, surrogate, np.nan)
    objective = float(np.sum(surrogate[valid]) / np.count_nonzero(valid)) if valid.any() else float("nan")
    return EstimatorOutput(surrogate, clip_active, valid, objective)


def ppo_rollout_objective(batch: RlBatch) -> EstimatorOutput:
    """Ratio against the rollout (inference-engine) probability."""
    return clipped_surrogate(batch.lp_train_new - batch.lp_rollout, batch.advantage, batch.epsilon)


def ppo_recompute_objective(batch: RlBatch) -> EstimatorOutput:
    """Ratio against the recomputed training-engine probability at the old parameters."""
    return clipped_surrogate(batch.lp_train_new - batch.lp_train_old, batch.advantage, batch.epsilon)


@dataclass(frozen=True)
class GapStats:
    gap: np.ndarray  # |rollout surrogate - recompute surrogate| per token, NaN if excluded
    max: float
    mean: float
    clip_flip_fraction: float
    objective_rollout: float
    objective_recompute: float

    @property
    def bias(self) -> float:
        """Recompute objective minus rollout objective."""
        return self.objective_recompute - self.objective_rollout

    def nonzero_tokens(self) -> np.ndarray:
        return np.flatnonzero(np.nan_to_num(self.gap) != 0.0)


def estimator_gap(batch: RlBatch) -> GapStats:
    a, b = ppo_rollout_objective(batch), ppo_recompute_objective(batch)
    both = a.valid & b.valid
    gap = np.where(both, np.abs(a.surrogate - b.surrogate), np.nan)
    g = gap[both]
    flips = np.count_nonzero(a.clip_active[both] != b.clip_active[both])
    n = int(np.count_nonzero(both))
    return GapStats(
        gap=gap,
        max=float(g.max()) if n else 0.0,
        mean=float(np.sum(g) / n) if n else 0.0,
        clip_flip_fraction=flips / n if n else 0.0,
        objective_rollout=a.objective,
        objective_recompute=b.objective,
    )


def disparity_fraction(batch: RlBatch, threshold: float = 0.8) -> float:
    """Fraction of tokens where ``|p_train_old - p_rollout| > threshold``."""
    diff = np.abs(np.exp(batch.lp_train_old) - np.exp(batch.lp_rollout))
    return float(np.count_nonzero(diff > threshold)) / len(batch) if len(batch) else 0.0


# --- CSV ------------------------------------------------------------------


def parse_batch_csv(text: str, epsilon: float = DEFAULT_EPSILON) -> RlBatch:
    """Parse ``token_id,lp_rollout,lp_train_old,lp_train_new,advantage`` rows."""
    reader = csv.reader(io.StringIO(text))
    header = next(reader, None)
    if header is None:
        raise BatchParseError("empty input: no header and no rows")
    if tuple(h.strip() for h in header) != BATCH_HEADER:
        raise BatchParseError(f"expected header {','.join(BATCH_HEADER)}, got {','.join(header)}", 1)
    cols: list[list[float]] = [[] for _ in range(5)]
    for lineno, row in enumerate(reader, start=2):
        if not row or all(not c.strip() for c in row):
            continue
        if len(row) != 5:
            raise BatchParseError(f"expected 5 fields, got {len(row)}", lineno)
        try:
            cols[0].append(int(row[0]))
            vals = [float(c) for c in row[1:]]
        except ValueError as exc:
            raise BatchParseError(f"unparseable field ({exc})", lineno) from None
        if any(np.isnan(v) for v in vals) or any(v > 0 for v in vals[:3]):
            raise BatchParseError("log-probabilities must be <= 0 and not NaN", lineno)
        for c, v in zip(cols[1:], vals):
            c.append(v)
    if not cols[0]:
        raise BatchParseError("empty input: header but no rows")
    return RlBatch(np.array(cols[1]), np.array(cols[2]), np.array(cols[3]), np.array(cols[4]),
                   epsilon, np.array(cols[0]))


def load_batch_csv(path: Union[str, Path], epsilon: float = DEFAULT_EPSILON) -> RlBatch:
    return parse_batch_csv(Path(path).read_text(), epsilon)


def batch_to_csv(batch: RlBatch) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(BATCH_HEADER)
    for row in zip(batch.token_id, batch.lp_rollout, batch.lp_train_old, batch.lp_train_new, batch.advantage):
        w.writerow((int(row[0]), *(f"{float(x):.17g}" for x in row[1:])))
    return buf.getvalue()


def comparison_rows(batch: RlBatch, threshold: float = 0.8) -> list[tuple[str, str]]:
    gap = estimator_gap(batch)
    a, b = ppo_rollout_objective(batch), ppo_recompute_objective(batch)
    items = [
        ("tokens", len(batch)),
        ("objective_rollout", gap.objective_rollout),
        ("objective_recompute", gap.objective_recompute),
        ("bias", gap.bias),
        ("gap_max", gap.max),
        ("gap_mean", gap.mean),
        ("gap_nonzero_tokens", len(gap.nonzero_tokens())),
        ("clip_flip_fraction", gap.clip_flip_fraction),
        ("clip_fraction_rollout", float(np.mean(a.clip_active))),
        ("clip_fraction_recompute", float(np.mean(b.clip_active))),
        ("excluded_rollout", a.n_excluded),
        ("excluded_recompute", b.n_excluded),
        ("threshold", threshold),
        ("disparity_fraction", disparity_fraction(batch, threshold)),
    ]
    return [(k, v if isinstance(v, int) else f"{v:.17g}") for k, v in items]


def synthetic_batch(n: int, *, disparity_rate: float = 0.0, seed: int = 0,
                    epsilon: float = DEFAULT_EPSILON) -> tuple[RlBatch, np.ndarray]:
    """Random batch plus the indices of tokens given a large rollout/training gap.

    Aligned tokens get ``lp_rollout == lp_train_old``. Disparity tokens get
    training probability >= 0.95 and rollout probability <= 0.05, so their
    probability gap always exceeds 0.8.
    """
    rng = np.random.default_rng(seed)
    lp_old = np.log(rng.uniform(0.05, 0.9, n))
    lp_new = np.minimum(lp_old + rng.normal(0.0, 0.3, n), 0.0)
    adv = rng.standard_normal(n)
    lp_roll = lp_old.copy()
    n_bad = int(round(disparity_rate * n))
    bad = np.sort(rng.choice(n, size=n_bad, replace=False)) if n_bad else np.array([], dtype=np.int64)
    if n_bad:
        lp_old[bad] = np.log(rng.uniform(0.95, 1.0, n_bad))
        lp_roll[bad] = np.log(rng.uniform(0.001, 0.05, n_bad))
        lp_new[bad] = np.minimum(lp_old[bad] + rng.normal(0.0, 0.05, n_bad), 0.0)
    return RlBatch(lp_roll, lp_old, lp_new, adv, epsilon), bad
