"""Run one model down two execution paths and diff every tapped activation.

A path is an execution style (chunked prefill, standing in for the
training engine, or token-by-token decode, standing in for the inference
engine) plus a GEMM-input precision and a separate precision for the stored
linear-attention state. Reports list modules front to back, which is the
order discrepancies should be chased in.

Preset mapping:
  stage 1  prefill vs prefill at different precisions  -> ``stage1_paths``
  stage 2  prefill vs decode                           -> ``stage2_paths``
Parallel-configuration alignment has no single-process analogue and is not
modelled.
"""
from __future__ import annotations

import csv
import enum
import io
from dataclasses import dataclass, field

import numpy as np

from .hybrid_model import HybridModel, Taps
from .linear_attention import LinearAttnState, attn_recurrent_step
from .numerics import ConfigError, PrecisionMode, ShapeError
from .softmax_attention import softmax_rows

DEFAULT_THRESHOLD = 0.8


class Execution(enum.Enum):
    PREFILL = "prefill"
    DECODE = "decode"


@dataclass(frozen=True)
class PathSpec:
    execution: Execution = Execution.DECODE
    precision: PrecisionMode = field(default_factory=PrecisionMode.exact)
    state_precision: PrecisionMode = field(default_factory=PrecisionMode.exact)

    @classmethod
    def parse(cls, text: str) -> "PathSpec":
        """``execution[:precision[:state_precision]]``, e.g. ``decode:exact:bf16``."""
        parts = [p.strip() for p in text.split(":")]
        if not 1 <= len(parts) <= 3:
            raise ConfigError(f"bad path spec {text!r}")
        try:
            execution = Execution(parts[0].lower())
        except ValueError as exc:
            raise ConfigError(f"unknown execution {parts[0]!r}") from exc
        precision = PrecisionMode.parse(parts[1]) if len(parts) > 1 else PrecisionMode.exact()
        state = PrecisionMode.parse(parts[2]) if len(parts) > 2 else PrecisionMode.exact()
        return cls(execution, precision, state)

    def __str__(self) -> str:
        return f"{self.execution.value}:{self.precision}:{self.state_precision}"


def stage1_paths(precision: PrecisionMode) -> tuple[PathSpec, PathSpec]:
    return PathSpec(Execution.PREFILL), PathSpec(Execution.PREFILL, precision, precision)


def stage2_paths() -> tuple[PathSpec, PathSpec]:
    return PathSpec(Execution.PREFILL), PathSpec(Execution.DECODE)


@dataclass(frozen=True)
class DisparityResult:
    fraction: float
    diffs: np.ndarray  # |p_a - p_b| at the realized token, per position
    tokens: np.ndarray  # realized token (argmax of logits_a)
    histogram: np.ndarray
    bin_edges: np.ndarray
    threshold: float


def probability_disparity(logits_a, logits_b, threshold: float = DEFAULT_THRESHOLD,
                          bins: int = 10) -> DisparityResult:
    """Fraction of positions whose realized-token probability moves by more than ``threshold``.

    The realized token is the argmax of ``logits_a``; both sides are
    softmaxed in float64.
    """
    a = np.atleast_2d(np.asarray(logits_a, dtype=np.float64))
    b = np.atleast_2d(np.asarray(logits_b, dtype=np.float64))
    if a.shape != b.shape:
        raise ShapeError(f"logit shapes differ: {a.shape} vs {b.shape}")
    if not 0.0 < threshold < 1.0:
        raise ConfigError("threshold must lie in (0, 1)")
    tokens = np.argmax(a, axis=1)
    rows = np.arange(a.shape[0])
    diffs = np.abs(softmax_rows(a)[rows, tokens] - softmax_rows(b)[rows, tokens])
    hist, edges = np.histogram(diffs, bins=bins, range=(0.0, 1.0))
    fraction = float(np.count_nonzero(diffs > threshold)) / len(diffs) if len(diffs) else 0.0
    return DisparityResult(fraction, diffs, tokens, hist, edges, threshold)


@dataclass(frozen=True)
class ModuleDiff:
    layer: int
    module: str
    max_abs_diff: float
    mean_abs_diff: float


REPORT_HEADER = ("layer", "module", "max_abs_diff", "mean_abs_diff")


@dataclass
class AlignmentReport:
    path_a: PathSpec
    path_b: PathSpec
    entries: list[ModuleDiff]
    position_max: dict[tuple[int, str], np.ndarray]
    hidden_position_max: np.ndarray
    disparity: DisparityResult

    @property
    def n_tokens(self) -> int:
        return len(self.hidden_position_max)

    def layers(self) -> list[int]:
        return sorted({e.layer for e in self.entries})

    def max_abs_diff(self) -> float:
        return max((e.max_abs_diff for e in self.entries), default=0.0)

    def first_divergence(self, tol: float = 0.0) -> ModuleDiff | None:
        """Front-most module whose max diff exceeds ``tol``."""
        return next((e for e in self.entries if e.max_abs_diff > tol), None)

    def curve(self, layer: int, module: str) -> np.ndarray:
        """Per-position max-abs diff for one tap."""
        return self.position_max[(layer, module)]

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(REPORT_HEADER)
        for e in self.entries:
            w.writerow((e.layer, e.module, f"{e.max_abs_diff:.17g}", f"{e.mean_abs_diff:.17g}"))
        return buf.getvalue()

    def summary(self) -> str:
        d = self.disparity
        return (
            f"paths={self.path_a} vs {self.path_b} tokens={self.n_tokens} "
            f"max_abs_diff={self.max_abs_diff():.6g} threshold={d.threshold:g} "
            f"exceed_fraction={d.fraction:.6g}"
        )


@dataclass
class PathRun:
    hidden: np.ndarray
    logits: np.ndarray
    taps: Taps


def run_path(model: HybridModel, inputs, path: PathSpec) -> PathRun:
    taps = Taps()
    kw = dict(precision=path.precision, state_precision=path.state_precision, taps=taps)
    if path.execution is Execution.PREFILL:
        hidden, _ = model.prefill(inputs, **kw)
    else:
        hidden, _ = model.decode(inputs, **kw)
    return PathRun(hidden, model.logits(hidden), taps)


def diff_runs(a: PathRun, b: PathRun, path_a: PathSpec, path_b: PathSpec,
              threshold: float = DEFAULT_THRESHOLD) -> AlignmentReport:
    keys = a.taps.keys()
    if keys != b.taps.keys():
        raise ConfigError("paths recorded different activation taps")
    entries, position_max = [], {}
    for key in keys:
        d = np.abs(a.taps[key] - b.taps[key])
        entries.append(ModuleDiff(key[0], key[1], float(d.max()), float(d.mean())))
        position_max[key] = d.max(axis=1)
    hidden = np.abs(a.hidden - b.hidden).max(axis=1)
    return AlignmentReport(path_a, path_b, entries, position_max, hidden,
                           probability_disparity(a.logits, b.logits, threshold))


def run_paths_and_diff(model: HybridModel, inputs, path_a: PathSpec, path_b: PathSpec, *,
                       model_b: HybridModel | None = None,
                       threshold: float = DEFAULT_THRESHOLD) -> AlignmentReport:
    """Diff two execution paths of the same model module by module, front to back.

    ``model_b`` may be a second handle on the model; it must carry the same
    config and the very same parameter objects.
    """
    if model_b is not None and (model_b.cfg != model.cfg or model_b.params is not model.params):
        raise ConfigError("both paths must use identical config and parameters")
    inputs = np.asarray(inputs, dtype=np.float64)
    a = run_path(model, inputs, path_a)
    b = a if path_b == path_a else run_path(model_b or model, inputs, path_b)
    return diff_runs(a, b, path_a, path_b, threshold)


def precision_sweep(model: HybridModel, inputs, state_precisions: list[PrecisionMode], *,
                    execution: Execution = Execution.DECODE,
                    threshold: float = DEFAULT_THRESHOLD) -> list[AlignmentReport]:
    """One report per state precision, each against the float64-state run of the same input."""
    if not state_precisions:
        raise ConfigError("precision sweep needs at least one precision")
    inputs = np.asarray(inputs, dtype=np.float64)
    base_spec = PathSpec(execution)
    base = run_path(model, inputs, base_spec)
    reports = []
    for sp in state_precisions:
        spec = PathSpec(execution, PrecisionMode.exact(), sp)
        run = base if sp.is_exact else run_path(model, inputs, spec)
        reports.append(diff_runs(base, run, base_spec, spec, threshold))
    return reports


def state_error_curve(q, k, v, lam: float, state_precision: PrecisionMode) -> np.ndarray:
    """Max-abs error of the stored state after each token, rounded vs exact.

    ``q``/``k``/``v`` are single-head ``(n, d)`` sequences.
    """
    q, k, v = (np.asarray(a, dtype=np.float64) for a in (q, k, v))
    exact = rounded = LinearAttnState.fresh(1, k.shape[1], v.shape[1])
    errors = np.empty(q.shape[0])
    for t in range(q.shape[0]):
        _, exact = attn_recurrent_step(exact, q[t:t + 1], k[t:t + 1], v[t:t + 1], lam)
        _, rounded = attn_recurrent_step(rounded, q[t:t + 1], k[t:t + 1], v[t:t + 1], lam, state_precision)
        errors[t] = np.max(np.abs(exact.kv - rounded.kv))
    return errors
