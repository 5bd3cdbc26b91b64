"""Per-token attention-state memory traffic during decode.

Each decoded token reads every layer's attention state once: the full
K/V cache for softmax layers (grows with sequence length), a latent cache
for MLA, and a fixed ``d_head x d_head`` matrix per head for linear layers.
Layers are summed independently; no fused cache layout is assumed.
"""
from __future__ import annotations

import csv
import enum
import io
from dataclasses import dataclass
from fractions import Fraction
from typing import Iterable, Sequence

from .hybrid_model import LINEAR, ModelConfig, ModelState
from .linear_attention import LinearAttnState
from .numerics import ConfigError
from .softmax_attention import KvCache


class AttnKind(enum.Enum):
    MHA = "mha"
    GQA = "gqa"
    MLA = "mla"
    LINEAR = "linear"
    HYBRID = "hybrid"


@dataclass(frozen=True)
class AttnCostSpec:
    """One attention stack to cost.

    ``HYBRID`` stacks have ``n_layers // (m + 1)`` groups of ``m`` linear
    layers plus one GQA layer. ``state_bytes_per_element`` covers the linear
    state and defaults to ``bytes_per_element``; set it to 4 for the FP32
    state the linear recurrence needs.
    """

    name: str
    kind: AttnKind
    n_heads: int
    n_kv_heads: int
    d_head: int
    n_layers: int
    bytes_per_element: int = 2
    mla_latent_dim: int = 512
    m: int = 0
    state_bytes_per_element: int | None = None

    def __post_init__(self):
        for attr in ("n_heads", "n_kv_heads", "d_head", "n_layers", "bytes_per_element", "mla_latent_dim"):
            if getattr(self, attr) < 1:
                raise ConfigError(f"{attr} must be >= 1")
        if self.state_bytes_per_element is not None and self.state_bytes_per_element < 1:
            raise ConfigError("state_bytes_per_element must be >= 1")
        if self.kind is AttnKind.HYBRID:
            if self.m < 0 or self.n_layers % (self.m + 1):
                raise ConfigError(f"n_layers={self.n_layers} not divisible into groups of m+1={self.m + 1}")
        if self.kind is AttnKind.GQA and self.n_heads % self.n_kv_heads:
            raise ConfigError("n_heads must be divisible by n_kv_heads")

    @property
    def state_bytes(self) -> int:
        return self.state_bytes_per_element or self.bytes_per_element

    @property
    def n_groups(self) -> int:
        return self.n_layers // (self.m + 1) if self.kind is AttnKind.HYBRID else 0


def gqa_layer_bytes(n_kv_heads: int, d_head: int, seq_len: int, b: int) -> int:
    return 2 * n_kv_heads * d_head * seq_len * b


def linear_layer_bytes(n_heads: int, d_head: int, b: int) -> int:
    return n_heads * d_head * d_head * b


def decode_access_bytes(spec: AttnCostSpec, seq_len: int) -> int:
    """Bytes of attention state read to decode one token at ``seq_len``."""
    if seq_len < 1:
        raise ConfigError("seq_len must be >= 1")
    b, L = spec.bytes_per_element, spec.n_layers
    if spec.kind is AttnKind.MHA:
        return gqa_layer_bytes(spec.n_heads, spec.d_head, seq_len, b) * L
    if spec.kind is AttnKind.GQA:
        return gqa_layer_bytes(spec.n_kv_heads, spec.d_head, seq_len, b) * L
    if spec.kind is AttnKind.MLA:
        return spec.mla_latent_dim * seq_len * b * L
    linear = linear_layer_bytes(spec.n_heads, spec.d_head, spec.state_bytes)
    if spec.kind is AttnKind.LINEAR:
        return linear * L
    gqa = gqa_layer_bytes(spec.n_kv_heads, spec.d_head, seq_len, b)
    return spec.n_groups * (spec.m * linear + gqa)


def seq_len_slope(spec: AttnCostSpec) -> int:
    """Exact bytes added per extra token of context."""
    return decode_access_bytes(spec, 2) - decode_access_bytes(spec, 1)


def crossover_seq_len(a: AttnCostSpec, b: AttnCostSpec, limit: int = 1 << 40) -> int | None:
    """Smallest seq_len at which ``a`` reads strictly fewer bytes than ``b``.

    Both costs are affine in seq_len, so the answer comes from the
    intercepts and slopes; ``None`` when ``a`` never wins up to ``limit``.
    """
    ia, sa = decode_access_bytes(a, 1) - seq_len_slope(a), seq_len_slope(a)
    ib, sb = decode_access_bytes(b, 1) - seq_len_slope(b), seq_len_slope(b)
    # a(L) < b(L)  <=>  (sa - sb) L < ib - ia
    if sa >= sb:
        return 1 if ia + sa < ib + sb else None
    threshold = Fraction(ia - ib, sb - sa)
    L = max(1, int(threshold) + 1)
    return L if L <= limit else None


def specs_for_model(cfg: ModelConfig, bytes_per_element: int = 2, mla_latent_dim: int = 512,
                    state_bytes_per_element: int | None = None) -> list[AttnCostSpec]:
    """MHA, GQA, MLA, pure-linear and hybrid stacks sharing ``cfg``'s geometry."""
    g = cfg.gqa
    common = dict(n_heads=g.n_heads, n_kv_heads=g.n_kv_heads, d_head=g.d_head, n_layers=cfg.n_layers,
                  bytes_per_element=bytes_per_element, mla_latent_dim=mla_latent_dim,
                  state_bytes_per_element=state_bytes_per_element)
    return [
        AttnCostSpec("gqa", AttnKind.GQA, **common),
        AttnCostSpec(f"hybrid_m{cfg.linear_per_group}", AttnKind.HYBRID, m=cfg.linear_per_group, **common),
        AttnCostSpec("linear", AttnKind.LINEAR, **common),
        AttnCostSpec("mha", AttnKind.MHA, **common),
        AttnCostSpec("mla", AttnKind.MLA, **common),
    ]


def empirical_state_bytes(state: ModelState, bytes_per_element: int | None = None,
                          state_bytes_per_element: int | None = None) -> dict[str, int]:
    """Live bytes held by a model state, split into ``linear`` and ``softmax``.

    With no overrides this is the real ``nbytes`` of the float64 containers;
    passing element sizes re-prices the same element counts.
    """
    linear = softmax = 0
    for st in state.layers:
        if isinstance(st, LinearAttnState):
            if state_bytes_per_element or bytes_per_element:
                linear += st.kv.size * (state_bytes_per_element or bytes_per_element)
            else:
                linear += st.nbytes
        elif isinstance(st, KvCache):
            if bytes_per_element:
                softmax += 2 * len(st) * st.n_kv_heads * st.d_head * bytes_per_element
            else:
                softmax += st.nbytes
    return {"linear": linear, "softmax": softmax, "total": linear + softmax}


def analytic_state_bytes(cfg: ModelConfig, seq_len: int, bytes_per_element: int,
                         state_bytes_per_element: int | None = None) -> dict[str, int]:
    """Storage terms of ``cfg`` holding ``seq_len`` tokens (``seq_len`` may be 0)."""
    g = cfg.gqa
    kinds = cfg.layer_kinds()
    n_linear = sum(k == LINEAR for k in kinds)
    n_softmax = len(kinds) - n_linear
    linear = n_linear * linear_layer_bytes(g.n_heads, g.d_head, state_bytes_per_element or bytes_per_element)
    softmax = n_softmax * gqa_layer_bytes(g.n_kv_heads, g.d_head, seq_len, bytes_per_element)
    return {"linear": linear, "softmax": softmax, "total": linear + softmax}


CSV_HEADER = ("spec", "seq_len", "bytes")


def cost_sweep(specs: Sequence[AttnCostSpec], seq_lens: Iterable[int]) -> list[tuple[str, int, int]]:
    """Rows ``(spec name, seq_len, bytes)`` sorted by name then seq_len."""
    lens = sorted(set(int(s) for s in seq_lens))
    if not specs or not lens:
        raise ConfigError("cost sweep needs at least one spec and one seq_len")
    names = [s.name for s in specs]
    if len(set(names)) != len(names):
        raise ConfigError("spec names must be unique")
    rows = [(s.name, L, decode_access_bytes(s, L)) for s in specs for L in lens]
    return sorted(rows, key=lambda r: (r[0], r[1]))


def cost_sweep_csv(specs: Sequence[AttnCostSpec], seq_lens: Iterable[int]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CSV_HEADER)
    w.writerows(cost_sweep(specs, seq_lens))
    return buf.getvalue()


def read_cost_csv(text: str) -> dict[str, list[tuple[int, int]]]:
    """Parse sweep CSV back into ``{spec: [(seq_len, bytes), ...]}``."""
    reader = csv.reader(io.StringIO(text))
    header = next(reader, None)
    if tuple(header or ()) != CSV_HEADER:
        raise ValueError(f"unexpected header {header}")
    out: dict[str, list[tuple[int, int]]] = {}
    for row in reader:
        out.setdefault(row[0], []).append((int(row[1]), int(row[2])))
    return out
