"""Hybrid layer-group model: M linear-attention layers then one GQA layer, repeated.

Every layer is pre-norm with two residual sub-blocks (attention, then MLP or
MoE). Linear layers gate their attention output:

    y = x + out_proj(grouped_rmsnorm(attn) * sigmoid(gate_proj(h)))

with ``h = rmsnorm(x)``. The residual stream and the LM head stay in
float64 under every precision mode; reduced precision only touches GEMM
inputs (``precision``) and the stored linear-attention state
(``state_precision``).
"""
from __future__ import annotations

from dataclasses import dataclass, field, fields, replace
from pathlib import Path
from typing import Union

import numpy as np

from .linear_attention import (
    DecayKind,
    DecaySchedule,
    LinearAttnState,
    attn_chunked_prefill,
    attn_recurrent,
    make_decay_schedule,
)
from .moe import MlpParams, MoeConfig, RouterPrecision, moe_forward, route, sigmoid, silu
from .numerics import ConfigError, PrecisionMode, ShapeError, matmul
from .softmax_attention import GqaConfig, KvCache, apply_partial_rope, gqa_forward, qk_norm

LINEAR = "linear"
SOFTMAX = "softmax"

# --- config ---------------------------------------------------------------


@dataclass(frozen=True)
class ModelConfig:
    n_layers: int = 10
    layer_group_size: int = 5
    d_model: int = 64
    gqa: GqaConfig = field(default_factory=GqaConfig)
    moe: MoeConfig = field(default_factory=MoeConfig)
    decay: DecaySchedule | None = None
    norm_groups: int = 4
    first_block_dense: bool = True
    dense_hidden: int = 128
    vocab_size: int = 64
    rms_eps: float = 1e-6
    chunk_size: int = 16
    seed: int = 0

    def __post_init__(self):
        if self.n_layers < 1 or self.layer_group_size < 1:
            raise ConfigError("n_layers and layer_group_size must be >= 1")
        if self.n_layers % self.layer_group_size:
            raise ConfigError(
                f"n_layers={self.n_layers} is not divisible by layer_group_size={self.layer_group_size}"
            )
        if self.moe.d_model != self.d_model:
            raise ConfigError(f"moe.d_model={self.moe.d_model} != d_model={self.d_model}")
        if self.decay is None:
            object.__setattr__(self, "decay", make_decay_schedule(self.gqa.n_heads))
        if self.decay.n_heads != self.gqa.n_heads:
            raise ConfigError(f"decay schedule has {self.decay.n_heads} heads, model has {self.gqa.n_heads}")
        if self.attn_dim % self.norm_groups:
            raise ConfigError(f"attention width {self.attn_dim} not divisible by norm_groups={self.norm_groups}")
        if self.chunk_size < 1 or self.vocab_size < 1 or self.dense_hidden < 1:
            raise ConfigError("chunk_size, vocab_size and dense_hidden must be >= 1")
        if self.rms_eps <= 0:
            raise ConfigError("rms_eps must be > 0")

    @property
    def linear_per_group(self) -> int:
        """M: linear layers before each softmax layer."""
        return self.layer_group_size - 1

    @property
    def n_groups(self) -> int:
        return self.n_layers // self.layer_group_size

    @property
    def attn_dim(self) -> int:
        return self.gqa.n_heads * self.gqa.d_head

    @property
    def hybrid_ratio(self) -> str:
        return f"1:{self.linear_per_group}"

    def layer_kinds(self) -> list[str]:
        group = [LINEAR] * self.linear_per_group + [SOFTMAX]
        return group * self.n_groups

    def uses_moe(self, layer: int) -> bool:
        return not (layer == 0 and self.first_block_dense)


def desk_config(**overrides) -> ModelConfig:
    """Default desk-scale shape: 10 layers, ratio 1:4, d_model 64."""
    return ModelConfig(**overrides)


def mini_shape_config(**overrides) -> ModelConfig:
    """20 layers at hybrid ratio 1:4, 16/4 heads, 256 experts top-8, narrow widths."""
    gqa = GqaConfig(n_heads=16, n_kv_heads=4, d_head=8)
    kw = dict(n_layers=20, layer_group_size=5, d_model=32, gqa=gqa,
              moe=MoeConfig(n_experts=256, n_top_k=8, d_model=32, d_expert_hidden=4), norm_groups=16)
    kw.update(overrides)
    return ModelConfig(**kw)


def flash_shape_config(**overrides) -> ModelConfig:
    """32 layers at hybrid ratio 1:7, 32/4 heads, 256 experts top-8, narrow widths."""
    gqa = GqaConfig(n_heads=32, n_kv_heads=4, d_head=8)
    kw = dict(n_layers=32, layer_group_size=8, d_model=32, gqa=gqa,
              moe=MoeConfig(n_experts=256, n_top_k=8, d_model=32, d_expert_hidden=4), norm_groups=32)
    kw.update(overrides)
    return ModelConfig(**kw)


# plain-text "key = value" config file

_GQA_KEYS = {"n_heads", "n_kv_heads", "d_head", "rope_fraction", "rope_base", "qk_norm_eps"}
_MOE_KEYS = {"n_experts", "n_top_k", "d_expert_hidden", "router_precision"}
_DECAY_KEYS = {"decay", "decay_rate", "decay_exp_start", "decay_exp_end"}
_TOP_KEYS = {f.name for f in fields(ModelConfig)} - {"gqa", "moe", "decay"}
CONFIG_KEYS = sorted(_GQA_KEYS | _MOE_KEYS | _DECAY_KEYS | _TOP_KEYS)


def _coerce(key: str, raw: str, lineno: int):
    try:
        if key in ("rope_fraction", "rope_base", "qk_norm_eps", "rms_eps", "decay_rate",
                   "decay_exp_start", "decay_exp_end"):
            return float(raw)
        if key == "first_block_dense":
            low = raw.lower()
            if low not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(raw)
            return low in ("true", "1", "yes")
        if key == "router_precision":
            return RouterPrecision(raw.lower())
        if key == "decay":
            return DecayKind(raw.lower())
        return int(raw, 0)
    except ValueError as exc:
        raise ConfigError(f"line {lineno}: bad value {raw!r} for {key}") from exc


def parse_config(text: str) -> ModelConfig:
    """Parse a ``key = value`` config; ``#`` starts a comment.

    Recognized keys are listed in ``CONFIG_KEYS``; omitted keys keep the
    desk-scale defaults. ``decay`` is ``power_law``, ``linear`` or
    ``uniform`` (rate from ``decay_rate``).
    """
    values: dict[str, object] = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {line!r}")
        key, raw = (s.strip() for s in line.split("=", 1))
        if key not in CONFIG_KEYS:
            raise ConfigError(f"line {lineno}: unknown key {key!r}")
        if key in values:
            raise ConfigError(f"line {lineno}: duplicate key {key!r}")
        values[key] = _coerce(key, raw, lineno)

    gqa = GqaConfig(**{k: values[k] for k in _GQA_KEYS if k in values})
    top = {k: values[k] for k in _TOP_KEYS if k in values}
    d_model = top.get("d_model", ModelConfig.d_model)
    moe = MoeConfig(d_model=d_model, **{k: values[k] for k in _MOE_KEYS if k in values})
    decay = make_decay_schedule(
        gqa.n_heads,
        values.get("decay", DecayKind.POWER_LAW),
        uniform_rate=values.get("decay_rate", 0.9),
        exp_start=values.get("decay_exp_start", 5.0),
        exp_end=values.get("decay_exp_end", 8.0),
    )
    return ModelConfig(gqa=gqa, moe=moe, decay=decay, **top)


def load_config(path: Union[str, Path]) -> ModelConfig:
    return parse_config(Path(path).read_text())


# --- parameters -----------------------------------------------------------


@dataclass(frozen=True)
class LayerParams:
    kind: str
    wq: np.ndarray
    wk: np.ndarray
    wv: np.ndarray
    wo: np.ndarray
    wg: np.ndarray | None = None  # linear layers only
    bg: np.ndarray | None = None
    mlp: MlpParams | None = None  # dense MLP
    router: np.ndarray | None = None  # MoE
    experts: tuple[MlpParams, ...] = ()


@dataclass(frozen=True)
class ModelParams:
    embed: np.ndarray
    layers: tuple[LayerParams, ...]
    lm_head: np.ndarray


def _frozen(a: np.ndarray) -> np.ndarray:
    a = np.ascontiguousarray(a, dtype=np.float64)
    a.setflags(write=False)
    return a


def _dense(rng: np.random.Generator, fan_in: int, fan_out: int) -> np.ndarray:
    return _frozen(rng.standard_normal((fan_in, fan_out)) / np.sqrt(fan_in))


def _mlp(rng, d: int, hidden: int) -> MlpParams:
    return MlpParams(_dense(rng, d, hidden), _dense(rng, d, hidden), _dense(rng, hidden, d))


def init_params(cfg: ModelConfig, seed: int | None = None) -> ModelParams:
    """Deterministic parameters from numpy's PCG64, one spawned stream per layer."""
    root = np.random.SeedSequence(cfg.seed if seed is None else seed)
    embed_ss, head_ss, *layer_ss = root.spawn(2 + cfg.n_layers)
    d, g = cfg.d_model, cfg.gqa
    layers = []
    for i, (kind, ss) in enumerate(zip(cfg.layer_kinds(), layer_ss)):
        rng = np.random.default_rng(ss)
        kv_heads = g.n_heads if kind == LINEAR else g.n_kv_heads
        p = dict(
            kind=kind,
            wq=_dense(rng, d, g.n_heads * g.d_head),
            wk=_dense(rng, d, kv_heads * g.d_head),
            wv=_dense(rng, d, kv_heads * g.d_head),
            wo=_dense(rng, g.n_heads * g.d_head, d),
        )
        if kind == LINEAR:
            p["wg"] = _dense(rng, d, cfg.attn_dim)
            p["bg"] = _frozen(np.zeros(cfg.attn_dim))
        if cfg.uses_moe(i):
            p["router"] = _dense(rng, d, cfg.moe.n_experts)
            p["experts"] = tuple(_mlp(rng, d, cfg.moe.d_expert_hidden) for _ in range(cfg.moe.n_experts))
        else:
            p["mlp"] = _mlp(rng, d, cfg.dense_hidden)
        layers.append(LayerParams(**p))
    embed = _frozen(np.random.default_rng(embed_ss).standard_normal((cfg.vocab_size, d)))
    lm_head = _dense(np.random.default_rng(head_ss), d, cfg.vocab_size)
    return ModelParams(embed, tuple(layers), lm_head)


# --- state and taps -------------------------------------------------------

LayerState = Union[LinearAttnState, KvCache]


@dataclass(frozen=True)
class ModelState:
    layers: tuple[LayerState, ...]
    position: int = 0

    @classmethod
    def empty(cls, cfg: ModelConfig) -> "ModelState":
        g = cfg.gqa
        layers = []
        for kind in cfg.layer_kinds():
            if kind == LINEAR:
                layers.append(LinearAttnState.fresh(g.n_heads, g.d_head))
            else:
                layers.append(KvCache(g.n_kv_heads, g.d_head))
        return cls(tuple(layers), 0)

    def check(self, cfg: ModelConfig) -> None:
        kinds = cfg.layer_kinds()
        if len(self.layers) != len(kinds):
            raise ShapeError(f"state has {len(self.layers)} layers, config has {len(kinds)}")
        for i, (kind, st) in enumerate(zip(kinds, self.layers)):
            want = LinearAttnState if kind == LINEAR else KvCache
            if not isinstance(st, want):
                raise ShapeError(f"layer {i} is {kind} but state is {type(st).__name__}")
            if kind == SOFTMAX and len(st) != self.position:
                raise ShapeError(f"layer {i} cache holds {len(st)} tokens at position {self.position}")
            if kind == LINEAR and st.step != self.position:
                raise ShapeError(f"layer {i} state absorbed {st.step} tokens at position {self.position}")


class Taps:
    """Activation recorder keyed by ``(layer, tag)`` in first-seen order.

    Decode appends one row per step, so after n steps every entry has the
    same layout as the prefill recording of the same n tokens.
    """

    def __init__(self):
        self._rows: dict[tuple[int, str], list[np.ndarray]] = {}

    def record(self, layer: int, tag: str, x: np.ndarray) -> None:
        x = np.asarray(x, dtype=np.float64)
        self._rows.setdefault((layer, tag), []).append(x.reshape(x.shape[0], -1).copy())

    def keys(self) -> list[tuple[int, str]]:
        return list(self._rows)

    def __getitem__(self, key: tuple[int, str]) -> np.ndarray:
        return np.concatenate(self._rows[key], axis=0)

    def __contains__(self, key) -> bool:
        return key in self._rows


class _NoTaps:
    def record(self, *args) -> None:
        pass


# --- building blocks ------------------------------------------------------


def rmsnorm(x, eps: float = 1e-6) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    return x / np.sqrt(np.mean(x * x, axis=-1, keepdims=True) + eps)


def grouped_rmsnorm(x, groups: int, eps: float = 1e-6) -> np.ndarray:
    """RMSNorm applied separately to each contiguous ``d / groups`` slice."""
    x = np.asarray(x, dtype=np.float64)
    d = x.shape[-1]
    if groups < 1 or d % groups:
        raise ConfigError(f"width {d} not divisible into {groups} groups")
    g = x.reshape(*x.shape[:-1], groups, d // groups)
    return rmsnorm(g, eps).reshape(x.shape)


def _gemm(x: np.ndarray, w: np.ndarray, precision: PrecisionMode) -> np.ndarray:
    if precision.is_exact:
        return matmul(x, w)
    return matmul(precision.apply(x), precision.apply(w))


def _mlp_forward(p: MlpParams, x: np.ndarray, precision: PrecisionMode) -> np.ndarray:
    hidden = silu(_gemm(x, p.gate, precision)) * _gemm(x, p.up, precision)
    return _gemm(hidden, p.down, precision)


def _ffn(layer: int, lp: LayerParams, h: np.ndarray, cfg: ModelConfig, precision: PrecisionMode) -> np.ndarray:
    if lp.mlp is not None:
        return _mlp_forward(lp.mlp, h, precision)
    decision = route(h, lp.router, cfg.moe)
    if precision.is_exact:
        return moe_forward(h, decision, list(lp.experts), cfg.moe)
    out = np.zeros_like(h)
    for e in range(cfg.moe.n_experts):
        rows, slot = np.nonzero(decision.experts == e)
        if rows.size:
            out[rows] += decision.gates[rows, slot][:, None] * _mlp_forward(lp.experts[e], h[rows], precision)
    return out


def _project_qk(lp, h, positions, cfg, precision, n_kv, taps, layer):
    g = cfg.gqa
    n = h.shape[0]
    q = _gemm(h, lp.wq, precision).reshape(n, g.n_heads, g.d_head)
    k = _gemm(h, lp.wk, precision).reshape(n, n_kv, g.d_head)
    v = _gemm(h, lp.wv, precision).reshape(n, n_kv, g.d_head)
    q = qk_norm(q, g.qk_norm_eps)
    k = qk_norm(k, g.qk_norm_eps)
    taps.record(layer, "qk_norm", np.concatenate([q.reshape(n, -1), k.reshape(n, -1)], axis=1))
    q = apply_partial_rope(q, positions, g)
    k = apply_partial_rope(k, positions, g)
    taps.record(layer, "rope", np.concatenate([q.reshape(n, -1), k.reshape(n, -1)], axis=1))
    return q, k, v


def linear_block_forward(
    x, lp: LayerParams, state: LinearAttnState, cfg: ModelConfig, *,
    positions=None, decode: bool = False, precision: PrecisionMode | None = None,
    state_precision: PrecisionMode | None = None, taps=None, layer: int = 0,
) -> tuple[np.ndarray, LinearAttnState]:
    """One linear-attention layer (attention and FFN sub-blocks) over ``n`` rows.

    ``decode=True`` runs the token recurrence, otherwise chunked prefill.
    """
    if lp.kind != LINEAR or not isinstance(state, LinearAttnState):
        raise ShapeError("linear_block_forward needs a linear layer and a LinearAttnState")
    precision = precision or PrecisionMode.exact()
    taps = taps or _NoTaps()
    x = np.asarray(x, dtype=np.float64)
    n = x.shape[0]
    if positions is None:
        positions = np.arange(state.step, state.step + n)
    h = rmsnorm(x, cfg.rms_eps)
    q, k, v = _project_qk(lp, h, positions, cfg, precision, cfg.gqa.n_heads, taps, layer)
    qh, kh, vh = (np.ascontiguousarray(a.transpose(1, 0, 2)) for a in (q, k, v))
    rates = cfg.decay.as_array()
    if decode:
        core, state = attn_recurrent(qh, kh, vh, rates, state, state_precision)
    else:
        core, state = attn_chunked_prefill(qh, kh, vh, rates, cfg.chunk_size, state, state_precision)
    attn = core.transpose(1, 0, 2).reshape(n, cfg.attn_dim)
    taps.record(layer, "attn_core", attn)
    normed = grouped_rmsnorm(attn, cfg.norm_groups, cfg.rms_eps)
    taps.record(layer, "group_norm", normed)
    gated = normed * sigmoid(_gemm(h, lp.wg, precision) + lp.bg)
    taps.record(layer, "gate", gated)
    y = x + _gemm(gated, lp.wo, precision)
    return _ffn_residual(y, lp, cfg, precision, taps, layer), state


def softmax_block_forward(
    x, lp: LayerParams, cache: KvCache, cfg: ModelConfig, *,
    positions=None, precision: PrecisionMode | None = None, taps=None, layer: int = 0,
) -> tuple[np.ndarray, KvCache]:
    if lp.kind != SOFTMAX or not isinstance(cache, KvCache):
        raise ShapeError("softmax_block_forward needs a softmax layer and a KvCache")
    precision = precision or PrecisionMode.exact()
    taps = taps or _NoTaps()
    x = np.asarray(x, dtype=np.float64)
    n = x.shape[0]
    if positions is None:
        positions = np.arange(len(cache), len(cache) + n)
    h = rmsnorm(x, cfg.rms_eps)
    q, k, v = _project_qk(lp, h, positions, cfg, precision, cfg.gqa.n_kv_heads, taps, layer)
    core, cache = gqa_forward(q, k, v, cfg.gqa, cache)
    attn = core.reshape(n, cfg.attn_dim)
    taps.record(layer, "attn_core", attn)
    y = x + _gemm(attn, lp.wo, precision)
    return _ffn_residual(y, lp, cfg, precision, taps, layer), cache


def _ffn_residual(y, lp, cfg, precision, taps, layer):
    m = _ffn(layer, lp, rmsnorm(y, cfg.rms_eps), cfg, precision)
    taps.record(layer, "mlp", m)
    out = y + m
    taps.record(layer, "residual", out)
    return out


# --- full model -----------------------------------------------------------


def _run_layers(x, state: ModelState, cfg, params, *, decode, precision, state_precision, taps):
    n = x.shape[0]
    positions = np.arange(state.position, state.position + n)
    new_layers = []
    for i, (lp, st) in enumerate(zip(params.layers, state.layers)):
        if lp.kind == LINEAR:
            x, st = linear_block_forward(
                x, lp, st, cfg, positions=positions, decode=decode, precision=precision,
                state_precision=state_precision, taps=taps, layer=i,
            )
        else:
            x, st = softmax_block_forward(
                x, lp, st, cfg, positions=positions, precision=precision, taps=taps, layer=i
            )
        new_layers.append(st)
    return x, ModelState(tuple(new_layers), state.position + n)


def model_prefill(
    x, cfg: ModelConfig, params: ModelParams, *, precision: PrecisionMode | None = None,
    state_precision: PrecisionMode | None = None, taps: Taps | None = None,
) -> tuple[np.ndarray, ModelState]:
    """Run all layers over ``(n, d_model)`` embeddings; returns final hidden rows and state."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or x.shape[0] < 1 or x.shape[1] != cfg.d_model:
        raise ShapeError(f"prefill input must be (n>=1, {cfg.d_model}), got {x.shape}")
    if len(params.layers) != cfg.n_layers:
        raise ConfigError("parameters were built for a different config")
    return _run_layers(
        x, ModelState.empty(cfg), cfg, params, decode=False,
        precision=precision or PrecisionMode.exact(), state_precision=state_precision, taps=taps,
    )


def model_decode_step(
    row, state: ModelState, cfg: ModelConfig, params: ModelParams, *, position: int | None = None,
    precision: PrecisionMode | None = None, state_precision: PrecisionMode | None = None,
    taps: Taps | None = None,
) -> tuple[np.ndarray, ModelState]:
    """Advance one token; returns the hidden row and a new state (input state untouched)."""
    row = np.asarray(row, dtype=np.float64).reshape(1, -1)
    if row.shape[1] != cfg.d_model:
        raise ShapeError(f"decode row must have {cfg.d_model} features, got {row.shape[1]}")
    if position is not None and position != state.position:
        raise ShapeError(f"decode at position {position} but state is at {state.position}")
    state.check(cfg)
    out, new_state = _run_layers(
        row, state, cfg, params, decode=True,
        precision=precision or PrecisionMode.exact(), state_precision=state_precision, taps=taps,
    )
    return out[0], new_state


def model_decode(x, cfg, params, **kw) -> tuple[np.ndarray, ModelState]:
    """Decode every row of ``x`` one token at a time from an empty state."""
    x = np.asarray(x, dtype=np.float64)
    state = ModelState.empty(cfg)
    rows = []
    for t in range(x.shape[0]):
        r, state = model_decode_step(x[t], state, cfg, params, position=t, **kw)
        rows.append(r)
    return np.stack(rows), state


def final_logits(hidden, cfg: ModelConfig, params: ModelParams) -> np.ndarray:
    """Final RMSNorm then the LM head, always in float64."""
    return matmul(rmsnorm(np.atleast_2d(hidden), cfg.rms_eps), params.lm_head)


@dataclass
class HybridModel:
    """Config plus parameters, with convenience wrappers around the free functions."""

    cfg: ModelConfig
    params: ModelParams = None  # type: ignore[assignment]

    def __post_init__(self):
        if self.params is None:
            self.params = init_params(self.cfg)

    def embed(self, token_ids) -> np.ndarray:
        return self.params.embed[np.asarray(token_ids)]

    def prefill(self, x, **kw):
        return model_prefill(x, self.cfg, self.params, **kw)

    def decode_step(self, row, state, **kw):
        return model_decode_step(row, state, self.cfg, self.params, **kw)

    def decode(self, x, **kw):
        return model_decode(x, self.cfg, self.params, **kw)

    def logits(self, hidden) -> np.ndarray:
        return final_logits(hidden, self.cfg, self.params)

    def with_config(self, **changes) -> "HybridModel":
        return HybridModel(replace(self.cfg, **changes))
