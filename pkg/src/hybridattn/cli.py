"""Command-line front end: ``verify``, ``cost``, ``align`` and ``rl``.

Exit codes: 0 success, 1 verification failure, 2 usage/config/IO error.
All random data comes from numpy's PCG64 seeded with ``--seed``.
"""
from __future__ import annotations

import argparse
import sys
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import _kernels
from .alignment import DEFAULT_THRESHOLD, PathSpec, run_paths_and_diff
from .cost_model import cost_sweep_csv, specs_for_model
from .hybrid_model import HybridModel, ModelConfig, load_config
from .linear_attention import (
    TokenTree,
    attn_chunked_prefill,
    attn_quadratic_oracle,
    attn_recurrent,
    attn_recurrent_step,
    attn_tree_decode,
    linear_attn_backward,
)
from .numerics import finite_diff_grad
from .rl_objective import comparison_rows, load_batch_csv, synthetic_batch

EXIT_OK, EXIT_FAIL, EXIT_USAGE = 0, 1, 2
LAMBDAS = (0.5, 0.9, 0.96875, 1.0)


class UsageError(Exception):
    pass


@dataclass
class SuiteResult:
    name: str
    max_dev: float
    tol: float

    @property
    def passed(self) -> bool:
        return self.max_dev < self.tol or (self.tol == 0.0 and self.max_dev == 0.0)

    def line(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        return f"{self.name:<22} max_dev={self.max_dev:.3e} tol={self.tol:.0e} {status}"


# --- verification suites --------------------------------------------------


def random_qkv(rng: np.random.Generator, n: int, d: int):
    return tuple(rng.standard_normal((n, d)) for _ in range(3))


def suite_linear_equivalence(rng, instances: int = 200, max_n: int = 128, max_d: int = 16) -> SuiteResult:
    worst = 0.0
    for _ in range(instances):
        n = int(rng.integers(1, max_n + 1))
        d = int(rng.integers(1, max_d + 1))
        lam = float(rng.choice(LAMBDAS))
        chunk = int(rng.integers(1, n + 1))
        q, k, v = random_qkv(rng, n, d)
        ref = attn_quadratic_oracle(q, k, v, lam)
        rec, _ = attn_recurrent(q, k, v, lam)
        chk, _ = attn_chunked_prefill(q, k, v, lam, chunk)
        worst = max(worst, float(np.max(np.abs(ref - rec))), float(np.max(np.abs(ref - chk))))
    return SuiteResult("linear_equivalence", worst, 1e-10)


def suite_chunk_sweep(rng, n: int, d: int = 4, lam: float = 0.96875) -> list[SuiteResult]:
    q, k, v = random_qkv(rng, n, d)
    ref = attn_quadratic_oracle(q, k, v, lam)
    out = []
    for chunk in range(1, n + 1):
        chk, _ = attn_chunked_prefill(q, k, v, lam, chunk)
        out.append(SuiteResult(f"chunk={chunk}", float(np.max(np.abs(ref - chk))), 1e-10))
    return out


def random_tree(rng, max_nodes: int = 31, max_depth: int = 5) -> TokenTree:
    n = int(rng.integers(1, max_nodes + 1))
    parents, depths = [-1], [0]
    for _ in range(1, n):
        candidates = [i for i, dp in enumerate(depths) if dp < max_depth - 1]
        p = int(rng.choice(candidates))
        parents.append(p)
        depths.append(depths[p] + 1)
    return TokenTree(tuple(parents))


def suite_tree_decode(rng, trees: int = 20, d: int = 4) -> SuiteResult:
    worst = 0.0
    for _ in range(trees):
        tree = random_tree(rng)
        lam = float(rng.choice(LAMBDAS))
        prefix = rng.standard_normal((12, d))
        _, state = attn_recurrent(prefix, prefix[::-1].copy(), prefix, lam)
        before = state.kv.copy()
        q, k, v = random_qkv(rng, len(tree), d)
        out = attn_tree_decode(state, tree, q, k, v, lam)
        for i in range(len(tree)):
            s = state
            for node in tree.path(i):
                o, s = attn_recurrent_step(s, q[node], k[node], v[node], lam)
            worst = max(worst, float(np.max(np.abs(o - out[i]))))
        if not np.array_equal(before, state.kv):
            worst = float("inf")
    return SuiteResult("tree_decode", worst, 0.0)


def grad_rel_error(rng, n: int, d: int, lam: float, h: float = 1e-5) -> float:
    q, k, v = random_qkv(rng, n, d)
    w = rng.standard_normal((n, d))
    grads = linear_attn_backward(q, k, v, lam, w)
    worst = 0.0
    for i, g in enumerate(grads):
        args = [q, k, v]

        def f(x, i=i):
            a = list(args)
            a[i] = x
            return float(np.sum(attn_quadratic_oracle(*a, lam) * w))

        fd = finite_diff_grad(f, args[i], h)
        scale = max(float(np.max(np.abs(g))), 1e-12)
        worst = max(worst, float(np.max(np.abs(g - fd))) / scale)
    return worst


def suite_gradient(rng, instances: int = 50) -> SuiteResult:
    worst = 0.0
    for _ in range(instances):
        n = int(rng.integers(1, 9))
        d = int(rng.integers(1, 5))
        worst = max(worst, grad_rel_error(rng, n, d, float(rng.choice(LAMBDAS))))
    return SuiteResult("gradient", worst, 1e-5)


def suite_prefill_decode(cfg: ModelConfig, rng, n: int) -> SuiteResult:
    model = HybridModel(cfg)
    x = model.embed(rng.integers(0, cfg.vocab_size, n))
    hp, _ = model.prefill(x)
    hd, _ = model.decode(x)
    return SuiteResult("prefill_decode", float(np.max(np.abs(hp - hd))), 1e-10)


# --- commands -------------------------------------------------------------


def _config(path: str | None) -> ModelConfig:
    if path is None:
        return ModelConfig()
    try:
        return load_config(path)
    except OSError as exc:
        raise UsageError(f"cannot read config {path}: {exc}") from exc


def _write(path: str | None, text: str) -> None:
    if path is None or path == "-":
        sys.stdout.write(text)
        return
    try:
        Path(path).write_text(text)
    except OSError as exc:
        raise UsageError(f"cannot write {path}: {exc}") from exc


def cmd_verify(args) -> int:
    cfg = _config(args.config)
    rng = np.random.default_rng(args.seed)
    print(f"backend={_kernels.BACKEND} seed={args.seed} layers={cfg.n_layers} ratio={cfg.hybrid_ratio}")
    results = []
    t0 = time.perf_counter()
    results.append(suite_linear_equivalence(rng, args.instances))
    if args.chunk_sweep:
        results.extend(suite_chunk_sweep(rng, args.chunk_sweep))
    results.append(suite_tree_decode(rng))
    results.append(suite_gradient(rng, max(1, args.instances // 4)))
    results.append(suite_prefill_decode(cfg, rng, args.tokens))
    for r in results:
        print(r.line())
    ok = all(r.passed for r in results)
    print(f"{'all suites passed' if ok else 'verification FAILED'} in {time.perf_counter() - t0:.2f}s")
    if args.out:
        rows = ["suite,max_dev,tol,status\n"] + [
            f"{r.name},{r.max_dev:.17g},{r.tol:g},{'pass' if r.passed else 'fail'}\n" for r in results
        ]
        _write(args.out, "".join(rows))
    return EXIT_OK if ok else EXIT_FAIL


def _seq_lens(text: str) -> list[int]:
    try:
        if ":" in text:
            start, stop, step = (int(p) for p in text.split(":"))
            lens = list(range(start, stop + 1, step))
        else:
            lens = [int(p) for p in text.split(",") if p.strip()]
    except ValueError as exc:
        raise UsageError(f"bad --seq-lens {text!r}") from exc
    if not lens or min(lens) < 1:
        raise UsageError("--seq-lens must list positive lengths")
    return lens


def cmd_cost(args) -> int:
    cfg = _config(args.config)
    specs = specs_for_model(cfg, args.bytes, args.mla_latent, args.state_bytes)
    _write(args.out, cost_sweep_csv(specs, _seq_lens(args.seq_lens)))
    return EXIT_OK


def cmd_align(args) -> int:
    cfg = _config(args.config)
    try:
        a, b = PathSpec.parse(args.path_a), PathSpec.parse(args.path_b)
    except ValueError as exc:
        raise UsageError(str(exc)) from exc
    model = HybridModel(cfg)
    rng = np.random.default_rng(args.seed)
    x = model.embed(rng.integers(0, cfg.vocab_size, args.tokens))
    report = run_paths_and_diff(model, x, a, b, threshold=args.threshold)
    if args.out:
        _write(args.out, report.to_csv())
    print(report.summary())
    first = report.first_divergence()
    print(f"first divergence: layer {first.layer} {first.module}" if first else "first divergence: none")
    return EXIT_OK


def cmd_rl(args) -> int:
    if (args.batch is None) == (args.synthetic is None):
        raise UsageError("give exactly one of --batch or --synthetic")
    if args.batch is not None:
        try:
            batch = load_batch_csv(args.batch, args.epsilon)
        except OSError as exc:
            raise UsageError(f"cannot read batch {args.batch}: {exc}") from exc
    else:
        batch, _ = synthetic_batch(args.synthetic, disparity_rate=args.disparity_rate,
                                   seed=args.seed, epsilon=args.epsilon)
    rows = comparison_rows(batch, args.threshold)
    _write(args.out, "metric,value\n" + "".join(f"{k},{v}\n" for k, v in rows))
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="hybridattn", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, out_help="output path (default stdout)"):
        p.add_argument("--config", help="model config file (key = value lines)")
        p.add_argument("--seed", type=int, default=0, help="seed for all generated data")
        p.add_argument("--out", help=out_help)

    p = sub.add_parser("verify", help="run equivalence, tree, gradient and prefill/decode suites")
    common(p, "also write suite results as CSV here")
    p.add_argument("--chunk-sweep", type=int, metavar="N", help="report chunk sizes 1..N on one sequence of length N")
    p.add_argument("--instances", type=int, default=200, help="random linear-attention instances")
    p.add_argument("--tokens", type=int, default=64, help="tokens for prefill/decode check")
    p.set_defaults(func=cmd_verify)

    p = sub.add_parser("cost", help="decode state-access bytes vs sequence length, as CSV")
    common(p)
    p.add_argument("--seq-lens", default="1,256,1024,4096,16384,65536,131072",
                   help="comma list or start:stop:step")
    p.add_argument("--bytes", type=int, default=2, help="bytes per cache element")
    p.add_argument("--state-bytes", type=int, default=None, help="bytes per linear-state element")
    p.add_argument("--mla-latent", type=int, default=512, help="MLA latent dim")
    p.set_defaults(func=cmd_cost)

    p = sub.add_parser("align", help="diff two execution paths module by module")
    common(p, "write the per-module report CSV here")
    p.add_argument("--path-a", default="prefill:exact:exact", help="execution:precision:state_precision")
    p.add_argument("--path-b", default="decode:exact:exact")
    p.add_argument("--tokens", type=int, default=64)
    p.add_argument("--threshold", type=float, default=DEFAULT_THRESHOLD)
    p.set_defaults(func=cmd_align)

    p = sub.add_parser("rl", help="compare rollout and recompute PPO estimators")
    common(p)
    p.add_argument("--batch", help="CSV: token_id,lp_rollout,lp_train_old,lp_train_new,advantage")
    p.add_argument("--synthetic", type=int, metavar="N", help="use an N-token synthetic batch instead")
    p.add_argument("--disparity-rate", type=float, default=0.1, help="for --synthetic")
    p.add_argument("--epsilon", type=float, default=0.2)
    p.add_argument("--threshold", type=float, default=DEFAULT_THRESHOLD)
    p.set_defaults(func=cmd_rl)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    threshold = getattr(args, "threshold", None)
    if threshold is not None and not 0.0 < threshold < 1.0:
        print("error: --threshold must lie in (0, 1)", file=sys.stderr)
        return EXIT_USAGE
    try:
        return args.func(args)
    except (UsageError, ValueError) as exc:  # ConfigError, ShapeError, BatchParseError included
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
