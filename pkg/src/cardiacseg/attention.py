"""Additive token attention, its cross-stream variant, and an MHSA counterpart.

The additive block replaces pairwise token interactions with a single
learned global query, so its cost is linear in the token count: scores
``Q @ w_attn / sqrt(d)`` are softmax-normalized into per-token weights,
their weighted sum of query rows forms one global query vector, and the
output is ``layer_norm(Q) + Linear(global_query * K)`` with the global
query broadcast across tokens.  MHSA is included purely as the
quadratic-cost baseline for the scaling benchmark.

Each block also has a numpy-only inference twin (suffix ``_infer``) used
by the benchmark so timing measures arithmetic, not tape bookkeeping;
equivalence of the two paths is covered by tests.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from . import ops
from .errors import ConfigError, DimensionError, UsageError
from .tensor import Parameter, Tensor, get_default_dtype


# ---------------------------------------------------------------------------
# token views
# ---------------------------------------------------------------------------

@dataclass
class TokenView:
    """A feature map flattened to (n, d) tokens, with n = H*W and d = channels."""

    tokens: Tensor
    height: int
    width: int

    def __post_init__(self):
        if self.tokens.ndim != 2:
            raise DimensionError(f"tokens must be (n, d), got {self.tokens.shape}")
        if self.tokens.shape[0] != self.height * self.width:
            raise DimensionError(
                f"{self.tokens.shape[0]} tokens != {self.height}x{self.width} positions"
            )

    @property
    def count(self) -> int:
        return self.tokens.shape[0]

    @property
    def depth(self) -> int:
        return self.tokens.shape[1]


def tokens_from_map(x: Tensor) -> TokenView:
    """Flatten a (1, C, H, W) map into H*W tokens of depth C (differentiable)."""
    if x.ndim != 4 or x.shape[0] != 1:
        raise DimensionError(f"expected a single-item NCHW map, got {x.shape}")
    _, c, h, w = x.shape
    flat = ops.reshape(x, (c, h * w))
    return TokenView(tokens=ops.transpose2d(flat), height=h, width=w)


def map_from_tokens(view: TokenView) -> Tensor:
    """Inverse of :func:`tokens_from_map`."""
    c = view.depth
    flat = ops.transpose2d(view.tokens)
    return ops.reshape(flat, (1, c, view.height, view.width))


# ---------------------------------------------------------------------------
# parameters
# ---------------------------------------------------------------------------

@dataclass
class AdditiveAttentionParams:
    """Learnables of one additive-attention block over depth-d tokens.

    One parameter set serves both the self variant and the three-stream
    cross variant (the specialists share it by construction).
    """

    wq: Parameter
    wk: Parameter
    w_attn: Parameter
    w_out: Parameter
    b_out: Parameter
    gamma: Parameter
    beta: Parameter
    eps: float = 1e-5

    @property
    def depth(self) -> int:
        return self.wq.shape[0]

    @property
    def scale(self) -> float:
        return float(self.depth) ** -0.5

    @classmethod
    def init(cls, d: int, rng: np.random.Generator, dtype=None) -> "AdditiveAttentionParams":
        dtype = dtype or get_default_dtype()
        lim = np.sqrt(6.0 / (d + d))
        proj = lambda: rng.uniform(-lim, lim, size=(d, d))
        return cls(
            wq=Parameter(proj(), dtype=dtype),
            wk=Parameter(proj(), dtype=dtype),
            w_attn=Parameter(rng.uniform(-1.0, 1.0, size=d) / np.sqrt(d), dtype=dtype),
            w_out=Parameter(proj(), dtype=dtype),
            b_out=Parameter(np.zeros(d), dtype=dtype),
            gamma=Parameter(np.ones(d), dtype=dtype),
            beta=Parameter(np.zeros(d), dtype=dtype),
        )

    def parameters(self) -> list[Parameter]:
        return [self.wq, self.wk, self.w_attn, self.w_out, self.b_out, self.gamma, self.beta]


@dataclass
class MhsaParams:
    """Projections of a standard multi-head self-attention block."""

    wq: Parameter
    wk: Parameter
    wv: Parameter
    wo: Parameter
    heads: int

    @property
    def depth(self) -> int:
        return self.wq.shape[0]

    @classmethod
    def init(cls, d: int, heads: int, rng: np.random.Generator, dtype=None) -> "MhsaParams":
        if d % heads != 0:
            raise ConfigError(f"token depth {d} not divisible by {heads} heads")
        dtype = dtype or get_default_dtype()
        lim = np.sqrt(6.0 / (d + d))
        proj = lambda: rng.uniform(-lim, lim, size=(d, d))
        return cls(
            wq=Parameter(proj(), dtype=dtype),
            wk=Parameter(proj(), dtype=dtype),
            wv=Parameter(proj(), dtype=dtype),
            wo=Parameter(proj(), dtype=dtype),
            heads=heads,
        )

    def parameters(self) -> list[Parameter]:
        return [self.wq, self.wk, self.wv, self.wo]


def _check_depth(view: TokenView, p) -> None:
    if view.depth != p.depth:
        raise DimensionError(f"token depth {view.depth} != parameter depth {p.depth}")


# ---------------------------------------------------------------------------
# additive attention (differentiable)
# ---------------------------------------------------------------------------

def _global_query(tokens: Tensor, p: AdditiveAttentionParams) -> tuple[Tensor, Tensor]:
    """Project queries and condense them into one global query row.

    Returns (Q of shape (n,d), global query of shape (1,d)).  The
    per-token weights are a probability vector, so no n-by-n product is
    ever formed.
    """
    d = p.depth
    q = ops.matmul(tokens, p.wq.value)
    scores = ops.mul(ops.matmul(q, ops.reshape(p.w_attn.value, (d, 1))), p.scale)
    alpha = ops.softmax(scores, axis=0)  # (n,1), sums to 1 over tokens
    glob = ops.matmul(ops.transpose2d(alpha), q)  # (1,d)
    return q, glob


def additive_attention(
    view: TokenView,
    p: AdditiveAttentionParams,
    literal_query_key: bool = False,
) -> TokenView:
    """Linear-cost attention over the tokens of one feature map.

    ``literal_query_key=True`` switches the mixing product to the
    per-token elementwise Q*K form (comparison mode; the default
    broadcasts the global query against K).
    """
    _check_depth(view, p)
    q, glob = _global_query(view.tokens, p)
    k = ops.matmul(view.tokens, p.wk.value)
    mixed = ops.mul(q, k) if literal_query_key else ops.mul(glob, k)
    out = ops.add(
        ops.layer_norm_tokens(q, p.gamma.value, p.beta.value, p.eps),
        ops.linear(mixed, p.w_out.value, p.b_out.value),
    )
    return TokenView(tokens=out, height=view.height, width=view.width)


def cross_additive_attention(
    views: tuple[TokenView, TokenView, TokenView],
    p: AdditiveAttentionParams,
) -> tuple[TokenView, TokenView, TokenView]:
    """Couple three token streams through one shared parameter set.

    Each stream's global query multiplies the mean of the *other two*
    streams' key matrices, so every output sees its partners' features;
    with three identical inputs this reduces exactly to the self variant.
    """
    if len(views) != 3:
        raise UsageError(f"cross attention couples exactly three streams, got {len(views)}")
    shape0 = views[0].tokens.shape
    for v in views:
        _check_depth(v, p)
        if v.tokens.shape != shape0 or (v.height, v.width) != (views[0].height, views[0].width):
            raise DimensionError(f"stream shape mismatch: {v.tokens.shape} vs {shape0}")

    qs, globs, ks = [], [], []
    for v in views:
        qi, gi = _global_query(v.tokens, p)
        qs.append(qi)
        globs.append(gi)
        ks.append(ops.matmul(v.tokens, p.wk.value))

    outs = []
    for i, v in enumerate(views):
        j, l = (i + 1) % 3, (i + 2) % 3
        partner_k = ops.mul(ops.add(ks[j], ks[l]), 0.5)
        mixed = ops.mul(globs[i], partner_k)
        out = ops.add(
            ops.layer_norm_tokens(qs[i], p.gamma.value, p.beta.value, p.eps),
            ops.linear(mixed, p.w_out.value, p.b_out.value),
        )
        outs.append(TokenView(tokens=out, height=v.height, width=v.width))
    return tuple(outs)


# ---------------------------------------------------------------------------
# multi-head self-attention (benchmark counterpart)
# ---------------------------------------------------------------------------

def multi_head_self_attention(view: TokenView, p: MhsaParams) -> TokenView:
    """Standard scaled-dot-product self-attention; quadratic in token count."""
    _check_depth(view, p)
    d, h = p.depth, p.heads
    dh = d // h
    q = ops.matmul(view.tokens, p.wq.value)
    k = ops.matmul(view.tokens, p.wk.value)
    v = ops.matmul(view.tokens, p.wv.value)
    head_outs = []
    for i in range(h):
        qi = ops.slice_cols(q, i * dh, (i + 1) * dh)
        ki = ops.slice_cols(k, i * dh, (i + 1) * dh)
        vi = ops.slice_cols(v, i * dh, (i + 1) * dh)
        scores = ops.mul(ops.matmul(qi, ops.transpose2d(ki)), float(dh) ** -0.5)
        probs = ops.softmax(scores, axis=1)
        head_outs.append(ops.matmul(probs, vi))
    merged = head_outs[0] if h == 1 else ops.concat(head_outs, axis=1)
    out = ops.matmul(merged, p.wo.value)
    return TokenView(tokens=out, height=view.height, width=view.width)


# ---------------------------------------------------------------------------
# numpy-only inference twins
# ---------------------------------------------------------------------------

def _softmax_np(x: np.ndarray, axis: int) -> np.ndarray:
    e = np.exp(x - x.max(axis=axis, keepdims=True))
    return e / e.sum(axis=axis, keepdims=True)


def additive_attention_infer(tokens: np.ndarray, p: AdditiveAttentionParams) -> np.ndarray:
    q = tokens @ p.wq.value.data
    k = tokens @ p.wk.value.data
    alpha = _softmax_np((q @ p.w_attn.value.data) * p.scale, axis=0)
    glob = alpha @ q
    mu = q.mean(axis=1, keepdims=True)
    var = q.var(axis=1, keepdims=True)
    normed = (q - mu) / np.sqrt(var + p.eps) * p.gamma.value.data + p.beta.value.data
    return normed + (glob[None, :] * k) @ p.w_out.value.data + p.b_out.value.data


def mhsa_infer(tokens: np.ndarray, p: MhsaParams, row_block: int = 2048) -> np.ndarray:
    d, h = p.depth, p.heads
    dh = d // h
    q = tokens @ p.wq.value.data
    k = tokens @ p.wk.value.data
    v = tokens @ p.wv.value.data
    n = tokens.shape[0]
    merged = np.empty_like(q)
    scale = float(dh) ** -0.5
    for i in range(h):
        qi = q[:, i * dh : (i + 1) * dh]
        ki = k[:, i * dh : (i + 1) * dh]
        vi = v[:, i * dh : (i + 1) * dh]
        # row blocks keep the n*n score matrix from exceeding memory
        for r0 in range(0, n, row_block):
            r1 = min(r0 + row_block, n)
            probs = _softmax_np(qi[r0:r1] @ ki.T * scale, axis=1)
            merged[r0:r1, i * dh : (i + 1) * dh] = probs @ vi
    return merged @ p.wo.value.data


# ---------------------------------------------------------------------------
# runtime scaling benchmark
# ---------------------------------------------------------------------------

BENCH_BLOCKS = ("e2a", "mhsa", "dummy")


@dataclass
class ScalingReport:
    """Median runtimes per token count plus the fitted log-log exponent."""

    block: str
    depth: int
    repeats: int
    rows: list = field(default_factory=list)  # (n, median_seconds)
    exponent: float = float("nan")
    high_variance: bool = False

    def to_csv(self) -> str:
        lines = ["n,median_seconds,fitted_exponent"]
        for n, med in self.rows:
            lines.append(f"{n},{med:.9f},{self.exponent:.4f}")
        return "\n".join(lines) + "\n"

    def save_csv(self, path) -> None:
        with open(path, "w") as fh:
            fh.write(self.to_csv())


def bench_scaling(
    block: str,
    token_counts,
    d: int = 64,
    repeats: int = 5,
    seed: int = 0,
    heads: int = 4,
) -> ScalingReport:
    """Time one attention block across token counts and fit time ~ n^exponent.

    ``block`` is "e2a" (efficient additive attention), "mhsa", or
    "dummy" (constant work, calibration control).  Timings use the
    inference twins so tape bookkeeping never enters the measurement.
    """
    if block not in BENCH_BLOCKS:
        raise UsageError(f"unknown block {block!r}; choose from {BENCH_BLOCKS}")
    counts = [int(n) for n in token_counts]
    if len(counts) < 4 or any(b <= a for a, b in zip(counts, counts[1:])):
        raise UsageError("token counts must be ascending with at least 4 points")
    if counts[-1] < 16 * counts[0]:
        raise UsageError("token counts must span at least a 16x range")

    rng = np.random.default_rng(seed)
    if block == "mhsa":
        p = MhsaParams.init(d, heads, rng, dtype=np.float32)
        run = lambda tok: mhsa_infer(tok, p)
    elif block == "e2a":
        p = AdditiveAttentionParams.init(d, rng, dtype=np.float32)
        run = lambda tok: additive_attention_infer(tok, p)
    else:
        fixed = rng.standard_normal((256, 256)).astype(np.float32)

        def run(tok):
            acc = fixed
            for _ in range(8):  # constant work regardless of token count
                acc = np.tanh(acc @ fixed)
            return acc

    report = ScalingReport(block=block, depth=d, repeats=repeats)
    for n in counts:
        tok = rng.standard_normal((n, d)).astype(np.float32)
        run(tok)  # warm-up
        samples = []
        for _ in range(repeats):
            t0 = time.perf_counter()
            run(tok)
            samples.append(time.perf_counter() - t0)
        med = float(np.median(samples))
        report.rows.append((n, med))
        if med > 0 and (max(samples) - min(samples)) / med > 1.0:
            report.high_variance = True

    logs_n = np.log([r[0] for r in report.rows])
    logs_t = np.log([max(r[1], 1e-9) for r in report.rows])
    report.exponent = float(np.polyfit(logs_n, logs_t, 1)[0])
    return report
