"""{Q, K, V} wiring variants used as a neck after the backbone.

Every variant maps a feature grid ``(c, h, w)`` (optionally batched) to a grid
of the same shape: the grid is flattened to ``hw`` tokens of width ``c``, an
attention response ``A`` is computed, and the result is ``FFN(f + A)``.  Only
``A`` differs between variants, so ablations isolate the wiring.

The FFN block is post-norm: ``x = LN1(u); out = LN2(x + W2 relu(W1 x))``.  In
identity-test mode it is the identity and owns no parameters.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .tensor import Tensor

KINDS = ("none", "transformer", "transformer_proj", "detr", "tsf", "tsf_proj", "tsf_k", "tsf_v")
_USES_THETA = {"detr", "tsf", "tsf_proj", "tsf_k", "tsf_v"}
_PROJ = {"transformer_proj", "tsf_proj"}


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class NeckVariant:
    kind: str = "tsf"
    heads: int = 1
    n: int = 5
    c: int = 32
    ffn_hidden: int | None = None
    scaled: bool = False
    identity_ffn: bool = False

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ConfigError(f"unknown neck kind {self.kind!r}; expected one of {KINDS}")
        if self.heads < 1 or self.n < 1 or self.c < 1:
            raise ConfigError("heads, n and c must be positive")
        if self.c % self.heads:
            raise ConfigError(f"c={self.c} is not divisible by heads={self.heads}")

    @property
    def hidden(self) -> int:
        return self.ffn_hidden or self.c


def _param(arr) -> Tensor:
    return Tensor(arr, requires_grad=True)


def init_neck(variant: NeckVariant, rng: np.random.Generator) -> dict[str, Tensor]:
    """Build the neck's learnable tensors.  Kind ``none`` owns nothing."""
    c, hid = variant.c, variant.hidden
    params: dict[str, Tensor] = {}
    if variant.kind == "none":
        return params
    if variant.kind in _USES_THETA:
        params["theta"] = _param(rng.normal(0.0, 1.0 / np.sqrt(c), (variant.n, c)))
    if variant.kind in _PROJ:
        for p in "qkv":
            params[f"w{p}"] = _param(rng.normal(0.0, 1.0 / np.sqrt(c), (c, c)))
            params[f"b{p}"] = _param(np.zeros(c))
    if not variant.identity_ffn:
        params["ffn.w1"] = _param(rng.normal(0.0, np.sqrt(2.0 / c), (c, hid)))
        params["ffn.b1"] = _param(np.zeros(hid))
        params["ffn.w2"] = _param(rng.normal(0.0, np.sqrt(1.0 / hid), (hid, c)))
        params["ffn.b2"] = _param(np.zeros(c))
        for k in ("ln1", "ln2"):
            params[f"ffn.{k}.g"] = _param(np.ones(c))
            params[f"ffn.{k}.b"] = _param(np.zeros(c))
    return params


def count_parameters(variant: NeckVariant, params: dict[str, Tensor]) -> int:
    """Learnable scalars owned by the neck (backbone excluded)."""
    if variant.kind == "none":
        return 0
    return int(sum(p.size for p in params.values()))


def count_attention_macs(kind: str, h: int, w: int, c: int, n: int, heads: int = 1) -> int:
    """Multiply-accumulates of the score and apply products only.

    Follows the accounting in which a product between ``a`` query rows and
    ``b`` key rows of width ``c`` over an ``hw`` grid costs ``hw * a * b * c``;
    hence self-attention is ``(hw)^3 c`` and the semantic filter
    ``(hw)^2 n c``.  Splitting ``c`` over heads leaves the total unchanged.
    Projections and the FFN are excluded.
    """
    if min(h, w, c, n, heads) < 1:
        raise ConfigError("dimensions must be positive")
    if c % heads:
        raise ConfigError(f"c={c} is not divisible by heads={heads}")
    hw = h * w
    if kind == "none":
        return 0
    if kind in ("transformer", "transformer_proj"):
        return hw * hw * hw * c
    if kind in ("tsf", "tsf_proj", "tsf_k", "detr"):
        return hw * hw * n * c
    if kind == "tsf_v":
        return hw * hw * hw * c + hw * hw * n * c
    raise ConfigError(f"unknown neck kind {kind!r}")


def count_attention_macs_textbook(kind: str, h: int, w: int, c: int, n: int) -> int:
    """Conventional count: two products of ``a * b * c`` each."""
    hw = h * w
    rows = {"none": 0, "transformer": hw * hw, "transformer_proj": hw * hw, "tsf": hw * n,
            "tsf_proj": hw * n, "tsf_k": hw * n, "detr": hw * n, "tsf_v": hw * hw + hw * n}
    if kind not in rows:
        raise ConfigError(f"unknown neck kind {kind!r}")
    return 2 * rows[kind] * c


# ---------------------------------------------------------------- building blocks


def _split_heads(x: Tensor, heads: int) -> Tensor:
    # (..., a, c) -> (..., heads, a, d)
    *lead, a, c = x.shape
    x = x.reshape(*lead, a, heads, c // heads)
    nd = x.ndim
    axes = list(range(nd))
    axes[-3], axes[-2] = axes[-2], axes[-3]
    return x.transpose(axes)


def _merge_heads(x: Tensor) -> Tensor:
    *lead, heads, a, d = x.shape
    nd = x.ndim
    axes = list(range(nd))
    axes[-3], axes[-2] = axes[-2], axes[-3]
    return x.transpose(axes).reshape(*lead, a, heads * d)


def _swap_last(x: Tensor) -> Tensor:
    axes = list(range(x.ndim))
    axes[-1], axes[-2] = axes[-2], axes[-1]
    return x.transpose(axes)


def _scores(q: Tensor, k: Tensor, scaled: bool) -> Tensor:
    s = T.matmul(q, _swap_last(k))
    return T.scale(s, 1.0 / np.sqrt(q.shape[-1])) if scaled else s


def attention(q: Tensor, k: Tensor, v: Tensor, heads: int = 1, scaled: bool = False) -> Tensor:
    """Multi-head ``softmax(Q K^T) V`` with heads concatenated on the channel axis.

    No ``1/sqrt(d)`` factor unless ``scaled`` is set.
    """
    c = q.shape[-1]
    if k.shape[-1] != c or v.shape[-1] != c:
        raise T.ShapeError(f"channel mismatch: Q {q.shape}, K {k.shape}, V {v.shape}")
    if k.shape[-2] != v.shape[-2]:
        raise T.ShapeError(f"K and V row counts differ: {k.shape} vs {v.shape}")
    if c % heads:
        raise ConfigError(f"c={c} is not divisible by heads={heads}")
    if heads == 1:
        return T.matmul(T.softmax_rows(_scores(q, k, scaled)), v)
    qh, kh, vh = (_split_heads(t, heads) for t in (q, k, v))
    return _merge_heads(T.matmul(T.softmax_rows(_scores(qh, kh, scaled)), vh))


def ffn_forward(params: dict[str, Tensor], u: Tensor, identity: bool = False) -> Tensor:
    if identity:
        return u
    x = T.layer_norm(u, params["ffn.ln1.g"], params["ffn.ln1.b"])
    hdn = T.relu(T.matmul(x, params["ffn.w1"]) + params["ffn.b1"])
    y = T.matmul(hdn, params["ffn.w2"]) + params["ffn.b2"]
    return T.layer_norm(x + y, params["ffn.ln2.g"], params["ffn.ln2.b"])


def to_tokens(f: Tensor) -> Tensor:
    """(..., c, h, w) -> (..., hw, c)."""
    *lead, c, h, w = f.shape
    flat = f.reshape(*lead, c, h * w)
    return _swap_last(flat)


def to_grid(tokens: Tensor, h: int, w: int) -> Tensor:
    *lead, hw, c = tokens.shape
    return _swap_last(tokens).reshape(*lead, c, h, w)


def _linear(x: Tensor, wt: Tensor, b: Tensor) -> Tensor:
    return T.matmul(x, wt) + b


def _row_normalize(x: Tensor) -> Tensor:
    return x / T.sum_(x, axis=-1, keepdims=True)


def _response(variant: NeckVariant, params: dict[str, Tensor], tok: Tensor) -> Tensor:
    """Attention response A for ``tok`` of shape (..., hw, c)."""
    kind, heads, scaled = variant.kind, variant.heads, variant.scaled
    if kind == "transformer":
        return attention(tok, tok, tok, heads, scaled)
    if kind == "transformer_proj":
        q = _linear(tok, params["wq"], params["bq"])
        k = _linear(tok, params["wk"], params["bk"])
        v = _linear(tok, params["wv"], params["bv"])
        return attention(q, k, v, heads, scaled)
    theta = params["theta"]
    if kind == "tsf":
        return attention(tok, theta, theta, heads, scaled)
    if kind == "tsf_proj":
        q = _linear(tok, params["wq"], params["bq"])
        k = _linear(theta, params["wk"], params["bk"])
        v = _linear(theta, params["wv"], params["bv"])
        return attention(q, k, v, heads, scaled)

    # Variants below have no square {Q,K,V} composition; each uses a documented
    # reshaping so the response still lives on the hw-token axis.
    f_h = _split_heads(tok, heads) if heads > 1 else tok
    th = _split_heads(theta, heads) if heads > 1 else theta
    if kind == "detr":
        # decoded queries D = softmax(theta f^T) f, mapped back to positions by
        # each position's normalised share of the decoder attention
        r = T.softmax_rows(_scores(th, f_h, scaled))
        decoded = T.matmul(r, f_h)
        out = T.matmul(_row_normalize(_swap_last(r)), decoded)
    elif kind == "tsf_k":
        # keys from theta, values pooled from f: P_i = mean of f weighted by S[:, i]
        s = T.softmax_rows(_scores(f_h, th, scaled))
        pooled = T.matmul(_row_normalize(_swap_last(s)), f_h)
        out = T.matmul(s, pooled)
    elif kind == "tsf_v":
        # values are theta expanded onto positions, then mixed by self-attention
        expanded = T.matmul(T.softmax_rows(_scores(f_h, th, scaled)), th)
        out = T.matmul(T.softmax_rows(_scores(f_h, f_h, scaled)), expanded)
    else:
        raise ConfigError(f"unknown neck kind {kind!r}")
    return _merge_heads(out) if heads > 1 else out


def variant_forward(variant: NeckVariant, params: dict[str, Tensor], f: Tensor) -> Tensor:
    """Apply the neck to ``f`` of shape (c, h, w) or (B, c, h, w)."""
    if variant.kind == "none":
        return f
    c, h, w = f.shape[-3:]
    if c != variant.c:
        raise T.ShapeError(f"feature has {c} channels, neck expects {variant.c}")
    tok = to_tokens(f)
    out = ffn_forward(params, tok + _response(variant, params, tok), variant.identity_ffn)
    return to_grid(out, h, w)


def tsf_forward(f: Tensor, theta: Tensor, ffn_params: dict[str, Tensor] | None = None,
                heads: int = 1, scaled: bool = False) -> Tensor:
    """``FFN(f + softmax(f theta^T) theta)`` on a (c, h, w) or (B, c, h, w) grid.

    ``ffn_params=None`` selects the identity FFN.
    """
    c, h, w = f.shape[-3:]
    if theta.shape[-1] != c:
        raise T.ShapeError(f"filter width {theta.shape[-1]} does not match {c} channels")
    tok = to_tokens(f)
    u = tok + attention(tok, theta, theta, heads, scaled)
    return to_grid(ffn_forward(ffn_params or {}, u, ffn_params is None), h, w)


def correlation_map(f: Tensor, theta: Tensor, scaled: bool = False) -> np.ndarray:
    """``R = softmax(f theta^T)`` of shape (hw, n) for one (c, h, w) feature."""
    with T.no_grad():
        tok = to_tokens(f)
        return T.softmax_rows(_scores(tok, theta, scaled)).data
