"""Single-head graph attention over Gaussian tokens and the refinement decode head.

Each differentiable kernel is a ``*_forward`` / ``*_backward`` pair; the
forward returns ``(outputs, cache)`` and the backward maps output cotangents
to input cotangents. The public functions below are thin wrappers that drop
the cache.
"""

from __future__ import annotations

import os
from dataclasses import dataclass

import numpy as np
from scipy import sparse

from .exceptions import EmptyContextError, InvalidParameterError, NumericInputError
from .graph import NeighborIndex, dense_index
from .scene import GaussianSet, Layout

MIN_SCALE = 1e-6
ROW_SUM_TOL = 1e-6

# Set GSOCC_DEBUG=1 to assert that every attention row is a distribution.
DEBUG_CHECKS = os.environ.get("GSOCC_DEBUG", "") not in ("", "0")


@dataclass(eq=False)
class LayerParams:
    """Projections ``W_Q, W_K, W_V`` (D_tok x d_k) and the decode head.

    ``W_dec`` maps the d_k attention output to a D_tok delta vector.
    """

    W_Q: np.ndarray
    W_K: np.ndarray
    W_V: np.ndarray
    W_dec: np.ndarray
    b_dec: np.ndarray

    NAMES = ("W_Q", "W_K", "W_V", "W_dec", "b_dec")

    def __post_init__(self):
        for name in self.NAMES:
            setattr(self, name, np.asarray(getattr(self, name), dtype=np.float64))
        D, dk = self.W_Q.shape
        if dk < 1:
            raise InvalidParameterError("d_k must be >= 1")
        if self.W_K.shape != (D, dk) or self.W_V.shape != (D, dk):
            raise InvalidParameterError("W_Q, W_K, W_V must share shape (D_tok, d_k)")
        if self.W_dec.shape[0] != dk or self.b_dec.shape != (self.W_dec.shape[1],):
            raise InvalidParameterError("decode head shape mismatch")
        for name in self.NAMES:
            if not np.all(np.isfinite(getattr(self, name))):
                raise NumericInputError(f"{name} has non-finite entries")

    @property
    def d_k(self) -> int:
        return self.W_Q.shape[1]

    @property
    def D_tok(self) -> int:
        return self.W_Q.shape[0]

    def arrays(self) -> dict:
        return {name: getattr(self, name) for name in self.NAMES}

    @classmethod
    def from_arrays(cls, arrays: dict, prefix: str = "") -> "LayerParams":
        return cls(*(arrays[prefix + name] for name in cls.NAMES))

    @classmethod
    def zeros(cls, layout: Layout, d_k: int) -> "LayerParams":
        D = layout.width
        z = np.zeros((D, d_k))
        return cls(z, z.copy(), z.copy(), np.zeros((d_k, D)), np.zeros(D))

    @classmethod
    def random(cls, layout: Layout, d_k: int, rng, qk_std: float = 0.05,
               preserve_features: bool = True) -> "LayerParams":
        """Small random projections with a zero decode head.

        With ``preserve_features`` the value path and decode head carry the
        feature block through unchanged (identity on the first
        ``min(F, d_k)`` channels), so an untrained layer averages neighbor
        features instead of erasing them.
        """
        rng = np.random.default_rng(rng)
        D = layout.width
        W_Q = rng.normal(0.0, qk_std, (D, d_k))
        W_K = rng.normal(0.0, qk_std, (D, d_k))
        W_V = rng.normal(0.0, 1.0 / np.sqrt(D), (D, d_k))
        W_dec = np.zeros((d_k, D))
        b_dec = np.zeros(D)
        if preserve_features and layout.F:
            r = min(layout.F, d_k)
            f0 = layout.feature.start
            W_V[f0:f0 + r, :r] = np.eye(r)
            W_V[f0:f0 + r, r:] = 0.0
            W_V[:f0, :r] = 0.0
            W_V[f0 + r:, :r] = 0.0
            W_dec[:r, f0:f0 + r] = np.eye(r)
        return cls(W_Q, W_K, W_V, W_dec, b_dec)


@dataclass(eq=False)
class AttentionOutput:
    hidden: np.ndarray
    weights: np.ndarray


def tokenize(G: GaussianSet) -> np.ndarray:
    """Flat property vectors, one row per Gaussian (a writable copy)."""
    return np.array(G.data, dtype=np.float64, copy=True)


def detokenize(tokens: np.ndarray, d: int, F: int) -> GaussianSet:
    return GaussianSet(tokens, d, F)


def _check_finite(name: str, *arrays) -> None:
    for a in arrays:
        if not np.all(np.isfinite(a)):
            raise NumericInputError(f"{name}: non-finite values")


# --- attention kernel -----------------------------------------------------------


def attention_forward(Xq, Xkv, W_Q, W_K, W_V, *, idx, mask=None):
    """Scaled dot-product attention where query ``a`` sees keys ``idx[a]``."""
    dk = W_Q.shape[1]
    scale = 1.0 / np.sqrt(dk)
    q = Xq @ W_Q
    k = Xkv @ W_K
    v = Xkv @ W_V
    kg = k[idx]
    vg = v[idx]
    logits = np.einsum("ad,awd->aw", q, kg) * scale
    if mask is not None:
        logits = np.where(mask, logits, -np.inf)
    logits_max = np.max(logits, axis=1, keepdims=True)
    e = np.exp(logits - logits_max)
    w = e / np.sum(e, axis=1, keepdims=True)
    if DEBUG_CHECKS:
        check_weight_rows(w)
    hidden = np.einsum("aw,awd->ad", w, vg)
    cache = (Xq, Xkv, W_Q, W_K, W_V, idx, q, kg, vg, w, scale)
    return (hidden, w), cache


def check_weight_rows(w: np.ndarray, tol: float = ROW_SUM_TOL) -> None:
    """Raise if any attention row is not a probability distribution."""
    sums = w.sum(axis=1)
    if w.size and (np.min(w) < 0 or np.max(np.abs(sums - 1.0)) > tol):
        raise AssertionError(f"attention rows do not sum to 1 (max deviation {np.max(np.abs(sums - 1.0)):.3g})")


def _segment_sum(idx: np.ndarray, vals: np.ndarray, n: int) -> np.ndarray:
    """Scatter-add of ``vals[a, w, :]`` into rows ``idx[a, w]``.

    A sparse one-hot product sums each output row in a fixed (row-major
    source) order, so the result is deterministic.
    """
    flat = idx.ravel()
    S = sparse.csr_matrix((np.ones(flat.size), (flat, np.arange(flat.size))), shape=(n, flat.size))
    return np.asarray(S @ vals.reshape(flat.size, -1))


def attention_backward(cache, d_hidden, d_weights=None):
    Xq, Xkv, W_Q, W_K, W_V, idx, q, kg, vg, w, scale = cache
    if d_hidden is None:
        d_hidden = np.zeros((w.shape[0], vg.shape[-1]))
    dw = np.einsum("ad,awd->aw", d_hidden, vg)
    if d_weights is not None:
        dw = dw + d_weights
    dvg = w[:, :, None] * d_hidden[:, None, :]
    dlogits = w * (dw - np.sum(w * dw, axis=1, keepdims=True))
    dlogits *= scale
    dq = np.einsum("aw,awd->ad", dlogits, kg)
    dkg = dlogits[:, :, None] * q[:, None, :]
    n_kv = Xkv.shape[0]
    dkv = _segment_sum(idx, np.concatenate([dkg, dvg], axis=2), n_kv)
    dk, dv = dkv[:, :dkg.shape[2]], dkv[:, dkg.shape[2]:]
    dW_Q = Xq.T @ dq
    dW_K = Xkv.T @ dk
    dW_V = Xkv.T @ dv
    dXq = dq @ W_Q.T
    dXkv = dk @ W_K.T + dv @ W_V.T
    return dXq, dXkv, dW_Q, dW_K, dW_V


def _as_tokens(x) -> np.ndarray:
    return tokenize(x) if isinstance(x, GaussianSet) else np.asarray(x, dtype=np.float64)


def neighbor_attention(tokens, idx: NeighborIndex, params: LayerParams) -> AttentionOutput:
    """Attention of each node over its neighbor row (GGA/SGA kernel).

    ``tokens`` is a GaussianSet or its ``(N, D_tok)`` token matrix.
    """
    tokens = _as_tokens(tokens)
    _check_finite("neighbor_attention tokens", tokens)
    ids = idx.idx
    if ids.shape[0] != tokens.shape[0] or ids.shape[1] < 1:
        raise InvalidParameterError("neighbor index does not match token count")
    if ids.min() < 0 or ids.max() >= tokens.shape[0]:
        raise InvalidParameterError("neighbor index references invalid node ids")
    (hidden, w), _ = attention_forward(
        tokens, tokens, params.W_Q, params.W_K, params.W_V, idx=ids, mask=idx.mask
    )
    return AttentionOutput(hidden, w)


def cross_attention(q_tokens, kv_tokens, params: LayerParams) -> AttentionOutput:
    """Full attention of every query token over every key/value token."""
    q_tokens = _as_tokens(q_tokens)
    kv_tokens = _as_tokens(kv_tokens)
    if kv_tokens.shape[0] == 0:
        raise EmptyContextError("cross attention needs at least one key/value token")
    if q_tokens.shape[0] == 0:
        raise EmptyContextError("cross attention needs at least one query token")
    _check_finite("cross_attention tokens", q_tokens, kv_tokens)
    ids = dense_index(q_tokens.shape[0], kv_tokens.shape[0]).idx
    (hidden, w), _ = attention_forward(
        q_tokens, kv_tokens, params.W_Q, params.W_K, params.W_V, idx=ids
    )
    return AttentionOutput(hidden, w)


# --- decode head -----------------------------------------------------------------


def refine_forward(tokens, hidden, W_dec, b_dec, *, layout: Layout):
    """Apply decoded deltas to Gaussian tokens (residual on every attribute).

    mean += dmean, scale *= exp(dlogscale), rotation = normalize(rotation + drot),
    opacity = clip(opacity + dop, 0, 1), semantics += dsem, feature = new feature.
    Raises NumericInputError if the result is non-finite or a scale underflows to 0.
    """
    L = layout
    delta = hidden @ W_dec + b_dec
    out = np.empty_like(tokens)
    out[:, L.mean] = tokens[:, L.mean] + delta[:, L.mean]
    with np.errstate(over="ignore", under="ignore"):
        growth = np.exp(delta[:, L.scale])
    out[:, L.scale] = tokens[:, L.scale] * growth
    r = tokens[:, L.rotation] + delta[:, L.rotation]
    rnorm = np.linalg.norm(r, axis=1, keepdims=True)
    out[:, L.rotation] = r / rnorm
    op = tokens[:, 10] + delta[:, 10]
    out[:, 10] = np.clip(op, 0.0, 1.0)
    out[:, L.semantics] = tokens[:, L.semantics] + delta[:, L.semantics]
    out[:, L.feature] = delta[:, L.feature]
    if not np.all(np.isfinite(out)) or not np.all(out[:, L.scale] > 0.0):
        raise NumericInputError("decode produced non-finite values or a zero scale")
    cache = (tokens, hidden, W_dec, growth, r, rnorm, out, op, L)
    return (out,), cache


def refine_backward(cache, d_out):
    tokens, hidden, W_dec, growth, r, rnorm, out, op, L = cache
    d_tok = np.zeros_like(tokens)
    d_delta = np.zeros_like(tokens)
    d_tok[:, L.mean] = d_out[:, L.mean]
    d_delta[:, L.mean] = d_out[:, L.mean]
    d_tok[:, L.scale] = d_out[:, L.scale] * growth
    d_delta[:, L.scale] = d_out[:, L.scale] * out[:, L.scale]
    rhat = out[:, L.rotation]
    g = d_out[:, L.rotation]
    dr = (g - rhat * np.sum(rhat * g, axis=1, keepdims=True)) / rnorm
    d_tok[:, L.rotation] = dr
    d_delta[:, L.rotation] = dr
    inside = (op > 0.0) & (op < 1.0)
    d_tok[:, 10] = np.where(inside, d_out[:, 10], 0.0)
    d_delta[:, 10] = d_tok[:, 10]
    d_tok[:, L.semantics] = d_out[:, L.semantics]
    d_delta[:, L.semantics] = d_out[:, L.semantics]
    d_delta[:, L.feature] = d_out[:, L.feature]
    d_hidden = d_delta @ W_dec.T
    dW = hidden.T @ d_delta
    db = d_delta.sum(axis=0)
    return d_tok, d_hidden, dW, db


def gaussian_refine(G: GaussianSet, hidden, params: LayerParams) -> GaussianSet:
    """Decode attention output into attribute deltas and apply them to ``G``."""
    hidden = np.asarray(hidden, dtype=np.float64)
    _check_finite("gaussian_refine hidden", hidden)
    (out,), _ = refine_forward(tokenize(G), hidden, params.W_dec, params.b_dec, layout=G.layout)
    _check_finite("gaussian_refine decode", out)
    return detokenize(out, G.d, G.F)


# --- constraint projection ---------------------------------------------------------


def constrain_forward(tokens, *, layout: Layout):
    """Project tokens onto valid Gaussians: unit rotation, scale > 0, opacity in [0,1]."""
    L = layout
    out = tokens.copy()
    r = tokens[:, L.rotation]
    rnorm = np.linalg.norm(r, axis=1, keepdims=True)
    with np.errstate(divide="ignore", invalid="ignore"):
        out[:, L.rotation] = r / rnorm
    s = tokens[:, L.scale]
    out[:, L.scale] = np.maximum(s, MIN_SCALE)
    out[:, 10] = np.clip(tokens[:, 10], 0.0, 1.0)
    if not np.all(np.isfinite(out)):
        raise NumericInputError("fused tokens contain non-finite values")
    return (out,), (tokens, out, rnorm, L)


def constrain_backward(cache, d_out):
    tokens, out, rnorm, L = cache
    d = d_out.copy()
    rhat = out[:, L.rotation]
    g = d_out[:, L.rotation]
    d[:, L.rotation] = (g - rhat * np.sum(rhat * g, axis=1, keepdims=True)) / rnorm
    d[:, L.scale] = np.where(tokens[:, L.scale] > MIN_SCALE, d_out[:, L.scale], 0.0)
    op = tokens[:, 10]
    d[:, 10] = np.where((op > 0.0) & (op < 1.0), d_out[:, 10], 0.0)
    return (d,)


# --- per-Gaussian feedforward (MLP baseline) -------------------------------------------


def relu_layer_forward(X, W, b):
    pre = X @ W + b
    return (np.maximum(pre, 0.0),), (X, W, pre)


def relu_layer_backward(cache, d_out):
    X, W, pre = cache
    dpre = np.where(pre > 0.0, d_out, 0.0)
    return dpre @ W.T, X.T @ dpre, dpre.sum(axis=0)
