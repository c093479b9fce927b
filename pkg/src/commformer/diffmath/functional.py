"""Fused differentiable primitives used by the attention and policy layers."""

from __future__ import annotations

import math

import numpy as np

from commformer.diffmath.tensor import Tensor, _result, as_tensor, check_broadcast, unbroadcast
from commformer.errors import DegenerateRowError, EmbeddingIndexError, ShapeError

LAYER_NORM_EPS = 1e-5
# masked entries may carry scores far above the row maximum; their weight is
# multiplied by an exact zero so only overflow needs guarding
_MAX_EXPONENT = 60.0


def masked_softmax(scores: Tensor, mask, axis: int = -1) -> Tensor:
    """Softmax over ``axis`` restricted to entries where ``mask`` is nonzero.

    ``mask`` is a 0/1 array or a :class:`Tensor`.  The result is
    ``mask * exp(s) / sum(mask * exp(s))``, so entries with a zero mask get
    weight exactly 0, and a Tensor mask with a straight-through gradient
    receives the derivative of that expression (the "what if this edge were
    open" signal).  With a fractional mask the same formula is a smooth
    relaxation.
    """
    scores = as_tensor(scores)
    mask_t = mask if isinstance(mask, Tensor) else None
    m = np.asarray(mask.data if mask_t is not None else mask, dtype=scores.dtype)
    if m.shape != scores.shape:
        check_broadcast(scores.shape, m.shape)
        m_full = np.broadcast_to(m, scores.shape)
    else:
        m_full = m
    active = m_full > 0
    if not np.all(active.any(axis=axis)):
        raise DegenerateRowError("masked_softmax: a row has no unmasked entry")

    s = scores.data
    row_max = np.max(np.where(active, s, -np.inf), axis=axis, keepdims=True)
    e = np.exp(np.minimum(s - row_max, _MAX_EXPONENT))
    weighted = m_full * e
    z = weighted.sum(axis=axis, keepdims=True)
    out = weighted / z
    mask_shape = m.shape

    def backward(g):
        centered = g - (g * out).sum(axis=axis, keepdims=True)
        g_scores = out * centered if scores.requires_grad else None
        g_mask = None
        if mask_t is not None and mask_t.requires_grad:
            g_mask = unbroadcast(e / z * centered, mask_shape)
        return g_scores, g_mask

    parents = (scores, mask_t) if mask_t is not None else (scores,)
    return _result(out, parents, backward)


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    out = shifted - lse
    probs = np.exp(out)
    return _result(out, (x,), lambda g: (g - probs * g.sum(axis=axis, keepdims=True),))


def layer_norm(x: Tensor, eps: float = LAYER_NORM_EPS) -> Tensor:
    """Normalize over the last axis (no affine part); constant rows map to 0."""
    mu = x.data.mean(axis=-1, keepdims=True)
    centered = x.data - mu
    inv_std = 1.0 / np.sqrt((centered * centered).mean(axis=-1, keepdims=True) + eps)
    xhat = centered * inv_std

    def backward(g):
        gm = g.mean(axis=-1, keepdims=True)
        gx = (g * xhat).mean(axis=-1, keepdims=True)
        return (inv_std * (g - gm - xhat * gx),)

    return _result(xhat, (x,), backward)


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(x: Tensor) -> Tensor:
    """GELU, tanh approximation."""
    v = x.data
    inner = _GELU_C * (v + 0.044715 * (v * v * v))
    t = np.tanh(inner)
    out = 0.5 * v * (1.0 + t)

    def backward(g):
        d_inner = _GELU_C * (1.0 + 3.0 * 0.044715 * v * v)
        return (g * (0.5 * (1.0 + t) + 0.5 * v * (1.0 - t * t) * d_inner),)

    return _result(out, (x,), backward)


def embedding_lookup(table: Tensor, index) -> Tensor:
    """Rows of ``table`` selected by an integer or integer array."""
    idx = np.asarray(index)
    if idx.dtype.kind not in "iu":
        raise EmbeddingIndexError(f"embedding index must be integral, got dtype {idx.dtype}")
    rows = table.shape[0]
    if idx.size and (idx.min() < 0 or idx.max() >= rows):
        raise EmbeddingIndexError(f"embedding index out of range [0, {rows})")
    shape, dtype = table.shape, table.dtype

    def backward(g):
        out = np.zeros(shape, dtype=dtype)
        np.add.at(out, idx, g)
        return (out,)

    return _result(table.data[idx], (table,), backward)


def straight_through(hard, soft: Tensor) -> Tensor:
    """Forward value ``hard`` exactly; gradient passed unchanged to ``soft``."""
    hard = np.asarray(hard, dtype=soft.dtype)
    if hard.shape != soft.shape:
        check_broadcast(hard.shape, soft.shape)
        if hard.ndim < soft.ndim:
            raise ShapeError(f"hard value {hard.shape} narrower than soft path {soft.shape}")
    shape = soft.shape
    return _result(hard.copy(), (soft,), lambda g: (unbroadcast(g, shape),))


def take_along_last(x: Tensor, index) -> Tensor:
    """``x[..., index[...]]``: one entry of the last axis per leading position."""
    idx = np.asarray(index, dtype=np.int64)
    if idx.shape != x.shape[:-1]:
        raise ShapeError(f"index shape {idx.shape} must equal {x.shape[:-1]}")
    picked = np.take_along_axis(x.data, idx[..., None], axis=-1)[..., 0]
    shape, dtype = x.shape, x.dtype

    def backward(g):
        out = np.zeros(shape, dtype=dtype)
        np.put_along_axis(out, idx[..., None], g[..., None], axis=-1)
        return (out,)

    return _result(picked, (x,), backward)
