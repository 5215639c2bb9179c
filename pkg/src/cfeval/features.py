"""Feature map phi(x, a) = [x; a; x[:m] * a[:m]; 1] with m = min(d, q)."""

from __future__ import annotations

import numpy as np


class DimensionError(ValueError):
    pass


def n_features(d: int, q: int, bias: bool = True) -> int:
    return d + q + min(d, q) + (1 if bias else 0)


def featurize(x, a, bias: bool = True) -> np.ndarray:
    """Features of one (context, ad) pair, or of broadcastable batches.

    ``x`` has trailing dimension d and ``a`` trailing dimension q; leading
    dimensions broadcast, e.g. x of shape (n, 1, d) with a of shape (n, c, q).
    """
    x = np.asarray(x, dtype=np.float64)
    a = np.asarray(a, dtype=np.float64)
    m = min(x.shape[-1], a.shape[-1])
    lead = np.broadcast_shapes(x.shape[:-1], a.shape[:-1])
    parts = [
        np.broadcast_to(x, lead + x.shape[-1:]),
        np.broadcast_to(a, lead + a.shape[-1:]),
        x[..., :m] * a[..., :m],
    ]
    if bias:
        parts.append(np.ones(lead + (1,)))
    return np.concatenate(parts, axis=-1)


def linear_score(weights, x, a, d: int, q: int) -> np.ndarray:
    """``weights . phi(x, a)`` without materializing phi.

    ``weights`` has length ``n_features(d, q, bias)``; a trailing bias entry is
    detected from the length. Shapes broadcast as in :func:`featurize`.
    """
    w = np.asarray(weights, dtype=np.float64)
    x = np.asarray(x, dtype=np.float64)
    a = np.asarray(a, dtype=np.float64)
    if x.shape[-1] != d or a.shape[-1] != q:
        raise DimensionError(f"expected context dim {d} and ad dim {q}, got {x.shape[-1]} and {a.shape[-1]}")
    m = min(d, q)
    base = n_features(d, q, bias=False)
    if len(w) not in (base, base + 1):
        raise DimensionError(f"weight vector has length {len(w)}, expected {base} or {base + 1}")
    s = x @ w[:d]
    s = s[..., None] if a.ndim > x.ndim else s
    s = s + a @ w[d : d + q]
    xi = x[..., :m] * w[d + q : base]
    if a.ndim > x.ndim:
        xi = xi[..., None, :]
    s = s + np.sum(xi * a[..., :m], axis=-1)
    if len(w) == base + 1:
        s = s + w[base]
    return s
