"""Period encodings and global-local temporal feature fusion.

A scene observed at T discrete periods carries three feature components:
a per-anchor period-invariant base vector, a per-anchor T x d_v matrix of
period rows, and a scene-wide T x d_g matrix. A timestamp t selects (integer
t) or blends (fractional t) period rows through the encoding built here, and
the three reduced components are concatenated into the decoder input.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import OutOfRange, ShapeMismatch


@dataclass
class TimeEncoding:
    """Period weight vector for one timestamp.

    weights sums to 1, has at most two nonzero entries, and those entries
    are adjacent period indices. At integer t it is exactly one-hot.
    """

    weights: np.ndarray
    t: float


def encode_time(t, T):
    """Build the T-dimensional period encoding for timestamp t.

    Integer timestamps yield exact one-hot vectors; fractional timestamps
    interpolate linearly between the two adjacent period slots.
    """
    t = float(t)
    if not (0.0 <= t <= T - 1):
        raise OutOfRange(f"timestamp {t} outside [0, {T - 1}]")
    weights = np.zeros(T, dtype=np.float64)
    lo = int(np.floor(t))
    hi = int(np.ceil(t))
    w = t - lo
    weights[lo] = 1.0 - w
    weights[hi] += w
    return TimeEncoding(weights=weights, t=t)


def reduce_periods(M, e):
    """Weighted sum of period rows: sum_tau e.weights[tau] * M[tau, :].

    Exactly one-hot encodings return the selected row bitwise (a copy).
    """
    M = np.asarray(M)
    if M.shape[0] != e.weights.shape[0]:
        raise ShapeMismatch(f"matrix has {M.shape[0]} period rows, encoding has {e.weights.shape[0]}")
    nz = np.nonzero(e.weights)[0]
    if nz.size == 1 and e.weights[nz[0]] == 1.0:
        return M[nz[0]].copy()
    return e.weights @ M


def reduce_periods_many(M, e):
    """reduce_periods over a batch: M (N, T, d) -> (N, d)."""
    if M.shape[1] != e.weights.shape[0]:
        raise ShapeMismatch(f"matrix has {M.shape[1]} period rows, encoding has {e.weights.shape[0]}")
    nz = np.nonzero(e.weights)[0]
    if nz.size == 1 and e.weights[nz[0]] == 1.0:
        return M[:, nz[0], :].copy()
    return np.einsum("t,ntd->nd", e.weights, M)


def fuse_features(base, local, global_rows, e):
    """Concatenate the period-reduced components into the decoder input.

    base is the (d_b,) period-invariant vector, local the (T, d_v) per-anchor
    period rows, global_rows the (T, d_g) scene-wide rows.
    """
    return np.concatenate([np.asarray(base, dtype=np.float64),
                           reduce_periods(local, e),
                           reduce_periods(global_rows, e)])


def fuse_backward(grad_h, e, d_b, d_v, d_g):
    """Adjoint of fuse_features.

    Splits the fused gradient back into (grad_base, grad_local, grad_global)
    with period rows weighted by the encoding.
    """
    grad_h = np.asarray(grad_h, dtype=np.float64)
    T = e.weights.shape[0]
    grad_base = grad_h[:d_b].copy()
    mid = grad_h[d_b:d_b + d_v]
    tail = grad_h[d_b + d_v:d_b + d_v + d_g]
    grad_local = e.weights[:, None] * mid[None, :]
    grad_global = e.weights[:, None] * tail[None, :]
    assert grad_local.shape == (T, d_v) and grad_global.shape == (T, d_g)
    return grad_base, grad_local, grad_global
