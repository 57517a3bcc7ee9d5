"""Cosine similarity, triplet hinge loss and the combined training objective."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable

import numpy as np

EPS = 1e-12
DEFAULT_MARGIN = 0.1


def cosine(u: np.ndarray, v: np.ndarray):
    """Cosine similarity along the last axis with norms clamped at ``EPS``.

    Returns:
        ``(s, grad_u, grad_v)`` where ``grad_*`` are ``ds/du`` and ``ds/dv``.
    """
    u = np.asarray(u)
    v = np.asarray(v)
    nu_raw = np.linalg.norm(u, axis=-1, keepdims=True)
    nv_raw = np.linalg.norm(v, axis=-1, keepdims=True)
    nu = np.maximum(nu_raw, EPS)
    nv = np.maximum(nv_raw, EPS)
    dot = np.sum(u * v, axis=-1, keepdims=True)
    s = dot / (nu * nv)
    # a clamped norm is constant, so its branch drops the radial term
    grad_u = v / (nu * nv) - np.where(nu_raw > EPS, s * u / (nu * nu), 0.0)
    grad_v = u / (nu * nv) - np.where(nv_raw > EPS, s * v / (nv * nv), 0.0)
    return s[..., 0], grad_u, grad_v


@dataclass(frozen=True)
class TripletScores:
    s_plus: float
    s_minus: float
    margin: float = DEFAULT_MARGIN


def hinge(t: TripletScores):
    """``max(0, margin - s+ + s-)`` and its subgradients w.r.t. ``(s+, s-)``.

    The subgradient at the kink is taken as zero.
    """
    if not t.margin > 0:
        raise ValueError("margin must be positive")
    arg = t.margin - t.s_plus + t.s_minus
    if arg > 0:
        return arg, (-1.0, 1.0)
    return 0.0, (0.0, 0.0)


def hinge_batch(s_plus: np.ndarray, s_minus: np.ndarray, margin: float = DEFAULT_MARGIN):
    """Vectorised :func:`hinge`; returns ``(losses, active)``."""
    arg = margin - s_plus + s_minus
    active = arg > 0
    return np.where(active, arg, 0.0), active


def total_loss(hinge_losses: Iterable[float], constraint_pairs: Iterable[tuple[float, float]], delta: float) -> float:
    """Sum over triplets of ``J_m + delta * (J_c(a+) + J_c(a-))``.

    Terms are summed in the given order.
    """
    total = 0.0
    for jm, (jc_pos, jc_neg) in zip(hinge_losses, constraint_pairs, strict=True):
        total += jm + delta * (jc_pos + jc_neg)
    return total
