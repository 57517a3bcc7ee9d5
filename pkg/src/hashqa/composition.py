"""Compose ``D x L`` feature matrices into ``D``-vectors.

Questions are max-pooled over their real tokens. Answers are combined by
attention conditioned on the question vector::

    alpha_i  ~ exp(m . tanh(W_a b_i + W_q v_q))     (softmax over real tokens)
    v_a      = sum_i alpha_i b_i

All functions accept either a single matrix or a leading batch axis.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import UsageError
from .hashing import BinaryMatrix, payload_size


@dataclass
class AttentionParams:
    wq: np.ndarray
    wa: np.ndarray
    m: np.ndarray

    def __post_init__(self):
        M, D = self.wa.shape
        if M < 1 or self.wq.shape != (M, D) or self.m.shape != (M,):
            raise UsageError(
                f"inconsistent attention shapes wq={self.wq.shape} wa={self.wa.shape} m={self.m.shape}"
            )

    @classmethod
    def from_params(cls, params: dict) -> "AttentionParams":
        return cls(params["att.wq"], params["att.wa"], params["att.m"])


def _check_mask(mask: np.ndarray) -> None:
    if not mask.any(axis=-1).all():
        raise UsageError("every sequence needs at least one unmasked position")


def max_pool(H: np.ndarray, mask: np.ndarray):
    """Row-wise maximum over unmasked columns.

    Returns ``(v, argmax)``; ``argmax`` holds the first column attaining the
    maximum and is what :func:`max_pool_backward` routes gradients to.
    """
    H = np.asarray(H)
    mask = np.asarray(mask, dtype=bool)
    _check_mask(mask)
    if H.shape[-1] != mask.shape[-1]:
        raise UsageError(f"matrix {H.shape} does not match mask {mask.shape}")
    Hm = np.where(mask[..., None, :], H, -np.inf)
    idx = np.argmax(Hm, axis=-1)
    v = np.take_along_axis(H, idx[..., None], axis=-1)[..., 0]
    return v, idx


def max_pool_backward(grad_v: np.ndarray, idx: np.ndarray, L: int) -> np.ndarray:
    g = np.zeros(grad_v.shape + (L,), dtype=grad_v.dtype)
    np.put_along_axis(g, idx[..., None], grad_v[..., None], axis=-1)
    return g


def masked_softmax(logits: np.ndarray, mask: np.ndarray) -> np.ndarray:
    z = np.where(mask, logits, -np.inf)
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


@dataclass
class AttendCache:
    B: np.ndarray
    vq: np.ndarray
    T: np.ndarray
    alpha: np.ndarray


def _shapes(B: np.ndarray, vq: np.ndarray, p: AttentionParams, mask: np.ndarray) -> None:
    D = p.wa.shape[1]
    if B.shape[-2] != D or vq.shape[-1] != D:
        raise UsageError(f"answer matrix {B.shape} / question vector {vq.shape} do not match D={D}")
    if B.shape[-1] != mask.shape[-1]:
        raise UsageError(f"answer matrix {B.shape} does not match mask {mask.shape}")
    _check_mask(mask)


def attend(B, vq: np.ndarray, p: AttentionParams, mask: np.ndarray):
    """Attention composition of answer columns against a question vector.

    ``B`` is the soft matrix during training; passing a :class:`BinaryMatrix`
    unpacks it to dense +-1 columns (the naive serving path).

    Returns:
        ``(v_a, alpha, cache)``.
    """
    if isinstance(B, BinaryMatrix):
        B = B.signs(p.wa.dtype)
    B = np.asarray(B)
    vq = np.asarray(vq)
    mask = np.asarray(mask, dtype=bool)
    _shapes(B, vq, p, mask)
    T = np.tanh(p.wa @ B + (p.wq @ vq[..., None]))
    logits = np.einsum("m,...ml->...l", p.m, T)
    alpha = masked_softmax(logits, mask)
    va = (B @ alpha[..., None])[..., 0]
    return va, alpha, AttendCache(B, vq, T, alpha)


def attend_backward(grad_va: np.ndarray, cache: AttendCache, p: AttentionParams):
    """Gradients of :func:`attend`.

    Returns:
        ``(grad_B, grad_vq, grads)`` with ``grads`` keyed ``att.wq``,
        ``att.wa``, ``att.m``.
    """
    B, vq, T, alpha = cache.B, cache.vq, cache.T, cache.alpha
    grad_B = grad_va[..., :, None] * alpha[..., None, :]
    g_alpha = (np.swapaxes(B, -1, -2) @ grad_va[..., None])[..., 0]
    g_logit = alpha * (g_alpha - np.sum(g_alpha * alpha, axis=-1, keepdims=True))
    g_pre = p.m[:, None] * g_logit[..., None, :] * (1.0 - T * T)
    M, D = p.wa.shape
    L = alpha.shape[-1]
    g_c = g_pre.sum(axis=-1)
    grads = {
        "att.m": np.einsum("nl,nml->m", g_logit.reshape(-1, L), T.reshape(-1, M, L)),
        "att.wa": np.einsum("nml,ndl->md", g_pre.reshape(-1, M, L), B.reshape(-1, D, L)),
        "att.wq": g_c.reshape(-1, M).T @ vq.reshape(-1, D),
    }
    grad_B = grad_B + p.wa.T @ g_pre
    grad_vq = g_c @ p.wq
    return grad_B, grad_vq, grads


def _bits01(codes, D: int, L: int) -> np.ndarray:
    if isinstance(codes, BinaryMatrix):
        if (codes.D, codes.L) != (D, L):
            raise UsageError(f"code is {codes.D}x{codes.L}, expected {D}x{L}")
        payload = codes.payload
        n = None
    else:
        codes = list(codes)
        for c in codes:
            if (c.D, c.L) != (D, L):
                raise UsageError(f"code is {c.D}x{c.L}, expected {D}x{L}")
        payload = b"".join(c.payload for c in codes)
        n = len(codes)
    raw = np.frombuffer(payload, dtype=np.uint8).reshape(-1, payload_size(D, L))
    bits = np.unpackbits(raw, axis=1, count=D * L, bitorder="little").reshape(-1, D, L)
    return bits[0] if n is None else bits


def binary_attend_fast(codes, vq: np.ndarray, p: AttentionParams, mask: np.ndarray, bits: np.ndarray | None = None):
    """Attention over packed +-1 answer matrices without materialising signs.

    With 0/1 bits ``c`` and signs ``b = 2c - 1``, each row of ``W_a b`` is
    ``2 * (sum of that row's weights at set bits) - (row sum)``, and the
    composed vector is ``v_a = 2 (c @ alpha) - sum(alpha)``.

    Args:
        codes: one :class:`BinaryMatrix` or a sequence of them (batched).
        vq: question vector, ``(D,)``; shared across a batch of codes, or
            ``(N, D)`` for one vector per code.
        p: attention parameters.
        mask: ``(L,)`` or ``(N, L)`` validity mask.
        bits: optional pre-unpacked 0/1 bits, ``(D, L)`` or ``(N, D, L)``.

    Returns:
        ``(v_a, alpha)``.
    """
    M, D = p.wa.shape
    mask = np.asarray(mask, dtype=bool)
    L = mask.shape[-1]
    if vq.shape[-1] != D:
        raise UsageError(f"question vector {vq.shape} does not match D={D}")
    _check_mask(mask)
    c = _bits01(codes, D, L) if bits is None else bits
    dtype = p.wa.dtype
    c = c.astype(dtype)
    row_sum = p.wa.sum(axis=1)
    pre = 2.0 * (p.wa @ c) - row_sum[:, None]
    pre += (p.wq @ np.asarray(vq)[..., None]) if vq.ndim == c.ndim - 1 else (p.wq @ vq)[:, None]
    logits = np.einsum("m,...ml->...l", p.m, np.tanh(pre))
    alpha = masked_softmax(logits, mask)
    va = 2.0 * (c @ alpha[..., None])[..., 0] - alpha.sum(axis=-1, keepdims=True)
    return va, alpha
