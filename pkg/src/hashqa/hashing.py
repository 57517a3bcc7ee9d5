"""Hashing layer: tanh relaxation, sign codes and the binary-constraint loss.

Bit layout of a packed ``D x L`` sign matrix: elements are taken row-major
(all ``L`` columns of row 0, then row 1, ...), one bit each, least
significant bit first within a byte. A set bit is +1, a clear bit is -1.
Trailing pad bits of the last byte are zero.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import FormatError, NumericError, UsageError


def payload_size(D: int, L: int) -> int:
    return (D * L + 7) // 8


def pack_bits(signs: np.ndarray) -> bytes:
    signs = np.asarray(signs)
    if signs.ndim != 2:
        raise UsageError(f"expected a 2-D sign matrix, got shape {signs.shape}")
    if not np.all((signs == 1) | (signs == -1)):
        raise UsageError("pack_bits expects entries in {+1, -1}")
    return np.packbits(signs.ravel() > 0, bitorder="little").tobytes()


def unpack_bits(payload: bytes, D: int, L: int, dtype=np.float32) -> np.ndarray:
    bits = unpack_bits01(payload, D, L)
    return (2 * bits.astype(dtype) - 1).astype(dtype, copy=False)


def unpack_bits01(payload: bytes, D: int, L: int) -> np.ndarray:
    """Unpack to a ``(D, L)`` uint8 array of 0/1 bits."""
    expected = payload_size(D, L)
    if len(payload) != expected:
        raise FormatError(f"payload has {len(payload)} bytes, expected {expected} for D={D}, L={L}")
    raw = np.frombuffer(payload, dtype=np.uint8)
    return np.unpackbits(raw, count=D * L, bitorder="little").reshape(D, L)


@dataclass(frozen=True)
class BinaryMatrix:
    """A ``D x L`` matrix over {+1, -1}, stored one bit per element."""

    D: int
    L: int
    payload: bytes

    def __post_init__(self):
        if len(self.payload) != payload_size(self.D, self.L):
            raise FormatError(
                f"payload has {len(self.payload)} bytes, expected {payload_size(self.D, self.L)}"
            )
        used = self.D * self.L
        if used % 8 and self.payload[-1] >> (used % 8):
            raise FormatError("trailing pad bits must be zero", len(self.payload) - 1)

    @classmethod
    def from_signs(cls, signs: np.ndarray) -> "BinaryMatrix":
        signs = np.asarray(signs)
        return cls(signs.shape[0], signs.shape[1], pack_bits(signs))

    def signs(self, dtype=np.float32) -> np.ndarray:
        return unpack_bits(self.payload, self.D, self.L, dtype)

    def bits(self) -> np.ndarray:
        return unpack_bits01(self.payload, self.D, self.L)

    @property
    def nbytes(self) -> int:
        return len(self.payload)


@dataclass(frozen=True)
class HashingConfig:
    beta: float = 5.0
    delta: float = 1e-6

    def __post_init__(self):
        if not self.beta >= 1:
            raise UsageError(f"beta must be >= 1, got {self.beta}")
        if not self.delta >= 0:
            raise UsageError(f"delta must be >= 0, got {self.delta}")


def soft_binarize(H: np.ndarray, beta: float) -> np.ndarray:
    """Elementwise ``tanh(beta * H)``."""
    if beta < 1:
        raise UsageError(f"beta must be >= 1, got {beta}")
    if not np.all(np.isfinite(H)):
        raise NumericError("soft_binarize received non-finite values")
    return np.tanh(beta * H)


def soft_binarize_backward(grad_B: np.ndarray, B: np.ndarray, beta: float) -> np.ndarray:
    # d tanh(beta x)/dx = beta (1 - y^2), evaluated from the forward output
    return grad_B * (beta * (1.0 - B * B))


def sign(B: np.ndarray) -> np.ndarray:
    """Sign with sgn(0) = +1, as a float array of the input dtype."""
    B = np.asarray(B)
    return np.where(B >= 0, 1.0, -1.0).astype(B.dtype if B.dtype.kind == "f" else np.float32)


def hard_binarize(B: np.ndarray) -> BinaryMatrix:
    if not np.all(np.isfinite(B)):
        raise NumericError("hard_binarize received non-finite values")
    return BinaryMatrix.from_signs(sign(B))


def binary_constraint_loss(B: np.ndarray, Bc, mask: np.ndarray | None = None):
    """Squared Frobenius distance between ``B`` and its code ``Bc``.

    ``Bc`` may be a :class:`BinaryMatrix` or a dense sign array. When ``mask``
    (length ``L`` boolean, or broadcastable to ``B``'s column axis) is given,
    padded columns are excluded from the sum.

    Returns:
        ``(loss, grad)`` where ``grad = 2 (B - Bc)`` on the counted entries.
    """
    target = Bc.signs(B.dtype) if isinstance(Bc, BinaryMatrix) else np.asarray(Bc)
    if target.shape != B.shape:
        raise UsageError(f"shape mismatch: B {B.shape} vs code {target.shape}")
    diff = B - target
    if mask is not None:
        diff = diff * np.asarray(mask, dtype=B.dtype)[..., None, :]
    return float(np.sum(diff * diff)), 2.0 * diff
