"""Symmetric / PSD matrix functions computed in a single eigenbasis.

Every function accepts a single ``(d, d)`` matrix or a stack ``(..., d, d)``;
the localization engine relies on the stacked form.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

PSD_TOL = 1e-8
PINV_RTOL = 1e-10


class NotPSDError(ValueError):
    """Raised when a matrix has an eigenvalue below the near-PSD tolerance."""


class KernelInclusionError(ValueError):
    """Raised when ker(A) is not contained in ker(B)."""


def sym(A) -> np.ndarray:
    A = np.asarray(A, dtype=float)
    return 0.5 * (A + np.swapaxes(A, -1, -2))


def eigh(A: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Ascending eigenpairs of a symmetric (stack of) matrix, with a d=1 shortcut."""
    A = np.asarray(A, dtype=float)
    if A.shape[-1] == 1:
        return A[..., 0].copy(), np.ones_like(A)
    return np.linalg.eigh(A)


def op_norm(A) -> np.ndarray:
    """Operator norm of a symmetric (stack of) matrix."""
    lam, _ = eigh(sym(A))
    return np.max(np.abs(lam), axis=-1)


def hs_norm(A) -> np.ndarray:
    return np.sqrt(np.sum(np.asarray(A) ** 2, axis=(-1, -2)))


def spectral_apply(lam: np.ndarray, Q: np.ndarray, values: np.ndarray) -> np.ndarray:
    """Q diag(values) Q^T for stacked eigenbases."""
    return (Q * values[..., None, :]) @ np.swapaxes(Q, -1, -2)


@dataclass(frozen=True)
class SpectralDecomp:
    eigenvalues: np.ndarray
    eigenvectors: np.ndarray
    cutoff: float

    @property
    def retained(self) -> np.ndarray:
        return self.eigenvalues > self.cutoff

    @property
    def rank(self) -> int:
        return int(np.sum(self.retained))

    def apply(self, fn) -> np.ndarray:
        vals = np.where(self.retained, fn(np.where(self.retained, self.eigenvalues, 1.0)), 0.0)
        return spectral_apply(self.eigenvalues, self.eigenvectors, vals)

    def reconstruct(self) -> np.ndarray:
        return spectral_apply(self.eigenvalues, self.eigenvectors, self.eigenvalues)


def spectral(A, cutoff: float | None = None) -> SpectralDecomp:
    """Eigendecomposition of a single symmetric matrix plus a zero-eigenvalue cutoff."""
    A = sym(A)
    lam, Q = eigh(A)
    if cutoff is None:
        cutoff = PINV_RTOL * float(np.max(np.abs(lam), initial=0.0))
    return SpectralDecomp(lam, Q, float(cutoff))


def _check_psd(lam: np.ndarray) -> None:
    scale = np.max(np.abs(lam), axis=-1, keepdims=True)
    if np.any(lam < -PSD_TOL * scale - 1e-300):
        worst = float(np.min(lam))
        raise NotPSDError(f"matrix is not PSD: smallest eigenvalue {worst:.3e}")


def _default_cutoff(lam: np.ndarray, cutoff) -> np.ndarray:
    if cutoff is None:
        return PINV_RTOL * np.max(np.abs(lam), axis=-1, keepdims=True)
    return np.full(lam.shape[:-1] + (1,), float(cutoff))


def psd_sqrt(A) -> np.ndarray:
    """The PSD square root; slightly negative eigenvalues are clamped to zero."""
    lam, Q = eigh(sym(A))
    _check_psd(lam)
    return spectral_apply(lam, Q, np.sqrt(np.clip(lam, 0.0, None)))


def pseudo_inverse(A, cutoff=None) -> np.ndarray:
    """Moore-Penrose inverse: eigenvalues above ``cutoff`` inverted, the rest zeroed.

    ``cutoff`` defaults to ``1e-10 * ||A||_op``.
    """
    lam, Q = eigh(sym(A))
    _check_psd(lam)
    cut = _default_cutoff(lam, cutoff)
    keep = lam > cut
    return spectral_apply(lam, Q, np.where(keep, 1.0 / np.where(keep, lam, 1.0), 0.0))


def capped_inverse(A, cutoff=None) -> np.ndarray:
    """min(A^+, I): eigenvalue map lam -> min(1/lam, 1) on the range, 0 on the kernel."""
    lam, Q = eigh(sym(A))
    _check_psd(lam)
    cut = _default_cutoff(lam, cutoff)
    keep = lam > cut
    vals = np.where(keep, np.minimum(1.0 / np.where(keep, lam, 1.0), 1.0), 0.0)
    return spectral_apply(lam, Q, vals)


def inverse_sqrt(A) -> np.ndarray:
    lam, Q = eigh(sym(A))
    if np.any(lam <= 0):
        raise NotPSDError("matrix is singular")
    return spectral_apply(lam, Q, 1.0 / np.sqrt(lam))


def sqrt_diff_trace_pair(A, B, kernel_tol: float = 1e-6) -> tuple[float, float]:
    """Both sides of Tr((sqrt A - sqrt B)^2) <= Tr((A - B)^2 A^+).

    Requires ker(A) within ker(B): every near-null eigenvector v of A must
    satisfy ||B v|| <= kernel_tol.
    """
    A = sym(A)
    B = sym(B)
    dec = spectral(A)
    _check_psd(dec.eigenvalues)
    null = dec.eigenvectors[:, ~dec.retained]
    if null.size and np.max(np.linalg.norm(B @ null, axis=0)) > kernel_tol:
        raise KernelInclusionError("ker(A) is not contained in ker(B)")
    sA = psd_sqrt(A)
    sB = psd_sqrt(B)
    diff = sA - sB
    lhs = float(np.trace(diff @ diff))
    D = A - B
    rhs = float(np.trace(D @ D @ dec.apply(lambda x: 1.0 / x)))
    return lhs, rhs
