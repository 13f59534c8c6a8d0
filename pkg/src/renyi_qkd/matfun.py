"""Dense Hermitian matrix-function kernels.

Everything here works on small dense complex arrays (dimension well below
100). Eigenvalues below ``SUPPORT_CUT`` times the largest eigenvalue are
treated as exact zeros, so negative powers are taken on the support only.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import cached_property

import numpy as np

SUPPORT_CUT = 1e-12
DEGENERACY_TOL = 1e-9
HERMITIAN_TOL = 1e-12


class NotHermitianError(ValueError):
    pass


class NotPositiveError(ValueError):
    pass


@dataclass(frozen=True)
class EigenSystem:
    """Eigenvalues (ascending) and unitary eigenvectors of a Hermitian matrix."""

    eigenvalues: np.ndarray
    eigenvectors: np.ndarray

    @property
    def dim(self) -> int:
        return self.eigenvalues.shape[0]

    @property
    def cutoff(self) -> float:
        return SUPPORT_CUT * max(float(np.max(np.abs(self.eigenvalues))), 0.0)

    def support(self) -> np.ndarray:
        return self.eigenvalues > self.cutoff

    def reconstruct(self) -> np.ndarray:
        v = self.eigenvectors
        return (v * self.eigenvalues) @ v.conj().T

    def apply(self, fvals: np.ndarray) -> np.ndarray:
        v = self.eigenvectors
        return (v * fvals) @ v.conj().T


def hermitian_part(m: np.ndarray) -> np.ndarray:
    return 0.5 * (m + m.conj().T)


def check_hermitian(m: np.ndarray, tol: float = HERMITIAN_TOL) -> np.ndarray:
    m = np.asarray(m, dtype=complex)
    if m.ndim != 2 or m.shape[0] != m.shape[1]:
        raise NotHermitianError(f"expected a square matrix, got shape {m.shape}")
    scale = float(np.max(np.abs(m))) if m.size else 0.0
    dev = float(np.max(np.abs(m - m.conj().T))) if m.size else 0.0
    if dev > tol * max(scale, 1.0):
        raise NotHermitianError(
            f"matrix is not Hermitian: max|M - M^H| = {dev:.3e} (scale {scale:.3e})"
        )
    return m


def eig_hermitian(m: np.ndarray) -> EigenSystem:
    m = check_hermitian(m)
    w, v = np.linalg.eigh(hermitian_part(m))
    return EigenSystem(w, v)


def _psd_eig(m: np.ndarray | EigenSystem) -> EigenSystem:
    es = m if isinstance(m, EigenSystem) else eig_hermitian(m)
    if es.dim and es.eigenvalues[0] < -es.cutoff:
        raise NotPositiveError(
            f"matrix is not positive semidefinite: smallest eigenvalue "
            f"{es.eigenvalues[0]:.3e} below -{es.cutoff:.3e}"
        )
    return es


def matrix_power(m: np.ndarray | EigenSystem, p: float) -> np.ndarray:
    """``M**p`` for PSD ``M``; eigenvalues under the support cut map to zero."""
    es = _psd_eig(m)
    keep = es.support()
    lam = np.where(keep, es.eigenvalues, 1.0)
    return es.apply(np.where(keep, lam**p, 0.0))


def schatten_norm_pow(m: np.ndarray | EigenSystem, p: float) -> float:
    """``Tr(M**p)``, i.e. the p-th power of the Schatten p-norm, on the support."""
    if p <= 0:
        raise ValueError(f"Schatten exponent must be positive, got {p}")
    es = _psd_eig(m)
    lam = es.eigenvalues[es.support()]
    return float(np.sum(lam**p))


@dataclass(frozen=True, eq=False)
class PinchingMap:
    """Dephasing in a rank-one projector family on the leading tensor factor.

    ``projectors`` act on the first register (dimension ``r``); the map is
    ``M -> sum_i (Z_i (x) I_rest) M (Z_i (x) I_rest)``.
    """

    projectors: tuple[np.ndarray, ...]
    rest_dim: int = 1

    def __post_init__(self):
        projs = tuple(np.asarray(z, dtype=complex) for z in self.projectors)
        object.__setattr__(self, "projectors", projs)
        if not projs:
            raise ValueError("pinching map needs at least one projector")
        r = projs[0].shape[0]
        for z in projs:
            if z.shape != (r, r):
                raise ValueError("projectors must share one square shape")
            check_hermitian(z, 1e-10)
            if not np.allclose(z @ z, z, atol=1e-10) or abs(np.trace(z).real - 1) > 1e-10:
                raise ValueError("projectors must be rank-one orthogonal projectors")
        for i, a in enumerate(projs):
            for b in projs[i + 1 :]:
                if np.max(np.abs(a @ b)) > 1e-10:
                    raise ValueError("projectors are not mutually orthogonal")
        if np.max(np.abs(sum(projs) - np.eye(r))) > 1e-10:
            raise ValueError("projectors do not sum to the identity on the pinched register")

    @classmethod
    def computational(cls, r: int, rest_dim: int = 1) -> "PinchingMap":
        eye = np.eye(r)
        return cls(tuple(np.outer(eye[i], eye[i]) for i in range(r)), rest_dim)

    @property
    def register_dim(self) -> int:
        return self.projectors[0].shape[0]

    @property
    def dim(self) -> int:
        return self.register_dim * self.rest_dim

    @cached_property
    def _vectors(self) -> np.ndarray:
        # columns are the unit vectors spanning each projector
        cols = []
        for z in self.projectors:
            w, v = np.linalg.eigh(z)
            cols.append(v[:, -1])
        return np.stack(cols, axis=1)

    def __call__(self, m: np.ndarray) -> np.ndarray:
        return pinch(m, self)


def pinch(m: np.ndarray, zmap: PinchingMap) -> np.ndarray:
    m = np.asarray(m, dtype=complex)
    r, n = zmap.register_dim, zmap.rest_dim
    if m.shape != (r * n, r * n):
        raise ValueError(f"pinching map acts on dimension {r * n}, got {m.shape}")
    u = zmap._vectors
    # rotate register into the projector basis, keep diagonal register blocks
    t = m.reshape(r, n, r, n)
    t = np.einsum("ai,ajbk,bl->ijlk", u.conj(), t, u, optimize=True)
    out = np.zeros_like(t)
    idx = np.arange(r)
    out[idx, :, idx, :] = t[idx, :, idx, :]
    out = np.einsum("ai,ijlk,bl->ajbk", u, out, u.conj(), optimize=True)
    return out.reshape(r * n, r * n)


def power_divided_differences(b: np.ndarray, mu: float) -> np.ndarray:
    """Matrix of ``(b_i**mu - b_j**mu) / (b_i - b_j)`` with the diagonal limit.

    Uses ``b_j**mu * expm1(mu * log1p((b_i - b_j) / b_j))`` for the numerator so
    close eigenvalues do not lose digits to cancellation.
    """
    b = np.asarray(b, dtype=float)
    bi, bj = b[:, None], b[None, :]
    diff = bi - bj
    degenerate = np.abs(diff) <= DEGENERACY_TOL * np.maximum(bi, bj)
    safe = np.where(degenerate, 1.0, diff)
    num = bj**mu * np.expm1(mu * np.log1p(diff / bj))
    limit = mu * np.broadcast_to(bi, diff.shape) ** (mu - 1)
    return np.where(degenerate, limit, num / safe)


def frechet_integral(
    a: np.ndarray, b: np.ndarray | EigenSystem, mu: float
) -> np.ndarray:
    """``int_0^inf (B+t)^-1 A (B+t)^-1 t**mu dt`` for positive definite ``B``.

    Evaluated in the eigenbasis of ``B``: entry (i, j) of the rotated ``A`` is
    scaled by ``pi/sin(pi*mu) * (b_i**mu - b_j**mu)/(b_i - b_j)``. ``A`` need
    not be Hermitian; the map is linear and commutes with taking adjoints.
    """
    if not 0.0 < mu < 1.0:
        raise ValueError(f"mu must lie in (0, 1), got {mu}")
    es = b if isinstance(b, EigenSystem) else eig_hermitian(b)
    lam = es.eigenvalues
    if lam[0] <= es.cutoff:
        raise NotPositiveError(
            f"B must be strictly positive definite (smallest eigenvalue {lam[0]:.3e}); "
            "is the depolarizing perturbation switched off?"
        )
    a = np.asarray(a, dtype=complex)
    v = es.eigenvectors
    kernel = power_divided_differences(lam, mu) * (np.pi / np.sin(np.pi * mu))
    return v @ (kernel * (v.conj().T @ a @ v)) @ v.conj().T
