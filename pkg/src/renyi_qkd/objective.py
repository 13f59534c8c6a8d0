"""Sandwiched Renyi divergence, the key-rate objective and its analytic gradient."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from .matfun import (
    EigenSystem,
    NotPositiveError,
    PinchingMap,
    eig_hermitian,
    frechet_integral,
    hermitian_part,
    matrix_power,
)
from .protocol import CPMap

SUPPORT_OVERLAP_TOL = 1e-9


class SupportError(ValueError):
    pass


@dataclass(frozen=True)
class RenyiParams:
    """Orders derived from the entropy order ``alpha`` in (1, 2].

    ``beta = 1/alpha`` is the divergence order actually optimized,
    ``gamma = 1/(2 - 1/alpha)`` the dual order, ``mu`` the exponent of the
    sandwiching powers and ``L = sin(pi mu)/pi``.
    """

    alpha: float

    def __post_init__(self):
        if not 1.0 < self.alpha <= 2.0:
            raise ValueError(f"alpha must lie in (1, 2], got {self.alpha}")

    @classmethod
    def from_beta(cls, beta: float) -> "RenyiParams":
        return cls(1.0 / beta)

    @property
    def beta(self) -> float:
        return 1.0 / self.alpha

    @property
    def gamma(self) -> float:
        return 1.0 / (2.0 - 1.0 / self.alpha)

    @property
    def mu(self) -> float:
        return (1.0 - self.beta) / (2.0 * self.beta)

    @property
    def L(self) -> float:
        return np.sin(np.pi * self.mu) / np.pi


def _sandwich(rho: np.ndarray, sigma: np.ndarray | EigenSystem, beta: float):
    es = sigma if isinstance(sigma, EigenSystem) else eig_hermitian(sigma)
    null = es.eigenvectors[:, ~es.support()]
    if null.shape[1]:
        overlap = np.linalg.norm(null.conj().T @ rho @ null, 2)
        if overlap > SUPPORT_OVERLAP_TOL:
            raise SupportError(
                f"support of rho not contained in support of sigma (overlap {overlap:.3e})"
            )
    mu = (1.0 - beta) / (2.0 * beta)
    s_mu = matrix_power(es, mu)
    return s_mu, hermitian_part(s_mu @ rho @ s_mu)


def q_beta(rho: np.ndarray, sigma: np.ndarray, beta: float) -> float:
    """``Tr[(sigma^mu rho sigma^mu)^beta]`` with ``mu = (1-beta)/(2 beta)``."""
    _, xi = _sandwich(np.asarray(rho, dtype=complex), sigma, beta)
    w = np.linalg.eigvalsh(xi)
    w = w[w > 1e-12 * max(w[-1], 0.0)] if w.size else w
    return float(np.sum(w**beta))


def renyi_divergence(rho: np.ndarray, sigma: np.ndarray, beta: float) -> float:
    """Sandwiched Renyi divergence of order ``beta`` in bits."""
    if beta <= 0 or beta == 1:
        raise ValueError(f"order must lie in (0,1) or (1,inf), got {beta}")
    rho = np.asarray(rho, dtype=complex)
    tr = float(np.trace(rho).real)
    return float(np.log2(q_beta(rho, sigma, beta) / tr) / (beta - 1.0))


def perturb_map(g: CPMap, epsilon: float) -> CPMap:
    """``rho -> (1-eps) G(rho) + eps Tr(G(rho)) I/d``; positive definite output."""
    if not 0.0 < epsilon <= 1.0:
        raise ValueError(f"perturbation must lie in (0, 1], got {epsilon}")
    if g.depolarizing:
        raise ValueError("map is already perturbed")
    return CPMap(g.kraus_ops, depolarizing=epsilon)


@dataclass(frozen=True, eq=False)
class PerturbedObjective:
    """``f(rho) = Tr G_eps(rho) * D_beta(G_eps(rho) || Z(G_eps(rho)))``."""

    gmap: CPMap
    zmap: PinchingMap
    params: RenyiParams

    @classmethod
    def build(cls, gmap: CPMap, zmap: PinchingMap, alpha: float, epsilon: float = 1e-8):
        return cls(perturb_map(gmap, epsilon), zmap, RenyiParams(alpha))

    @property
    def epsilon(self) -> float:
        return self.gmap.depolarizing

    @property
    def dim(self) -> int:
        return self.gmap.in_dim

    def with_epsilon(self, epsilon: float) -> "PerturbedObjective":
        return PerturbedObjective(CPMap(self.gmap.kraus_ops, epsilon), self.zmap, self.params)

    def value(self, rho: np.ndarray) -> float:
        return objective_f(rho, self)

    def gradient(self, rho: np.ndarray) -> np.ndarray:
        return gradient_f(rho, self)


def objective_f(rho: np.ndarray, obj: PerturbedObjective) -> float:
    x = hermitian_part(obj.gmap.apply(rho))
    tr = float(np.trace(x).real)
    if tr <= 0:
        return 0.0
    return tr * renyi_divergence(x, obj.zmap(x), obj.params.beta)


def gradient_f(rho: np.ndarray, obj: PerturbedObjective) -> np.ndarray:
    """Gradient of :func:`objective_f` w.r.t. the trace pairing ``Tr[X Y]``.

    The directional derivative along ``tau - rho`` equals
    ``Tr[(tau - rho) @ gradient_f(rho)]``.
    """
    g, beta, mu = obj.gmap, obj.params.beta, obj.params.mu
    x = hermitian_part(g.apply(rho))
    tr = float(np.trace(x).real)
    sigma = obj.zmap(x)
    es = eig_hermitian(sigma)
    if es.eigenvalues[0] <= es.cutoff:
        raise NotPositiveError(
            "pinched state is not strictly positive; increase the perturbation epsilon"
        )
    s_mu = matrix_power(es, mu)
    xi = eig_hermitian(hermitian_part(s_mu @ x @ s_mu))
    xi_pow = matrix_power(xi, beta - 1.0)
    lam = xi.eigenvalues[xi.support()]
    q = float(np.sum(lam**beta))
    div = np.log2(q / tr) / (beta - 1.0)

    scale = beta * obj.params.L
    chi1 = obj.zmap(scale * frechet_integral(x @ s_mu @ xi_pow, es, mu))
    chi2 = beta * s_mu @ xi_pow @ s_mu
    chi3 = obj.zmap(scale * frechet_integral(xi_pow @ s_mu @ x, es, mu))

    d = x.shape[0]
    # derivative of log2 brings a 1/ln 2
    inner = (chi1 + chi2 + chi3) / q - np.eye(d) / tr
    grad_div = g.adjoint(inner) / ((beta - 1.0) * np.log(2.0))
    grad = g.adjoint(np.eye(d)) * div + tr * grad_div
    return hermitian_part(grad)


def finite_diff_gradient(
    rho: np.ndarray,
    tau: np.ndarray,
    f: PerturbedObjective | Callable[[np.ndarray], float],
    step: float = 1e-5,
) -> float:
    """Central difference of ``f`` along ``rho_x = (1-x) rho + x tau`` at ``x = 0``."""
    fun = f.value if isinstance(f, PerturbedObjective) else f
    d = np.asarray(tau) - np.asarray(rho)
    return (fun(rho + step * d) - fun(rho - step * d)) / (2 * step)
