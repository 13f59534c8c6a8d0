"""Finite-size key length: parameter-estimation radius, leakage, the alpha penalty."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import Callable, Sequence

import numpy as np

CSV_COLUMNS = (
    "alpha", "beta", "N", "p_gen", "depol", "loss", "min_f", "lambda_EC",
    "g_alpha", "key_length", "key_rate", "fw_iters", "fw_gap", "dual_residual",
)


@dataclass(frozen=True)
class SecurityParams:
    eps_PA: float = 1e-10
    eps_EV: float = 1e-10
    eps_PE: float = 1e-10

    def __post_init__(self):
        for name in ("eps_PA", "eps_EV", "eps_PE"):
            v = getattr(self, name)
            if not 0.0 < v < 1.0:
                raise ValueError(f"{name} must lie in (0, 1), got {v}")

    @property
    def total(self) -> float:
        return self.eps_PA + self.eps_EV + self.eps_PE


@dataclass(frozen=True)
class FiniteSizeParams:
    N: int
    p_gen: float = 0.9
    f_EC: float = 1.16

    def __post_init__(self):
        if self.N < 1:
            raise ValueError("N must be a positive integer")
        if not 0.0 < self.p_gen < 1.0:
            raise ValueError(f"p_gen must lie in (0, 1), got {self.p_gen}")
        if self.f_EC < 1.0:
            raise ValueError(f"f_EC must be at least 1, got {self.f_EC}")
        if self.m < 1:
            raise ValueError("no rounds left for parameter estimation")

    @property
    def n(self) -> float:
        """Key-generation rounds."""
        return self.p_gen * self.N

    @property
    def m(self) -> int:
        """Parameter-estimation rounds."""
        return int(round((1.0 - self.p_gen) * self.N))


@dataclass
class KeyRateReport:
    alpha: float
    beta: float
    min_f_certified: float
    lambda_EC: float
    g_alpha: float
    key_length: float
    key_rate: float
    N: int
    p_gen: float
    f_EC: float
    h_zy: float
    eps: SecurityParams
    diagnostics: dict = field(default_factory=dict)

    def csv_row(self, depol: float = float("nan"), loss: float = float("nan")) -> dict:
        d = self.diagnostics
        return {
            "alpha": self.alpha,
            "beta": self.beta,
            "N": self.N,
            "p_gen": self.p_gen,
            "depol": depol,
            "loss": loss,
            "min_f": self.min_f_certified,
            "lambda_EC": self.lambda_EC,
            "g_alpha": self.g_alpha,
            "key_length": self.key_length,
            "key_rate": self.key_rate,
            "fw_iters": d.get("fw_iters", ""),
            "fw_gap": d.get("fw_gap", ""),
            "dual_residual": d.get("dual_residual", ""),
        }

    def to_dict(self) -> dict:
        out = asdict(self)
        out["eps"] = asdict(self.eps)
        return out


def pe_radius(eps_PE: float, sigma_card: int, m: int) -> float:
    """l1 radius of the parameter-estimation ball after ``m`` test rounds."""
    if m <= 0:
        raise ValueError("need at least one parameter-estimation round")
    if not 0.0 < eps_PE < 1.0:
        raise ValueError("eps_PE must lie in (0, 1)")
    return math.sqrt(2.0) * math.sqrt((math.log(1.0 / eps_PE) + sigma_card * math.log(m + 1.0)) / m)


def ec_leakage(n: float, f_EC: float, h_zy: float) -> float:
    return n * f_EC * h_zy


def g_alpha(alpha: float, sp: SecurityParams, lambda_EC: float) -> float:
    if not 1.0 < alpha <= 2.0:
        raise ValueError(f"alpha must lie in (1, 2], got {alpha}")
    return (
        alpha / (alpha - 1.0) * math.log2(1.0 / sp.eps_PA)
        + lambda_EC
        + math.log2(1.0 / sp.eps_EV)
        - 2.0
    )


def key_length(
    min_f: float,
    fp: FiniteSizeParams,
    sp: SecurityParams,
    alpha: float,
    h_zy: float,
    diagnostics: dict | None = None,
) -> KeyRateReport:
    """Key length ``min_f * p_gen * N - g(alpha)`` and rate ``max(l, 0) / N``.

    ``min_f`` must be a certified lower bound (bits per round) and ``h_zy``
    the error-correction entropy per round.
    """
    lam = ec_leakage(fp.n, fp.f_EC, h_zy)
    g = g_alpha(alpha, sp, lam)
    length = min_f * fp.p_gen * fp.N - g
    return KeyRateReport(
        alpha=alpha,
        beta=1.0 / alpha,
        min_f_certified=min_f,
        lambda_EC=lam,
        g_alpha=g,
        key_length=length,
        key_rate=max(length, 0.0) / fp.N,
        N=fp.N,
        p_gen=fp.p_gen,
        f_EC=fp.f_EC,
        h_zy=h_zy,
        eps=sp,
        diagnostics=dict(diagnostics or {}),
    )


def default_alpha_grid(n: int = 25, low: float = 1.0005, high: float = 2.0) -> np.ndarray:
    """``n`` points in [low, high] evenly spaced in ``log(alpha - 1)``."""
    return 1.0 + np.logspace(math.log10(low - 1.0), math.log10(high - 1.0), n)


@dataclass
class AlphaScan:
    alpha_star: float
    best: KeyRateReport
    reports: list[KeyRateReport]
    all_zero: bool


def scan_alpha(
    min_f_at: Callable[[float], tuple[float, dict]],
    fp: FiniteSizeParams,
    sp: SecurityParams,
    alpha_grid: Sequence[float],
    h_zy: float,
) -> AlphaScan:
    """Evaluate the key rate on ``alpha_grid`` and keep the best point.

    ``min_f_at(alpha)`` returns the certified minimum of the objective and
    diagnostics for that order; it is called in grid order so callers can
    warm-start successive solves.
    """
    grid = [float(a) for a in alpha_grid]
    if not grid:
        raise ValueError("empty alpha grid")
    reports = []
    for a in grid:
        value, diag = min_f_at(a)
        reports.append(key_length(value, fp, sp, a, h_zy, diag))
    best = max(reports, key=lambda r: (r.key_rate, r.key_length))
    return AlphaScan(best.alpha, best, reports, all(r.key_rate == 0 for r in reports))
