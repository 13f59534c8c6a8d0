"""Glue from a protocol instance to a certified finite-size key rate."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .finitesize import (
    AlphaScan,
    FiniteSizeParams,
    KeyRateReport,
    SecurityParams,
    ec_leakage,
    g_alpha,
    key_length,
    pe_radius,
    scan_alpha,
)
from .objective import PerturbedObjective
from .optimizer import FeasibleSet, FWConfig, frank_wolfe, initial_point, step2_lower_bound
from .protocol import ProtocolInstance

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class SolverSettings:
    eps_perturb: float = 1e-8
    gap_tol: float = 1e-6
    max_iters: int = 300
    t_ball: float = 0.0
    warm_start: bool = True
    eps_sensitivity_factor: float = 10.0
    zero_rate_shortcut: bool = True

    @property
    def fw(self) -> FWConfig:
        return FWConfig(gap_tol=self.gap_tol, max_iters=self.max_iters)


@dataclass
class MinimizationResult:
    value: float
    rho: np.ndarray
    diagnostics: dict
    log: list[dict] = field(default_factory=list)


def feasible_set_for(inst: ProtocolInstance, fp: FiniteSizeParams, sp: SecurityParams,
                     settings: SolverSettings) -> FeasibleSet:
    mu = pe_radius(sp.eps_PE, len(inst.pe_ops), fp.m)
    return FeasibleSet.from_instance(inst, mu_ball=mu, t_ball=settings.t_ball)


def zero_rate_threshold(inst: ProtocolInstance, fp: FiniteSizeParams, sp: SecurityParams, alpha: float) -> float:
    """Objective value at or below which the key length cannot be positive."""
    return g_alpha(alpha, sp, ec_leakage(fp.n, fp.f_EC, inst.hzy)) / fp.n


def certified_min_f(
    inst: ProtocolInstance,
    s: FeasibleSet,
    alpha: float,
    settings: SolverSettings = SolverSettings(),
    rho0: np.ndarray | None = None,
    stop_value: float | None = None,
) -> MinimizationResult:
    """Step 1 + step 2 at one Renyi order; ``value`` is the certified bound (>= 0).

    With ``stop_value`` the Frank-Wolfe loop ends as soon as the objective
    drops to it; the certified bound is still computed at that iterate.
    """
    obj = PerturbedObjective.build(inst.gmap, inst.zmap, alpha, settings.eps_perturb)
    if s.anchor is None:
        initial_point(s)
    fw = frank_wolfe(obj, s, settings.fw, rho0, stop_value=stop_value)
    bound = step2_lower_bound(fw.rho, obj, s)
    eps_alt = min(settings.eps_perturb * settings.eps_sensitivity_factor, 0.5)
    f_alt = obj.with_epsilon(eps_alt).value(fw.rho)
    diag = {
        "fw_iters": fw.iterations,
        "fw_gap": fw.final_gap,
        "fw_converged": fw.converged,
        "fw_stop": fw.stop_reason,
        "f_fw": fw.values[-1],
        "bound_raw": bound.value,
        "certified": bound.certified,
        "dual_residual": bound.dual_feasibility_residual,
        "duality_gap": bound.duality_gap,
        "mu_ball": s.mu_ball,
        "eps_perturb": settings.eps_perturb,
        "eps_sensitivity": f_alt - bound.f_value,
    }
    # f is nonnegative, so clipping a slightly negative bound keeps it valid
    value = max(bound.value, 0.0)
    run_log = [dict(e, event="fw_iter", alpha=alpha) for e in fw.log]
    run_log.append({"event": "certificate", "alpha": alpha, "certified_bound": bound.value,
                    "dual_residual": bound.dual_feasibility_residual})
    return MinimizationResult(value, fw.rho, diag, run_log)


def optimize_alpha(
    inst: ProtocolInstance,
    fp: FiniteSizeParams,
    sp: SecurityParams,
    alpha_grid: Sequence[float],
    settings: SolverSettings = SolverSettings(),
    run_log: list | None = None,
) -> AlphaScan:
    """Full pipeline at each grid point; the best rate wins."""
    s = feasible_set_for(inst, fp, sp, settings)
    state = {"rho": None}

    def min_f_at(alpha: float):
        stop = zero_rate_threshold(inst, fp, sp, alpha) if settings.zero_rate_shortcut else None
        res = certified_min_f(inst, s, alpha, settings, state["rho"] if settings.warm_start else None, stop)
        state["rho"] = res.rho
        if run_log is not None:
            run_log.extend(res.log)
        return res.value, res.diagnostics

    scan = scan_alpha(min_f_at, fp, sp, alpha_grid, inst.hzy)
    if scan.all_zero:
        scan.best.diagnostics["all_zero"] = True
    return scan


def key_rate_at(
    inst: ProtocolInstance,
    fp: FiniteSizeParams,
    sp: SecurityParams,
    alpha: float,
    settings: SolverSettings = SolverSettings(),
    run_log: list | None = None,
) -> KeyRateReport:
    s = feasible_set_for(inst, fp, sp, settings)
    stop = zero_rate_threshold(inst, fp, sp, alpha) if settings.zero_rate_shortcut else None
    res = certified_min_f(inst, s, alpha, settings, stop_value=stop)
    if run_log is not None:
        run_log.extend(res.log)
    return key_length(res.value, fp, sp, alpha, inst.hzy, res.diagnostics)
