"""Two-step minimization over the parameter-estimation feasible set.

Step 1 runs Frank-Wolfe with an exact (bisection) line search. Step 2
linearizes at the returned point and lower-bounds the linear program over
the feasible set by a dual-feasible point, so the reported number is a valid
lower bound even when step 1 stopped early.

SDPs go through cvxpy (Clarabel), which performs the complex-to-real
embedding of Hermitian variables itself. When the feasible set comes with a
support isometry ``V`` (every feasible state lives on ``range(V)``) the SDPs
are posed on the compressed variable ``V^H rho V``.
"""

from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass, field
from functools import cached_property
from typing import Callable, Protocol, Sequence

import cvxpy as cp
import numpy as np

from .matfun import hermitian_part

log = logging.getLogger(__name__)

SOLVER = "CLARABEL"
SOLVER_OPTS = {
    "tol_gap_abs": 1e-11,
    "tol_gap_rel": 1e-11,
    "tol_feas": 1e-11,
    "tol_ktratio": 1e-9,
    "max_iter": 400,
}


class InfeasibleSetError(RuntimeError):
    def __init__(self, message: str, violated: Sequence[str] = ()):
        super().__init__(message)
        self.violated = list(violated)


class SolverFailure(RuntimeError):
    def __init__(self, message: str, status: str | None = None):
        super().__init__(message)
        self.status = status


class Objective(Protocol):
    def value(self, rho: np.ndarray) -> float: ...

    def gradient(self, rho: np.ndarray) -> np.ndarray: ...


def _tr(a: np.ndarray, b: np.ndarray) -> float:
    """Real part of Tr(a b)."""
    return float(np.real(np.sum(a * b.T)))


def _real_coords(ops: Sequence[np.ndarray]) -> np.ndarray:
    """Rows c with ``Tr(G rho) = c . [vec Re rho, vec Im rho]`` for Hermitian G, rho."""
    if not ops:
        return np.zeros((0, 0))
    return np.stack([np.concatenate([o.real.ravel(), o.imag.ravel()]) for o in ops])


@dataclass(eq=False)
class FeasibleSet:
    """Density matrices matching Alice's marginal and the observed statistics.

    Equalities ``Tr(G_i rho) = g_i`` hold exactly; the joint statistics
    ``Tr(rho T_j)`` lie within l1 distance ``mu_ball`` of some ``F`` with
    ``|F - target_freq|_1 <= t_ball``. Both vectors are probability vectors,
    so that is the same as one l1 ball of radius ``mu_ball + t_ball``.
    Unit trace is always imposed.
    """

    equality_ops: Sequence[np.ndarray]
    equality_vals: np.ndarray
    pe_ops: Sequence[np.ndarray]
    target_freq: np.ndarray
    mu_ball: float = 0.0
    t_ball: float = 0.0
    dim: int | None = None
    support: np.ndarray | None = None
    reference: np.ndarray | None = None
    anchor: np.ndarray | None = field(default=None, repr=False)

    def __post_init__(self):
        ops = [np.asarray(g, dtype=complex) for g in self.equality_ops]
        vals = [float(v) for v in np.asarray(self.equality_vals, dtype=float)]
        pe = [np.asarray(g, dtype=complex) for g in self.pe_ops]
        if self.dim is None:
            src = ops or pe or ([self.reference] if self.reference is not None else [])
            if not src:
                raise ValueError("cannot infer dimension of an unconstrained set")
            self.dim = src[0].shape[0]
        d = self.dim
        eye = np.eye(d, dtype=complex)
        coords = _real_coords(ops)
        if ops:
            sol, *_ = np.linalg.lstsq(coords.T, _real_coords([eye])[0], rcond=None)
            spans_identity = np.allclose(coords.T @ sol, _real_coords([eye])[0], atol=1e-10)
        else:
            spans_identity = False
        if not spans_identity:
            ops.append(eye)
            vals.append(1.0)
        self.equality_ops = ops
        self.equality_vals = np.array(vals)
        self.pe_ops = pe
        self.target_freq = np.asarray(self.target_freq, dtype=float).reshape(-1)
        if len(self.pe_ops) != self.target_freq.size:
            raise ValueError("one target frequency per parameter-estimation observable")
        if self.mu_ball < 0 or self.t_ball < 0:
            raise ValueError("ball radii must be nonnegative")
        if self.support is None:
            self.support = eye
        if self.reference is not None:
            res = self.residuals(self.reference)
            if not self.contains(self.reference, 1e-8):
                raise InfeasibleSetError(
                    f"reference state violates the constraints: {res}",
                    [k for k, v in res.items() if v > 1e-8],
                )

    @classmethod
    def from_instance(cls, inst, mu_ball: float = 0.0, t_ball: float = 0.0) -> "FeasibleSet":
        return cls(
            equality_ops=inst.equality_ops,
            equality_vals=inst.equality_vals,
            pe_ops=inst.pe_ops,
            target_freq=inst.target_freq,
            mu_ball=mu_ball,
            t_ball=t_ball,
            dim=inst.rho_ideal.shape[0],
            support=inst.support,
            reference=inst.rho_ideal,
        )

    @property
    def radius(self) -> float:
        return self.mu_ball + self.t_ball

    def frequencies(self, rho: np.ndarray) -> np.ndarray:
        return np.array([_tr(rho, g) for g in self.pe_ops])

    def residuals(self, rho: np.ndarray) -> dict[str, float]:
        """Constraint violations (0 when satisfied) of a candidate state."""
        rho = np.asarray(rho, dtype=complex)
        eq = max((abs(_tr(rho, g) - v) for g, v in zip(self.equality_ops, self.equality_vals)), default=0.0)
        pe = 0.0
        if self.pe_ops:
            pe = max(0.0, float(np.abs(self.frequencies(rho) - self.target_freq).sum()) - self.radius)
        psd = max(0.0, -float(np.linalg.eigvalsh(hermitian_part(rho))[0]))
        herm = float(np.max(np.abs(rho - rho.conj().T)))
        return {"equality": eq, "pe": pe, "psd": psd, "hermitian": herm}

    def contains(self, rho: np.ndarray, tol: float = 1e-8) -> bool:
        r = self.residuals(rho)
        return r["equality"] <= tol and r["pe"] <= tol and r["psd"] <= tol and r["hermitian"] <= tol

    @cached_property
    def oracle(self) -> "_SDPOracle":
        return _SDPOracle(self)


class _SDPOracle:
    """Cached, parametrized cvxpy problems for one feasible set."""

    def __init__(self, s: FeasibleSet):
        self.s = s
        v = np.asarray(s.support, dtype=complex)
        self.v = v
        k = self.k = v.shape[1]
        self.eq_c = [hermitian_part(v.conj().T @ g @ v) for g in s.equality_ops]
        self.pe_c = [hermitian_part(v.conj().T @ g @ v) for g in s.pe_ops]

        # drop redundant equalities after compression: rows of an orthonormal basis
        c = _real_coords(self.eq_c)
        u, sv, wt = np.linalg.svd(c, full_matrices=False)
        rank = int(np.sum(sv > 1e-10 * sv[0]))
        self.eq_rows = wt[:rank]
        self.eq_rhs = (u[:, :rank].T @ s.equality_vals) / sv[:rank]
        # y in the reduced basis maps back through this matrix
        self.eq_back = u[:, :rank] / sv[:rank]
        consistent = c @ (self.eq_rows.T @ self.eq_rhs)
        if np.max(np.abs(consistent - s.equality_vals), initial=0.0) > 1e-8:
            raise InfeasibleSetError("equality constraints are inconsistent on the support", ["equality"])
        self.eq_ops_reduced = [
            (r[: k * k].reshape(k, k) + 1j * r[k * k :].reshape(k, k)) for r in self.eq_rows
        ]
        self.pe_rows = _real_coords(self.pe_c)

    # -- helpers -----------------------------------------------------------
    def compress(self, x: np.ndarray) -> np.ndarray:
        return hermitian_part(self.v.conj().T @ x @ self.v)

    def expand(self, xc: np.ndarray) -> np.ndarray:
        return hermitian_part(self.v @ xc @ self.v.conj().T)

    def _vec(self, sig):
        return cp.hstack([cp.vec(cp.real(sig), order="C"), cp.vec(cp.imag(sig), order="C")])

    def _constraints(self, sig) -> list:
        cons = [sig >> 0]
        vec = self._vec(sig)
        cons.append(self.eq_rows @ vec == self.eq_rhs)
        if len(self.pe_c):
            cons.append(cp.norm1(self.pe_rows @ vec - self.s.target_freq) <= self.s.radius)
        return cons

    def _solve(self, prob: cp.Problem, what: str):
        try:
            with warnings.catch_warnings():
                warnings.simplefilter("ignore", UserWarning)
                prob.solve(solver=SOLVER, **SOLVER_OPTS)
        except cp.SolverError as exc:
            raise SolverFailure(f"{what}: solver error {exc}", "solver_error") from exc
        if prob.status in (cp.INFEASIBLE, cp.INFEASIBLE_INACCURATE):
            raise InfeasibleSetError(f"{what}: feasible set is empty", self._diagnose())
        if prob.status not in (cp.OPTIMAL, cp.OPTIMAL_INACCURATE):
            raise SolverFailure(f"{what}: solver status {prob.status}", prob.status)
        if prob.status == cp.OPTIMAL_INACCURATE:
            log.debug("%s: solver returned %s", what, prob.status)
        return prob.status

    def _diagnose(self) -> list[str]:
        """Which constraint groups are infeasible on their own."""
        k = self.k
        sig = cp.Variable((k, k), hermitian=True)
        vec = self._vec(sig)
        bad = []
        groups = {"equality": [self.eq_rows @ vec == self.eq_rhs]}
        if len(self.pe_c):
            groups["pe"] = [
                cp.norm1(self.pe_rows @ vec - self.s.target_freq) <= self.s.radius,
                cp.real(cp.trace(sig)) == 1,
            ]
        for name, cons in groups.items():
            p = cp.Problem(cp.Minimize(0), [sig >> 0, *cons])
            try:
                p.solve(solver=SOLVER)
            except cp.SolverError:
                bad.append(name)
                continue
            if p.status not in (cp.OPTIMAL, cp.OPTIMAL_INACCURATE):
                bad.append(name)
        return bad or ["joint"]

    # -- problems ----------------------------------------------------------
    @cached_property
    def _primal(self):
        k = self.k
        sig = cp.Variable((k, k), hermitian=True)
        gr = cp.Parameter((k, k), symmetric=True)
        gi = cp.Parameter((k, k))
        obj = cp.sum(cp.multiply(gr, cp.real(sig))) + cp.sum(cp.multiply(gi, cp.imag(sig)))
        prob = cp.Problem(cp.Minimize(obj), self._constraints(sig))
        return prob, sig, gr, gi

    @cached_property
    def _dual(self):
        k = self.k
        y = cp.Variable(len(self.eq_ops_reduced))
        z = cp.Variable(len(self.pe_c)) if self.pe_c else None
        a = cp.Variable(nonneg=True)
        gmat = cp.Parameter((k, k), hermitian=True)
        slack = cp.Variable((k, k), hermitian=True)
        stack_eq = np.stack([g.ravel() for g in self.eq_ops_reduced], axis=1)
        combo = stack_eq @ y
        objective = self.eq_rhs @ y - a * self.s.radius
        cons = [slack >> 0]
        if self.pe_c:
            stack_pe = np.stack([g.ravel() for g in self.pe_c], axis=1)
            combo = combo + stack_pe @ z
            objective = objective + self.s.target_freq @ z
            cons += [z <= a, -z <= a]
        cons.append(cp.vec(slack, order="C") == cp.vec(gmat, order="C") - combo)
        prob = cp.Problem(cp.Maximize(objective), cons)
        return prob, y, z, a, gmat

    @cached_property
    def _nearest(self):
        k = self.k
        sig = cp.Variable((k, k), hermitian=True)
        target = np.eye(k) / self.s.dim
        prob = cp.Problem(cp.Minimize(cp.norm(sig - target, "fro")), self._constraints(sig))
        return prob, sig

    def clean(self, sig_c: np.ndarray) -> np.ndarray:
        """Snap a solver output back onto the equalities and into the PSD cone."""
        k = self.k
        sig_c = hermitian_part(sig_c)
        for _ in range(6):
            vec = np.concatenate([sig_c.real.ravel(), sig_c.imag.ravel()])
            vec = vec - self.eq_rows.T @ (self.eq_rows @ vec - self.eq_rhs)
            sig_c = hermitian_part(vec[: k * k].reshape(k, k) + 1j * vec[k * k :].reshape(k, k))
            w, u = np.linalg.eigh(sig_c)
            if w[0] >= 0:
                return sig_c
            sig_c = (u * np.clip(w, 0, None)) @ u.conj().T
        # last resort: an (almost) negligible mix with the interior anchor
        vec = np.concatenate([sig_c.real.ravel(), sig_c.imag.ravel()])
        vec = vec - self.eq_rows.T @ (self.eq_rows @ vec - self.eq_rhs)
        sig_c = hermitian_part(vec[: k * k].reshape(k, k) + 1j * vec[k * k :].reshape(k, k))
        w_min = np.linalg.eigvalsh(sig_c)[0]
        if w_min < 0 and self.s.anchor is not None:
            anchor = self.compress(self.s.anchor)
            a_min = np.linalg.eigvalsh(anchor)[0]
            if a_min > 0:
                kappa = -w_min / (a_min - w_min)
                if kappa < 1e-6:
                    sig_c = (1 - kappa) * sig_c + kappa * anchor
        return sig_c

    def minimize_linear(self, grad: np.ndarray) -> tuple[np.ndarray, float, str]:
        prob, sig, gr, gi = self._primal
        gc = self.compress(grad)
        gr.value = gc.real
        gi.value = gc.imag
        status = self._solve(prob, "linear subproblem")
        return self.expand(self.clean(sig.value)), float(prob.value), status

    def maximize_dual(self, grad: np.ndarray):
        prob, y, z, a, gmat = self._dual
        gc = self.compress(grad)
        gmat.value = gc
        status = self._solve(prob, "dual subproblem")
        return (
            np.asarray(y.value, dtype=float),
            np.zeros(0) if z is None else np.asarray(z.value, dtype=float),
            float(a.value),
            float(prob.value),
            status,
        )

    def nearest_to_identity(self) -> np.ndarray:
        prob, sig = self._nearest
        self._solve(prob, "initial point")
        return self.expand(self.clean(sig.value))


@dataclass(frozen=True)
class FWConfig:
    gap_tol: float = 1e-6
    max_iters: int = 300
    linesearch_tol: float = 1e-9
    linesearch_max_iter: int = 40

    def __post_init__(self):
        if self.gap_tol <= 0:
            raise ValueError("gap_tol must be positive")
        if self.max_iters < 1:
            raise ValueError("max_iters must be at least 1")


@dataclass
class FWResult:
    rho: np.ndarray
    converged: bool
    iterations: int
    gaps: list[float]
    values: list[float]
    steps: list[float]
    log: list[dict]
    stop_reason: str = "max_iters"

    @property
    def final_gap(self) -> float:
        return self.gaps[-1] if self.gaps else float("nan")


@dataclass(frozen=True)
class CertifiedBound:
    value: float
    dual_variables: tuple[np.ndarray, np.ndarray, float]
    dual_feasibility_residual: float
    f_value: float
    linearization: float
    dual_value: float
    primal_value: float | None = None
    certified: bool = True
    solver_status: str = ""

    @property
    def duality_gap(self) -> float | None:
        if self.primal_value is None:
            return None
        return self.primal_value - self.dual_value


def initial_point(s: FeasibleSet) -> np.ndarray:
    """Feasible state closest (Frobenius) to the maximally mixed state.

    Also becomes the set's anchor used to repair tiny PSD violations of
    later solver outputs.
    """
    rho0 = s.oracle.nearest_to_identity()
    s.anchor = rho0
    return rho0


def fw_direction(rho: np.ndarray, grad: np.ndarray, s: FeasibleSet) -> tuple[np.ndarray, str]:
    """Frank-Wolfe step ``delta = argmin_{sigma in S} Tr[sigma grad] - rho``."""
    if not np.any(grad):
        return np.zeros_like(rho), "trivial"
    vertex, _, status = s.oracle.minimize_linear(grad)
    delta = vertex - rho
    if _tr(delta, grad) > 0:
        # solver noise near a stationary point; rho itself is feasible
        return np.zeros_like(rho), status
    return delta, status


def line_search(
    rho: np.ndarray,
    delta: np.ndarray,
    obj: Objective,
    tol: float = 1e-9,
    max_iter: int = 40,
) -> float:
    """Minimize the convex ``lam -> f(rho + lam delta)`` on (0, 1] by derivative bisection."""

    def slope(lam: float) -> float:
        return _tr(delta, obj.gradient(rho + lam * delta))

    if slope(1.0) <= 0:
        return 1.0
    lo, hi = 0.0, 1.0
    for _ in range(max_iter):
        if hi - lo <= tol:
            break
        mid = 0.5 * (lo + hi)
        if slope(mid) > 0:
            hi = mid
        else:
            lo = mid
    return 0.5 * (lo + hi)


def frank_wolfe(
    obj: Objective,
    s: FeasibleSet,
    cfg: FWConfig = FWConfig(),
    rho0: np.ndarray | None = None,
    callback: Callable[[int, np.ndarray, float], None] | None = None,
    stop_value: float | None = None,
) -> FWResult:
    """Conditional-gradient descent with exact line search over ``s``.

    Stops when the Frank-Wolfe gap drops below ``cfg.gap_tol``, or once
    ``f <= stop_value`` (callers use this when any value below the
    threshold already decides the outcome). ``callback(k, rho_k, f_k)`` sees
    the starting point (``k = 0``) and every accepted iterate.
    """
    if s.anchor is None:
        initial_point(s)
    rho = s.anchor if rho0 is None else np.asarray(rho0, dtype=complex)
    if not s.contains(rho):
        raise InfeasibleSetError("starting point is not feasible", list(s.residuals(rho)))
    f = obj.value(rho)
    if callback is not None:
        callback(0, rho, f)
    gaps, values, steps, entries = [], [f], [], []
    converged = False
    reason = "max_iters"
    it = 0
    for it in range(1, cfg.max_iters + 1):
        if stop_value is not None and f <= stop_value:
            reason = "below_stop_value"
            it -= 1
            break
        grad = obj.gradient(rho)
        delta, status = fw_direction(rho, grad, s)
        gap = -_tr(delta, grad)
        gaps.append(gap)
        entry = {"iter": it, "f": f, "gap": gap, "solver": status}
        if abs(gap) < cfg.gap_tol:
            converged = True
            reason = "gap"
            entry["step"] = 0.0
            entries.append(entry)
            break
        lam = line_search(rho, delta, obj, cfg.linesearch_tol, cfg.linesearch_max_iter)
        f_new = obj.value(rho + lam * delta)
        while f_new > f and lam > 1e-12:
            lam *= 0.5
            f_new = obj.value(rho + lam * delta)
        if f_new > f:
            reason = "no_descent"
            entry["step"] = 0.0
            entries.append(entry)
            log.info("no descent along the Frank-Wolfe direction at iteration %d", it)
            break
        rho = rho + lam * delta
        f = f_new
        values.append(f)
        steps.append(lam)
        entry["step"] = lam
        entries.append(entry)
        if callback is not None:
            callback(it, rho, f)
    return FWResult(rho, converged, it, gaps, values, steps, entries, reason)


def step2_lower_bound(
    rho_hat: np.ndarray,
    obj: Objective,
    s: FeasibleSet,
    *,
    solve_primal: bool = True,
) -> CertifiedBound:
    """Certified lower bound on ``min_S f`` by linearizing at ``rho_hat``.

    The dual point is made rigorously feasible: ``a`` is reset to
    ``max|z|`` and any negative eigenvalue of the dual slack is charged
    against the objective (feasible states have unit trace).
    """
    f = obj.value(rho_hat)
    grad = obj.gradient(rho_hat)
    lin = _tr(rho_hat, grad)
    oracle = s.oracle
    primal_value = None
    if solve_primal:
        try:
            _, primal_value, _ = oracle.minimize_linear(grad)
        except SolverFailure:
            primal_value = None
    try:
        y_red, z, a, dual_value, status = oracle.maximize_dual(grad)
    except SolverFailure as exc:
        est = f - lin + primal_value if primal_value is not None else float("nan")
        return CertifiedBound(est, (np.zeros(0), np.zeros(0), 0.0), float("inf"), f, lin,
                              float("nan"), primal_value, certified=False, solver_status=str(exc.status))
    gc = oracle.compress(grad)
    slack = gc - sum(yi * g for yi, g in zip(y_red, oracle.eq_ops_reduced))
    slack = slack - sum((zj * g for zj, g in zip(z, oracle.pe_c)), np.zeros_like(gc))
    lam_min = float(np.linalg.eigvalsh(hermitian_part(slack))[0])
    a_eff = float(np.max(np.abs(z))) if z.size else 0.0
    certified_dual = float(oracle.eq_rhs @ y_red)
    if z.size:
        certified_dual += float(s.target_freq @ z) - a_eff * s.radius
    certified_dual += min(lam_min, 0.0)
    y_full = oracle.eq_back @ y_red
    return CertifiedBound(
        value=f - lin + certified_dual,
        dual_variables=(y_full, z, a_eff),
        dual_feasibility_residual=max(0.0, -lam_min),
        f_value=f,
        linearization=lin,
        dual_value=certified_dual,
        primal_value=primal_value,
        certified=True,
        solver_status=status,
    )
