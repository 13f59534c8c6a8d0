import numpy as np
import pytest

from renyi_qkd.matfun import NotPositiveError, PinchingMap, eig_hermitian, matrix_power
from renyi_qkd.objective import (
    PerturbedObjective,
    RenyiParams,
    SupportError,
    finite_diff_gradient,
    objective_f,
    perturb_map,
    q_beta,
    renyi_divergence,
)
from renyi_qkd.protocol import CPMap, bb84_pm_instance

from conftest import random_channel, random_density, random_pinching
from test_matfun import quadrature_frechet


def classical_renyi(p, q, beta):
    return np.log2(np.sum(p**beta * q ** (1 - beta)) / np.sum(p)) / (beta - 1)


def bb84_feasible_points(inst, rng, n, w_max=0.3):
    """Mixtures of the ideal state with rho_A (x) random B: equality constraints hold."""
    rho_a = inst.rho_ideal.reshape(4, 3, 4, 3).trace(axis1=1, axis2=3)
    out = []
    for _ in range(n):
        w = rng.uniform(0.01, w_max)
        out.append((1 - w) * inst.rho_ideal + w * np.kron(rho_a, random_density(3, rng)))
    return out


def test_renyi_params():
    p = RenyiParams(1.25)
    assert p.beta * p.alpha == pytest.approx(1.0)
    assert 1 / p.alpha + 1 / p.gamma == pytest.approx(2.0)
    assert 0 < p.mu <= 0.5
    assert p.L == pytest.approx(np.sin(np.pi * p.mu) / np.pi)
    assert RenyiParams(2.0).mu == pytest.approx(0.5)
    assert RenyiParams.from_beta(0.8).alpha == pytest.approx(1.25)
    for bad in (1.0, 0.9, 2.5):
        with pytest.raises(ValueError):
            RenyiParams(bad)


def test_divergence_examples(rng):
    rho = random_density(4, rng)
    assert abs(renyi_divergence(rho, rho, 0.75)) <= 1e-10
    ket0 = np.diag([1.0, 0.0])
    assert renyi_divergence(ket0, np.eye(2) / 2, 0.75) == pytest.approx(1.0, abs=1e-14)
    p, q = np.array([0.5, 0.5]), np.array([0.25, 0.75])
    for beta in (0.55, 0.75, 0.95):
        got = renyi_divergence(np.diag(p), np.diag(q), beta)
        assert got == pytest.approx(classical_renyi(p, q, beta), abs=1e-12)


def test_q_beta(rng):
    rho = random_density(5, rng)
    assert q_beta(rho, rho, 0.7) == pytest.approx(1.0, abs=1e-12)
    p, q = rng.dirichlet(np.ones(5)), rng.dirichlet(np.ones(5))
    assert q_beta(np.diag(p), np.diag(q), 0.6) == pytest.approx(np.sum(p**0.6 * q**0.4), abs=1e-12)
    sigma = random_density(5, rng)
    sub = 0.7 * rho
    d = renyi_divergence(sub, sigma, 0.6)
    assert 2 ** ((0.6 - 1) * d) * 0.7 == pytest.approx(q_beta(sub, sigma, 0.6), rel=1e-10)


def test_support_violation_rejected():
    with pytest.raises(SupportError):
        renyi_divergence(np.eye(2) / 2, np.diag([1.0, 0.0]), 0.75)
    # rho inside the support of a singular sigma is fine
    assert renyi_divergence(np.diag([1.0, 0.0]), np.diag([0.5, 0.0]), 0.75) == pytest.approx(1.0)


def test_divergence_self_is_zero(rng):
    for _ in range(100):
        d = rng.integers(2, 9)
        rho = random_density(d, rng, rank=rng.integers(1, d + 1))
        assert abs(renyi_divergence(rho, rho, rng.uniform(0.5, 0.99))) <= 1e-10


def test_classical_pairs(rng):
    for _ in range(100):
        d = rng.integers(2, 9)
        p, q = rng.dirichlet(np.ones(d)), rng.dirichlet(np.ones(d))
        beta = rng.uniform(0.5, 0.99)
        got = renyi_divergence(np.diag(p), np.diag(q), beta)
        assert got == pytest.approx(classical_renyi(p, q, beta), abs=1e-10)


def test_monotone_in_beta(rng):
    betas = np.linspace(0.55, 0.95, 9)
    for _ in range(100):
        d = rng.integers(2, 7)
        rho, sigma = random_density(d, rng), random_density(d, rng)
        vals = [renyi_divergence(rho, sigma, b) for b in betas]
        assert np.all(np.diff(vals) >= -1e-12)


def test_pinching_data_processing(rng):
    for _ in range(100):
        r, rest = rng.integers(2, 4), rng.integers(1, 3)
        z = random_pinching(r, rest, rng)
        rho, sigma = random_density(r * rest, rng), random_density(r * rest, rng)
        beta = rng.uniform(0.5, 0.99)
        assert renyi_divergence(z(rho), z(sigma), beta) <= renyi_divergence(rho, sigma, beta) + 1e-12


def test_dual_order_dominates(rng):
    inst = bb84_pm_instance(0.02, 0.1)
    for rho in bb84_feasible_points(inst, rng, 30, w_max=0.9):
        alpha = rng.uniform(1.001, 2.0)
        p = RenyiParams(alpha)
        x = CPMap(inst.gmap.kraus_ops, 1e-8).apply(rho)
        zx = inst.zmap(x)
        assert renyi_divergence(x, zx, p.gamma) >= renyi_divergence(x, zx, p.beta) - 1e-12
    for _ in range(70):
        g = random_channel(4, 6, rng)
        z = PinchingMap.computational(2, 3)
        x = g.apply(random_density(4, rng))
        p = RenyiParams(rng.uniform(1.001, 2.0))
        assert renyi_divergence(x, z(x), p.gamma) >= renyi_divergence(x, z(x), p.beta) - 1e-12


def test_perturb_map(rng):
    g = random_channel(3, 4, rng, trace_scale=0.6)
    rho = random_density(3, rng)
    out = g.apply(rho)
    tr = np.trace(out).real
    eps = 1e-7
    diff = np.abs(perturb_map(g, eps).apply(rho) - out).max()
    assert diff <= eps * (1 + 1 / 4)
    np.testing.assert_allclose(perturb_map(g, 1.0).apply(rho), tr * np.eye(4) / 4, atol=1e-14)
    for _ in range(10):
        rho = random_density(3, rng, rank=1)
        out = perturb_map(g, 1e-3).apply(rho)
        assert np.linalg.eigvalsh(out)[0] >= 1e-3 * np.trace(g.apply(rho)).real / 4 - 1e-15
    with pytest.raises(ValueError):
        perturb_map(g, 0.0)
    with pytest.raises(ValueError):
        perturb_map(perturb_map(g, 0.1), 0.1)


def test_objective_composition(rng):
    g = random_channel(4, 6, rng, trace_scale=0.7)
    z = PinchingMap.computational(2, 3)
    obj = PerturbedObjective.build(g, z, 1.3, 1e-6)
    rho = random_density(4, rng)
    x = obj.gmap.apply(rho)
    tr = np.trace(x).real
    assert obj.value(rho) == pytest.approx(tr * renyi_divergence(x, z(x), 1 / 1.3), abs=1e-12)


def test_objective_zero_on_pinched_output(rng):
    z = PinchingMap.computational(2, 2)
    # measure-and-prepare map whose outputs are already diagonal
    ks = tuple(0.5 * np.outer(np.eye(4)[i], np.eye(2)[j]) for i in range(4) for j in range(2))
    obj = PerturbedObjective.build(CPMap(ks), z, 1.5)
    assert abs(obj.value(random_density(2, rng))) <= 1e-12


def test_objective_noiseless_bb84():
    inst = bb84_pm_instance(0.0, 0.0)
    vals = [PerturbedObjective.build(inst.gmap, inst.zmap, 1.5, e).value(inst.rho_ideal) for e in (1e-6, 1e-8)]
    target = inst.sift_prob * 1.0
    # the perturbation shifts the value down; the shift vanishes with epsilon
    assert target - vals[0] > target - vals[1] > 0
    assert vals[1] == pytest.approx(target, abs=1e-5)


def test_gradient_hermitian_and_unperturbed_failure(bb84, rng):
    obj = PerturbedObjective.build(bb84.gmap, bb84.zmap, 1.2)
    grad = obj.gradient(bb84_feasible_points(bb84, rng, 1)[0])
    assert np.abs(grad - grad.conj().T).max() <= 1e-12 * np.abs(grad).max()
    bare = PerturbedObjective(bb84.gmap, bb84.zmap, RenyiParams(1.2))
    with pytest.raises(NotPositiveError):
        bare.gradient(bb84.rho_ideal)


@pytest.mark.parametrize("beta", [0.55, 0.75, 0.95])
@pytest.mark.parametrize("d", [4, 8, 16])
def test_gradient_finite_difference(d, beta, rng):
    g = random_channel(d, d, rng, trace_scale=0.8)
    obj = PerturbedObjective.build(g, PinchingMap.computational(2, d // 2), 1 / beta)
    for _ in range(3):
        rho, tau = random_density(d, rng), random_density(d, rng)
        an = np.trace((tau - rho) @ obj.gradient(rho)).real
        fd = finite_diff_gradient(rho, tau, obj)
        assert abs(an - fd) <= 1e-6 * abs(an)


@pytest.mark.parametrize("beta", [0.55, 0.75, 0.95])
def test_gradient_finite_difference_bb84(beta, bb84, rng):
    obj = PerturbedObjective.build(bb84.gmap, bb84.zmap, 1 / beta)
    pts = bb84_feasible_points(bb84, rng, 6)
    for rho, tau in zip(pts[::2], pts[1::2]):
        an = np.trace((tau - rho) @ obj.gradient(rho)).real
        fd = finite_diff_gradient(rho, tau, obj)
        assert abs(an - fd) <= 1e-6 * abs(an)


def test_gradient_chi_terms_by_quadrature(rng):
    """Rebuild the gradient with the Frechet integrals done by quadrature."""
    d, beta = 4, 0.7
    g = random_channel(d, d, rng, trace_scale=0.9)
    z = PinchingMap.computational(2, 2)
    obj = PerturbedObjective.build(g, z, 1 / beta, 1e-3)
    p = obj.params
    rho = random_density(d, rng)
    x = obj.gmap.apply(rho)
    tr = np.trace(x).real
    sigma = z(x)
    s_mu = matrix_power(sigma, p.mu)
    xi = s_mu @ x @ s_mu
    xi_pow = matrix_power(xi, beta - 1)
    q = np.trace(matrix_power(xi, beta)).real
    c = beta * p.L
    chi1 = z(c * quadrature_frechet(x @ s_mu @ xi_pow, sigma, p.mu))
    chi2 = beta * s_mu @ xi_pow @ s_mu
    chi3 = z(c * quadrature_frechet(xi_pow @ s_mu @ x, sigma, p.mu))
    div = np.log2(q / tr) / (beta - 1)
    inner = (chi1 + chi2 + chi3) / q - np.eye(d) / tr
    ref = obj.gmap.adjoint(np.eye(d)) * div + tr * obj.gmap.adjoint(inner) / ((beta - 1) * np.log(2))
    got = obj.gradient(rho)
    assert np.linalg.norm(got - ref) <= 1e-8 * np.linalg.norm(ref)


def test_convex_along_feasible_segments(bb84, rng):
    obj = PerturbedObjective.build(bb84.gmap, bb84.zmap, 1.1)
    pts = bb84_feasible_points(bb84, rng, 20, w_max=0.9)
    for r0, r1 in zip(pts[::2], pts[1::2]):
        f0, f1 = obj.value(r0), obj.value(r1)
        for lam in (0.25, 0.5, 0.75):
            assert obj.value(lam * r1 + (1 - lam) * r0) <= lam * f1 + (1 - lam) * f0 + 1e-9


def test_finite_diff_oracle(rng):
    a = rng.normal(size=(3, 3))
    a = a + a.T
    rho, tau = random_density(3, rng), random_density(3, rng)
    assert finite_diff_gradient(rho, tau, lambda r: 2.5) == 0.0
    quad = lambda r: np.trace(r @ a @ r).real
    exact = 2 * np.trace((tau - rho) @ a @ rho).real
    assert finite_diff_gradient(rho, tau, quad) == pytest.approx(exact, abs=1e-9)


def test_with_epsilon_sensitivity(bb84, rng):
    obj = PerturbedObjective.build(bb84.gmap, bb84.zmap, 1.1)
    rho = bb84_feasible_points(bb84, rng, 1)[0]
    assert obj.with_epsilon(1e-8).value(rho) == obj.value(rho)
    assert abs(obj.with_epsilon(1e-7).value(rho) - obj.value(rho)) < 1e-4
    assert objective_f(rho, obj) == obj.value(rho)
    assert eig_hermitian(obj.zmap(obj.gmap.apply(rho))).eigenvalues[0] > 0
