"""Protocol description: CP maps, the key-postprocessing map and the BB84 instance."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from functools import cached_property
from typing import Callable, Mapping, Sequence

import numpy as np

from .matfun import PinchingMap, check_hermitian, hermitian_part

__all__ = [
    "CPMap",
    "PinchingMap",
    "ProtocolInstance",
    "apply_cp_map",
    "adjoint_cp_map",
    "build_postprocessing_map",
    "bb84_pm_instance",
    "expected_frequency",
    "binary_entropy",
]

PSD_TOL = 1e-10


class DimensionError(ValueError):
    pass


def check_density(rho: np.ndarray, tol: float = PSD_TOL) -> np.ndarray:
    """Validate a (sub-normalized) density operator and return it as complex."""
    rho = check_hermitian(rho)
    w = np.linalg.eigvalsh(hermitian_part(rho))
    if w[0] < -tol:
        raise ValueError(f"state is not PSD: smallest eigenvalue {w[0]:.3e}")
    tr = float(np.trace(rho).real)
    if tr > 1 + tol or tr <= 0:
        raise ValueError(f"state trace {tr} outside (0, 1]")
    return rho


@dataclass(frozen=True, eq=False)
class CPMap:
    """Completely positive map ``X -> sum_k K_k X K_k^H``.

    ``depolarizing`` mixes the output with ``Tr(out) * I / d_out`` at that
    weight; it keeps the Kraus list short instead of expanding the d_out**2
    extra operators (see :meth:`explicit_kraus`).
    """

    kraus_ops: tuple[np.ndarray, ...]
    depolarizing: float = 0.0

    def __post_init__(self):
        ops = tuple(np.asarray(k, dtype=complex) for k in self.kraus_ops)
        if not ops:
            raise ValueError("a CP map needs at least one Kraus operator")
        shape = ops[0].shape
        if any(k.shape != shape or k.ndim != 2 for k in ops):
            raise DimensionError("Kraus operators must share one 2-d shape")
        if not 0.0 <= self.depolarizing <= 1.0:
            raise ValueError("depolarizing weight must lie in [0, 1]")
        object.__setattr__(self, "kraus_ops", ops)

    @property
    def in_dim(self) -> int:
        return self.kraus_ops[0].shape[1]

    @property
    def out_dim(self) -> int:
        return self.kraus_ops[0].shape[0]

    @cached_property
    def _stack(self) -> np.ndarray:
        return np.stack(self.kraus_ops)

    @cached_property
    def _kdk(self) -> np.ndarray:
        k = self._stack
        return np.einsum("kji,kjl->il", k.conj(), k)

    def apply(self, rho: np.ndarray) -> np.ndarray:
        rho = np.asarray(rho, dtype=complex)
        if rho.shape != (self.in_dim, self.in_dim):
            raise DimensionError(f"map expects input dim {self.in_dim}, got {rho.shape}")
        k = self._stack
        out = np.einsum("kij,jl,kml->im", k, rho, k.conj(), optimize=True)
        eps = self.depolarizing
        if eps:
            tr = np.trace(out)
            out = (1 - eps) * out + eps * tr * np.eye(self.out_dim) / self.out_dim
        return out

    def adjoint(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=complex)
        if x.shape != (self.out_dim, self.out_dim):
            raise DimensionError(f"adjoint expects dim {self.out_dim}, got {x.shape}")
        k = self._stack
        out = np.einsum("kji,jl,klm->im", k.conj(), x, k, optimize=True)
        eps = self.depolarizing
        if eps:
            out = (1 - eps) * out + eps * np.trace(x) / self.out_dim * self._kdk
        return out

    def __call__(self, rho: np.ndarray) -> np.ndarray:
        return self.apply(rho)

    def explicit_kraus(self) -> list[np.ndarray]:
        """Full Kraus list, including the operators of the depolarizing mix-in."""
        eps, d = self.depolarizing, self.out_dim
        ops = [np.sqrt(1 - eps) * k for k in self.kraus_ops] if eps < 1 else []
        if eps:
            eye = np.eye(d)
            for k in self.kraus_ops:
                for i in range(d):
                    for j in range(d):
                        ops.append(np.sqrt(eps / d) * np.outer(eye[i], eye[j]) @ k)
        return ops

    def is_trace_preserving(self, tol: float = 1e-10) -> bool:
        return bool(np.max(np.abs(self._kdk - np.eye(self.in_dim))) <= tol)

    def is_trace_nonincreasing(self, tol: float = 1e-10) -> bool:
        return bool(np.linalg.eigvalsh(hermitian_part(self._kdk))[-1] <= 1 + tol)

    def compose_after(self, first: "CPMap") -> "CPMap":
        """The map ``self o first`` (``first`` applied first); no depolarizing allowed."""
        if self.depolarizing or first.depolarizing:
            raise ValueError("composition is only defined for plain Kraus maps")
        return CPMap(tuple(b @ a for b in self.kraus_ops for a in first.kraus_ops))

    def tensor_identity(self, left: int = 1, right: int = 1) -> "CPMap":
        if self.depolarizing:
            raise ValueError("cannot extend a depolarized map")
        return CPMap(
            tuple(np.kron(np.kron(np.eye(left), k), np.eye(right)) for k in self.kraus_ops)
        )


def apply_cp_map(m: CPMap, rho: np.ndarray) -> np.ndarray:
    return m.apply(rho)


def adjoint_cp_map(m: CPMap, x: np.ndarray) -> np.ndarray:
    return m.adjoint(x)


def _psd_sqrt(m: np.ndarray) -> np.ndarray:
    w, v = np.linalg.eigh(hermitian_part(m))
    return (v * np.sqrt(np.clip(w, 0, None))) @ v.conj().T


def build_postprocessing_map(
    povm: Mapping[object, Mapping[object, np.ndarray]],
    key_map: Callable[[object, object], int],
    announce_probs: Mapping[object, float],
    *,
    key_dim: int,
    b_dim: int,
    b_filter: Mapping[object, np.ndarray] | None = None,
    tol: float = 1e-10,
) -> CPMap:
    """Kraus operators ``G_s = sum_x |g(x,s)>_R (x) sqrt(M_A^(x,s)) (x) F_s (x) sqrt(p_s)|s>_S``.

    ``povm[s][x]`` are Alice's POVM elements for announcement ``s``. ``F_s``
    defaults to the identity on B; it lets Bob's half of the announcement
    (e.g. "detected in basis Z") act as a projector. The probability ``p_s``
    enters with a square root so that ``Tr G(rho)`` is the acceptance
    probability. Output ordering is R (x) A (x) B (x) S, with one S level per
    announcement that carries nonzero probability.
    """
    kept = [s for s in povm if announce_probs.get(s, 0.0) > 0]
    if not kept:
        raise ValueError("no announcement with positive probability")
    total = sum(announce_probs[s] for s in kept)
    if any(p < 0 for p in announce_probs.values()) or total > 1 + tol:
        raise ValueError("announcement probabilities must form a sub-probability vector")
    a_dim = None
    for s in kept:
        elems = list(povm[s].values())
        a_dim = a_dim or elems[0].shape[0]
        acc = np.zeros((a_dim, a_dim), dtype=complex)
        for m in elems:
            m = check_hermitian(m, 1e-10)
            if np.linalg.eigvalsh(hermitian_part(m))[0] < -tol:
                raise ValueError(f"POVM element for announcement {s!r} is not PSD")
            acc = acc + m
        if np.linalg.eigvalsh(hermitian_part(acc))[-1] > 1 + tol:
            raise ValueError(f"POVM elements for announcement {s!r} sum beyond identity")
    n_s = len(kept)
    eye_r = np.eye(key_dim)
    eye_s = np.eye(n_s)
    ops = []
    for idx, s in enumerate(kept):
        f_s = np.eye(b_dim) if b_filter is None else np.asarray(b_filter[s], dtype=complex)
        g = np.zeros((key_dim * a_dim * b_dim * n_s, a_dim * b_dim), dtype=complex)
        for x, m in povm[s].items():
            r = eye_r[:, [key_map(x, s)]]
            g += np.kron(np.kron(np.kron(r, _psd_sqrt(m)), f_s), eye_s[:, [idx]])
        ops.append(np.sqrt(announce_probs[s]) * g)
    return CPMap(tuple(ops))


def expected_frequency(rho: np.ndarray, observables: Sequence[np.ndarray]) -> np.ndarray:
    obs = [np.asarray(o, dtype=complex) for o in observables]
    total = sum(obs)
    if np.max(np.abs(total - np.eye(total.shape[0]))) > 1e-10:
        raise ValueError("observables do not sum to the identity")
    rho = np.asarray(rho, dtype=complex)
    # Tr(rho G) = sum_ij rho_ij G_ji
    return np.array([np.real(np.sum(rho * o.T)) for o in obs])


def binary_entropy(p: float) -> float:
    if p <= 0 or p >= 1:
        return 0.0
    return float(-p * np.log2(p) - (1 - p) * np.log2(1 - p))


def _entropy(p: np.ndarray) -> float:
    p = p[p > 0]
    return float(-np.sum(p * np.log2(p)))


def hermitian_basis(n: int) -> list[np.ndarray]:
    """Orthonormal (Hilbert-Schmidt) basis of n x n Hermitian matrices."""
    basis = []
    for i in range(n):
        e = np.zeros((n, n), dtype=complex)
        e[i, i] = 1
        basis.append(e)
    for i in range(n):
        for j in range(i + 1, n):
            e = np.zeros((n, n), dtype=complex)
            e[i, j] = e[j, i] = 1 / np.sqrt(2)
            basis.append(e)
            e = np.zeros((n, n), dtype=complex)
            e[i, j], e[j, i] = -1j / np.sqrt(2), 1j / np.sqrt(2)
            basis.append(e)
    return basis


@dataclass(frozen=True, eq=False)
class ProtocolInstance:
    """Everything the optimizer needs for one protocol at one channel setting.

    ``hzy`` is the error-correction entropy per protocol round: rounds that
    are sifted out or not detected carry a public "discard" flag and so
    contribute nothing, which makes ``hzy = P(kept) * H(Z_A|Y_B, kept)``.
    """

    rho_ideal: np.ndarray
    gmap: CPMap
    zmap: PinchingMap
    equality_ops: tuple[np.ndarray, ...]
    equality_vals: np.ndarray
    pe_ops: tuple[np.ndarray, ...]
    target_freq: np.ndarray
    hzy: float
    dims: dict[str, int]
    support: np.ndarray | None = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        f = np.asarray(self.target_freq, dtype=float)
        if np.any(f < -1e-12) or abs(f.sum() - 1) > 1e-10:
            raise ValueError("ideal frequencies must form a probability vector")
        got = np.array([np.real(np.sum(self.rho_ideal * g.T)) for g in self.equality_ops])
        if np.max(np.abs(got - self.equality_vals), initial=0.0) > 1e-10:
            raise ValueError("equality values inconsistent with the ideal state")

    @property
    def sift_prob(self) -> float:
        return float(np.trace(self.gmap.apply(self.rho_ideal)).real)

    def to_dict(self) -> dict:
        def carr(a):
            a = np.asarray(a, dtype=complex)
            return {"shape": list(a.shape), "re": a.real.ravel().tolist(), "im": a.imag.ravel().tolist()}

        return {
            "dims": dict(self.dims),
            "rho_ideal": carr(self.rho_ideal),
            "kraus": [carr(k) for k in self.gmap.kraus_ops],
            "pinching": {"projectors": [carr(z) for z in self.zmap.projectors], "rest_dim": self.zmap.rest_dim},
            "equality_ops": [carr(g) for g in self.equality_ops],
            "equality_vals": np.asarray(self.equality_vals, dtype=float).tolist(),
            "pe_ops": [carr(g) for g in self.pe_ops],
            "target_freq": np.asarray(self.target_freq, dtype=float).tolist(),
            "hzy": self.hzy,
            "support": None if self.support is None else carr(self.support),
            "meta": self.meta,
        }

    def to_json(self, **kw) -> str:
        return json.dumps(self.to_dict(), **kw)

    @classmethod
    def from_dict(cls, d: dict) -> "ProtocolInstance":
        def arr(c):
            return (np.array(c["re"]) + 1j * np.array(c["im"])).reshape(c["shape"])

        return cls(
            rho_ideal=arr(d["rho_ideal"]),
            gmap=CPMap(tuple(arr(k) for k in d["kraus"])),
            zmap=PinchingMap(tuple(arr(z) for z in d["pinching"]["projectors"]), d["pinching"]["rest_dim"]),
            equality_ops=tuple(arr(g) for g in d["equality_ops"]),
            equality_vals=np.array(d["equality_vals"]),
            pe_ops=tuple(arr(g) for g in d["pe_ops"]),
            target_freq=np.array(d["target_freq"]),
            hzy=float(d["hzy"]),
            dims=dict(d["dims"]),
            support=None if d.get("support") is None else arr(d["support"]),
            meta=dict(d.get("meta", {})),
        )

    @classmethod
    def from_json(cls, text: str) -> "ProtocolInstance":
        return cls.from_dict(json.loads(text))


_KET = {
    0: np.array([1, 0], dtype=complex),
    1: np.array([0, 1], dtype=complex),
    2: np.array([1, 1], dtype=complex) / np.sqrt(2),
    3: np.array([1, -1], dtype=complex) / np.sqrt(2),
}
_BASIS_OF = {0: "Z", 1: "Z", 2: "X", 3: "X"}
_BIT_OF = {0: 0, 1: 1, 2: 0, 3: 1}


def loss_channel(loss: float) -> CPMap:
    """Qubit -> qubit (+) vacuum; the photon is lost with probability ``loss``."""
    k0 = np.zeros((3, 2), dtype=complex)
    k0[:2, :2] = np.sqrt(1 - loss) * np.eye(2)
    ops = [k0]
    if loss > 0:
        for j in range(2):
            k = np.zeros((3, 2), dtype=complex)
            k[2, j] = np.sqrt(loss)
            ops.append(k)
    return CPMap(tuple(ops))


def depolarizing_on_qubit(p: float) -> CPMap:
    """``rho -> (1-p) rho + p I/2`` on the qubit block of qubit (+) vacuum."""
    paulis = [
        np.eye(2),
        np.array([[0, 1], [1, 0]]),
        np.array([[0, -1j], [1j, 0]]),
        np.array([[1, 0], [0, -1]]),
    ]
    weights = [1 - 3 * p / 4, p / 4, p / 4, p / 4]
    ops = []
    for w, s in zip(weights, paulis):
        if w <= 0:
            continue
        k = np.zeros((3, 3), dtype=complex)
        k[:2, :2] = np.sqrt(w) * s
        ops.append(k)
    vac = np.zeros((3, 3), dtype=complex)
    vac[2, 2] = 1
    ops.append(vac)
    return CPMap(tuple(ops))

EC_ENTROPY_MODES = ("per_round", "conditional")


def bb84_pm_instance(
    p_depol: float,
    loss: float,
    *,
    p_alice_z: float = 0.5,
    p_bob_z: float = 0.5,
    ec_entropy: str = "per_round",
) -> ProtocolInstance:
    """Single-photon prepare-and-measure BB84 under loss then depolarizing noise.

    Registers: A (4 levels, Alice's signal label), B (qubit + vacuum),
    R (key bit) and S (announced matching basis, Z or X).

    ``ec_entropy`` selects how error correction is charged: ``"per_round"``
    weights ``H(Z_A|Y_B)`` of the sifted, detected distribution by the
    probability of keeping the round; ``"conditional"`` charges the
    unweighted conditional entropy on every key round (more pessimistic).
    """
    if ec_entropy not in EC_ENTROPY_MODES:
        raise ValueError(f"ec_entropy must be one of {EC_ENTROPY_MODES}, got {ec_entropy!r}")
    if not 0.0 <= p_depol <= 1.0:
        raise ValueError(f"depolarizing probability {p_depol} outside [0, 1]")
    if not 0.0 <= loss < 1.0:
        raise ValueError(f"loss {loss} outside [0, 1)")
    if not (0 < p_alice_z < 1 and 0 < p_bob_z < 1):
        raise ValueError("basis probabilities must lie in (0, 1)")

    px = np.array([p_alice_z / 2] * 2 + [(1 - p_alice_z) / 2] * 2)
    phi = sum(np.sqrt(px[x]) * np.kron(np.eye(4)[x], _KET[x]) for x in range(4))
    source = np.outer(phi, phi.conj())
    channel = depolarizing_on_qubit(p_depol).compose_after(loss_channel(loss))
    rho = channel.tensor_identity(left=4).apply(source)
    rho = hermitian_part(rho)

    proj_a = {x: np.outer(np.eye(4)[x], np.eye(4)[x]).astype(complex) for x in range(4)}
    det = np.diag([1.0, 1.0, 0.0]).astype(complex)
    q_bob = {"Z": p_bob_z, "X": 1 - p_bob_z}

    def bob_proj(ket):
        k = np.zeros(3, dtype=complex)
        k[:2] = ket
        return np.outer(k, k.conj())

    bob_povm = [q_bob["Z"] * bob_proj(_KET[0]), q_bob["Z"] * bob_proj(_KET[1]),
                q_bob["X"] * bob_proj(_KET[2]), q_bob["X"] * bob_proj(_KET[3])]
    bob_povm.append(np.diag([0.0, 0.0, 1.0]).astype(complex))
    bob_basis = ["Z", "Z", "X", "X", None]
    bob_bit = [0, 1, 0, 1, None]

    povm = {s: {x: proj_a[x] for x in range(4) if _BASIS_OF[x] == s} for s in ("Z", "X")}
    gmap = build_postprocessing_map(
        povm,
        key_map=lambda x, s: _BIT_OF[x],
        announce_probs=q_bob,
        key_dim=2,
        b_dim=3,
        b_filter={"Z": det, "X": det},
    )
    zmap = PinchingMap.computational(2, rest_dim=4 * 3 * 2)

    rho_a = rho.reshape(4, 3, 4, 3).trace(axis1=1, axis2=3)
    eq_ops = tuple(np.kron(e, np.eye(3)) for e in hermitian_basis(4))
    eq_vals = np.array([np.real(np.sum(rho * g.T)) for g in eq_ops])

    pe_ops = tuple(np.kron(proj_a[x], mb) for x in range(4) for mb in bob_povm)
    freq = expected_frequency(rho, pe_ops)
    joint = freq.reshape(4, 5)

    kept = 0.0
    h_cond = 0.0
    for s in ("Z", "X"):
        xs = [x for x in range(4) if _BASIS_OF[x] == s]
        ys = [y for y in range(5) if bob_basis[y] == s]
        tab = np.zeros((2, 2))
        for x in xs:
            for y in ys:
                tab[_BIT_OF[x], bob_bit[y]] += joint[x, y]
        kept += tab.sum()
        h_cond += _entropy(tab.ravel()) - _entropy(tab.sum(axis=0))

    w, v = np.linalg.eigh(hermitian_part(rho_a))
    support = np.kron(v[:, w > 1e-12 * w[-1]], np.eye(3))

    return ProtocolInstance(
        rho_ideal=rho,
        gmap=gmap,
        zmap=zmap,
        equality_ops=eq_ops,
        equality_vals=eq_vals,
        pe_ops=pe_ops,
        target_freq=np.clip(freq, 0, None) / np.clip(freq, 0, None).sum(),
        hzy=max(h_cond if ec_entropy == "per_round" else h_cond / kept, 0.0),
        dims={"R": 2, "A": 4, "B": 3, "S": 2},
        support=support,
        meta={
            "protocol": "bb84-pm",
            "p_depol": p_depol,
            "loss": loss,
            "p_alice_z": p_alice_z,
            "p_bob_z": p_bob_z,
            "kept_prob": kept,
            "ec_entropy": ec_entropy,
            "qber": _qber(joint, bob_basis, bob_bit),
        },
    )


def _qber(joint, bob_basis, bob_bit) -> float:
    err = tot = 0.0
    for x in range(4):
        for y in range(5):
            if bob_basis[y] == _BASIS_OF[x]:
                tot += joint[x, y]
                err += joint[x, y] * (bob_bit[y] != _BIT_OF[x])
    return err / tot if tot else 0.0
