"""Lyapunov bases from stable Koopman eigenfunctions.

Each basis element is V_i = |psi_i|^2 / 2, which decays like 2 Re(lambda_i)
V_i under exact eigenfunctions. Learned eigenfunctions obey
V_i_dot = Re(lambda_i) V_i + eps_i(x) instead; the error model bounds
|eps_i| <= kappa_i V_i^2 + omega_i and feeds the sufficient invariance
condition checked by `theorem1_check`.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np

from .dictionary import MonomialDictionary, monomials_from_exponents
from .koopman import EigenPair, Spectrum
from .systems import VectorField, eval_field

#: log-spaced curvature grid for the (kappa, omega) envelope fit
KAPPA_GRID = np.logspace(-4.0, 4.0, 81)


@dataclass(frozen=True, eq=False)
class BasisEntry:
    """One Lyapunov basis element, possibly a pairwise eigenfunction product.

    `scale` divides the eigenfunction before squaring: eigenfunctions are
    only defined up to scalar multiples, and normalizing their magnitude on
    the fitting data keeps all V_i (and the level gamma) on the unit scale
    the refinement box assumes.
    """

    pairs: tuple[EigenPair, ...]  # 1 factor (atomic) or 2 (product)
    spectrum_indices: tuple[int, ...]
    lam: complex  # sum of factor eigenvalues
    scale: float = 1.0
    eps_hat: float = math.nan
    kappa: float = math.nan
    omega: float = math.nan

    @property
    def is_product(self) -> bool:
        return len(self.pairs) > 1

    @property
    def has_bounds(self) -> bool:
        return math.isfinite(self.eps_hat)


@dataclass(frozen=True, eq=False)
class LyapunovBasis:
    entries: tuple[BasisEntry, ...]
    dictionary: object

    def __post_init__(self):
        for e in self.entries:
            if e.lam.real >= 0:
                raise ValueError(f"basis entry with Re(lambda) = {e.lam.real} >= 0")
        object.__setattr__(self, "entries", tuple(self.entries))

    @property
    def m(self) -> int:
        return len(self.entries)

    def lambdas(self) -> np.ndarray:
        return np.array([e.lam for e in self.entries])

    def eps_hats(self) -> np.ndarray:
        return np.array([e.eps_hat for e in self.entries])


def build_basis(spectrum: Spectrum, selected: list[EigenPair], dic) -> LyapunovBasis:
    """Wrap selected stable eigenpairs as Lyapunov basis entries."""
    entries = []
    for p in selected:
        idx = next(i for i, q in enumerate(spectrum.pairs) if q is p)
        entries.append(BasisEntry(pairs=(p,), spectrum_indices=(idx,), lam=p.lam))
    return LyapunovBasis(entries=tuple(entries), dictionary=dic)


def augment_products(basis: LyapunovBasis) -> LyapunovBasis:
    """Append the pairwise products psi_i psi_j (eigenvalue lam_i + lam_j).

    Only atomic bases may be augmented; higher-order products are out of
    scope. Appended entries need fresh error bounds.
    """
    if any(e.is_product for e in basis.entries):
        raise ValueError("basis already contains product entries")
    entries = list(basis.entries)
    m = len(entries)
    for i in range(m):
        for j in range(i, m):
            ei, ej = basis.entries[i], basis.entries[j]
            entries.append(BasisEntry(
                pairs=ei.pairs + ej.pairs,
                spectrum_indices=ei.spectrum_indices + ej.spectrum_indices,
                lam=ei.lam + ej.lam,
                scale=ei.scale * ej.scale,
            ))
    return LyapunovBasis(entries=tuple(entries), dictionary=basis.dictionary)


def normalize_basis(basis: LyapunovBasis, samples: np.ndarray,
                    quantile: float = 0.995,
                    level: float = 0.25) -> LyapunovBasis:
    """Rescale entries so the given quantile of V_i on the samples is `level`.

    Any scalar multiple of an eigenfunction is an eigenfunction with the
    same eigenvalue, so this only fixes the representative. Pinning a high
    quantile of V_i well below 1 leaves the refinement box (gamma <= 1)
    headroom above essentially all sampled values.
    """
    pts = np.atleast_2d(np.asarray(samples, float))
    cache = _pair_values(basis, pts)
    entries = []
    for e in basis.entries:
        raw = np.abs(_entry_psi(e, cache) * e.scale) ** 2  # undo current scale
        q = float(np.quantile(raw, quantile))
        s = math.sqrt(q / (2.0 * level)) if q > 1e-300 else 1.0
        entries.append(replace(e, scale=s))
    return LyapunovBasis(entries=tuple(entries), dictionary=basis.dictionary)


# ---------------------------------------------------------------------------
# evaluation

def _pair_values(basis: LyapunovBasis, pts: np.ndarray) -> dict[int, np.ndarray]:
    """psi values per distinct eigenpair (keyed by id), one lift of pts."""
    lifted = np.asarray(basis.dictionary.evaluate_batch(pts))
    out: dict[int, np.ndarray] = {}
    for e in basis.entries:
        for p in e.pairs:
            if id(p) not in out:
                out[id(p)] = lifted @ p.v
    return out


def _entry_psi(entry: BasisEntry, cache: dict[int, np.ndarray]) -> np.ndarray:
    psi = cache[id(entry.pairs[0])]
    for p in entry.pairs[1:]:
        psi = psi * cache[id(p)]
    return psi / entry.scale


def eval_basis(basis: LyapunovBasis, x) -> np.ndarray:
    """V_i(x) = |psi_i(x)|^2 / 2 for every entry; (M,) or (B, M)."""
    arr = np.asarray(x, dtype=float)
    pts = np.atleast_2d(arr)
    cache = _pair_values(basis, pts)
    cols = [0.5 * np.abs(_entry_psi(e, cache)) ** 2 for e in basis.entries]
    vals = np.stack(cols, axis=1)
    return vals[0] if arr.ndim == 1 else vals


def eval_basis_dot_analytic(basis: LyapunovBasis, fld: VectorField, x) -> np.ndarray:
    """V_i_dot along the field, via the chain rule on psi.

    Needs a differentiable (monomial) dictionary; psi_dot = v^T (grad Phi) f
    and V_dot = Re(conj(psi) psi_dot), with the product rule for two-factor
    entries.
    """
    from .dictionary import eval_jacobian

    if not isinstance(basis.dictionary, MonomialDictionary):
        raise TypeError("analytic V_dot needs a monomial dictionary; "
                        "use eval_basis_dot_data for network dictionaries")
    arr = np.asarray(x, dtype=float)
    pts = np.atleast_2d(arr)
    cache = _pair_values(basis, pts)
    jac = eval_jacobian(basis.dictionary, pts)
    fx = eval_field(fld, pts)
    lie = np.einsum("bkj,bj->bk", jac, fx)
    dcache = {pid: None for pid in cache}
    for e in basis.entries:
        for p in e.pairs:
            if dcache[id(p)] is None:
                dcache[id(p)] = lie @ p.v
    cols = []
    for e in basis.entries:
        if not e.is_product:
            psi = cache[id(e.pairs[0])]
            psid = dcache[id(e.pairs[0])]
        else:
            p1, p2 = e.pairs
            a, b = cache[id(p1)], cache[id(p2)]
            da, db = dcache[id(p1)], dcache[id(p2)]
            psi = a * b
            psid = da * b + a * db
        cols.append(np.real(np.conj(psi) * psid) / e.scale ** 2)
    vals = np.stack(cols, axis=1)
    return vals[0] if arr.ndim == 1 else vals


def eval_basis_dot_data(basis: LyapunovBasis, x: np.ndarray, y: np.ndarray,
                        dt: float) -> np.ndarray:
    """Forward-difference V_dot estimate (V(y) - V(x)) / dt, per sample."""
    if dt <= 0:
        raise ValueError("dt must be positive")
    x = np.atleast_2d(np.asarray(x, float))
    y = np.atleast_2d(np.asarray(y, float))
    if x.shape != y.shape:
        raise ValueError("x and y must have equal shapes")
    return (eval_basis(basis, y) - eval_basis(basis, x)) / dt


# ---------------------------------------------------------------------------
# error model

def fit_error_envelope(eps_abs: np.ndarray, v_vals: np.ndarray) -> tuple[float, float]:
    """Smallest omega over the kappa grid with |eps| <= kappa V^2 + omega.

    For each grid kappa the minimal admissible omega is the exact envelope
    max(0, max(|eps| - kappa V^2)); ties in omega resolve to the smallest
    kappa, which gives the widest invariance interval downstream.
    """
    v2 = v_vals ** 2
    omegas = np.maximum(0.0, np.max(eps_abs[None, :] - KAPPA_GRID[:, None] * v2[None, :],
                                    axis=1))
    omin = float(omegas.min())
    tie = omin + 1e-12 + 1e-9 * omin
    idx = int(np.argmax(omegas <= tie))
    return float(KAPPA_GRID[idx]), float(omegas[idx])


def estimate_error_bounds(basis: LyapunovBasis, x_samples, y_samples=None,
                          dt: float | None = None,
                          fld: VectorField | None = None) -> LyapunovBasis:
    """Fit (eps_hat, kappa, omega) per entry from samples.

    Either pass paired data (y_samples, dt) for the forward-difference
    derivative, or a field for the analytic one. eps_hat is the worst-case
    |V_dot - Re(lambda) V| over the samples.
    """
    x_samples = np.atleast_2d(np.asarray(x_samples, float))
    if x_samples.shape[0] < 10:
        raise ValueError("need at least 10 samples to fit error bounds")
    v = eval_basis(basis, x_samples)
    if fld is not None:
        vdot = eval_basis_dot_analytic(basis, fld, x_samples)
    else:
        if y_samples is None or dt is None:
            raise ValueError("data mode needs y_samples and dt")
        vdot = eval_basis_dot_data(basis, x_samples, y_samples, dt)
    entries = []
    for i, e in enumerate(basis.entries):
        eps = vdot[:, i] - e.lam.real * v[:, i]
        eps_abs = np.abs(eps)
        kappa, omega = fit_error_envelope(eps_abs, v[:, i])
        entries.append(replace(e, eps_hat=float(eps_abs.max()),
                               kappa=kappa, omega=omega))
    return LyapunovBasis(entries=tuple(entries), dictionary=basis.dictionary)


def softmax_weights(eps_hat) -> np.ndarray:
    """alpha_i = exp(-eps_hat_i) / sum_j exp(-eps_hat_j), max-subtracted."""
    e = np.asarray(eps_hat, dtype=float)
    z = -e - np.max(-e)
    w = np.exp(z)
    return w / w.sum()


# ---------------------------------------------------------------------------
# invariance intervals and the sufficient condition

def invariance_interval(lam: float, kappa: float, omega: float):
    """Level range where kappa v^2 + lam v + omega <= 0, if any.

    Roots are returned via the numerically stable quadratic form. kappa = 0
    degenerates to (omega / -lam, inf); a non-positive discriminant means no
    interval exists and None is returned.
    """
    if lam >= 0:
        raise ValueError("lam must be negative")
    if kappa < 0 or omega < 0:
        raise ValueError("kappa and omega must be non-negative")
    if kappa == 0.0:
        return (omega / (-lam), math.inf)
    disc = lam * lam - 4.0 * kappa * omega
    if disc <= 0.0:
        return None
    sq = math.sqrt(disc)
    hi = (-lam + sq) / (2.0 * kappa)
    lo = (2.0 * omega) / (-lam + sq)
    return (lo, hi)


@dataclass(frozen=True)
class Theorem1Result:
    gamma: float
    beta: float
    lhs: float
    rhs: float
    satisfied: bool
    gamma_highs: tuple[float, ...]


def theorem1_check(basis: LyapunovBasis, alpha) -> Theorem1Result:
    """Evaluate the sufficient invariance condition for weighted sums.

    gamma = min_i alpha_i gamma_high_i and beta = min_i(-Re lambda_i); the
    condition is gamma * beta >= sum_i alpha_i (kappa_i gamma_high_i^2 +
    omega_i), evaluated with a 1e-9 relative slack because for a single
    entry the two sides coincide exactly at the interval root.
    """
    alpha = np.asarray(alpha, dtype=float)
    if alpha.shape != (basis.m,):
        raise ValueError("alpha must have one weight per basis entry")
    if np.any(alpha <= 0):
        raise ValueError("weights must be positive")
    highs, rhs_terms = [], []
    for e in basis.entries:
        if not e.has_bounds:
            raise ValueError("basis entry lacks fitted error bounds")
        interval = invariance_interval(e.lam.real, e.kappa, e.omega)
        if interval is None:
            raise ValueError(
                f"entry with lambda={e.lam:.6g}, kappa={e.kappa:.3g}, "
                f"omega={e.omega:.3g} admits no invariance interval")
        highs.append(interval[1])
        if e.kappa == 0.0:
            rhs_terms.append(e.omega)
        else:
            rhs_terms.append(e.kappa * interval[1] ** 2 + e.omega)
    highs_arr = np.array(highs)
    gamma = float(np.min(alpha * highs_arr))
    beta = float(min(-e.lam.real for e in basis.entries))
    rhs = float(np.sum(alpha * np.array(rhs_terms)))
    lhs = gamma * beta
    satisfied = bool(lhs >= rhs - 1e-9 * (1.0 + abs(rhs)))
    return Theorem1Result(gamma=gamma, beta=beta, lhs=lhs, rhs=rhs,
                          satisfied=satisfied, gamma_highs=tuple(highs))


def lemma1_min_omega(lam: float, kappa: float, p: float, q: float) -> float:
    """Threshold (p+lam)^2/(4 kappa) - q^2/(4 p^2); any larger omega works."""
    if lam >= 0:
        raise ValueError("lam must be negative")
    if kappa <= 0 or p <= 0 or q <= 0:
        raise ValueError("kappa, p, q must be positive")
    return (p + lam) ** 2 / (4.0 * kappa) - q ** 2 / (4.0 * p ** 2)


# ---------------------------------------------------------------------------
# candidate functions and the Gram form

@dataclass(frozen=True, eq=False)
class CandidateFunction:
    """V(x) = sum_i alpha_i V_i(x) at level gamma with decay budget beta."""

    basis: LyapunovBasis
    alpha: np.ndarray
    gamma: float
    beta: float

    def __post_init__(self):
        a = np.asarray(self.alpha, dtype=float)
        if a.shape != (self.basis.m,):
            raise ValueError("alpha must match the basis size")
        if np.any(a <= 0) or not np.all(np.isfinite(a)):
            raise ValueError("weights must be positive and finite")
        if not (self.gamma > 0 and self.beta > 0):
            raise ValueError("gamma and beta must be positive")
        a.setflags(write=False)
        object.__setattr__(self, "alpha", a)


def eval_candidate(c: CandidateFunction, x) -> float | np.ndarray:
    vals = eval_basis(c.basis, np.atleast_2d(np.asarray(x, float))) @ c.alpha
    return float(vals[0]) if np.asarray(x).ndim == 1 else vals


def eval_candidate_dot(c: CandidateFunction, fld: VectorField, x):
    vals = eval_basis_dot_analytic(c.basis, fld,
                                   np.atleast_2d(np.asarray(x, float))) @ c.alpha
    return float(vals[0]) if np.asarray(x).ndim == 1 else vals


@dataclass(frozen=True, eq=False)
class GramForm:
    """V(x) = m(x)^T Q m(x) with Q PSD by construction."""

    dictionary: MonomialDictionary
    q: np.ndarray


def _grlex_key(e: tuple[int, ...]):
    return (sum(e), tuple(-v for v in e))


def gram_matrix(candidate: CandidateFunction, check_points: int = 100,
                seed: int = 0) -> GramForm:
    """Assemble Q = sum_i (alpha_i/2)(Re w_i Re w_i^T + Im w_i Im w_i^T).

    w_i is the monomial coefficient vector of psi_i; product entries expand
    by exponent-convolution onto an enlarged monomial vector. The identity
    m^T Q m = sum alpha_i V_i is checked at random points and the result is
    PSD as a sum of outer products.
    """
    basis = candidate.basis
    dic = basis.dictionary
    if not isinstance(dic, MonomialDictionary):
        raise TypeError("Gram form needs a monomial dictionary")
    exps = [tuple(int(v) for v in row) for row in dic.exponents]
    if any(e.is_product for e in basis.entries):
        support = set()
        for e in basis.entries:
            if e.is_product:
                for a in exps:
                    for b in exps:
                        support.add(tuple(x + y for x, y in zip(a, b)))
            else:
                support.update(exps)
        target = sorted(support, key=_grlex_key)
        gram_dic = monomials_from_exponents(dic.n, np.array(target, dtype=np.int32))
    else:
        target = exps
        gram_dic = dic
    index = {e: i for i, e in enumerate(target)}

    size = len(target)
    q = np.zeros((size, size))
    for ent, a in zip(basis.entries, candidate.alpha):
        w = np.zeros(size, dtype=complex)
        if not ent.is_product:
            for k, e in enumerate(exps):
                w[index[e]] += ent.pairs[0].v[k]
        else:
            v1, v2 = ent.pairs[0].v, ent.pairs[1].v
            for k1, e1 in enumerate(exps):
                if v1[k1] == 0:
                    continue
                for k2, e2 in enumerate(exps):
                    w[index[tuple(x + y for x, y in zip(e1, e2))]] += v1[k1] * v2[k2]
        w /= ent.scale
        q += (a / 2.0) * (np.outer(w.real, w.real) + np.outer(w.imag, w.imag))
    q = 0.5 * (q + q.T)

    rng = np.random.default_rng(seed)
    pts = rng.uniform(-1.0, 1.0, size=(check_points, dic.n))
    mvals = gram_dic.evaluate_batch(pts)
    quad = np.einsum("bi,ij,bj->b", mvals, q, mvals)
    direct = eval_basis(basis, pts) @ candidate.alpha
    scale = np.maximum(1e-30, np.abs(direct))
    if np.max(np.abs(quad - direct) / scale) > 1e-8:
        raise AssertionError("Gram form does not reproduce the candidate")
    return GramForm(dictionary=gram_dic, q=q)
