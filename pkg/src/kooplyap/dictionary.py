"""Monomial dictionaries: graded-lex enumeration, evaluation, derivatives.

A dictionary is the ordered list of basis observables the lifted linear model
acts on. Monomials are ordered by total degree, and within a degree by
descending lexicographic exponent, so for n=2 the list starts
[1, x1, x2, x1^2, x1*x2, x2^2, ...]. The constant term always comes first in
a full dictionary.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import _kernels


def _as_points(x, n: int) -> tuple[np.ndarray, bool]:
    """Coerce a single point or a batch to a (B, n) float64 C array."""
    arr = np.ascontiguousarray(x, dtype=np.float64)
    if arr.ndim == 1:
        if arr.shape[0] != n:
            raise ValueError(f"expected point of dimension {n}, got {arr.shape[0]}")
        return arr.reshape(1, n), True
    if arr.ndim != 2 or arr.shape[1] != n:
        raise ValueError(f"expected (B, {n}) batch, got shape {arr.shape}")
    return arr, False


@dataclass(frozen=True)
class MonomialDictionary:
    """Ordered monomial basis over n variables."""

    n: int
    exponents: np.ndarray  # (N, n) int32, read-only
    max_degree: int
    ordering: str = "grlex"
    name: str = field(default="", compare=False)

    def __post_init__(self):
        exps = np.ascontiguousarray(self.exponents, dtype=np.int32)
        if exps.ndim != 2 or exps.shape[1] != self.n:
            raise ValueError("exponent table must be (N, n)")
        if exps.size and exps.min() < 0:
            raise ValueError("exponents must be non-negative")
        exps.setflags(write=False)
        object.__setattr__(self, "exponents", exps)

    @property
    def size(self) -> int:
        return self.exponents.shape[0]

    @property
    def dim(self) -> int:
        return self.n

    def evaluate_batch(self, points: np.ndarray) -> np.ndarray:
        pts, _ = _as_points(points, self.n)
        return _kernels.monomial_values(pts, self.exponents)

    def degrees(self) -> np.ndarray:
        return self.exponents.sum(axis=1)

    def spec(self) -> dict:
        """Serializable description (see the model file format)."""
        if self.ordering == "grlex":
            return {"type": "monomial", "n": self.n, "d": self.max_degree,
                    "ordering": "grlex"}
        return {"type": "monomial_custom", "n": self.n,
                "terms": self.exponents.tolist()}


def _grlex_indices(n: int, d: int) -> list[tuple[int, ...]]:
    out: list[tuple[int, ...]] = []

    def rec(prefix: tuple[int, ...], nvars: int, left: int):
        if nvars == 1:
            out.append(prefix + (left,))
            return
        for e in range(left, -1, -1):
            rec(prefix + (e,), nvars - 1, left - e)

    for deg in range(d + 1):
        rec((), n, deg)
    return out


def build_monomials(n: int, d: int) -> MonomialDictionary:
    """All monomials of total degree <= d in n variables, graded-lex order.

    The count is C(n+d, d); the constant monomial is the first entry.
    """
    if n < 1:
        raise ValueError("n must be positive")
    if d < 0:
        raise ValueError("d must be non-negative")
    exps = np.array(_grlex_indices(n, d), dtype=np.int32)
    dic = MonomialDictionary(n=n, exponents=exps, max_degree=d)
    assert dic.size == math.comb(n + d, d)
    return dic


def monomials_from_exponents(n: int, exponents) -> MonomialDictionary:
    """Dictionary from an explicit exponent list (e.g. states only).

    The given order is kept verbatim; no constant term is implied.
    """
    exps = np.atleast_2d(np.asarray(exponents, dtype=np.int32))
    dic = MonomialDictionary(
        n=n,
        exponents=exps,
        max_degree=int(exps.sum(axis=1).max(initial=0)),
        ordering="custom",
    )
    return dic


def state_dictionary(n: int) -> MonomialDictionary:
    """The n coordinate monomials x_1..x_n (no constant)."""
    return monomials_from_exponents(n, np.eye(n, dtype=np.int32))


def eval_dictionary(dic: MonomialDictionary, x) -> np.ndarray:
    """Phi(x) as an (N,) vector; batches of shape (B, n) give (B, N)."""
    pts, single = _as_points(x, dic.n)
    vals = _kernels.monomial_values(pts, dic.exponents)
    return vals[0] if single else vals


def eval_jacobian(dic: MonomialDictionary, x) -> np.ndarray:
    """d(Phi)/dx at x: (N, n), or (B, N, n) for a batch."""
    pts, single = _as_points(x, dic.n)
    jac = _kernels.monomial_jacobian(pts, dic.exponents)
    return jac[0] if single else jac


def eval_hessian(dic: MonomialDictionary, x) -> np.ndarray:
    """Second derivatives d2(Phi)/dx_i dx_j: (N, n, n), batched (B, N, n, n).

    Needed to differentiate Lie derivatives when climbing the verification
    residual; cost grows as N*n^2 so callers should batch modestly.
    """
    pts, single = _as_points(x, dic.n)
    b, n = pts.shape
    exps = dic.exponents
    nterms = exps.shape[0]
    hess = np.empty((b, nterms, n, n))
    for i in range(n):
        # reduce e_i by one (with the factor e_i), then take the jacobian row
        e = exps[:, i]
        reduced = exps.copy()
        reduced[:, i] = np.maximum(e - 1, 0)
        jac_red = _kernels.monomial_jacobian(pts, np.ascontiguousarray(reduced))
        hess[:, :, i, :] = jac_red * e[None, :, None]
        # jacobian of x^(e - delta_i) w.r.t. x_i contributes (e_i - 1) not e_i,
        # which is what differentiating twice in the same variable needs, so
        # no correction is required on the diagonal.
    return hess[0] if single else hess


def lie_derivative(dic: MonomialDictionary, fld, x) -> np.ndarray:
    """(grad Phi) f at x: the instantaneous drift of each basis observable."""
    from .systems import eval_field  # local import to avoid a cycle

    if fld.n != dic.n:
        raise ValueError("field and dictionary dimensions differ")
    pts, single = _as_points(x, dic.n)
    jac = _kernels.monomial_jacobian(pts, dic.exponents)
    fx = eval_field(fld, pts)
    lie = np.einsum("bkj,bj->bk", jac, fx)
    return lie[0] if single else lie
