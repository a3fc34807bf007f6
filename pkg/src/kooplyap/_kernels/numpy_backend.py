"""Vectorized numpy implementations of the hot kernels.

This is the fallback backend; `kooplyap._kernels._native` provides the same
four entry points compiled with Cython. Both implementations keep the same
operation ordering (memoized power chains, coordinate-ascending products) so
results agree to rounding noise.
"""

from __future__ import annotations

import numpy as np


def _power_table(points: np.ndarray, dmax: int) -> np.ndarray:
    """Return pw[b, j, k] = points[b, j] ** k for k = 0..dmax."""
    b, n = points.shape
    pw = np.empty((b, n, dmax + 1))
    pw[:, :, 0] = 1.0
    for k in range(1, dmax + 1):
        pw[:, :, k] = pw[:, :, k - 1] * points
    return pw


def monomial_values(points: np.ndarray, exps: np.ndarray) -> np.ndarray:
    """Evaluate all monomials x^e at a batch of points.

    points: (B, n) float64, exps: (N, n) int32. Returns (B, N).
    """
    pw = _power_table(points, int(exps.max(initial=0)))
    vals = np.ones((points.shape[0], exps.shape[0]))
    for j in range(points.shape[1]):
        vals *= pw[:, j, exps[:, j]]
    return vals


def monomial_jacobian(points: np.ndarray, exps: np.ndarray) -> np.ndarray:
    """Partial derivatives of all monomials: out[b, k, j] = d(x^e_k)/dx_j."""
    b, n = points.shape
    nterms = exps.shape[0]
    pw = _power_table(points, int(exps.max(initial=0)))
    fac = np.empty((b, nterms, n))
    for j in range(n):
        fac[:, :, j] = pw[:, j, exps[:, j]]
    # prefix/suffix products avoid dividing by x_j ** e_j (zero at x_j = 0)
    left = np.ones((b, nterms, n + 1))
    for j in range(n):
        left[:, :, j + 1] = left[:, :, j] * fac[:, :, j]
    right = np.ones((b, nterms, n + 1))
    for j in range(n - 1, -1, -1):
        right[:, :, j] = right[:, :, j + 1] * fac[:, :, j]
    jac = np.empty((b, nterms, n))
    for j in range(n):
        e = exps[:, j]
        dpw = pw[:, j, np.maximum(e - 1, 0)] * e
        jac[:, :, j] = left[:, :, j] * right[:, :, j + 1] * dpw
    return jac


def poly_eval(
    points: np.ndarray,
    coeffs: np.ndarray,
    exps: np.ndarray,
    offsets: np.ndarray,
) -> np.ndarray:
    """Evaluate a vector of polynomials given as flattened term tables.

    Terms of output coordinate c are coeffs[offsets[c]:offsets[c+1]] with the
    matching exponent rows. Returns (B, n_out).
    """
    vals = monomial_values(points, exps)
    n_out = len(offsets) - 1
    out = np.empty((points.shape[0], n_out))
    for c in range(n_out):
        lo, hi = int(offsets[c]), int(offsets[c + 1])
        out[:, c] = vals[:, lo:hi] @ coeffs[lo:hi]
    return out


def rk4_rollout(
    coeffs: np.ndarray,
    exps: np.ndarray,
    offsets: np.ndarray,
    x0: np.ndarray,
    dt: float,
    steps: int,
    guard: float,
) -> tuple[np.ndarray, np.ndarray]:
    """Classical fixed-step RK4 rollout of a polynomial field, batched.

    Returns (states, diverged) with states (B, steps+1, n) and diverged[b]
    the first step index whose update left |state| <= guard (or -1 if none).
    Diverged trajectories are frozen at their last admissible state.
    """
    b, n = x0.shape
    out = np.empty((b, steps + 1, n))
    out[:, 0] = x0
    diverged = np.full(b, -1, dtype=np.int64)
    x = np.array(x0, dtype=float)
    active = np.ones(b, dtype=bool)
    half = 0.5 * dt
    with np.errstate(over="ignore", invalid="ignore"):
        for s in range(steps):
            k1 = poly_eval(x, coeffs, exps, offsets)
            k2 = poly_eval(x + half * k1, coeffs, exps, offsets)
            k3 = poly_eval(x + half * k2, coeffs, exps, offsets)
            k4 = poly_eval(x + dt * k3, coeffs, exps, offsets)
            xn = x + (dt / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
            with np.errstate(invalid="ignore"):
                bad = ~np.isfinite(xn).all(axis=1)
                bad |= np.abs(np.where(np.isfinite(xn), xn, 0.0)).max(axis=1) > guard
            newly = active & bad
            diverged[newly] = s
            active &= ~bad
            x = np.where(active[:, None], xn, x)
            out[:, s + 1] = x
    return out, diverged
