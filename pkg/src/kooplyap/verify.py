"""Certificate verification: NLP ascent, grid falsification, simulation.

The quantity of interest is the residual L_fV(x) - beta (gamma - V(x)) over
the sublevel set {V <= gamma}: a negative maximum verifies the sufficient
invariance condition, a positive value is a concrete counterexample. The
multi-start ascent is a falsifier/heuristic verifier, not a formal proof,
which is why a near-zero best value yields the `inconclusive` verdict.
"""

from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from .dictionary import MonomialDictionary, eval_hessian, eval_jacobian
from .lyapunov import CandidateFunction, eval_basis, eval_basis_dot_analytic
from .systems import Box, VectorField, eval_field, field_jacobian, integrate_rk4_batch

DEFAULT_TOL_MARGIN = 1e-6


class EmptySublevelError(RuntimeError):
    """The gamma-sublevel set misses every probe point."""


def _n_workers() -> int:
    try:
        return max(1, int(os.environ.get("KL_THREADS", "1")))
    except ValueError:
        return 1


def residual(candidate: CandidateFunction, fld: VectorField, x):
    """L_fV(x) - beta (gamma - V(x)); negative on certified points."""
    arr = np.asarray(x, dtype=float)
    pts = np.atleast_2d(arr)
    v = eval_basis(candidate.basis, pts) @ candidate.alpha
    vdot = eval_basis_dot_analytic(candidate.basis, fld, pts) @ candidate.alpha
    res = vdot - candidate.beta * (candidate.gamma - v)
    return float(res[0]) if arr.ndim == 1 else res


def candidate_values(candidate: CandidateFunction, pts: np.ndarray) -> np.ndarray:
    return eval_basis(candidate.basis, np.atleast_2d(pts)) @ candidate.alpha


def residual_gradient(candidate: CandidateFunction, fld: VectorField,
                      x: np.ndarray) -> np.ndarray:
    """Exact gradient of the residual, assembled from monomial structure.

    grad(L_fV) needs second dictionary derivatives (through psi_dot) and the
    field Jacobian; grad(V) only first derivatives. Network dictionaries are
    not differentiable here and are rejected upstream.
    """
    basis = candidate.basis
    dic = basis.dictionary
    if not isinstance(dic, MonomialDictionary):
        raise TypeError("analytic gradients need a monomial dictionary")
    pts = np.atleast_2d(np.asarray(x, dtype=float))
    lifted = dic.evaluate_batch(pts)
    jac = eval_jacobian(dic, pts)
    hess = eval_hessian(dic, pts)
    fx = eval_field(fld, pts)
    jf = field_jacobian(fld, pts)
    lie = np.einsum("bkj,bj->bk", jac, fx)

    per_pair = {}
    for e in basis.entries:
        for p in e.pairs:
            if id(p) in per_pair:
                continue
            psi = lifted @ p.v
            gpsi = np.einsum("bkj,k->bj", jac, p.v)
            psid = lie @ p.v
            hpsi = np.einsum("bkij,k->bij", hess, p.v)
            gpsid = (np.einsum("bij,bj->bi", hpsi, fx)
                     + np.einsum("bji,bj->bi", jf, gpsi))
            per_pair[id(p)] = (psi, gpsi, psid, gpsid)

    grad = np.zeros_like(pts)
    for e, a in zip(basis.entries, candidate.alpha):
        if not e.is_product:
            psi, gpsi, psid, gpsid = per_pair[id(e.pairs[0])]
        else:
            p1, p2 = e.pairs
            s1, g1, d1, gd1 = per_pair[id(p1)]
            s2, g2, d2, gd2 = per_pair[id(p2)]
            psi = s1 * s2
            gpsi = s2[:, None] * g1 + s1[:, None] * g2
            psid = d1 * s2 + s1 * d2
            gpsid = (gd1 * s2[:, None] + d1[:, None] * g2
                     + g1 * d2[:, None] + s1[:, None] * gd2)
        grad_v = np.real(np.conj(psi)[:, None] * gpsi)
        grad_vdot = np.real(np.conj(gpsi) * psid[:, None]
                            + np.conj(psi)[:, None] * gpsid)
        grad += (a / e.scale ** 2) * (grad_vdot + candidate.beta * grad_v)
    return grad


# ---------------------------------------------------------------------------
# NLP maximization

@dataclass
class NlpConfig:
    starts: int = 64
    max_iters: int = 200
    init_step: float = 0.05  # fraction of the smallest box width
    grow: float = 1.3
    shrink: float = 0.5
    seed: int = 0
    tol_margin: float = DEFAULT_TOL_MARGIN


@dataclass
class StartTrace:
    start: np.ndarray
    point: np.ndarray
    value: float
    iterations: int
    converged: bool


@dataclass
class VerificationReport:
    verdict: str  # verified | falsified | inconclusive
    max_value: float
    argmax: np.ndarray
    starts: int
    iterations: int
    converged_all: bool
    domain: Box
    tol_margin: float
    traces: list[StartTrace]


def default_domain_box(samples: np.ndarray, factor: float = 1.5) -> Box:
    """Factor-inflated bounding box of the training data."""
    samples = np.atleast_2d(samples)
    lo, hi = samples.min(axis=0), samples.max(axis=0)
    center = 0.5 * (lo + hi)
    half = 0.5 * factor * (hi - lo)
    return Box(center - half, center + half)


def nlp_verify(candidate: CandidateFunction, fld: VectorField, box: Box,
               config: NlpConfig | None = None) -> VerificationReport:
    """Multi-start projected gradient ascent on the residual over {V <= gamma}.

    Iterates are clipped to the box; a step leaving the sublevel set is
    bisected back toward the previous feasible point. Verified requires the
    best value below -tol_margin with every start converged; any feasible
    positive residual falsifies; the band in between is inconclusive.
    """
    cfg = config or NlpConfig()
    rng = np.random.default_rng(cfg.seed)
    gamma = candidate.gamma

    starts = []
    attempts = 0
    while len(starts) < cfg.starts:
        cand = box.sample(rng, cfg.starts)
        feas = cand[candidate_values(candidate, cand) <= gamma]
        starts.extend(feas[:cfg.starts - len(starts)])
        attempts += cfg.starts
        if attempts > 10 * cfg.starts and not starts:
            raise EmptySublevelError(
                "no feasible start found inside the sublevel set")
        if attempts > 100 * cfg.starts:
            break
    if not starts:
        raise EmptySublevelError("no feasible start found inside the sublevel set")
    x = np.array(starts)
    s = x.shape[0]
    width = float(np.min(box.hi - box.lo))
    eta = np.full(s, cfg.init_step * width)
    val = residual(candidate, fld, x)
    active = np.ones(s, dtype=bool)
    iters = np.zeros(s, dtype=int)
    x0 = x.copy()

    for _ in range(cfg.max_iters):
        if not active.any():
            break
        g = residual_gradient(candidate, fld, x[active])
        gnorm = np.linalg.norm(g, axis=1) + 1e-30
        step = eta[active][:, None] * g / gnorm[:, None]
        cand = np.clip(x[active] + step, box.lo, box.hi)
        # pull infeasible iterates back toward the last feasible point
        for _ in range(30):
            bad = candidate_values(candidate, cand) > gamma
            if not bad.any():
                break
            cand[bad] = x[active][bad] + 0.5 * (cand[bad] - x[active][bad])
        else:
            cand[bad] = x[active][bad]
        new_val = residual(candidate, fld, cand)
        improved = new_val > val[active] + 1e-15
        idx = np.nonzero(active)[0]
        x[idx[improved]] = cand[improved]
        val[idx[improved]] = new_val[improved]
        eta[idx[improved]] *= cfg.grow
        eta[idx[~improved]] *= cfg.shrink
        iters[idx] += 1
        stalled = eta[idx] < 1e-12 * width
        active[idx[stalled]] = False

    converged = ~active  # stalled before the iteration budget ran out
    order = sorted(range(s), key=lambda i: (-val[i], tuple(x[i])))
    best = order[0]
    traces = [StartTrace(start=x0[i], point=x[i], value=float(val[i]),
                         iterations=int(iters[i]), converged=bool(converged[i]))
              for i in range(s)]
    best_val = float(val[best])
    if best_val > 0.0:
        verdict = "falsified"
    elif best_val < -cfg.tol_margin and bool(converged.all()):
        verdict = "verified"
    else:
        verdict = "inconclusive"
    return VerificationReport(
        verdict=verdict, max_value=best_val, argmax=x[best].copy(), starts=s,
        iterations=int(iters.max(initial=0)), converged_all=bool(converged.all()),
        domain=box, tol_margin=cfg.tol_margin, traces=traces)


# ---------------------------------------------------------------------------
# brute-force grid oracle

@dataclass
class GridFalsification:
    point: np.ndarray
    value: float
    n_feasible: int
    resolution: int


def grid_falsify(candidate: CandidateFunction, fld: VectorField, box: Box,
                 resolution: int = 201) -> GridFalsification:
    """Residual maximum over a regular grid restricted to {V <= gamma}.

    Only tractable for n <= 3. Raises EmptySublevelError when no grid point
    is feasible.
    """
    n = box.n
    if n > 3:
        raise ValueError("grid falsification supports n <= 3 only")
    axes = [np.linspace(box.lo[j], box.hi[j], resolution) for j in range(n)]
    mesh = np.meshgrid(*axes, indexing="ij")
    pts = np.stack([m.ravel() for m in mesh], axis=1)

    workers = _n_workers()
    chunks = np.array_split(np.arange(pts.shape[0]), max(workers * 4, 8))
    vals = np.empty(pts.shape[0])
    res = np.empty(pts.shape[0])

    def work(idx):
        vals[idx] = candidate_values(candidate, pts[idx])
        res[idx] = residual(candidate, fld, pts[idx])

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            list(pool.map(work, chunks))
    else:
        for idx in chunks:
            work(idx)

    feas = vals <= candidate.gamma
    n_feas = int(feas.sum())
    if n_feas == 0:
        raise EmptySublevelError("gamma-sublevel set misses the whole grid")
    res_masked = np.where(feas, res, -np.inf)
    best = int(np.argmax(res_masked))
    return GridFalsification(point=pts[best].copy(), value=float(res[best]),
                             n_feasible=n_feas, resolution=resolution)


def max_feasible_level(candidate: CandidateFunction, fld: VectorField, box: Box,
                       resolution: int = 201, iters: int = 40) -> float:
    """Largest gamma' <= gamma whose grid residual maximum stays negative.

    Bisection against the grid oracle; returns 0.0 if even tiny levels fail.
    """

    def ok(gamma: float) -> bool:
        trial = CandidateFunction(basis=candidate.basis, alpha=candidate.alpha,
                                  gamma=gamma, beta=candidate.beta)
        try:
            return grid_falsify(trial, fld, box, resolution).value < 0.0
        except EmptySublevelError:
            return False

    hi = candidate.gamma
    if ok(hi):
        return hi
    lo = hi / 2.0
    for _ in range(60):
        if ok(lo):
            break
        lo /= 2.0
        if lo < 1e-12 * hi:
            return 0.0
    bad = min(2.0 * lo, hi)
    for _ in range(iters):
        mid = 0.5 * (lo + bad)
        if ok(mid):
            lo = mid
        else:
            bad = mid
    return lo


# ---------------------------------------------------------------------------
# simulation check

@dataclass
class SimulationReport:
    n_traj: int
    violations: int
    worst_overshoot: float
    horizon: float
    dt: float
    tol: float


def simulate_invariance(candidate: CandidateFunction, fld: VectorField,
                        n_traj: int, horizon: float, dt: float, tol: float,
                        seed: int, box: Box,
                        check_stride: int = 1) -> SimulationReport:
    """Roll trajectories from inside {V <= gamma}; count escapes.

    Initial conditions are rejection-sampled from the box (failure after
    100 n_traj draws raises). A trajectory violates when max_t V exceeds
    gamma (1 + tol); diverged rollouts count as violations.
    """
    rng = np.random.default_rng(seed)
    gamma = candidate.gamma
    starts: list[np.ndarray] = []
    drawn = 0
    while len(starts) < n_traj:
        batch = box.sample(rng, max(n_traj, 256))
        drawn += batch.shape[0]
        feas = batch[candidate_values(candidate, batch) <= gamma]
        starts.extend(feas[:n_traj - len(starts)])
        if drawn > 100 * n_traj and not starts:
            raise EmptySublevelError(
                "rejection sampling found no point inside the sublevel set")
        if drawn > 1000 * n_traj:
            raise EmptySublevelError(
                f"rejection sampling got only {len(starts)}/{n_traj} points")
    x = np.array(starts)

    steps_total = int(round(horizon / dt))
    max_v = candidate_values(candidate, x)
    diverged_any = np.zeros(n_traj, dtype=bool)
    lift_size = getattr(candidate.basis.dictionary, "size", 64)
    chunk = max(1, min(steps_total, int(5e6 / max(1, n_traj * lift_size))))
    done = 0
    while done < steps_total:
        take = min(chunk, steps_total - done)
        states, diverged = integrate_rk4_batch(fld, x, dt, take,
                                               allow_divergence=True)
        diverged_any |= diverged >= 0
        flat = states[:, 1::check_stride, :].reshape(-1, fld.n)
        vals = candidate_values(candidate, flat).reshape(n_traj, -1)
        max_v = np.maximum(max_v, vals.max(axis=1))
        x = states[:, -1, :]
        done += take
    over = max_v - gamma
    violations = int(np.sum((max_v > gamma * (1.0 + tol)) | diverged_any))
    return SimulationReport(n_traj=n_traj, violations=violations,
                            worst_overshoot=float(over.max()), horizon=horizon,
                            dt=dt, tol=tol)
