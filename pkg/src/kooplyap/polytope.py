"""Halfspace polytopes over candidate weights, LP engine, refinement loop.

The decision vector is Z = [alpha_1 .. alpha_M, gamma]. Sampled Lyapunov
conditions become halfspace rows; the refinement loop intersects them
iteratively, breaks when the intersection would empty out, and finally adds
exclusion rows that force the certified sublevel set to stay clear of points
outside the target region. The LP engine is a dense two-phase simplex with
Bland's anti-cycling rule, so every outcome is deterministic.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .lyapunov import LyapunovBasis, eval_basis, eval_basis_dot_data
from .systems import integrate_rk4_batch

PIVOT_TOL = 1e-9
FEAS_TOL = 1e-9

#: strict inequalities are realized as >= this margin (LPs cannot express >)
DELTA_STRICT = 1e-6

#: per-provenance-class row retention cap used by pruning
PRUNE_CAP_FACTOR = 5


class LPError(RuntimeError):
    """Numerical breakdown inside the simplex; never silently swallowed."""


class EmptyPolytopeError(RuntimeError):
    pass


@dataclass(frozen=True)
class LPOutcome:
    status: str  # feasible | infeasible | unbounded
    point: np.ndarray | None
    value: float | None


def _pivot(tab: np.ndarray, obj: np.ndarray, basis: np.ndarray, row: int,
           col: int) -> None:
    tab[row] /= tab[row, col]
    for i in range(tab.shape[0]):
        if i != row and tab[i, col] != 0.0:
            tab[i] -= tab[i, col] * tab[row]
    if obj[col] != 0.0:
        obj -= obj[col] * tab[row]
    basis[row] = col


def _run_simplex(tab: np.ndarray, obj: np.ndarray, basis: np.ndarray,
                 n_usable: int, max_pivots: int) -> str:
    """Minimize obj over columns [0, n_usable); returns optimal|unbounded.

    Entering columns follow Dantzig's rule until the objective stalls on
    degenerate pivots, then switch to Bland's rule, whose smallest-index
    choices guarantee termination without cycling. Fully deterministic.
    """
    stall = 0
    use_bland = False
    red = obj[:n_usable]
    for _ in range(max_pivots):
        if use_bland:
            eligible = np.nonzero(red < -PIVOT_TOL)[0]
            if eligible.size == 0:
                return "optimal"
            enter = int(eligible[0])
        else:
            enter = int(np.argmin(red))
            if red[enter] >= -PIVOT_TOL:
                return "optimal"
        col = tab[:, enter]
        pos = col > PIVOT_TOL
        if not pos.any():
            return "unbounded"
        ratios = np.where(pos, tab[:, -1] / np.where(pos, col, 1.0), np.inf)
        best = ratios.min()
        ties = np.nonzero(ratios <= best + PIVOT_TOL)[0]
        leave = int(ties[np.argmin(basis[ties])])  # Bland tie-break
        degenerate = best <= PIVOT_TOL
        _pivot(tab, obj, basis, leave, enter)
        if degenerate:
            stall += 1
            if stall > 40:
                use_bland = True
        else:
            stall = 0
    raise LPError("pivot limit exceeded (numerical breakdown?)")


def lp_solve(a, b, c) -> LPOutcome:
    """Maximize c.Z over {A Z <= b} with free Z, via two-phase simplex.

    Free variables are split as Z = u - v; rows with negative right-hand
    side get artificial variables for phase 1. Bland's rule keeps pivoting
    deterministic and cycle-free; if floating-point degeneracy defeats the
    tolerance-based rule anyway, the solve is retried once with the classic
    graded right-hand-side perturbation (~1e-10), which breaks ties while
    staying inside the documented 1e-9 feasibility slack.
    """
    a = np.atleast_2d(np.asarray(a, dtype=float))
    b = np.asarray(b, dtype=float).ravel()
    c = np.asarray(c, dtype=float).ravel()
    m, nv = a.shape
    if b.shape[0] != m or c.shape[0] != nv:
        raise ValueError("inconsistent LP dimensions")
    if not (np.all(np.isfinite(a)) and np.all(np.isfinite(b))):
        raise ValueError("LP data must be finite")
    try:
        return _lp_solve_core(a, b, c)
    except LPError:
        jitter = 1e-10 * (1.0 + np.abs(b)) * (1.0 + np.arange(m) / max(m, 1))
        return _lp_solve_core(a, b + jitter, c)


def _lp_solve_core(a: np.ndarray, b: np.ndarray, c: np.ndarray) -> LPOutcome:
    m, nv = a.shape

    # column layout: [u (nv) | v (nv) | slack (m) | artificial (n_art) | rhs]
    sign = np.where(b < 0, -1.0, 1.0)
    art_rows = np.nonzero(sign < 0)[0]
    n_art = art_rows.shape[0]
    n_real = 2 * nv + m
    tab = np.zeros((m, n_real + n_art + 1))
    tab[:, :nv] = a * sign[:, None]
    tab[:, nv:2 * nv] = -a * sign[:, None]
    tab[np.arange(m), 2 * nv + np.arange(m)] = sign
    for k, i in enumerate(art_rows):
        tab[i, n_real + k] = 1.0
    tab[:, -1] = b * sign

    basis = np.array([2 * nv + i for i in range(m)], dtype=np.int64)
    for k, i in enumerate(art_rows):
        basis[i] = n_real + k

    max_pivots = 1000 + 50 * (m + n_real + n_art)

    if n_art:
        obj = np.zeros(tab.shape[1])
        obj[n_real:-1] = 1.0
        for i in range(m):
            if obj[basis[i]] != 0.0:
                obj -= obj[basis[i]] * tab[i]
        status = _run_simplex(tab, obj, basis, n_usable=n_real + n_art,
                              max_pivots=max_pivots)
        if status != "optimal":
            raise LPError("phase-1 simplex reported unbounded (impossible)")
        infeas = sum(tab[i, -1] for i in range(m) if basis[i] >= n_real)
        if infeas > FEAS_TOL:
            return LPOutcome(status="infeasible", point=None, value=None)
        # pivot degenerate artificials out; rows that cannot pivot are redundant
        keep = np.ones(m, dtype=bool)
        for i in range(m):
            if basis[i] >= n_real:
                piv = -1
                for j in range(n_real):
                    if abs(tab[i, j]) > PIVOT_TOL:
                        piv = j
                        break
                if piv >= 0:
                    _pivot(tab, obj, basis, i, piv)
                else:
                    keep[i] = False
        if not np.all(keep):
            tab = tab[keep]
            basis = basis[keep]
        tab = np.hstack([tab[:, :n_real], tab[:, -1:]])

    # phase 2: minimize -c.x
    obj = np.zeros(tab.shape[1])
    obj[:nv] = -c
    obj[nv:2 * nv] = c
    for i in range(tab.shape[0]):
        if obj[basis[i]] != 0.0:
            obj -= obj[basis[i]] * tab[i]
    status = _run_simplex(tab, obj, basis, n_usable=n_real, max_pivots=max_pivots)
    if status == "unbounded":
        return LPOutcome(status="unbounded", point=None, value=None)
    y = np.zeros(n_real)
    for i in range(tab.shape[0]):
        y[basis[i]] = tab[i, -1]
    x = y[:nv] - y[nv:2 * nv]
    return LPOutcome(status="feasible", point=x, value=float(c @ x))


# ---------------------------------------------------------------------------
# polytopes

@dataclass(frozen=True, eq=False)
class HalfspacePolytope:
    """H-representation {Z : A Z <= b} with unit-norm rows and provenance tags."""

    dim: int
    a: np.ndarray  # (R, dim)
    b: np.ndarray  # (R,)
    provenance: tuple[str, ...]

    def __post_init__(self):
        a = np.ascontiguousarray(self.a, dtype=float)
        b = np.ascontiguousarray(self.b, dtype=float)
        if a.ndim != 2 or a.shape[1] != self.dim or b.shape != (a.shape[0],):
            raise ValueError("inconsistent polytope arrays")
        if len(self.provenance) != a.shape[0]:
            raise ValueError("one provenance tag per row required")
        a.setflags(write=False)
        b.setflags(write=False)
        object.__setattr__(self, "a", a)
        object.__setattr__(self, "b", b)

    @property
    def n_rows(self) -> int:
        return self.a.shape[0]

    def with_rows(self, a_new, b_new, provenance: str | list[str]) -> "HalfspacePolytope":
        """Append rows, normalizing each to unit norm; vacuous rows dropped."""
        a_new = np.atleast_2d(np.asarray(a_new, dtype=float))
        b_new = np.asarray(b_new, dtype=float).ravel()
        if isinstance(provenance, str):
            provs = [provenance] * a_new.shape[0]
        else:
            provs = list(provenance)
        rows_a, rows_b, rows_p = [self.a], [self.b], list(self.provenance)
        for k in range(a_new.shape[0]):
            norm = float(np.linalg.norm(a_new[k]))
            if norm < 1e-14:
                if b_new[k] < -1e-12:
                    raise ValueError("zero row with negative offset is infeasible")
                continue  # 0 <= b: vacuous
            rows_a.append(a_new[k][None, :] / norm)
            rows_b.append(np.array([b_new[k] / norm]))
            rows_p.append(provs[k])
        return HalfspacePolytope(dim=self.dim, a=np.vstack(rows_a),
                                 b=np.concatenate(rows_b),
                                 provenance=tuple(rows_p))

    def contains(self, z, tol: float = 1e-9) -> bool:
        return bool(np.all(self.a @ np.asarray(z, float) <= self.b + tol))


def init_polytope(m: int) -> HalfspacePolytope:
    """{Z in [0,1]^(M+1), sum of the first M coordinates >= 1}."""
    if m < 1:
        raise ValueError("need at least one basis weight")
    dim = m + 1
    eye = np.eye(dim)
    a = np.vstack([eye, -eye, np.concatenate([-np.ones(m), [0.0]])[None, :]])
    b = np.concatenate([np.ones(dim), np.zeros(dim), [-1.0]])
    empty = HalfspacePolytope(dim=dim, a=np.zeros((0, dim)), b=np.zeros(0),
                              provenance=())
    return empty.with_rows(a, b, "init")


def is_empty(p: HalfspacePolytope) -> bool:
    """Phase-1 feasibility verdict."""
    return lp_solve(p.a, p.b, np.zeros(p.dim)).status == "infeasible"


def chebyshev_center(p: HalfspacePolytope) -> tuple[np.ndarray, float]:
    """Center and radius of the largest inscribed ball.

    Solves max r s.t. a_k.Z + r ||a_k|| <= b_k, r >= 0. Raises on empty or
    unbounded polytopes.
    """
    norms = np.linalg.norm(p.a, axis=1)
    a_ext = np.hstack([p.a, norms[:, None]])
    a_ext = np.vstack([a_ext, np.concatenate([np.zeros(p.dim), [-1.0]])[None, :]])
    b_ext = np.concatenate([p.b, [0.0]])
    c = np.concatenate([np.zeros(p.dim), [1.0]])
    out = lp_solve(a_ext, b_ext, c)
    if out.status == "infeasible":
        raise EmptyPolytopeError("polytope is empty")
    if out.status == "unbounded":
        raise LPError("Chebyshev LP unbounded; polytope has no finite radius")
    return out.point[:p.dim], float(out.value)


def lyapunov_constraints(v_vals: np.ndarray, vdot_vals: np.ndarray,
                         beta: float):
    """Rows enforcing the sampled level and decay conditions.

    Level rows [V_1(x) .. V_M(x), -1] . Z <= 0 keep gamma above the sampled
    values; decay rows [V_dot + beta V, -beta] . Z <= 0 are the sampled
    sufficient condition. Returns (A, b, provenance).
    """
    if beta < 0:
        raise ValueError("beta must be non-negative")
    v_vals = np.atleast_2d(np.asarray(v_vals, float))
    vdot_vals = np.atleast_2d(np.asarray(vdot_vals, float))
    if v_vals.shape != vdot_vals.shape:
        raise ValueError("V and V_dot sample matrices must match")
    s, m = v_vals.shape
    level = np.hstack([v_vals, -np.ones((s, 1))])
    decay = np.hstack([vdot_vals + beta * v_vals, np.full((s, 1), -beta)])
    a = np.vstack([level, decay])
    b = np.zeros(2 * s)
    prov = ["lyap"] * s + ["decay"] * s
    return a, b, prov


def exclusion_rows(v_vals: np.ndarray, delta: float = DELTA_STRICT,
                   provenance: str = "exclusion"):
    """Rows [V(x), -1] . Z >= delta, i.e. x must lie outside the sublevel set."""
    v_vals = np.atleast_2d(np.asarray(v_vals, float))
    s, m = v_vals.shape
    a = np.hstack([-v_vals, np.ones((s, 1))])
    b = np.full(s, -delta)
    return a, b, [provenance] * s


def dominance_filter(a: np.ndarray, b: np.ndarray):
    """Drop rows implied componentwise by another row over Z >= 0.

    For Z >= 0 (guaranteed by the init box), a row (a_i, b_i) is redundant
    whenever some row (a_j, b_j) has a_j >= a_i componentwise and b_j <= b_i:
    a_i.Z <= a_j.Z <= b_j <= b_i. Sampled level/decay rows are massively
    redundant, so this exact filter shrinks the LPs by an order of magnitude.
    """
    a = np.atleast_2d(np.asarray(a, float))
    b = np.asarray(b, float).ravel()
    r = a.shape[0]
    if r <= 1:
        return a, b, np.arange(r)
    geq = np.all(a[:, None, :] >= a[None, :, :] - 1e-14, axis=2)
    ble = b[:, None] <= b[None, :] + 1e-14
    dominates = geq & ble
    np.fill_diagonal(dominates, False)
    # identical rows would knock each other out; keep the earliest one
    order = np.triu(np.ones((r, r), dtype=bool), 1)
    mutual = dominates & dominates.T
    dominates &= ~(mutual & order.T)
    keep = ~dominates.any(axis=0)
    idx = np.nonzero(keep)[0]
    return a[idx], b[idx], idx


def prune_rows(p: HalfspacePolytope, cap: int | None = None,
               tight_tol: float = 1e-9) -> HalfspacePolytope:
    """Drop rows that provably leave the Chebyshev radius unchanged.

    Rows with positive slack at the Chebyshev optimum carry zero dual weight,
    so removing them (jointly) keeps the radius exact. Per provenance class
    at most `cap` rows are retained (tight rows always survive); init rows
    are never touched.
    """
    z, r = chebyshev_center(p)
    if cap is None:
        cap = PRUNE_CAP_FACTOR * p.dim
    slack = p.b - p.a @ z - r * np.linalg.norm(p.a, axis=1)
    keep = np.zeros(p.n_rows, dtype=bool)
    classes = {}
    for i, tag in enumerate(p.provenance):
        if tag == "init":
            keep[i] = True
        else:
            classes.setdefault(tag, []).append(i)
    for tag, idx in classes.items():
        idx = np.asarray(idx)
        order = idx[np.argsort(slack[idx], kind="stable")]
        tight = order[slack[order] <= tight_tol]
        quota = order[:max(cap, tight.shape[0])]
        keep[quota] = True
    return HalfspacePolytope(dim=p.dim, a=p.a[keep], b=p.b[keep],
                             provenance=tuple(t for t, k in zip(p.provenance, keep) if k))


# ---------------------------------------------------------------------------
# the refinement loop

@dataclass
class Algorithm1Result:
    status: str  # ok | infeasible_data | infeasible_exclusion
    polytope: HalfspacePolytope
    z_star: np.ndarray | None
    radius: float
    iterations: int
    log: list[dict]
    offending: dict | None = None


def _sample_pairs(fld, region_u, n_traj, t_steps, dt, rng):
    x0 = region_u.sample(rng, n_traj)
    states, diverged = integrate_rk4_batch(fld, x0, dt, t_steps,
                                           allow_divergence=True)
    xs, ys = [], []
    for i in range(n_traj):
        last = t_steps if diverged[i] < 0 else max(int(diverged[i]) - 1, 0)
        if last >= 1:
            xs.append(states[i, :last, :])
            ys.append(states[i, 1:last + 1, :])
    if not xs:
        raise RuntimeError("all sampled trajectories diverged immediately")
    return np.vstack(xs), np.vstack(ys)


def _sample_outside(region_u, rng, count, margin: float, box=None):
    """Points outside the region, kept a relative margin away from it.

    Without the margin, exclusion points hugging the region boundary make
    the polytope empty by continuity (V there matches V just inside). The
    sampling box should cover the later verification domain so the excluded
    corset leaves no far-out sublevel pockets.
    """
    if box is None:
        box = region_u.bounding_box().inflate(1.5 * (1.0 + margin))
    barrier = region_u.inflate(1.0 + margin)
    pts, attempts = [], 0
    while len(pts) < count:
        cand = box.sample(rng, 4 * count)
        outside = cand[~barrier.contains(cand)]
        pts.extend(outside[:count - len(pts)])
        attempts += 1
        if attempts > 200:
            raise RuntimeError("could not sample points outside the region")
    return np.array(pts)


def run_algorithm1(basis: LyapunovBasis, fld, region_u, beta: float,
                   max_iter: int, n_traj: int, t_steps: int, dt: float,
                   seed: int, snapshots=None, exclusion_count: int = 32,
                   exclusion_margin: float = 0.15, exclusion_box=None,
                   delta_strict: float = DELTA_STRICT,
                   separatrix: np.ndarray | None = None,
                   prune: bool = True) -> Algorithm1Result:
    """Iterative polytope refinement over sampled Lyapunov conditions.

    Each iteration samples trajectory pairs (fresh rollouts from `region_u`,
    or chunks of the supplied snapshot set), turns them into level/decay
    rows, and intersects. An empty intersection breaks the loop keeping the
    last nonempty polytope; emptiness at the very first iteration is a
    failure verdict. Afterwards `exclusion_count` points outside the region
    (and any separatrix points) add strict rows, and the returned candidate
    is the Chebyshev center.
    """
    m = basis.m
    rng = np.random.default_rng(seed)
    poly = init_polytope(m)
    log: list[dict] = []
    if snapshots is not None:
        order = rng.permutation(len(snapshots))
        chunk = max(1, n_traj * t_steps)

    iterations = 0
    for k in range(max_iter):
        if snapshots is not None:
            idx = order[(k * chunk) % len(order):][:chunk]
            if idx.size == 0:
                idx = order[:chunk]
            xs, ys = snapshots.x[idx], snapshots.y[idx]
            dt_k = snapshots.dt
        else:
            xs, ys = _sample_pairs(fld, region_u, n_traj, t_steps, dt, rng)
            dt_k = dt
        v_vals = eval_basis(basis, xs)
        vdot_vals = eval_basis_dot_data(basis, xs, ys, dt_k)
        a, b, prov = lyapunov_constraints(v_vals, vdot_vals, beta)
        half = len(prov) // 2
        a1, b1, _ = dominance_filter(a[:half], b[:half])
        a2, b2, _ = dominance_filter(a[half:], b[half:])
        tentative = poly.with_rows(np.vstack([a1, a2]),
                                   np.concatenate([b1, b2]),
                                   ["lyap"] * len(b1) + ["decay"] * len(b2))
        try:
            poly_next = prune_rows(tentative) if prune else tentative
            _, radius = chebyshev_center(poly_next)
        except EmptyPolytopeError:
            if k == 0:
                return Algorithm1Result(
                    status="infeasible_data", polytope=poly, z_star=None,
                    radius=float("nan"), iterations=0, log=log,
                    offending={"iteration": 0, "rows": "lyap/decay batch"})
            break
        poly = poly_next
        iterations = k + 1
        log.append({"iteration": iterations, "rows_added": len(b1) + len(b2),
                    "chebyshev_radius": radius})

    # exclusion: certified set must not swallow points outside the region
    if exclusion_count > 0:
        pts = _sample_outside(region_u, rng, exclusion_count, exclusion_margin,
                              box=exclusion_box)
        a, b, prov = exclusion_rows(eval_basis(basis, pts), delta_strict)
        tentative = poly.with_rows(a, b, prov)
        if is_empty(tentative):
            bad = _first_offending(poly, a, b)
            return Algorithm1Result(
                status="infeasible_exclusion", polytope=poly, z_star=None,
                radius=float("nan"), iterations=iterations, log=log,
                offending=bad)
        poly = tentative
    if separatrix is not None and len(separatrix):
        a, b, prov = exclusion_rows(eval_basis(basis, np.atleast_2d(separatrix)),
                                    delta_strict, provenance="separatrix")
        tentative = poly.with_rows(a, b, prov)
        if is_empty(tentative):
            bad = _first_offending(poly, a, b)
            return Algorithm1Result(
                status="infeasible_exclusion", polytope=poly, z_star=None,
                radius=float("nan"), iterations=iterations, log=log,
                offending=bad)
        poly = tentative

    z_star, radius = chebyshev_center(poly)
    log.append({"iteration": iterations + 1, "rows_added": 0,
                "chebyshev_radius": radius})
    return Algorithm1Result(status="ok", polytope=poly, z_star=z_star,
                            radius=radius, iterations=iterations, log=log)


def _first_offending(poly: HalfspacePolytope, a: np.ndarray, b: np.ndarray):
    trial = poly
    for k in range(a.shape[0]):
        trial = trial.with_rows(a[k:k + 1], b[k:k + 1], "exclusion")
        if is_empty(trial):
            return {"row": a[k].tolist(), "offset": float(b[k]), "index": k}
    return None
