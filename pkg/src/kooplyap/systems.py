"""Polynomial dynamical systems, fixed-step integration, snapshot sampling.

Vector fields are stored as flattened per-coordinate term tables (coefficient
plus exponent multi-index) so the kernel backends can evaluate them directly.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field

import numpy as np

from . import _kernels

#: integration aborts once any state component exceeds this magnitude
DIVERGENCE_GUARD = 1e9

#: sampling interval used when a config does not give one
DEFAULT_DT = 0.01


class DivergenceError(RuntimeError):
    """Raised when an RK4 rollout leaves the admissible state region."""

    def __init__(self, step: int, trajectory: int = 0):
        self.step = step
        self.trajectory = trajectory
        super().__init__(
            f"integration diverged at step {step} (trajectory {trajectory})"
        )


@dataclass(frozen=True)
class VectorField:
    """Polynomial vector field dx/dt = f(x) over R^n."""

    n: int
    coeffs: np.ndarray  # (T,) float64, all coordinates concatenated
    exponents: np.ndarray  # (T, n) int32
    offsets: np.ndarray  # (n+1,) int64; terms of coordinate c are [o[c], o[c+1])
    name: str = field(default="", compare=False)

    def __post_init__(self):
        coeffs = np.ascontiguousarray(self.coeffs, dtype=np.float64)
        exps = np.ascontiguousarray(self.exponents, dtype=np.int32)
        offs = np.ascontiguousarray(self.offsets, dtype=np.int64)
        if exps.ndim != 2 or exps.shape[1] != self.n:
            raise ValueError("exponent table must be (T, n)")
        if exps.size and exps.min() < 0:
            raise ValueError("exponents must be non-negative")
        if offs.shape != (self.n + 1,) or offs[0] != 0 or offs[-1] != len(coeffs):
            raise ValueError("bad term offsets")
        if not np.all(np.isfinite(coeffs)):
            raise ValueError("coefficients must be finite")
        for arr in (coeffs, exps, offs):
            arr.setflags(write=False)
        object.__setattr__(self, "coeffs", coeffs)
        object.__setattr__(self, "exponents", exps)
        object.__setattr__(self, "offsets", offs)

    @classmethod
    def from_terms(cls, n: int, terms_per_coord, name: str = "") -> "VectorField":
        """Build from [[(coeff, exponent-tuple), ...] per coordinate]."""
        if len(terms_per_coord) != n:
            raise ValueError(f"need {n} coordinate term lists, got {len(terms_per_coord)}")
        coeffs, exps, offsets = [], [], [0]
        for terms in terms_per_coord:
            for c, e in terms:
                e = tuple(int(v) for v in e)
                if len(e) != n:
                    raise ValueError(f"multi-index {e} has length {len(e)}, expected {n}")
                coeffs.append(float(c))
                exps.append(e)
            offsets.append(len(coeffs))
        exps_arr = np.array(exps, dtype=np.int32) if exps else np.zeros((0, n), np.int32)
        return cls(n=n, coeffs=np.array(coeffs), exponents=exps_arr,
                   offsets=np.array(offsets), name=name)

    def terms(self) -> list[list[tuple[float, tuple[int, ...]]]]:
        out = []
        for c in range(self.n):
            lo, hi = int(self.offsets[c]), int(self.offsets[c + 1])
            out.append([(float(self.coeffs[t]), tuple(int(v) for v in self.exponents[t]))
                        for t in range(lo, hi)])
        return out


def eval_field(fld: VectorField, x) -> np.ndarray:
    """f(x); accepts a single point (n,) or a batch (B, n)."""
    arr = np.ascontiguousarray(x, dtype=np.float64)
    single = arr.ndim == 1
    pts = arr.reshape(1, -1) if single else arr
    if pts.shape[1] != fld.n:
        raise ValueError(f"expected dimension {fld.n}, got {pts.shape[1]}")
    out = _kernels.poly_eval(pts, fld.coeffs, fld.exponents, fld.offsets)
    return out[0] if single else out


def field_jacobian(fld: VectorField, x) -> np.ndarray:
    """df/dx at x: (n, n) with entry (c, j) = df_c/dx_j; batched (B, n, n)."""
    arr = np.ascontiguousarray(x, dtype=np.float64)
    single = arr.ndim == 1
    pts = arr.reshape(1, -1) if single else arr
    jac_terms = _kernels.monomial_jacobian(pts, fld.exponents)  # (B, T, n)
    out = np.zeros((pts.shape[0], fld.n, fld.n))
    for c in range(fld.n):
        lo, hi = int(fld.offsets[c]), int(fld.offsets[c + 1])
        if hi > lo:
            out[:, c, :] = np.einsum("btj,t->bj", jac_terms[:, lo:hi, :],
                                     fld.coeffs[lo:hi])
    return out[0] if single else out


# ---------------------------------------------------------------------------
# built-in systems

def vanderpol() -> VectorField:
    """Van der Pol oscillator: x1' = x2, x2' = -x1 + x2 (1 - x1^2)."""
    return VectorField.from_terms(2, [
        [(1.0, (0, 1))],
        [(-1.0, (1, 0)), (1.0, (0, 1)), (-1.0, (2, 1))],
    ], name="vanderpol")


def linear_field(a_matrix, name: str = "linear") -> VectorField:
    """dx/dt = A x."""
    a = np.atleast_2d(np.asarray(a_matrix, dtype=float))
    n = a.shape[0]
    if a.shape != (n, n):
        raise ValueError("A must be square")
    terms = []
    for i in range(n):
        row = []
        for j in range(n):
            if a[i, j] != 0.0:
                e = [0] * n
                e[j] = 1
                row.append((a[i, j], tuple(e)))
        terms.append(row)
    return VectorField.from_terms(n, terms, name=name)


def glv_field(rho, interaction, name: str = "glv") -> VectorField:
    """Generalized Lotka-Volterra: x_i' = x_i (rho_i + sum_j K_ij x_j)."""
    rho = np.asarray(rho, dtype=float)
    kmat = np.atleast_2d(np.asarray(interaction, dtype=float))
    n = rho.shape[0]
    if kmat.shape != (n, n):
        raise ValueError(
            f"interaction matrix is {kmat.shape}, expected ({n}, {n})"
        )
    terms = []
    for i in range(n):
        row = []
        if rho[i] != 0.0:
            e = [0] * n
            e[i] = 1
            row.append((rho[i], tuple(e)))
        for j in range(n):
            if kmat[i, j] != 0.0:
                e = [0] * n
                e[i] += 1
                e[j] += 1
                row.append((kmat[i, j], tuple(e)))
        terms.append(row)
    return VectorField.from_terms(n, terms, name=name)


def load_glv(path) -> VectorField:
    """Load a gLV system from a JSON file with keys `rho` and `interaction`."""
    try:
        with open(path) as fh:
            data = json.load(fh)
    except (OSError, json.JSONDecodeError) as exc:
        raise ValueError(f"cannot read gLV parameter file {path}: {exc}") from exc
    if "rho" not in data or "interaction" not in data:
        raise ValueError("gLV file must provide `rho` and `interaction`")
    rho = np.asarray(data["rho"], dtype=float)
    kmat = np.asarray(data["interaction"], dtype=float)
    if kmat.ndim != 2 or kmat.shape != (rho.shape[0], rho.shape[0]):
        raise ValueError(
            f"interaction matrix is {kmat.shape}, expected square of size {rho.shape[0]}"
        )
    return glv_field(rho, kmat, name=f"glv[{path}]")


def glv_interior_equilibrium(rho, interaction) -> np.ndarray:
    """Solve K x* = -rho for the coexistence equilibrium."""
    return np.linalg.solve(np.asarray(interaction, float), -np.asarray(rho, float))


def random_stable_glv(n: int, seed: int, equilibrium_scale: float = 10.0,
                      coupling: float = 0.2) -> tuple[VectorField, np.ndarray]:
    """Seeded diagonally-dominant gLV system with a stable interior equilibrium.

    Returns (field, x_star). The interaction matrix has strictly dominant
    negative diagonal, so the Jacobian diag(x*) K at x* is Hurwitz by
    Gershgorin, and rho = -K x* places the equilibrium at x*.
    """
    rng = np.random.default_rng(seed)
    x_star = equilibrium_scale * rng.uniform(0.8, 1.2, size=n)
    off = rng.uniform(-1.0, 1.0, size=(n, n)) * coupling
    np.fill_diagonal(off, 0.0)
    rates = rng.uniform(0.5, 1.5, size=n)
    kmat = off / x_star[:, None]
    row_sum = np.abs(kmat).sum(axis=1)
    np.fill_diagonal(kmat, -(rates / x_star + 1.5 * row_sum))
    rho = -kmat @ x_star
    return glv_field(rho, kmat, name=f"glv-random-{seed}"), x_star

# ---------------------------------------------------------------------------
# trajectories and snapshots

@dataclass(frozen=True)
class Trajectory:
    """Uniformly spaced states along one integrated solution."""

    states: np.ndarray  # (steps+1, n)
    dt: float
    t0: float = 0.0

    def __post_init__(self):
        states = np.ascontiguousarray(self.states, dtype=np.float64)
        if states.ndim != 2:
            raise ValueError("states must be (steps+1, n)")
        if not np.all(np.isfinite(states)):
            raise ValueError("trajectory contains non-finite states")
        if self.dt <= 0:
            raise ValueError("dt must be positive")
        states.setflags(write=False)
        object.__setattr__(self, "states", states)

    @property
    def times(self) -> np.ndarray:
        return self.t0 + self.dt * np.arange(self.states.shape[0])


@dataclass(frozen=True)
class SnapshotSet:
    """Paired snapshots (x_i, y_i) with y_i the state dt later."""

    x: np.ndarray  # (P, n)
    y: np.ndarray  # (P, n)
    dt: float
    traj_ids: np.ndarray  # (P,) int64

    def __post_init__(self):
        x = np.ascontiguousarray(self.x, dtype=np.float64)
        y = np.ascontiguousarray(self.y, dtype=np.float64)
        ids = np.ascontiguousarray(self.traj_ids, dtype=np.int64)
        if x.shape != y.shape or x.ndim != 2:
            raise ValueError("x and y must both be (P, n)")
        if ids.shape != (x.shape[0],):
            raise ValueError("traj_ids must have one entry per pair")
        if self.dt <= 0:
            raise ValueError("dt must be positive")
        for arr in (x, y, ids):
            arr.setflags(write=False)
        object.__setattr__(self, "x", x)
        object.__setattr__(self, "y", y)
        object.__setattr__(self, "traj_ids", ids)

    def __len__(self) -> int:
        return self.x.shape[0]

    @property
    def n(self) -> int:
        return self.x.shape[1]

    def trajectories(self) -> list[np.ndarray]:
        """Reassemble per-trajectory state sequences from consecutive pairs."""
        out = []
        for tid in np.unique(self.traj_ids):
            idx = np.nonzero(self.traj_ids == tid)[0]
            states = np.vstack([self.x[idx], self.y[idx[-1]][None, :]])
            out.append(states)
        return out


def integrate_rk4(fld: VectorField, x0, dt: float, steps: int) -> Trajectory:
    """Classical 4th-order Runge-Kutta with a fixed step.

    Raises DivergenceError with the offending step index if any state
    component exceeds DIVERGENCE_GUARD.
    """
    if dt <= 0:
        raise ValueError("dt must be positive")
    if steps < 0:
        raise ValueError("steps must be non-negative")
    x0 = np.ascontiguousarray(x0, dtype=np.float64).reshape(1, fld.n)
    states, diverged = _kernels.rk4_rollout(
        fld.coeffs, fld.exponents, fld.offsets, x0, float(dt), int(steps),
        DIVERGENCE_GUARD)
    if diverged[0] >= 0:
        raise DivergenceError(step=int(diverged[0]))
    return Trajectory(states=states[0], dt=float(dt))


def integrate_rk4_batch(fld: VectorField, x0, dt: float, steps: int,
                        allow_divergence: bool = False):
    """Batched RK4 rollout. Returns (states (B, steps+1, n), diverged (B,)).

    With allow_divergence=False any diverged trajectory raises; otherwise
    diverged trajectories are frozen at their last admissible state and
    flagged with the offending step index (-1 means clean).
    """
    if dt <= 0:
        raise ValueError("dt must be positive")
    x0 = np.ascontiguousarray(np.atleast_2d(x0), dtype=np.float64)
    states, diverged = _kernels.rk4_rollout(
        fld.coeffs, fld.exponents, fld.offsets, x0, float(dt), int(steps),
        DIVERGENCE_GUARD)
    if not allow_divergence and np.any(diverged >= 0):
        bad = int(np.argmax(diverged >= 0))
        raise DivergenceError(step=int(diverged[bad]), trajectory=bad)
    return states, diverged


# ---------------------------------------------------------------------------
# sampling regions

@dataclass(frozen=True)
class Box:
    """Axis-aligned box [lo, hi]."""

    lo: np.ndarray
    hi: np.ndarray

    def __post_init__(self):
        lo = np.asarray(self.lo, dtype=float)
        hi = np.asarray(self.hi, dtype=float)
        if lo.shape != hi.shape or lo.ndim != 1:
            raise ValueError("lo/hi must be 1-d of equal length")
        if np.any(hi < lo):
            raise ValueError("empty box")
        object.__setattr__(self, "lo", lo)
        object.__setattr__(self, "hi", hi)

    @property
    def n(self) -> int:
        return self.lo.shape[0]

    def sample(self, rng: np.random.Generator, size: int) -> np.ndarray:
        u = rng.random((size, self.n))
        return self.lo + u * (self.hi - self.lo)

    def contains(self, pts: np.ndarray) -> np.ndarray:
        pts = np.atleast_2d(pts)
        return np.all((pts >= self.lo) & (pts <= self.hi), axis=1)

    def bounding_box(self) -> "Box":
        return self

    def to_dict(self) -> dict:
        return {"type": "box", "lo": self.lo.tolist(), "hi": self.hi.tolist()}

    def inflate(self, factor: float) -> "Box":
        center = 0.5 * (self.lo + self.hi)
        half = 0.5 * factor * (self.hi - self.lo)
        return Box(center - half, center + half)


@dataclass(frozen=True)
class Ball:
    """Euclidean ball; sampling is uniform in volume."""

    center: np.ndarray
    radius: float

    def __post_init__(self):
        c = np.asarray(self.center, dtype=float)
        if c.ndim != 1:
            raise ValueError("center must be a vector")
        if self.radius <= 0:
            raise ValueError("radius must be positive")
        object.__setattr__(self, "center", c)

    @property
    def n(self) -> int:
        return self.center.shape[0]

    def sample(self, rng: np.random.Generator, size: int) -> np.ndarray:
        # normalized Gaussian direction, radius scaled by u^(1/n)
        d = rng.standard_normal((size, self.n))
        d /= np.linalg.norm(d, axis=1, keepdims=True)
        r = self.radius * rng.random(size) ** (1.0 / self.n)
        return self.center + d * r[:, None]

    def contains(self, pts: np.ndarray) -> np.ndarray:
        pts = np.atleast_2d(pts)
        return np.linalg.norm(pts - self.center, axis=1) <= self.radius

    def bounding_box(self) -> Box:
        return Box(self.center - self.radius, self.center + self.radius)

    def to_dict(self) -> dict:
        return {"type": "ball", "center": self.center.tolist(),
                "radius": self.radius}

    def inflate(self, factor: float) -> "Ball":
        return Ball(self.center, self.radius * factor)


@dataclass(frozen=True)
class Annulus:
    """Spherical shell r_inner <= |x - center| <= r_outer."""

    center: np.ndarray
    r_inner: float
    r_outer: float

    def __post_init__(self):
        c = np.asarray(self.center, dtype=float)
        if not 0 <= self.r_inner < self.r_outer:
            raise ValueError("need 0 <= r_inner < r_outer")
        object.__setattr__(self, "center", c)

    @property
    def n(self) -> int:
        return self.center.shape[0]

    def sample(self, rng: np.random.Generator, size: int) -> np.ndarray:
        d = rng.standard_normal((size, self.n))
        d /= np.linalg.norm(d, axis=1, keepdims=True)
        u = rng.random(size)
        rn = self.r_inner ** self.n + u * (self.r_outer ** self.n - self.r_inner ** self.n)
        return self.center + d * (rn ** (1.0 / self.n))[:, None]

    def contains(self, pts: np.ndarray) -> np.ndarray:
        pts = np.atleast_2d(pts)
        r = np.linalg.norm(pts - self.center, axis=1)
        return (r >= self.r_inner) & (r <= self.r_outer)

    def bounding_box(self) -> Box:
        return Box(self.center - self.r_outer, self.center + self.r_outer)

    def to_dict(self) -> dict:
        return {"type": "annulus", "center": self.center.tolist(),
                "r_inner": self.r_inner, "r_outer": self.r_outer}

    def inflate(self, factor: float) -> "Annulus":
        return Annulus(self.center, self.r_inner / factor, self.r_outer * factor)


def region_from_dict(spec: dict):
    kind = spec.get("type")
    if kind == "box":
        return Box(np.asarray(spec["lo"], float), np.asarray(spec["hi"], float))
    if kind == "ball":
        return Ball(np.asarray(spec["center"], float), float(spec["radius"]))
    if kind == "annulus":
        return Annulus(np.asarray(spec["center"], float),
                       float(spec["r_inner"]), float(spec["r_outer"]))
    raise ValueError(f"unknown region type {kind!r}")


def sample_snapshots(fld: VectorField, region, n_traj: int, n_steps: int,
                     dt: float, seed: int) -> SnapshotSet:
    """Roll out n_traj seeded initial conditions and pair consecutive states.

    Deterministic given (seed, region, n_traj, n_steps, dt). Every
    trajectory contributes n_steps pairs tagged with its trajectory id.
    """
    if n_traj < 1 or n_steps < 1:
        raise ValueError("need at least one trajectory and one step")
    rng = np.random.default_rng(seed)
    x0 = region.sample(rng, n_traj)
    states, _ = integrate_rk4_batch(fld, x0, dt, n_steps)
    x = states[:, :-1, :].reshape(n_traj * n_steps, fld.n)
    y = states[:, 1:, :].reshape(n_traj * n_steps, fld.n)
    ids = np.repeat(np.arange(n_traj, dtype=np.int64), n_steps)
    return SnapshotSet(x=x, y=y, dt=float(dt), traj_ids=ids)


# ---------------------------------------------------------------------------
# snapshot persistence (CSV with a dt header line)

def save_snapshots(snap: SnapshotSet, path) -> None:
    n = snap.n
    cols = (["traj_id"] + [f"x_{i+1}" for i in range(n)]
            + [f"y_{i+1}" for i in range(n)])
    lines = [f"dt={snap.dt!r}", ",".join(cols)]
    for k in range(len(snap)):
        row = [str(int(snap.traj_ids[k]))]
        row += [repr(float(v)) for v in snap.x[k]]
        row += [repr(float(v)) for v in snap.y[k]]
        lines.append(",".join(row))
    tmp = str(path) + ".tmp"
    with open(tmp, "w") as fh:
        fh.write("\n".join(lines) + "\n")
    os.replace(tmp, path)


def load_snapshots(path) -> SnapshotSet:
    with open(path) as fh:
        header = fh.readline().strip()
        if not header.startswith("dt="):
            raise ValueError("snapshot file must start with a dt=<value> line")
        dt = float(header[3:])
        names = fh.readline().strip().split(",")
        if not names or names[0] != "traj_id":
            raise ValueError("snapshot file must have a traj_id column")
        n = (len(names) - 1) // 2
        ids, xs, ys = [], [], []
        for line in fh:
            line = line.strip()
            if not line:
                continue
            parts = line.split(",")
            ids.append(int(parts[0]))
            vals = [float(v) for v in parts[1:]]
            xs.append(vals[:n])
            ys.append(vals[n:])
    return SnapshotSet(x=np.array(xs), y=np.array(ys), dt=dt,
                       traj_ids=np.array(ids, dtype=np.int64))
