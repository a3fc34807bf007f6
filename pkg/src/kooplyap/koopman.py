"""Koopman matrix estimation and spectral machinery.

The one-step least-squares fit has the closed form K = Phi_XY pinv(Phi_XX)
with Phi_XY = Phi(Y) Phi(X)^T and Phi_XX = Phi(X) Phi(X)^T. The multi-step
refinement descends the T-step lifted prediction loss starting from that
closed form; eigenpairs of K^T give eigenfunctions psi(x) = v^T Phi(x) with
continuous rate lambda = log(mu)/dt on the principal branch.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .systems import SnapshotSet

#: singular values below this fraction of the largest are treated as zero;
#: monomial Gram matrices are badly conditioned at degree 6
SVD_CUTOFF = 1e-10

#: excludes the lambda=0 constant eigenfunction monomial dictionaries produce
DEFAULT_STABILITY_MARGIN = 1e-6

EIGEN_RESIDUAL_TOL = 1e-8


class NoStableEigenfunctionsError(RuntimeError):
    """No eigenvalue satisfies Re(lambda) < -margin."""


@dataclass
class KoopmanModel:
    dictionary: object  # MonomialDictionary or an encoder with evaluate_batch
    k_matrix: np.ndarray  # (N, N)
    dt: float
    residual_fro: float = float("nan")
    gram_cond: float = float("nan")

    def __post_init__(self):
        k = np.asarray(self.k_matrix, dtype=float)
        if k.ndim != 2 or k.shape[0] != k.shape[1]:
            raise ValueError("K must be square")
        if not np.all(np.isfinite(k)):
            raise ValueError("K must be finite")
        if self.dt <= 0:
            raise ValueError("dt must be positive")
        self.k_matrix = k


@dataclass(frozen=True)
class EigenPair:
    """Eigenpair of K^T: discrete mu, continuous lam = log(mu)/dt, unit v."""

    mu: complex
    lam: complex
    v: np.ndarray  # (N,) complex, unit 2-norm, phase-canonicalized
    has_conjugate: bool = False

    def __post_init__(self):
        v = np.ascontiguousarray(self.v, dtype=np.complex128)
        v.setflags(write=False)
        object.__setattr__(self, "v", v)


@dataclass
class Spectrum:
    pairs: list[EigenPair]
    dt: float
    n_dropped_zero: int = 0
    n_dropped_residual: int = 0

    def __len__(self) -> int:
        return len(self.pairs)


def _lift(dic, pts: np.ndarray) -> np.ndarray:
    return np.asarray(dic.evaluate_batch(pts))


def edmd_fit(snapshots: SnapshotSet, dic) -> KoopmanModel:
    """Closed-form one-step least-squares Koopman fit."""
    if len(snapshots) < 1:
        raise ValueError("need at least one snapshot pair")
    px = _lift(dic, snapshots.x).T  # (N, P)
    py = _lift(dic, snapshots.y).T
    if not np.any(px):
        raise ValueError("all-zero lifted data matrix")
    phi_xx = px @ px.T
    phi_xy = py @ px.T
    k = phi_xy @ np.linalg.pinv(phi_xx, rcond=SVD_CUTOFF)
    sv = np.linalg.svd(phi_xx, compute_uv=False)
    kept = sv[sv > SVD_CUTOFF * sv[0]]
    cond = float(sv[0] / kept[-1]) if kept.size else float("inf")
    resid = float(np.linalg.norm(py - k @ px))
    return KoopmanModel(dictionary=dic, k_matrix=k, dt=snapshots.dt,
                        residual_fro=resid, gram_cond=cond)


# ---------------------------------------------------------------------------
# multi-step refinement

@dataclass
class MultistepConfig:
    max_iters: int = 400
    grad_tol: float = 1e-10
    step_shrink: float = 0.5
    armijo: float = 1e-4
    window_stride: int = 1


def _windows(lifted: list[np.ndarray], horizon: int, stride: int):
    """Stack all (horizon+1)-long windows: returns (Z0, Ztargets)."""
    z0, targets = [], []
    for z in lifted:
        last = z.shape[0] - horizon - 1
        for k in range(0, last + 1, stride):
            z0.append(z[k])
            targets.append(z[k + 1:k + horizon + 1])
    if not z0:
        raise ValueError("no trajectory window of the requested horizon")
    return np.array(z0).T, np.array(targets).transpose(1, 2, 0)  # (N,W), (T,N,W)


def _forward_loss_grad(k: np.ndarray, z0: np.ndarray, targets: np.ndarray,
                       want_grad: bool = True):
    """Loss sum_p ||K^p z0 - z_p||^2 over all windows, with its K gradient.

    The gradient backpropagates through the linear recursion u_p = K u_{p-1}:
    adjoints run tot_p = 2(u_p - z_p) + K^T tot_{p+1} and accumulate
    grad += tot_p u_{p-1}^T.
    """
    horizon = targets.shape[0]
    us = [z0]
    loss = 0.0
    for p in range(1, horizon + 1):
        us.append(k @ us[-1])
        loss += float(np.sum((us[-1] - targets[p - 1]) ** 2))
    if not want_grad:
        return loss, None
    grad = np.zeros_like(k)
    tot = np.zeros_like(z0)
    for p in range(horizon, 0, -1):
        tot = 2.0 * (us[p] - targets[p - 1]) + (k.T @ tot if p < horizon else 0.0)
        grad += tot @ us[p - 1].T
    return loss, grad


def multistep_fit(trajectories, dic, horizon: int, k0: np.ndarray | None = None,
                  dt: float | None = None,
                  config: MultistepConfig | None = None) -> KoopmanModel:
    """Descend the multi-step lifted prediction loss with a fixed dictionary.

    `trajectories` is a SnapshotSet with trajectory grouping or a list of
    (steps+1, n) state arrays. Monotone by construction (Barzilai-Borwein
    steps safeguarded by Armijo backtracking), so the result never scores
    worse than k0; k0 defaults to the closed-form one-step fit.
    """
    cfg = config or MultistepConfig()
    if isinstance(trajectories, SnapshotSet):
        snap = trajectories
        states = snap.trajectories()
        dt = snap.dt
        if k0 is None:
            k0 = edmd_fit(snap, dic).k_matrix
    else:
        states = [np.asarray(s, dtype=float) for s in trajectories]
        if dt is None:
            raise ValueError("dt is required when passing raw trajectories")
        if k0 is None:
            x = np.vstack([s[:-1] for s in states])
            y = np.vstack([s[1:] for s in states])
            ids = np.concatenate([np.full(len(s) - 1, i, dtype=np.int64)
                                  for i, s in enumerate(states)])
            k0 = edmd_fit(SnapshotSet(x, y, dt, ids), dic).k_matrix
    if horizon < 1:
        raise ValueError("horizon must be >= 1")

    lifted = [_lift(dic, s) for s in states if s.shape[0] >= horizon + 1]
    z0, targets = _windows(lifted, horizon, cfg.window_stride)

    k = np.array(k0, dtype=float)
    loss, grad = _forward_loss_grad(k, z0, targets)
    if not np.isfinite(loss):
        raise FloatingPointError("non-finite multistep loss at k0")
    best_k, best_loss = k.copy(), loss
    gnorm2 = float(np.sum(grad * grad))
    step = 1.0 / (2.0 * float(np.sum(z0 * z0)) + 1e-30)  # safe for T=1 quadratic
    prev_k, prev_grad = None, None
    for _ in range(cfg.max_iters):
        if gnorm2 <= cfg.grad_tol * (1.0 + loss):
            break
        if prev_k is not None:
            dk = k - prev_k
            dg = grad - prev_grad
            denom = float(np.sum(dk * dg))
            if denom > 0:
                step = float(np.sum(dk * dk)) / denom
        accepted = False
        trial = step
        for _ in range(60):
            cand = k - trial * grad
            cand_loss, _ = _forward_loss_grad(cand, z0, targets, want_grad=False)
            if np.isfinite(cand_loss) and cand_loss <= loss - cfg.armijo * trial * gnorm2:
                accepted = True
                break
            trial *= cfg.step_shrink
        if not accepted:
            break
        prev_k, prev_grad = k, grad
        k = cand
        loss, grad = _forward_loss_grad(k, z0, targets)
        gnorm2 = float(np.sum(grad * grad))
        if loss < best_loss:
            best_loss, best_k = loss, k.copy()
    return KoopmanModel(dictionary=dic, k_matrix=best_k, dt=float(dt),
                        residual_fro=float(np.sqrt(best_loss)))


def forward_prediction_error(model: KoopmanModel, trajectories, horizon: int) -> float:
    """Mean squared T-step lifted prediction error (held-out evaluation)."""
    lifted = [_lift(model.dictionary, np.asarray(s, float)) for s in trajectories
              if np.asarray(s).shape[0] >= horizon + 1]
    z0, targets = _windows(lifted, horizon, stride=1)
    loss, _ = _forward_loss_grad(model.k_matrix, z0, targets, want_grad=False)
    return loss / z0.shape[1]


# ---------------------------------------------------------------------------
# spectrum

def eigen_decompose(model: KoopmanModel) -> Spectrum:
    """Full complex eigendecomposition of K^T, deterministically ordered.

    Eigenvalues with |mu| ~ 0 have no continuous-time rate and are dropped
    (counted in n_dropped_zero); pairs whose residual exceeds the documented
    bound are dropped and counted in n_dropped_residual. Ordering is by
    (Re lam, Im lam) ascending; eigenvector phase is canonicalized so the
    largest-modulus component is real positive.
    """
    k = model.k_matrix
    mus, vecs = np.linalg.eig(k.T)
    knorm = float(np.linalg.norm(k))
    zero_tol = 1e-15 * (1.0 + knorm)
    pairs, dropped_zero, dropped_resid = [], 0, 0
    for i in range(mus.shape[0]):
        mu = complex(mus[i])
        if abs(mu) <= zero_tol:
            dropped_zero += 1
            continue
        v = vecs[:, i].astype(np.complex128)
        resid = float(np.linalg.norm(k.T @ v - mu * v))
        if resid >= EIGEN_RESIDUAL_TOL * (1.0 + knorm):
            dropped_resid += 1
            continue
        v = v / np.linalg.norm(v)
        anchor = int(np.argmax(np.abs(v)))
        phase = v[anchor] / abs(v[anchor])
        v = v * np.conj(phase)
        lam = complex(np.log(mu) / model.dt)
        pairs.append(EigenPair(mu=mu, lam=lam, v=v))
    pairs.sort(key=lambda p: (p.lam.real, p.lam.imag))
    # flag conjugate partners (matching on mu, which is exact for real K)
    flagged = []
    for p in pairs:
        partner = any(q is not p and abs(q.mu - np.conj(p.mu)) <= 1e-9 * (1.0 + abs(p.mu))
                      for q in pairs)
        flagged.append(replace(p, has_conjugate=bool(partner and p.mu.imag != 0)))
    return Spectrum(pairs=flagged, dt=model.dt, n_dropped_zero=dropped_zero,
                    n_dropped_residual=dropped_resid)


def eval_eigenfunction(pair: EigenPair, dic, x) -> complex | np.ndarray:
    """psi(x) = v^T Phi(x) (plain transpose, no conjugation)."""
    pts = np.atleast_2d(np.asarray(x, dtype=float))
    vals = _lift(dic, pts) @ pair.v
    return complex(vals[0]) if np.asarray(x).ndim == 1 else vals


def empirical_eigen_residuals(spectrum_pairs, dic, snapshots: SnapshotSet) -> np.ndarray:
    """Worst-case |V_dot - Re(lam) V| per pair on snapshot data.

    V = |psi|^2 / 2 with the forward-difference V_dot; this is the same
    error statistic the Lyapunov bound fit uses, and ranks eigenfunctions by
    how well their decay law holds on data.
    """
    px = _lift(dic, snapshots.x)
    py = _lift(dic, snapshots.y)
    out = np.empty(len(spectrum_pairs))
    for i, p in enumerate(spectrum_pairs):
        vx = 0.5 * np.abs(px @ p.v) ** 2
        vy = 0.5 * np.abs(py @ p.v) ** 2
        vdot = (vy - vx) / snapshots.dt
        out[i] = float(np.max(np.abs(vdot - p.lam.real * vx)))
    return out


def select_stable(spectrum: Spectrum, m: int,
                  stability_margin: float = DEFAULT_STABILITY_MARGIN,
                  snapshots: SnapshotSet | None = None,
                  dic=None) -> list[EigenPair]:
    """Pick up to m stable eigenpairs, one per conjugate pair.

    Keeps Re(lam) < -margin; of each conjugate pair only the Im(lam) >= 0
    member survives (both induce the same |psi|^2). When snapshot data is
    given the survivors are ranked by ascending empirical eigen-residual,
    otherwise spectral order is kept. Raises NoStableEigenfunctionsError when
    nothing qualifies.
    """
    stable = [p for p in spectrum.pairs if p.lam.real < -stability_margin]
    dedup = []
    for p in stable:
        if p.has_conjugate and p.lam.imag < 0:
            partner_present = any(
                abs(q.mu - np.conj(p.mu)) <= 1e-9 * (1.0 + abs(p.mu))
                for q in stable)
            if partner_present:
                continue
        dedup.append(p)
    if not dedup:
        raise NoStableEigenfunctionsError(
            f"no eigenvalue with Re(lambda) < {-stability_margin}")
    if snapshots is not None:
        if dic is None:
            raise ValueError("ranking by empirical residual needs the dictionary")
        resid = empirical_eigen_residuals(dedup, dic, snapshots)
        order = np.argsort(resid, kind="stable")
        dedup = [dedup[i] for i in order]
    return dedup[:m]
