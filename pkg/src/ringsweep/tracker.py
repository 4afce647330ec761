"""Jerk-limited receding-horizon tracking of moving path references.

Each robot is modeled per axis as a triple integrator driven by jerk. The
horizon cost penalizes position and velocity error against a reference
window sliding along the patrol path, plus jerk effort. Velocity,
acceleration and jerk all carry box limits. Because the weights and limits
are per-axis diagonal, the three axes decouple into independent small QPs
that share one condensed matrix set; the solver batches every robot and
axis through the same cached factorization.

The QP is solved with an operator-splitting iteration (ADMM with over-
relaxation, followed by a polish solve on the detected active set and a
tightened retry when the polish cannot certify optimality), so there is no
external solver dependency and runs are bit-reproducible.
"""

from dataclasses import dataclass
from functools import lru_cache

import numpy as np


@dataclass(frozen=True)
class MpcConfig:
    horizon: int = 20
    dt: float = 0.05
    q_pos: float = 20.0
    q_vel: float = 2.0
    r_jerk: float = 0.01
    v_max: float = 10.0
    a_max: float = 20.0
    j_max: float = 100.0
    eps: float = 1e-6
    max_iter: int = 500
    rho: float = 0.2
    sigma: float = 1e-6
    alpha: float = 1.6

    def __post_init__(self):
        if self.horizon < 1:
            raise ValueError(f"horizon must be >= 1, got {self.horizon}")
        if self.dt <= 0:
            raise ValueError(f"dt must be positive, got {self.dt}")
        for name in ("q_pos", "q_vel", "r_jerk", "v_max", "a_max", "j_max"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if not 0 < self.alpha < 2:
            raise ValueError(f"relaxation alpha must be in (0, 2), got {self.alpha}")


def axis_matrices(dt):
    """Exact discretization of the jerk-driven triple integrator."""
    A = np.array([[1.0, dt, dt * dt / 2.0], [0.0, 1.0, dt], [0.0, 0.0, 1.0]])
    B = np.array([dt**3 / 6.0, dt * dt / 2.0, dt])
    return A, B


@dataclass(frozen=True)
class _Condensed:
    Sx: np.ndarray       # (3n, 3) free response map
    Su: np.ndarray       # (3n, n) forced response map
    P: np.ndarray        # (n, n) condensed hessian
    q_map: np.ndarray    # (n, 3n) maps stacked state residuals to linear cost
    Ac: np.ndarray       # (3n, n) scaled rows: jerk, velocity, acceleration
    Ax0: np.ndarray      # (3n, 3) x0 contribution to constraint rows
    row_scale: np.ndarray  # (3n,) equilibration applied to Ac rows
    kkt_chol: np.ndarray   # cholesky factor of P + sigma I + rho Ac^T Ac


@lru_cache(maxsize=16)
def _condense(cfg):
    n = cfg.horizon
    A, B = axis_matrices(cfg.dt)
    powers = [np.eye(3)]
    for _ in range(n):
        powers.append(A @ powers[-1])
    Sx = np.zeros((3 * n, 3))
    Su = np.zeros((3 * n, n))
    for k in range(n):
        Sx[3 * k : 3 * k + 3] = powers[k + 1]
        for j in range(k + 1):
            Su[3 * k : 3 * k + 3, j] = powers[k - j] @ B
    w = np.zeros(3 * n)
    w[0::3] = cfg.q_pos
    w[1::3] = cfg.q_vel
    P = Su.T @ (w[:, None] * Su) + cfg.r_jerk * np.eye(n)
    P = 0.5 * (P + P.T)
    q_map = Su.T * w[None, :]

    Ac = np.vstack([np.eye(n), Su[1::3], Su[2::3]])
    Ax0 = np.vstack([np.zeros((n, 3)), Sx[1::3], Sx[2::3]])
    row_scale = 1.0 / np.maximum(np.abs(Ac).sum(axis=1), 1e-12)
    Ac_scaled = Ac * row_scale[:, None]
    M = P + cfg.sigma * np.eye(n) + cfg.rho * (Ac_scaled.T @ Ac_scaled)
    return _Condensed(
        Sx=Sx, Su=Su, P=P, q_map=q_map, Ac=Ac_scaled, Ax0=Ax0,
        row_scale=row_scale, kkt_chol=np.linalg.cholesky(M),
    )


def _chol_solve(L, rhs):
    return np.linalg.solve(L.T, np.linalg.solve(L, rhs))


_BIG = 1e30


@dataclass
class SolveInfo:
    iterations: int
    primal_residual: float
    dual_residual: float
    polished: bool
    retried: bool
    released: int = 0


class BatchMpcSolver:
    """Solves every robot-axis tracking QP in one batched iteration.

    States arrive as (m, 9) arrays laid out [x, vx, ax, y, vy, ay, z, vz, az];
    references as (m, n, 3) position and velocity windows. The first jerk of
    each solution is returned for zero-order-hold application.
    """

    def __init__(self, cfg):
        self.cfg = cfg
        self.mats = _condense(cfg)
        self._warm_x = None
        self._warm_y = None

    def reset(self):
        self._warm_x = None
        self._warm_y = None

    def solve(self, states, ref_pos, ref_vel):
        cfg, mats = self.cfg, self.mats
        n = cfg.horizon
        states = np.asarray(states, dtype=float)
        m = states.shape[0]
        ncols = 3 * m

        # per-axis initial states: column j holds (robot j // 3, axis j % 3)
        x0 = states.reshape(ncols, 3).T
        ref = np.zeros((3 * n, ncols))
        ref[0::3] = np.asarray(ref_pos, dtype=float).transpose(1, 0, 2).reshape(n, ncols)
        ref[1::3] = np.asarray(ref_vel, dtype=float).transpose(1, 0, 2).reshape(n, ncols)

        free = mats.Sx @ x0
        q = mats.q_map @ (free - ref)

        lo = np.empty((3 * n, ncols))
        hi = np.empty((3 * n, ncols))
        lo[:n], hi[:n] = -cfg.j_max, cfg.j_max
        off = mats.Ax0 @ x0
        lo[n : 2 * n] = -cfg.v_max - off[n : 2 * n]
        hi[n : 2 * n] = cfg.v_max - off[n : 2 * n]
        lo[2 * n :] = -cfg.a_max - off[2 * n :]
        hi[2 * n :] = cfg.a_max - off[2 * n :]
        lo *= mats.row_scale[:, None]
        hi *= mats.row_scale[:, None]
        # scaled rows have unit 1-norm, so inputs inside the jerk box can only
        # move a state row by +-j_max; a row whose box lies beyond that reach
        # (a disturbance-kicked state no amount of braking can fix this step)
        # would make the QP infeasible, so release it and let the cost pull
        # the prediction back in
        bad = np.zeros_like(lo, dtype=bool)
        bad[n:] = (lo[n:] > cfg.j_max) | (hi[n:] < -cfg.j_max)
        released = int(bad.sum())
        if released:
            lo[bad], hi[bad] = -_BIG, _BIG

        if self._warm_x is not None and self._warm_x.shape == (n, ncols):
            x, y = self._warm_x, self._warm_y
        else:
            x, y = np.zeros((n, ncols)), np.zeros((3 * n, ncols))
        x, y, iters, pri, dua = self._admm(q, lo, hi, x, y, cfg.eps, cfg.max_iter)
        self._warm_x, self._warm_y = x.copy(), y.copy()

        x_pol, ok = self._polish(x, y, q, lo, hi)
        retried = False
        if not np.all(ok):
            retried = True
            x, y, it2, pri, dua = self._admm(
                q, lo, hi, x, y, min(cfg.eps, 1e-10), max(cfg.max_iter, 4000)
            )
            iters += it2
            x_pol2, ok2 = self._polish(x, y, q, lo, hi)
            keep = ok2 & ~ok
            x_pol[:, keep] = x_pol2[:, keep]
            x_pol[:, ~(ok | ok2)] = x[:, ~(ok | ok2)]

        info = SolveInfo(
            iterations=iters, primal_residual=pri, dual_residual=dua,
            polished=bool(np.all(ok)), retried=retried, released=released,
        )
        # the actuator limit is hard no matter what the solve did
        jerk_all = np.clip(x_pol.T.reshape(m, 3, n), -cfg.j_max, cfg.j_max)
        return jerk_all[:, :, 0], jerk_all, info

    def _admm(self, q, lo, hi, x, y, eps, max_iter):
        cfg, mats = self.cfg, self.mats
        rho, sigma, alpha = cfg.rho, cfg.sigma, cfg.alpha
        z = np.clip(mats.Ac @ x, lo, hi)
        pri = dua = np.inf
        iters = 0
        for iters in range(1, max_iter + 1):
            rhs = sigma * x - q + mats.Ac.T @ (rho * z - y)
            x = _chol_solve(mats.kkt_chol, rhs)
            z_tilde = mats.Ac @ x
            z_rel = alpha * z_tilde + (1.0 - alpha) * z
            z_new = np.clip(z_rel + y / rho, lo, hi)
            y = y + rho * (z_rel - z_new)
            z = z_new
            if iters % 10 == 0 or iters == max_iter:
                pri = float(np.max(np.abs(mats.Ac @ x - z)))
                dua = float(np.max(np.abs(mats.P @ x + q + mats.Ac.T @ y)))
                if pri <= eps and dua <= eps:
                    break
        return x, y, iters, pri, dua

    def _polish(self, x, y, q, lo, hi):
        """Equality-solve each column's detected active set.

        A column counts as certified when the polished point is feasible and
        its multipliers carry the right signs, which pins the exact optimum
        of that strictly convex QP.
        """
        cfg, mats = self.cfg, self.mats
        n = cfg.horizon
        z = mats.Ac @ x
        tol = max(10.0 * cfg.eps, 1e-9)
        x_out = x.copy()
        ok = np.zeros(x.shape[1], dtype=bool)
        for col in range(x.shape[1]):
            low = (z[:, col] - lo[:, col] < tol) & (y[:, col] < -tol)
            upp = (hi[:, col] - z[:, col] < tol) & (y[:, col] > tol)
            act = np.flatnonzero(low | upp)
            if act.size == 0:
                cand = np.linalg.solve(mats.P, -q[:, col])
                nu = np.zeros(0)
            else:
                Aact = mats.Ac[act]
                k = act.size
                kkt = np.zeros((n + k, n + k))
                kkt[:n, :n] = mats.P + 1e-12 * np.eye(n)
                kkt[:n, n:] = Aact.T
                kkt[n:, :n] = Aact
                kkt[n:, n:] = -1e-12 * np.eye(k)
                rhs = np.concatenate(
                    [-q[:, col], np.where(low[act], lo[act, col], hi[act, col])]
                )
                try:
                    sol = np.linalg.solve(kkt, rhs)
                except np.linalg.LinAlgError:
                    continue
                cand, nu = sol[:n], sol[n:]
            viol = float(
                np.maximum(
                    mats.Ac @ cand - hi[:, col], lo[:, col] - mats.Ac @ cand
                ).max(initial=0.0)
            )
            signs_ok = bool(
                np.all(nu[low[act]] <= tol) and np.all(nu[upp[act]] >= -tol)
            ) if act.size else True
            if viol <= 1e-8 and signs_ok:
                x_out[:, col] = cand
                ok[col] = True
        return x_out, ok


def propagate(state, jerk, dt):
    """Advance 9-state triple integrators under constant jerk for dt."""
    state = np.asarray(state, dtype=float)
    jerk = np.asarray(jerk, dtype=float)
    A, B = axis_matrices(dt)
    flat = state.reshape(-1, 3, 3)
    adv = flat @ A.T + jerk.reshape(-1, 3)[:, :, None] * B[None, None, :]
    return adv.reshape(state.shape)


def reference_window(curve, theta, omega, cfg):
    """Sample the path at the phases the tracked point will occupy.

    Returns (n, 3) position and velocity windows for one robot whose desired
    phase advances at omega from theta.
    """
    k = np.arange(1, cfg.horizon + 1)
    gammas = theta + omega * cfg.dt * k
    return curve.point(gammas), curve.velocity(gammas, omega)


def tracking_error(state, target):
    """Euclidean position error of a 9-state against a 3-point."""
    pos = np.asarray(state, dtype=float)[..., 0::3]
    return float(np.linalg.norm(pos - np.asarray(target, dtype=float)))
