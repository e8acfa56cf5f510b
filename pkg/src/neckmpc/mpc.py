"""Collocation-horizon model predictive controller.

The controller forecasts over N intervals of length T_sp with d interior
evaluation nodes per interval (right-Radau placement by default, so the last
node of each interval coincides with the interval boundary).  The decision
variables are piecewise-constant joint torques per interval; the objective is
quadrature-weighted squared joint rates (somatosensory conflict against a
zero-rate target) plus squared torques (muscle effort), with joint limits as
a smooth quadratic penalty and torque bounds as a hard box.

The nonlinear program is solved by Gauss-Newton iterations: the prediction is
linearized exactly through the integrator stages, the normal equations are
factored by a Riccati sweep over the intervals, and steps are clipped to the
torque box under a backtracking line search.  Convergence is declared on the
projected-gradient norm.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field

import numpy as np
from numba import njit
from scipy.special import roots_jacobi

from .plant import (N_DOF, PlantParams, PlantState, JointTorques, _plant_ode,
                    _plant_jac, gravity_compensation)

#: reported when the predicted state leaves the plausible configuration range
PREDICT_DIVERGENCE_LIMIT = math.pi

#: rate magnitude beyond which a predicted trajectory is treated as diverged
PREDICT_RATE_LIMIT = 200.0


def _plant_stop() -> np.ndarray:
    """State envelope outside which a plant prediction counts as diverged."""
    return np.concatenate([np.full(N_DOF, PREDICT_DIVERGENCE_LIMIT),
                           np.full(N_DOF, PREDICT_RATE_LIMIT)])


def radau_fractions(d: int) -> np.ndarray:
    """Right-Radau node fractions on (0, 1]: interior Jacobi roots plus 1."""
    if d < 1:
        raise ValueError("need at least one node per interval")
    if d == 1:
        return np.array([1.0])
    x, _ = roots_jacobi(d - 1, 1.0, 0.0)
    return np.concatenate([(x + 1.0) / 2.0, [1.0]])


def quadrature_weights(fractions: np.ndarray) -> np.ndarray:
    """Interpolatory quadrature weights on [0, 1] for the given nodes."""
    fr = np.asarray(fractions, dtype=float)
    d = len(fr)
    V = np.vander(fr, d, increasing=True).T
    m = 1.0 / np.arange(1, d + 1)
    return np.linalg.solve(V, m)


@dataclass
class HorizonGrid:
    """Forecast time points: interval boundaries plus interior nodes."""

    t0: float
    interval_count: int
    interval_length: float
    node_fractions: np.ndarray
    nodes: np.ndarray

    @property
    def horizon(self) -> float:
        return self.interval_count * self.interval_length


@dataclass
class WeightVector:
    """The ten cost weights: five muscle-effort, five somatosensory-conflict.

    Order follows the joint layout [lower_roll, lower_pitch, upper_roll,
    upper_pitch, upper_yaw]; mapping keys are tx1, ty1, tx2, ty2, tz2 for
    effort and wx1, wy1, wx2, wy2, wz2 for conflict.
    """

    effort: np.ndarray
    conflict: np.ndarray

    EFFORT_KEYS = ("tx1", "ty1", "tx2", "ty2", "tz2")
    CONFLICT_KEYS = ("wx1", "wy1", "wx2", "wy2", "wz2")

    def __post_init__(self):
        self.effort = np.asarray(self.effort, dtype=float)
        self.conflict = np.asarray(self.conflict, dtype=float)
        if self.effort.shape != (N_DOF,) or self.conflict.shape != (N_DOF,):
            raise ValueError(f"effort and conflict must each hold {N_DOF} weights")
        if not (np.all(np.isfinite(self.effort)) and np.all(np.isfinite(self.conflict))):
            raise ValueError("weights must be finite")
        if np.any(self.effort < 0) or np.any(self.conflict < 0):
            raise ValueError("weights must be non-negative")

    @classmethod
    def from_mapping(cls, effort: dict, conflict: dict) -> "WeightVector":
        try:
            e = [float(effort[k]) for k in cls.EFFORT_KEYS]
            c = [float(conflict[k]) for k in cls.CONFLICT_KEYS]
        except KeyError as err:
            raise ValueError(f"missing weight entry {err}") from None
        return cls(np.array(e), np.array(c))

    def as_array(self) -> np.ndarray:
        return np.concatenate([self.effort, self.conflict])

    @classmethod
    def from_array(cls, w: np.ndarray) -> "WeightVector":
        w = np.asarray(w, dtype=float)
        return cls(w[:N_DOF].copy(), w[N_DOF:].copy())


#: weight vector identified for the lateral task (effort tx1..tz2, conflict wx1..wz2)
TUNED_LATERAL_WEIGHTS = WeightVector(
    effort=np.array([17.68, 78.92, 63.77, 15.53, 33.90]),
    conflict=np.array([70.84, 15.28, 7.85, 41.40, 5.17]))

#: earlier sagittal-identification values for the four pitch-axis weights
#: (remaining entries carried over from the lateral vector)
PRIOR_SAGITTAL_WEIGHTS = WeightVector(
    effort=np.array([17.68, 76.96, 63.77, 3.37, 33.90]),
    conflict=np.array([70.84, 8.26, 7.85, 1.62, 5.17]))


@dataclass
class MpcConfig:
    interval_count: int = 10
    interval_length: float = 0.040
    nodes_per_interval: int = 4
    node_fractions: np.ndarray | None = None
    control_period: float = 0.010
    torque_bounds: np.ndarray = field(
        default_factory=lambda: np.array([30.0, 30.0, 20.0, 20.0, 20.0]))
    joint_limits: np.ndarray = field(
        default_factory=lambda: np.radians([45.0, 45.0, 70.0, 70.0, 70.0]))
    limit_penalty: float = 1.0e4
    max_iterations: int = 30
    tolerance: float = 1.0e-6
    warm_start: bool = True
    preview: str = "none"

    def __post_init__(self):
        self.torque_bounds = np.asarray(self.torque_bounds, dtype=float)
        self.joint_limits = np.asarray(self.joint_limits, dtype=float)
        if self.interval_count < 1 or self.nodes_per_interval < 1:
            raise ValueError("interval_count and nodes_per_interval must be >= 1")
        if self.interval_length <= 0 or self.control_period <= 0:
            raise ValueError("interval_length and control_period must be positive")
        if np.any(self.torque_bounds <= 0) or np.any(self.joint_limits <= 0):
            raise ValueError("bounds must be positive")
        if self.preview not in ("none", "full"):
            raise ValueError("preview must be 'none' or 'full'")
        if self.node_fractions is not None:
            fr = np.asarray(self.node_fractions, dtype=float)
            if np.any(fr <= 0) or np.any(fr > 1) or np.any(np.diff(fr) <= 0):
                raise ValueError("node fractions must be strictly increasing in (0, 1]")
            self.node_fractions = fr

    def fractions(self) -> np.ndarray:
        if self.node_fractions is not None:
            return self.node_fractions
        return radau_fractions(self.nodes_per_interval)


@dataclass
class MpcSolution:
    u0: JointTorques
    controls: np.ndarray            # (N, 5) piecewise-constant torques
    trajectory: np.ndarray          # (n_nodes, 10) predicted [q, qdot] at grid nodes
    grid: HorizonGrid
    cost: float                     # conflict + effort terms only
    iterations: int
    converged: bool
    solve_time: float


def build_horizon(t0: float, cfg: MpcConfig) -> HorizonGrid:
    """Forecast node set: {t0} U {t_k + T_sp tau_j} U {t_N}, sorted, merged."""
    fr = cfg.fractions()
    offsets = [0.0]
    for k in range(cfg.interval_count):
        for tau in fr:
            offsets.append((k + tau) * cfg.interval_length)
    offsets.append(cfg.interval_count * cfg.interval_length)
    offsets.sort()
    merged = [offsets[0]]
    tol = 1e-12 * max(1.0, cfg.interval_count * cfg.interval_length)
    for o in offsets[1:]:
        if o - merged[-1] > tol:
            merged.append(o)
    nodes = t0 + np.asarray(merged)
    return HorizonGrid(t0=t0, interval_count=cfg.interval_count,
                       interval_length=cfg.interval_length,
                       node_fractions=fr.copy(), nodes=nodes)


# ---------------------------------------------------------------------------
# jitted solver core (generic over the prediction model)
# ---------------------------------------------------------------------------


@njit(cache=True)
def _rollout(dyn, x0, U, P, h, ay_st, sub_int, x_stop):
    """Integrate the model over the horizon substeps.

    Flags the rollout infeasible (and stops) as soon as any state component
    leaves the ``x_stop`` envelope or turns non-finite, so the solver never
    linearizes around degenerate configurations.
    """
    S = h.shape[0]
    nx = x0.shape[0]
    X = np.empty((S + 1, nx))
    X[0] = x0
    ok = True
    for s in range(S):
        u = U[sub_int[s]]
        x = X[s]
        hs = h[s]
        k1 = dyn(x, u, ay_st[s, 0], P)
        k2 = dyn(x + 0.5 * hs * k1, u, ay_st[s, 1], P)
        k3 = dyn(x + 0.5 * hs * k2, u, ay_st[s, 1], P)
        k4 = dyn(x + hs * k3, u, ay_st[s, 2], P)
        xn = x + (hs / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
        X[s + 1] = xn
        for i in range(nx):
            if not (np.isfinite(xn[i]) and abs(xn[i]) <= x_stop[i]):
                ok = False
        if not ok:
            for r in range(s + 2, S + 1):
                X[r] = xn
            break
    return X, ok


@njit(cache=True)
def _cost_terms(X, U, node_w, w_rate, eff_w, x_lim, rho):
    """Total objective F = J + limit penalty, and the pure cost J."""
    S = node_w.shape[0]
    nx = X.shape[1]
    J = 0.0
    pen = 0.0
    for s in range(S):
        x = X[s + 1]
        wn = node_w[s]
        for i in range(nx):
            if w_rate[i] > 0.0:
                J += wn * w_rate[i] * x[i] * x[i]
            if np.isfinite(x_lim[i]):
                over = abs(x[i]) - x_lim[i]
                if over > 0.0:
                    pen += wn * rho * over * over
    N, nu = U.shape
    for k in range(N):
        for i in range(nu):
            J += eff_w[i] * U[k, i] * U[k, i]
    return J + pen, J


@njit(cache=True)
def _linearize(dyn_jac, X, U, P, h, ay_st, sub_int):
    """Exact per-substep transition Jacobians through the integrator stages."""
    S = h.shape[0]
    nx = X.shape[1]
    nu = U.shape[1]
    Phis = np.empty((S, nx, nx))
    Psis = np.empty((S, nx, nu))
    for s in range(S):
        u = U[sub_int[s]]
        hs = h[s]
        x = X[s]
        f1, A1, B1 = dyn_jac(x, u, ay_st[s, 0], P)
        x2 = x + 0.5 * hs * f1
        f2, A2, B2 = dyn_jac(x2, u, ay_st[s, 1], P)
        x3 = x + 0.5 * hs * f2
        f3, A3, B3 = dyn_jac(x3, u, ay_st[s, 1], P)
        x4 = x + hs * f3
        f4, A4, B4 = dyn_jac(x4, u, ay_st[s, 2], P)

        # dk_i/d(x,u) through the stage chain rule
        dk1x = A1
        dk1u = B1
        dk2x = A2 + (0.5 * hs) * (A2 @ dk1x)
        dk2u = B2 + (0.5 * hs) * (A2 @ dk1u)
        dk3x = A3 + (0.5 * hs) * (A3 @ dk2x)
        dk3u = B3 + (0.5 * hs) * (A3 @ dk2u)
        dk4x = A4 + hs * (A4 @ dk3x)
        dk4u = B4 + hs * (A4 @ dk3u)

        Phi = (hs / 6.0) * (dk1x + 2.0 * dk2x + 2.0 * dk3x + dk4x)
        for i in range(nx):
            Phi[i, i] += 1.0
        Phis[s] = Phi
        Psis[s] = (hs / 6.0) * (dk1u + 2.0 * dk2u + 2.0 * dk3u + dk4u)
    return Phis, Psis


@njit(cache=True)
def _node_grads(X, node_w, w_rate, x_lim, rho):
    """Gradient and Gauss-Newton diagonal of the node cost at every node."""
    S = node_w.shape[0]
    nx = X.shape[1]
    qxs = np.zeros((S, nx))
    Qds = np.zeros((S, nx))
    for s in range(S):
        x = X[s + 1]
        wn = node_w[s]
        for i in range(nx):
            if w_rate[i] > 0.0:
                qxs[s, i] += 2.0 * wn * w_rate[i] * x[i]
                Qds[s, i] += 2.0 * wn * w_rate[i]
            if np.isfinite(x_lim[i]):
                over = abs(x[i]) - x_lim[i]
                if over > 0.0:
                    sgn = 1.0 if x[i] > 0.0 else -1.0
                    qxs[s, i] += 2.0 * wn * rho * over * sgn
                    Qds[s, i] += 2.0 * wn * rho
    return qxs, Qds


@njit(cache=True)
def _gradient(Phis, Psis, qxs, sub_int, U, eff_w):
    """Exact objective gradient with respect to the interval controls."""
    S, nx, nu = Psis.shape
    N = U.shape[0]
    g = np.zeros((N, nu))
    lam = np.zeros(nx)
    for s in range(S - 1, -1, -1):
        lam = lam + qxs[s]
        k = sub_int[s]
        for j in range(nu):
            acc = 0.0
            for i in range(nx):
                acc += Psis[s, i, j] * lam[i]
            g[k, j] += acc
        lam = Phis[s].T.copy() @ lam
    for k in range(N):
        for j in range(nu):
            g[k, j] += 2.0 * eff_w[j] * U[k, j]
    return g


@njit(cache=True)
def _condense(Phis, Psis, qxs, Qds, sub_int, N, eff_w, U):
    """Per-interval transition and quadratic cost terms for the Riccati sweep."""
    S, nx, nu = Psis.shape
    PhiI = np.empty((N, nx, nx))
    PsiI = np.empty((N, nx, nu))
    Qh = np.zeros((N, nx, nx))
    Nh = np.zeros((N, nx, nu))
    Rh = np.zeros((N, nu, nu))
    qh = np.zeros((N, nx))
    rh = np.zeros((N, nu))
    Phi_acc = np.empty((nx, nx))
    Psi_acc = np.empty((nx, nu))
    for k in range(N):
        for i in range(nx):
            for j in range(nx):
                Phi_acc[i, j] = 1.0 if i == j else 0.0
            for j in range(nu):
                Psi_acc[i, j] = 0.0
        for j in range(nu):
            Rh[k, j, j] = 2.0 * eff_w[j]
            rh[k, j] = 2.0 * eff_w[j] * U[k, j]
        s0 = -1
        for s in range(S):
            if sub_int[s] == k:
                if s0 < 0:
                    s0 = s
                Phi_acc = Phis[s] @ Phi_acc
                Psi_acc = Phis[s] @ Psi_acc + Psis[s]
                # node cost at the end of this substep
                for i in range(nx):
                    qd = Qds[s, i]
                    qx = qxs[s, i]
                    if qd != 0.0 or qx != 0.0:
                        for a in range(nx):
                            pa = Phi_acc[i, a]
                            if qx != 0.0:
                                qh[k, a] += qx * pa
                            if qd != 0.0 and pa != 0.0:
                                for b in range(a, nx):
                                    Qh[k, a, b] += qd * pa * Phi_acc[i, b]
                                for b in range(nu):
                                    Nh[k, a, b] += qd * pa * Psi_acc[i, b]
                        for a in range(nu):
                            sa = Psi_acc[i, a]
                            if qx != 0.0:
                                rh[k, a] += qx * sa
                            if qd != 0.0 and sa != 0.0:
                                for b in range(a, nu):
                                    Rh[k, a, b] += qd * sa * Psi_acc[i, b]
        for a in range(nx):
            for b in range(a):
                Qh[k, a, b] = Qh[k, b, a]
        for a in range(nu):
            for b in range(a):
                Rh[k, a, b] = Rh[k, b, a]
        PhiI[k] = Phi_acc
        PsiI[k] = Psi_acc
    return PhiI, PsiI, Qh, Nh, Rh, qh, rh


@njit(cache=True)
def _chol_solve_mat(A, B):
    """Solve A X = B for SPD A (in-place factor of a copy); returns success."""
    n = A.shape[0]
    L = A.copy()
    for j in range(n):
        d = L[j, j]
        for k in range(j):
            d -= L[j, k] * L[j, k]
        if d <= 0.0:
            return False, B
        d = math.sqrt(d)
        L[j, j] = d
        for i in range(j + 1, n):
            s = L[i, j]
            for k in range(j):
                s -= L[i, k] * L[j, k]
            L[i, j] = s / d
    m = B.shape[1]
    X = B.copy()
    for c in range(m):
        for i in range(n):
            s = X[i, c]
            for k in range(i):
                s -= L[i, k] * X[k, c]
            X[i, c] = s / L[i, i]
        for i in range(n - 1, -1, -1):
            s = X[i, c]
            for k in range(i + 1, n):
                s -= L[k, i] * X[k, c]
            X[i, c] = s / L[i, i]
    return True, X


@njit(cache=True)
def _riccati_step(PhiI, PsiI, Qh, Nh, Rh, qh, rh, mu):
    """Newton step of the quadratic model via a backward interval sweep."""
    N, nx, nu = PsiI.shape
    dU = np.zeros((N, nu))
    Ks = np.empty((N, nu, nx))
    ks = np.empty((N, nu))
    V = np.zeros((nx, nx))
    v = np.zeros(nx)
    for k in range(N - 1, -1, -1):
        Phi = PhiI[k]
        Psi = PsiI[k]
        PhiT = Phi.T.copy()
        PsiT = Psi.T.copy()
        VPhi = V @ Phi
        VPsi = V @ Psi
        Qxx = Qh[k] + PhiT @ VPhi
        Quu = Rh[k] + PsiT @ VPsi
        Qux = Nh[k].T.copy() + PsiT @ VPhi
        qx = qh[k] + PhiT @ v
        qu = rh[k] + PsiT @ v
        for j in range(nu):
            Quu[j, j] += mu
        RHS = np.empty((nu, nx + 1))
        for a in range(nu):
            RHS[a, 0] = -qu[a]
            for b in range(nx):
                RHS[a, 1 + b] = -Qux[a, b]
        ok, sol = _chol_solve_mat(Quu, RHS)
        if not ok:
            return False, dU, Ks, ks
        kff = sol[:, 0].copy()
        K = sol[:, 1:].copy()
        ks[k] = kff
        Ks[k] = K
        # value recursion (Joseph-free standard form)
        KT = K.T.copy()
        QuxT = Qux.T.copy()
        V = Qxx + KT @ (Quu @ K) + KT @ Qux + QuxT @ K
        v = qx + KT @ (Quu @ kff) + KT @ qu + QuxT @ kff
        for a in range(nx):
            for b in range(a):
                m = 0.5 * (V[a, b] + V[b, a])
                V[a, b] = m
                V[b, a] = m
    dx = np.zeros(nx)
    for k in range(N):
        du = ks[k] + Ks[k] @ dx
        dU[k] = du
        dx = PhiI[k] @ dx + PsiI[k] @ du
    return True, dU, Ks, ks


@njit(cache=True)
def _clip_box(U, lb, ub):
    N, nu = U.shape
    out = np.empty_like(U)
    for k in range(N):
        for j in range(nu):
            u = U[k, j]
            if u < lb[j]:
                u = lb[j]
            elif u > ub[j]:
                u = ub[j]
            out[k, j] = u
    return out


@njit(cache=True)
def _solve_core(dyn, dyn_jac, x0, U0, P, h, ay_st, sub_int, node_w,
                w_rate, eff_w, x_lim, rho, u_lb, u_ub, tol, max_iter, x_stop):
    U = _clip_box(U0, u_lb, u_ub)
    X, ok = _rollout(dyn, x0, U, P, h, ay_st, sub_int, x_stop)
    F, J = _cost_terms(X, U, node_w, w_rate, eff_w, x_lim, rho)
    if not ok:
        return U, X, F, J, 0, False
    N = U.shape[0]
    nu = U.shape[1]
    mu = 0.0
    iters = 0
    converged = False
    for _ in range(max_iter):
        Phis, Psis = _linearize(dyn_jac, X, U, P, h, ay_st, sub_int)
        qxs, Qds = _node_grads(X, node_w, w_rate, x_lim, rho)
        g = _gradient(Phis, Psis, qxs, sub_int, U, eff_w)
        # projected gradient norm for the box
        pg = 0.0
        for k in range(N):
            for j in range(nu):
                step = U[k, j] - g[k, j]
                if step < u_lb[j]:
                    step = u_lb[j]
                elif step > u_ub[j]:
                    step = u_ub[j]
                d = abs(U[k, j] - step)
                if d > pg:
                    pg = d
        if pg < tol:
            converged = True
            break
        iters += 1
        PhiI, PsiI, Qh, Nh, Rh, qh, rh = _condense(
            Phis, Psis, qxs, Qds, sub_int, N, eff_w, U)
        progress = False
        for _attempt in range(10):
            ok_r, dU, _Ks, _ks = _riccati_step(PhiI, PsiI, Qh, Nh, Rh, qh, rh, mu)
            if ok_r:
                Ufull = _clip_box(U + dU, u_lb, u_ub)
                dd = 0.0
                for k in range(N):
                    for j in range(nu):
                        dd += g[k, j] * (Ufull[k, j] - U[k, j])
                if dd < 0.0:
                    alpha = 1.0
                    for _ls in range(14):
                        Uc = _clip_box(U + alpha * dU, u_lb, u_ub)
                        Xc, okc = _rollout(dyn, x0, Uc, P, h, ay_st, sub_int, x_stop)
                        if okc:
                            Fc, Jc = _cost_terms(Xc, Uc, node_w, w_rate, eff_w,
                                                 x_lim, rho)
                            if Fc <= F + 1e-4 * alpha * dd:
                                U = Uc
                                X = Xc
                                F = Fc
                                J = Jc
                                progress = True
                                break
                        alpha *= 0.5
            if progress:
                if mu > 0.0:
                    mu *= 0.2
                    if mu < 1e-12:
                        mu = 0.0
                break
            mu = 1e-4 if mu == 0.0 else mu * 10.0
            if mu > 1e10:
                break
        if not progress:
            break
    return U, X, F, J, iters, converged


# ---------------------------------------------------------------------------
# problem assembly and public operations
# ---------------------------------------------------------------------------


def _substep_schedule(cfg: MpcConfig):
    """Substep lengths, owning interval, node quadrature weights, start offsets."""
    cached = getattr(cfg, "_schedule_cache", None)
    if cached is not None:
        return cached
    fr = cfg.fractions()
    w = quadrature_weights(fr)
    d = len(fr)
    N = cfg.interval_count
    S = N * d
    h = np.empty(S)
    sub_int = np.empty(S, dtype=np.int64)
    node_w = np.empty(S)
    t_start = np.empty(S)
    s = 0
    for k in range(N):
        prev = 0.0
        for j in range(d):
            h[s] = (fr[j] - prev) * cfg.interval_length
            sub_int[s] = k
            node_w[s] = w[j] * cfg.interval_length
            t_start[s] = (k + prev) * cfg.interval_length
            prev = fr[j]
            s += 1
    cfg._schedule_cache = (h, sub_int, node_w, t_start)
    return cfg._schedule_cache


def _stage_accels(cfg: MpcConfig, t0: float, base_forecast, h, t_start) -> np.ndarray:
    """Base acceleration at every integrator stage time over the horizon."""
    S = len(h)
    if base_forecast is None:
        return np.zeros((S, 3))
    if np.isscalar(base_forecast):
        return np.full((S, 3), float(base_forecast))
    times = np.empty((S, 3))
    times[:, 0] = t0 + t_start
    times[:, 1] = t0 + t_start + 0.5 * h
    times[:, 2] = t0 + t_start + h
    return np.asarray(base_forecast.accel_at(times.ravel())).reshape(S, 3)


def _problem_vectors(W: WeightVector, cfg: MpcConfig):
    w_rate = np.concatenate([np.zeros(N_DOF), W.conflict])
    eff_w = W.effort * cfg.interval_length
    x_lim = np.concatenate([cfg.joint_limits, np.full(N_DOF, np.inf)])
    return w_rate, eff_w, x_lim


def predict(x0: PlantState, controls: np.ndarray, base_forecast, grid: HorizonGrid,
            params: PlantParams, cfg: MpcConfig | None = None):
    """Integrate the internal model over the horizon; states at every grid node.

    Returns an array of [q, qdot] rows aligned with ``grid.nodes``.  Raises
    ``RuntimeError`` if the prediction diverges (any |q| beyond pi).
    """
    cfg = cfg or MpcConfig(interval_count=grid.interval_count,
                           interval_length=grid.interval_length,
                           nodes_per_interval=len(grid.node_fractions),
                           node_fractions=grid.node_fractions)
    controls = np.asarray(controls, dtype=float)
    if controls.shape != (grid.interval_count, N_DOF):
        raise ValueError(f"controls must have shape ({grid.interval_count}, {N_DOF})")
    h, sub_int, node_w, t_start = _substep_schedule(cfg)
    ay_st = _stage_accels(cfg, grid.t0, base_forecast, h, t_start)
    X, ok = _rollout(_plant_ode, x0.as_vector(), controls, params.packed(),
                     h, ay_st, sub_int, _plant_stop())
    if not ok or np.any(np.abs(X[:, :N_DOF]) > PREDICT_DIVERGENCE_LIMIT):
        raise RuntimeError("prediction infeasible: joint angle left the plausible range")
    return X


def cost(trajectory: np.ndarray, controls: np.ndarray, W: WeightVector,
         cfg: MpcConfig) -> float:
    """Quadrature-weighted conflict plus effort cost of a node trajectory."""
    trajectory = np.asarray(trajectory, dtype=float)
    controls = np.asarray(controls, dtype=float)
    h, sub_int, node_w, t_start = _substep_schedule(cfg)
    if trajectory.shape[0] != len(h) + 1:
        raise ValueError("trajectory rows must match the horizon node count")
    w_rate, eff_w, x_lim = _problem_vectors(W, cfg)
    _, J = _cost_terms(trajectory, controls, node_w, w_rate, eff_w,
                       np.full(2 * N_DOF, np.inf), cfg.limit_penalty)
    return float(J)


def objective_and_gradient(x0: PlantState, controls: np.ndarray, base_forecast,
                           W: WeightVector, cfg: MpcConfig, params: PlantParams,
                           t0: float = 0.0):
    """Full solver objective (cost plus limit penalty) and its exact gradient."""
    controls = np.asarray(controls, dtype=float)
    h, sub_int, node_w, t_start = _substep_schedule(cfg)
    ay_st = _stage_accels(cfg, t0, base_forecast, h, t_start)
    w_rate, eff_w, x_lim = _problem_vectors(W, cfg)
    P = params.packed()
    X, ok = _rollout(_plant_ode, x0.as_vector(), controls, P, h, ay_st, sub_int,
                     _plant_stop())
    if not ok:
        raise RuntimeError("rollout diverged")
    F, _ = _cost_terms(X, controls, node_w, w_rate, eff_w, x_lim, cfg.limit_penalty)
    Phis, Psis = _linearize(_plant_jac, X, controls, P, h, ay_st, sub_int)
    qxs, _ = _node_grads(X, node_w, w_rate, x_lim, cfg.limit_penalty)
    g = _gradient(Phis, Psis, qxs, sub_int, controls, eff_w)
    return float(F), g


def solve(x0: PlantState, base_forecast, W: WeightVector, cfg: MpcConfig,
          params: PlantParams, warm_start: np.ndarray | None = None,
          t0: float = 0.0) -> MpcSolution:
    """Solve the horizon program from state ``x0``; returns the best iterate.

    ``base_forecast`` is a trajectory object (full preview), a scalar held
    acceleration, or ``None`` for a stationary base.
    """
    if np.any(np.abs(x0.q) > cfg.joint_limits + 0.5 * np.pi):
        raise ValueError("initial state outside joint limits: infeasible start")
    wall = time.perf_counter()
    h, sub_int, node_w, t_start = _substep_schedule(cfg)
    ay_st = _stage_accels(cfg, t0, base_forecast, h, t_start)
    w_rate, eff_w, x_lim = _problem_vectors(W, cfg)
    if warm_start is None:
        # hold the current posture as the cold-start plan
        U0 = np.tile(gravity_compensation(x0.q, params).tau, (cfg.interval_count, 1))
    else:
        U0 = np.asarray(warm_start, dtype=float).copy()
    U, X, F, J, iters, converged = _solve_core(
        _plant_ode, _plant_jac, x0.as_vector(), U0, params.packed(),
        h, ay_st, sub_int, node_w, w_rate, eff_w, x_lim, cfg.limit_penalty,
        -cfg.torque_bounds, cfg.torque_bounds, cfg.tolerance, cfg.max_iterations,
        _plant_stop())
    grid = build_horizon(t0, cfg)
    return MpcSolution(u0=JointTorques(U[0].copy()), controls=U, trajectory=X,
                       grid=grid, cost=float(J), iterations=int(iters),
                       converged=bool(converged),
                       solve_time=time.perf_counter() - wall)


def controller_step(x0: PlantState, fb, base_now: float, W: WeightVector,
                    cfg: MpcConfig, params: PlantParams,
                    warm: MpcSolution | None = None, t_now: float = 0.0,
                    base_trajectory=None) -> MpcSolution:
    """One control update: assemble the base forecast per ``cfg.preview``,
    solve, and carry the previous solution as warm start.

    With ``preview='none'`` the controller holds the currently measured base
    acceleration across the horizon (it cannot anticipate); with ``'full'``
    it reads the true future from ``base_trajectory``.
    """
    if cfg.preview == "full" and base_trajectory is not None:
        forecast = base_trajectory
    else:
        forecast = float(base_now)
    warm_controls = None
    if cfg.warm_start and warm is not None:
        # control period is shorter than one interval: carry the plan as-is
        shift = int(round(cfg.control_period / cfg.interval_length))
        if shift > 0:
            warm_controls = np.vstack([warm.controls[shift:],
                                       np.repeat(warm.controls[-1:], shift, axis=0)])
        else:
            warm_controls = warm.controls.copy()
    return solve(x0, forecast, W, cfg, params, warm_start=warm_controls, t0=t_now)
