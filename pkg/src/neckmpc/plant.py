"""Rigid-body dynamics of the two-link head-neck chain on a moving lateral base.

The chain: a prescribed base point (T1, translating laterally), a lower joint
with roll and pitch freedom carrying the neck link, and an upper joint with
roll, pitch and yaw freedom carrying the head.  Lower yaw is locked, so the
generalized coordinates are

    q = [lower_roll, lower_pitch, upper_roll, upper_pitch, upper_yaw]

Axes: x anterior, y lateral (left), z up.  Joint rotations compose
intrinsically roll(x) -> pitch(y) -> yaw(z); positive pitch is flexion
(head center of gravity moves anterior).

Equations of motion are evaluated numerically (world-frame Newton-Euler with
geometric Jacobian projection), jitted for use inside the predictive
controller's hot loop.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from numba import njit

N_DOF = 5
DOF_NAMES = ("lower_roll", "lower_pitch", "upper_roll", "upper_pitch", "upper_yaw")

# divergence guard: default joint range plus 90 degrees (rad)
DEFAULT_JOINT_LIMITS = np.radians([45.0, 45.0, 70.0, 70.0, 70.0])

_N_PARAMS = 28


class SimulationDiverged(RuntimeError):
    """Raised when a state escapes its joint range by more than 90 degrees."""


@dataclass
class PlantParams:
    """Physical parameters of the head-neck chain (SI units).

    Masses and inertias are anthropometric-plausible defaults; the head lever
    ``head_cg_distance`` is sized so the reference posture (lower pitch 0,
    upper pitch 11.36 deg) puts the head CG 26.5 mm anterior of T1.

    Passive tissue stiffness acts about ``passive_rest`` and is sized with
    seated muscle tone so the chain is stabilizable at all: gravity
    contributes a destabilizing gradient of roughly 14 N m/rad around
    upright, and the controller's conflict term penalizes rates only, so a
    plant softer than that cannot hold any posture.
    """

    neck_mass: float = 1.1
    neck_length: float = 0.12
    neck_cg_offset: float = 0.06
    head_mass: float = 4.2
    head_cg_distance: float = 0.1346
    head_cg_anterior_offset: float = 0.0
    neck_inertia: np.ndarray = field(default_factory=lambda: np.array([0.0030, 0.0030, 0.0015]))
    head_inertia: np.ndarray = field(default_factory=lambda: np.array([0.0230, 0.0270, 0.0180]))
    passive_stiffness: np.ndarray = field(default_factory=lambda: np.full(N_DOF, 25.0))
    passive_damping: np.ndarray = field(default_factory=lambda: np.full(N_DOF, 1.2))
    passive_rest: np.ndarray = field(
        default_factory=lambda: np.array([0.0, math.radians(4.0), 0.0,
                                          math.radians(-2.0), 0.0]))
    gravity: float = 9.81

    def __post_init__(self):
        self.neck_inertia = np.asarray(self.neck_inertia, dtype=float)
        self.head_inertia = np.asarray(self.head_inertia, dtype=float)
        self.passive_stiffness = np.asarray(self.passive_stiffness, dtype=float)
        self.passive_damping = np.asarray(self.passive_damping, dtype=float)
        self.passive_rest = np.asarray(self.passive_rest, dtype=float)
        self.validate()

    def validate(self):
        if not (self.neck_mass > 0 and self.head_mass > 0):
            raise ValueError("masses must be strictly positive")
        if not (self.neck_length > 0 and self.head_cg_distance > 0 and self.neck_cg_offset > 0):
            raise ValueError("lengths must be strictly positive")
        if self.neck_inertia.shape != (3,) or self.head_inertia.shape != (3,):
            raise ValueError("inertias must hold 3 principal values each")
        if np.any(self.neck_inertia <= 0) or np.any(self.head_inertia <= 0):
            raise ValueError("inertia diagonals must be strictly positive")
        if self.passive_stiffness.shape != (N_DOF,) or self.passive_damping.shape != (N_DOF,):
            raise ValueError("passive stiffness/damping must have one value per DoF")
        if self.passive_rest.shape != (N_DOF,):
            raise ValueError("passive_rest must have one angle per DoF")
        if np.any(self.passive_stiffness < 0) or np.any(self.passive_damping < 0):
            raise ValueError("passive stiffness/damping must be non-negative")
        for name in ("neck_mass", "neck_length", "neck_cg_offset", "head_mass",
                     "head_cg_distance", "head_cg_anterior_offset", "gravity"):
            if not math.isfinite(getattr(self, name)):
                raise ValueError(f"{name} must be finite")

    def packed(self) -> np.ndarray:
        """Flat parameter vector consumed by the jitted kernels."""
        cached = getattr(self, "_packed_cache", None)
        if cached is not None:
            return cached
        p = np.empty(_N_PARAMS)
        p[0] = self.neck_mass
        p[1] = self.neck_length
        p[2] = self.neck_cg_offset
        p[3] = self.head_mass
        p[4] = self.head_cg_distance
        p[5] = self.head_cg_anterior_offset
        p[6:9] = self.neck_inertia
        p[9:12] = self.head_inertia
        p[12:17] = self.passive_stiffness
        p[17:22] = self.passive_damping
        p[22] = self.gravity
        p[23:28] = self.passive_rest
        self._packed_cache = p
        return p


@dataclass
class PlantState:
    """Joint coordinates plus the prescribed base pose (not a dynamic state)."""

    q: np.ndarray = field(default_factory=lambda: np.zeros(N_DOF))
    qdot: np.ndarray = field(default_factory=lambda: np.zeros(N_DOF))
    base_y: float = 0.0
    base_vy: float = 0.0

    def __post_init__(self):
        self.q = np.asarray(self.q, dtype=float)
        self.qdot = np.asarray(self.qdot, dtype=float)
        if self.q.shape != (N_DOF,) or self.qdot.shape != (N_DOF,):
            raise ValueError(f"q and qdot must have shape ({N_DOF},)")
        if not (np.all(np.isfinite(self.q)) and np.all(np.isfinite(self.qdot))
                and math.isfinite(self.base_y) and math.isfinite(self.base_vy)):
            raise ValueError("state must be finite")

    def as_vector(self) -> np.ndarray:
        return np.concatenate([self.q, self.qdot])

    @classmethod
    def from_vector(cls, x: np.ndarray, base_y: float = 0.0, base_vy: float = 0.0) -> "PlantState":
        x = np.asarray(x, dtype=float)
        return cls(q=x[:N_DOF].copy(), qdot=x[N_DOF:].copy(), base_y=base_y, base_vy=base_vy)

    def copy(self) -> "PlantState":
        return PlantState(self.q.copy(), self.qdot.copy(), self.base_y, self.base_vy)


@dataclass
class JointTorques:
    tau: np.ndarray = field(default_factory=lambda: np.zeros(N_DOF))

    def __post_init__(self):
        self.tau = np.asarray(self.tau, dtype=float)
        if self.tau.shape != (N_DOF,):
            raise ValueError(f"tau must have shape ({N_DOF},)")
        if not np.all(np.isfinite(self.tau)):
            raise ValueError("torques must be finite")


@dataclass
class HeadKinematics:
    """Global head pose and its exact time derivatives.

    ``wroll``/``wyaw`` are orientation-angle rates (time derivatives of
    ``roll``/``yaw``), so every velocity field is finite-difference consistent
    with its position field.
    """

    roll: float
    yaw: float
    y: float
    wroll: float
    wyaw: float
    vy: float
    pitch: float
    head_t1_angle: float
    cg_t1_anterior: float


# ---------------------------------------------------------------------------
# jitted kernels
# ---------------------------------------------------------------------------


@njit(cache=True)
def _cross(ax, ay, az, bx, by, bz):
    return (ay * bz - az * by, az * bx - ax * bz, ax * by - ay * bx)


@njit(cache=True)
def _solve_spd(A, b):
    """In-place Cholesky solve of a small SPD system; returns False if not PD."""
    n = A.shape[0]
    for j in range(n):
        d = A[j, j]
        for k in range(j):
            d -= A[j, k] * A[j, k]
        if d <= 0.0:
            return False
        d = math.sqrt(d)
        A[j, j] = d
        for i in range(j + 1, n):
            s = A[i, j]
            for k in range(j):
                s -= A[i, k] * A[j, k]
            A[i, j] = s / d
    for i in range(n):
        s = b[i]
        for k in range(i):
            s -= A[i, k] * b[k]
        b[i] = s / A[i, i]
    for i in range(n - 1, -1, -1):
        s = b[i]
        for k in range(i + 1, n):
            s -= A[k, i] * b[k]
        b[i] = s / A[i, i]
    return True


@njit(cache=True)
def _chain_geometry(q, P):
    """World-frame joint axes, body rotations and lever arms.

    Returns a tuple: the five joint axis vectors, the neck/head CG positions
    and the upper-joint position (all relative to the base point), plus the
    head rotation matrix entries needed by callers.
    """
    c0 = math.cos(q[0]); s0 = math.sin(q[0])
    c1 = math.cos(q[1]); s1 = math.sin(q[1])
    c2 = math.cos(q[2]); s2 = math.sin(q[2])
    c3 = math.cos(q[3]); s3 = math.sin(q[3])
    c4 = math.cos(q[4]); s4 = math.sin(q[4])

    # R_A = Rx(q0) Ry(q1): orientation of the neck link
    a00 = c1;        a01 = 0.0;  a02 = s1
    a10 = s0 * s1;   a11 = c0;   a12 = -s0 * c1
    a20 = -c0 * s1;  a21 = s0;   a22 = c0 * c1

    # R_rel = Rx(q2) Ry(q3) Rz(q4): head relative to neck
    r00 = c3 * c4;              r01 = -c3 * s4;             r02 = s3
    r10 = s2 * s3 * c4 + c2 * s4
    r11 = -s2 * s3 * s4 + c2 * c4
    r12 = -s2 * c3
    r20 = -c2 * s3 * c4 + s2 * s4
    r21 = c2 * s3 * s4 + s2 * c4
    r22 = c2 * c3

    # R_B = R_A R_rel: head orientation in the world
    b00 = a00 * r00 + a01 * r10 + a02 * r20
    b01 = a00 * r01 + a01 * r11 + a02 * r21
    b02 = a00 * r02 + a01 * r12 + a02 * r22
    b10 = a10 * r00 + a11 * r10 + a12 * r20
    b11 = a10 * r01 + a11 * r11 + a12 * r21
    b12 = a10 * r02 + a11 * r12 + a12 * r22
    b20 = a20 * r00 + a21 * r10 + a22 * r20
    b21 = a20 * r01 + a21 * r11 + a22 * r21
    b22 = a20 * r02 + a21 * r12 + a22 * r22

    # joint axes in the world frame
    e0x, e0y, e0z = 1.0, 0.0, 0.0
    e1x, e1y, e1z = 0.0, c0, s0
    e2x, e2y, e2z = a00, a10, a20
    # R_A Rx(q2) applied to y-hat
    e3x = a01 * c2 + a02 * s2
    e3y = a11 * c2 + a12 * s2
    e3z = a21 * c2 + a22 * s2
    e4x, e4y, e4z = b02, b12, b22

    L = P[1]; cn = P[2]; dh = P[4]; aoff = P[5]
    # positions relative to the base point
    pux, puy, puz = L * a02, L * a12, L * a22
    pnx, pny, pnz = cn * a02, cn * a12, cn * a22
    phx = pux + aoff * b00 + dh * b02
    phy = puy + aoff * b10 + dh * b12
    phz = puz + aoff * b20 + dh * b22

    return (e0x, e0y, e0z, e1x, e1y, e1z, e2x, e2y, e2z,
            e3x, e3y, e3z, e4x, e4y, e4z,
            pux, puy, puz, pnx, pny, pnz, phx, phy, phz,
            a00, a01, a02, a10, a11, a12, a20, a21, a22,
            b00, b01, b02, b10, b11, b12, b20, b21, b22)


@njit(cache=True)
def _world_inertia(R00, R01, R02, R10, R11, R12, R20, R21, R22, Ix, Iy, Iz):
    """R diag(I) R^T, returned as the six unique entries."""
    w00 = Ix * R00 * R00 + Iy * R01 * R01 + Iz * R02 * R02
    w01 = Ix * R00 * R10 + Iy * R01 * R11 + Iz * R02 * R12
    w02 = Ix * R00 * R20 + Iy * R01 * R21 + Iz * R02 * R22
    w11 = Ix * R10 * R10 + Iy * R11 * R11 + Iz * R12 * R12
    w12 = Ix * R10 * R20 + Iy * R11 * R21 + Iz * R12 * R22
    w22 = Ix * R20 * R20 + Iy * R21 * R21 + Iz * R22 * R22
    return w00, w01, w02, w11, w12, w22


@njit(cache=True)
def _dynamics_mats(q, qd, ay, grav_scale, P, M, bias):
    """Fill the mass matrix and the zero-acceleration generalized force.

    ``bias`` collects Coriolis/centrifugal terms, gravity (scaled by
    ``grav_scale``) and the inertial forcing from the prescribed base
    acceleration; passive stiffness and damping are not included here.
    """
    g = _chain_geometry(q, P)
    (e0x, e0y, e0z, e1x, e1y, e1z, e2x, e2y, e2z,
     e3x, e3y, e3z, e4x, e4y, e4z,
     pux, puy, puz, pnx, pny, pnz, phx, phy, phz,
     a00, a01, a02, a10, a11, a12, a20, a21, a22,
     b00, b01, b02, b10, b11, b12, b20, b21, b22) = g

    mn = P[0]; mh = P[3]
    nI00, nI01, nI02, nI11, nI12, nI22 = _world_inertia(
        a00, a01, a02, a10, a11, a12, a20, a21, a22, P[6], P[7], P[8])
    hI00, hI01, hI02, hI11, hI12, hI22 = _world_inertia(
        b00, b01, b02, b10, b11, b12, b20, b21, b22, P[9], P[10], P[11])

    # translational Jacobian columns: e_k x (p_cg - p_joint_k)
    jn = np.zeros((5, 3))
    jh = np.zeros((5, 3))
    ex = np.empty((5, 3))
    ex[0, 0] = e0x; ex[0, 1] = e0y; ex[0, 2] = e0z
    ex[1, 0] = e1x; ex[1, 1] = e1y; ex[1, 2] = e1z
    ex[2, 0] = e2x; ex[2, 1] = e2y; ex[2, 2] = e2z
    ex[3, 0] = e3x; ex[3, 1] = e3y; ex[3, 2] = e3z
    ex[4, 0] = e4x; ex[4, 1] = e4y; ex[4, 2] = e4z
    for k in range(2):
        cx, cy, cz = _cross(ex[k, 0], ex[k, 1], ex[k, 2], pnx, pny, pnz)
        jn[k, 0] = cx; jn[k, 1] = cy; jn[k, 2] = cz
        cx, cy, cz = _cross(ex[k, 0], ex[k, 1], ex[k, 2], phx, phy, phz)
        jh[k, 0] = cx; jh[k, 1] = cy; jh[k, 2] = cz
    for k in range(2, 5):
        cx, cy, cz = _cross(ex[k, 0], ex[k, 1], ex[k, 2],
                            phx - pux, phy - puy, phz - puz)
        jh[k, 0] = cx; jh[k, 1] = cy; jh[k, 2] = cz

    # mass matrix via Jacobian projection
    for i in range(5):
        ni = i < 2  # neck rotates with joints 0,1 only
        for j in range(i, 5):
            m = mh * (jh[i, 0] * jh[j, 0] + jh[i, 1] * jh[j, 1] + jh[i, 2] * jh[j, 2])
            # head angular part: e_i . I_h^w e_j
            hx = hI00 * ex[j, 0] + hI01 * ex[j, 1] + hI02 * ex[j, 2]
            hy = hI01 * ex[j, 0] + hI11 * ex[j, 1] + hI12 * ex[j, 2]
            hz = hI02 * ex[j, 0] + hI12 * ex[j, 1] + hI22 * ex[j, 2]
            m += ex[i, 0] * hx + ex[i, 1] * hy + ex[i, 2] * hz
            if ni and j < 2:
                m += mn * (jn[i, 0] * jn[j, 0] + jn[i, 1] * jn[j, 1] + jn[i, 2] * jn[j, 2])
                nx = nI00 * ex[j, 0] + nI01 * ex[j, 1] + nI02 * ex[j, 2]
                ny = nI01 * ex[j, 0] + nI11 * ex[j, 1] + nI12 * ex[j, 2]
                nz = nI02 * ex[j, 0] + nI12 * ex[j, 1] + nI22 * ex[j, 2]
                m += ex[i, 0] * nx + ex[i, 1] * ny + ex[i, 2] * nz
            M[i, j] = m
            M[j, i] = m

    # angular velocities
    wax = e0x * qd[0] + e1x * qd[1]
    way = e0y * qd[0] + e1y * qd[1]
    waz = e0z * qd[0] + e1z * qd[1]
    wbx = wax + e2x * qd[2] + e3x * qd[3] + e4x * qd[4]
    wby = way + e2y * qd[2] + e3y * qd[3] + e4y * qd[4]
    wbz = waz + e2z * qd[2] + e3z * qd[3] + e4z * qd[4]

    # zero-qddot angular accelerations (axis drift terms)
    cx, cy, cz = _cross(e0x * qd[0], e0y * qd[0], e0z * qd[0], e1x, e1y, e1z)
    aax = cx * qd[1]; aay = cy * qd[1]; aaz = cz * qd[1]
    abx = aax; aby = aay; abz = aaz
    cx, cy, cz = _cross(wax, way, waz, e2x, e2y, e2z)
    abx += cx * qd[2]; aby += cy * qd[2]; abz += cz * qd[2]
    p3x = wax + e2x * qd[2]; p3y = way + e2y * qd[2]; p3z = waz + e2z * qd[2]
    cx, cy, cz = _cross(p3x, p3y, p3z, e3x, e3y, e3z)
    abx += cx * qd[3]; aby += cy * qd[3]; abz += cz * qd[3]
    p4x = p3x + e3x * qd[3]; p4y = p3y + e3y * qd[3]; p4z = p3z + e3z * qd[3]
    cx, cy, cz = _cross(p4x, p4y, p4z, e4x, e4y, e4z)
    abx += cx * qd[4]; aby += cy * qd[4]; abz += cz * qd[4]

    # base acceleration with the gravity trick (accelerating frame upward)
    a0x = 0.0
    a0y = ay
    a0z = grav_scale * P[22]

    # CG accelerations at qddot = 0
    cx, cy, cz = _cross(aax, aay, aaz, pnx, pny, pnz)
    tx, ty, tz = _cross(wax, way, waz, pnx, pny, pnz)
    ux, uy, uz = _cross(wax, way, waz, tx, ty, tz)
    anx = a0x + cx + ux; any_ = a0y + cy + uy; anz = a0z + cz + uz

    cx, cy, cz = _cross(aax, aay, aaz, pux, puy, puz)
    tx, ty, tz = _cross(wax, way, waz, pux, puy, puz)
    ux, uy, uz = _cross(wax, way, waz, tx, ty, tz)
    aux = a0x + cx + ux; auy = a0y + cy + uy; auz = a0z + cz + uz

    rhx = phx - pux; rhy = phy - puy; rhz = phz - puz
    cx, cy, cz = _cross(abx, aby, abz, rhx, rhy, rhz)
    tx, ty, tz = _cross(wbx, wby, wbz, rhx, rhy, rhz)
    ux, uy, uz = _cross(wbx, wby, wbz, tx, ty, tz)
    ahx = aux + cx + ux; ahy = auy + cy + uy; ahz = auz + cz + uz

    # Newton-Euler wrenches at qddot = 0
    fnx = mn * anx; fny = mn * any_; fnz = mn * anz
    fhx = mh * ahx; fhy = mh * ahy; fhz = mh * ahz

    hx = nI00 * wax + nI01 * way + nI02 * waz
    hy = nI01 * wax + nI11 * way + nI12 * waz
    hz = nI02 * wax + nI12 * way + nI22 * waz
    cx, cy, cz = _cross(wax, way, waz, hx, hy, hz)
    nnx = nI00 * aax + nI01 * aay + nI02 * aaz + cx
    nny = nI01 * aax + nI11 * aay + nI12 * aaz + cy
    nnz = nI02 * aax + nI12 * aay + nI22 * aaz + cz

    hx = hI00 * wbx + hI01 * wby + hI02 * wbz
    hy = hI01 * wbx + hI11 * wby + hI12 * wbz
    hz = hI02 * wbx + hI12 * wby + hI22 * wbz
    cx, cy, cz = _cross(wbx, wby, wbz, hx, hy, hz)
    nhx = hI00 * abx + hI01 * aby + hI02 * abz + cx
    nhy = hI01 * abx + hI11 * aby + hI12 * abz + cy
    nhz = hI02 * abx + hI12 * aby + hI22 * abz + cz

    for k in range(5):
        b = (jh[k, 0] * fhx + jh[k, 1] * fhy + jh[k, 2] * fhz
             + ex[k, 0] * nhx + ex[k, 1] * nhy + ex[k, 2] * nhz)
        if k < 2:
            b += (jn[k, 0] * fnx + jn[k, 1] * fny + jn[k, 2] * fnz
                  + ex[k, 0] * nnx + ex[k, 1] * nny + ex[k, 2] * nnz)
        bias[k] = b


@njit(cache=True)
def _forward_dynamics(q, qd, tau, ay, P):
    """Joint accelerations solving M(q) qddot = tau + tau_passive - bias."""
    M = np.empty((5, 5))
    rhs = np.empty(5)
    _dynamics_mats(q, qd, ay, 1.0, P, M, rhs)
    for k in range(5):
        rhs[k] = tau[k] - P[12 + k] * (q[k] - P[23 + k]) - P[17 + k] * qd[k] - rhs[k]
    ok = _solve_spd(M, rhs)
    if not ok:
        for k in range(5):
            rhs[k] = np.nan
    return rhs


@njit(cache=True)
def _plant_ode(x, u, ay, P):
    """State derivative for the 10-dimensional state [q, qdot]."""
    out = np.empty(10)
    qdd = _forward_dynamics(x[:5], x[5:], u, ay, P)
    for k in range(5):
        out[k] = x[5 + k]
        out[5 + k] = qdd[k]
    return out


@njit(cache=True)
def _bias_vector(q, qd, ay, grav_scale, P, bias):
    """Zero-acceleration generalized force without assembling the mass matrix."""
    g = _chain_geometry(q, P)
    (e0x, e0y, e0z, e1x, e1y, e1z, e2x, e2y, e2z,
     e3x, e3y, e3z, e4x, e4y, e4z,
     pux, puy, puz, pnx, pny, pnz, phx, phy, phz,
     a00, a01, a02, a10, a11, a12, a20, a21, a22,
     b00, b01, b02, b10, b11, b12, b20, b21, b22) = g

    mn = P[0]; mh = P[3]
    nI00, nI01, nI02, nI11, nI12, nI22 = _world_inertia(
        a00, a01, a02, a10, a11, a12, a20, a21, a22, P[6], P[7], P[8])
    hI00, hI01, hI02, hI11, hI12, hI22 = _world_inertia(
        b00, b01, b02, b10, b11, b12, b20, b21, b22, P[9], P[10], P[11])

    ex = np.empty((5, 3))
    ex[0, 0] = e0x; ex[0, 1] = e0y; ex[0, 2] = e0z
    ex[1, 0] = e1x; ex[1, 1] = e1y; ex[1, 2] = e1z
    ex[2, 0] = e2x; ex[2, 1] = e2y; ex[2, 2] = e2z
    ex[3, 0] = e3x; ex[3, 1] = e3y; ex[3, 2] = e3z
    ex[4, 0] = e4x; ex[4, 1] = e4y; ex[4, 2] = e4z

    wax = e0x * qd[0] + e1x * qd[1]
    way = e0y * qd[0] + e1y * qd[1]
    waz = e0z * qd[0] + e1z * qd[1]
    wbx = wax + e2x * qd[2] + e3x * qd[3] + e4x * qd[4]
    wby = way + e2y * qd[2] + e3y * qd[3] + e4y * qd[4]
    wbz = waz + e2z * qd[2] + e3z * qd[3] + e4z * qd[4]

    cx, cy, cz = _cross(e0x * qd[0], e0y * qd[0], e0z * qd[0], e1x, e1y, e1z)
    aax = cx * qd[1]; aay = cy * qd[1]; aaz = cz * qd[1]
    abx = aax; aby = aay; abz = aaz
    cx, cy, cz = _cross(wax, way, waz, e2x, e2y, e2z)
    abx += cx * qd[2]; aby += cy * qd[2]; abz += cz * qd[2]
    p3x = wax + e2x * qd[2]; p3y = way + e2y * qd[2]; p3z = waz + e2z * qd[2]
    cx, cy, cz = _cross(p3x, p3y, p3z, e3x, e3y, e3z)
    abx += cx * qd[3]; aby += cy * qd[3]; abz += cz * qd[3]
    p4x = p3x + e3x * qd[3]; p4y = p3y + e3y * qd[3]; p4z = p3z + e3z * qd[3]
    cx, cy, cz = _cross(p4x, p4y, p4z, e4x, e4y, e4z)
    abx += cx * qd[4]; aby += cy * qd[4]; abz += cz * qd[4]

    a0x = 0.0; a0y = ay; a0z = grav_scale * P[22]

    cx, cy, cz = _cross(aax, aay, aaz, pnx, pny, pnz)
    tx, ty, tz = _cross(wax, way, waz, pnx, pny, pnz)
    ux, uy, uz = _cross(wax, way, waz, tx, ty, tz)
    anx = a0x + cx + ux; any_ = a0y + cy + uy; anz = a0z + cz + uz

    cx, cy, cz = _cross(aax, aay, aaz, pux, puy, puz)
    tx, ty, tz = _cross(wax, way, waz, pux, puy, puz)
    ux, uy, uz = _cross(wax, way, waz, tx, ty, tz)
    aux = a0x + cx + ux; auy = a0y + cy + uy; auz = a0z + cz + uz

    rhx = phx - pux; rhy = phy - puy; rhz = phz - puz
    cx, cy, cz = _cross(abx, aby, abz, rhx, rhy, rhz)
    tx, ty, tz = _cross(wbx, wby, wbz, rhx, rhy, rhz)
    ux, uy, uz = _cross(wbx, wby, wbz, tx, ty, tz)
    ahx = aux + cx + ux; ahy = auy + cy + uy; ahz = auz + cz + uz

    fnx = mn * anx; fny = mn * any_; fnz = mn * anz
    fhx = mh * ahx; fhy = mh * ahy; fhz = mh * ahz

    hx = nI00 * wax + nI01 * way + nI02 * waz
    hy = nI01 * wax + nI11 * way + nI12 * waz
    hz = nI02 * wax + nI12 * way + nI22 * waz
    cx, cy, cz = _cross(wax, way, waz, hx, hy, hz)
    nnx = nI00 * aax + nI01 * aay + nI02 * aaz + cx
    nny = nI01 * aax + nI11 * aay + nI12 * aaz + cy
    nnz = nI02 * aax + nI12 * aay + nI22 * aaz + cz

    hx = hI00 * wbx + hI01 * wby + hI02 * wbz
    hy = hI01 * wbx + hI11 * wby + hI12 * wbz
    hz = hI02 * wbx + hI12 * wby + hI22 * wbz
    cx, cy, cz = _cross(wbx, wby, wbz, hx, hy, hz)
    nhx = hI00 * abx + hI01 * aby + hI02 * abz + cx
    nhy = hI01 * abx + hI11 * aby + hI12 * abz + cy
    nhz = hI02 * abx + hI12 * aby + hI22 * abz + cz

    for k in range(5):
        if k < 2:
            cnx, cny, cnz = _cross(ex[k, 0], ex[k, 1], ex[k, 2], pnx, pny, pnz)
            chx, chy, chz = _cross(ex[k, 0], ex[k, 1], ex[k, 2], phx, phy, phz)
            b = (cnx * fnx + cny * fny + cnz * fnz
                 + ex[k, 0] * nnx + ex[k, 1] * nny + ex[k, 2] * nnz)
            b += chx * fhx + chy * fhy + chz * fhz
        else:
            chx, chy, chz = _cross(ex[k, 0], ex[k, 1], ex[k, 2], rhx, rhy, rhz)
            b = chx * fhx + chy * fhy + chz * fhz
        b += ex[k, 0] * nhx + ex[k, 1] * nhy + ex[k, 2] * nhz
        bias[k] = b


@njit(cache=True)
def _solve_chol(L, b, out):
    """Back-substitution with an already-factored lower Cholesky matrix."""
    n = L.shape[0]
    for i in range(n):
        s = b[i]
        for k in range(i):
            s -= L[i, k] * out[k]
        out[i] = s / L[i, i]
    for i in range(n - 1, -1, -1):
        s = out[i]
        for k in range(i + 1, n):
            s -= L[k, i] * out[k]
        out[i] = s / L[i, i]


@njit(cache=True)
def _cholesky5(A):
    """In-place lower Cholesky; returns False if not positive definite."""
    n = A.shape[0]
    for j in range(n):
        d = A[j, j]
        for k in range(j):
            d -= A[j, k] * A[j, k]
        if d <= 0.0:
            return False
        d = math.sqrt(d)
        A[j, j] = d
        for i in range(j + 1, n):
            s = A[i, j]
            for k in range(j):
                s -= A[i, k] * A[j, k]
            A[i, j] = s / d
    return True


@njit(cache=True)
def _plant_jac(x, u, ay, P):
    """State derivative plus exact partials for the 10-state plant ODE.

    Velocity and control blocks use the factored mass matrix (velocity bias
    terms are quadratic, so their central difference is exact); configuration
    partials fall back to a one-sided finite difference of the full dynamics.
    """
    nx = 10
    nu = 5
    f0 = np.empty(nx)
    A = np.zeros((nx, nx))
    B = np.zeros((nx, nu))
    q = x[:5].copy()
    qd = x[5:].copy()

    M = np.empty((5, 5))
    bias = np.empty(5)
    _dynamics_mats(q, qd, ay, 1.0, P, M, bias)
    rhs = np.empty(5)
    for k in range(5):
        rhs[k] = u[k] - P[12 + k] * (q[k] - P[23 + k]) - P[17 + k] * qd[k] - bias[k]
    _cholesky5(M)
    qdd = np.empty(5)
    _solve_chol(M, rhs, qdd)
    for k in range(5):
        f0[k] = qd[k]
        f0[5 + k] = qdd[k]
        A[k, 5 + k] = 1.0

    # control block: d(qdd)/du = M^-1
    e = np.zeros(5)
    col = np.empty(5)
    for j in range(5):
        e[j] = 1.0
        _solve_chol(M, e, col)
        for i in range(5):
            B[5 + i, j] = col[i]
        e[j] = 0.0

    # velocity block: central difference of the bias (exact for quadratic terms)
    bp = np.empty(5)
    bm = np.empty(5)
    qdp = qd.copy()
    hv = 1e-2
    for j in range(5):
        qdp[j] = qd[j] + hv
        _bias_vector(q, qdp, 0.0, 0.0, P, bp)
        qdp[j] = qd[j] - hv
        _bias_vector(q, qdp, 0.0, 0.0, P, bm)
        qdp[j] = qd[j]
        for i in range(5):
            rhs[i] = -(bp[i] - bm[i]) / (2.0 * hv)
        rhs[j] -= P[17 + j]
        _solve_chol(M, rhs, col)
        for i in range(5):
            A[5 + i, 5 + j] = col[i]

    # configuration block: one-sided finite difference of the full dynamics
    qp = q.copy()
    for j in range(5):
        hq = 1e-7 * (1.0 + abs(q[j]))
        qp[j] = q[j] + hq
        qddp = _forward_dynamics(qp, qd, u, ay, P)
        qp[j] = q[j]
        for i in range(5):
            A[5 + i, j] = (qddp[i] - qdd[i]) / hq
    return f0, A, B


@njit(cache=True)
def _rk4_step(x, u, ay0, aym, ay1, h, P):
    """Classical 4th-order step with base acceleration sampled at the stages."""
    k1 = _plant_ode(x, u, ay0, P)
    x2 = x + 0.5 * h * k1
    k2 = _plant_ode(x2, u, aym, P)
    x3 = x + 0.5 * h * k2
    k3 = _plant_ode(x3, u, aym, P)
    x4 = x + h * k3
    k4 = _plant_ode(x4, u, ay1, P)
    return x + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)


@njit(cache=True)
def _head_kinematics_core(q, qd, base_y, base_vy, P):
    """Global head pose, orientation-angle rates and CG velocity.

    Returns [roll, pitch, yaw, y_cg, wroll, wpitch, wyaw, vy_cg,
             cg_rel_x, cg_rel_y, cg_rel_z].
    """
    g = _chain_geometry(q, P)
    (e0x, e0y, e0z, e1x, e1y, e1z, e2x, e2y, e2z,
     e3x, e3y, e3z, e4x, e4y, e4z,
     pux, puy, puz, pnx, pny, pnz, phx, phy, phz,
     a00, a01, a02, a10, a11, a12, a20, a21, a22,
     b00, b01, b02, b10, b11, b12, b20, b21, b22) = g

    # intrinsic x-y-z angles from the head rotation matrix
    pitch = math.asin(max(-1.0, min(1.0, b02)))
    roll = math.atan2(-b12, b22)
    yaw = math.atan2(-b01, b00)

    # head angular velocity (world)
    wx = e0x * qd[0] + e1x * qd[1] + e2x * qd[2] + e3x * qd[3] + e4x * qd[4]
    wy = e0y * qd[0] + e1y * qd[1] + e2y * qd[2] + e3y * qd[3] + e4y * qd[4]
    wz = e0z * qd[0] + e1z * qd[1] + e2z * qd[2] + e3z * qd[3] + e4z * qd[4]

    # orientation-angle rates: invert omega = E(roll, pitch) [dr, dp, dy]
    cr = math.cos(roll); sr = math.sin(roll)
    cp = math.cos(pitch); sp = math.sin(pitch)
    dpitch = cr * wy + sr * wz
    dyaw = (-sr * wy + cr * wz) / cp
    droll = wx - dyaw * sp

    # head CG velocity (lateral component): upper-joint velocity plus the
    # head angular velocity acting on the CG lever
    vux, vuy, vuz = _cross(
        e0x * qd[0] + e1x * qd[1], e0y * qd[0] + e1y * qd[1], e0z * qd[0] + e1z * qd[1],
        pux, puy, puz)
    cx, cy, cz = _cross(wx, wy, wz, phx - pux, phy - puy, phz - puz)
    vy_cg = base_vy + vuy + cy

    out = np.empty(11)
    out[0] = roll
    out[1] = pitch
    out[2] = yaw
    out[3] = base_y + phy
    out[4] = droll
    out[5] = dpitch
    out[6] = dyaw
    out[7] = vy_cg
    out[8] = phx
    out[9] = phy
    out[10] = phz
    return out


@njit(cache=True)
def _energy(q, qd, base_vy, P):
    """Kinetic and potential energy (gravity plus passive springs)."""
    g = _chain_geometry(q, P)
    (e0x, e0y, e0z, e1x, e1y, e1z, e2x, e2y, e2z,
     e3x, e3y, e3z, e4x, e4y, e4z,
     pux, puy, puz, pnx, pny, pnz, phx, phy, phz,
     a00, a01, a02, a10, a11, a12, a20, a21, a22,
     b00, b01, b02, b10, b11, b12, b20, b21, b22) = g
    mn = P[0]; mh = P[3]; grav = P[22]

    wax = e0x * qd[0] + e1x * qd[1]
    way = e0y * qd[0] + e1y * qd[1]
    waz = e0z * qd[0] + e1z * qd[1]
    wbx = wax + e2x * qd[2] + e3x * qd[3] + e4x * qd[4]
    wby = way + e2y * qd[2] + e3y * qd[3] + e4y * qd[4]
    wbz = waz + e2z * qd[2] + e3z * qd[3] + e4z * qd[4]

    vnx, vny, vnz = _cross(wax, way, waz, pnx, pny, pnz)
    vny += base_vy
    vux, vuy, vuz = _cross(wax, way, waz, pux, puy, puz)
    cx, cy, cz = _cross(wbx, wby, wbz, phx - pux, phy - puy, phz - puz)
    vhx = vux + cx; vhy = vuy + cy + base_vy; vhz = vuz + cz

    nI00, nI01, nI02, nI11, nI12, nI22 = _world_inertia(
        a00, a01, a02, a10, a11, a12, a20, a21, a22, P[6], P[7], P[8])
    hI00, hI01, hI02, hI11, hI12, hI22 = _world_inertia(
        b00, b01, b02, b10, b11, b12, b20, b21, b22, P[9], P[10], P[11])

    T = 0.5 * mn * (vnx * vnx + vny * vny + vnz * vnz)
    T += 0.5 * mh * (vhx * vhx + vhy * vhy + vhz * vhz)
    T += 0.5 * (wax * (nI00 * wax + nI01 * way + nI02 * waz)
                + way * (nI01 * wax + nI11 * way + nI12 * waz)
                + waz * (nI02 * wax + nI12 * way + nI22 * waz))
    T += 0.5 * (wbx * (hI00 * wbx + hI01 * wby + hI02 * wbz)
                + wby * (hI01 * wbx + hI11 * wby + hI12 * wbz)
                + wbz * (hI02 * wbx + hI12 * wby + hI22 * wbz))

    V = grav * (mn * pnz + mh * phz)
    for k in range(5):
        d = q[k] - P[23 + k]
        V += 0.5 * P[12 + k] * d * d
    return T, V


# ---------------------------------------------------------------------------
# public operations
# ---------------------------------------------------------------------------


def mass_matrix(q: np.ndarray, params: PlantParams) -> np.ndarray:
    """Joint-space mass matrix M(q), symmetric positive definite."""
    q = np.asarray(q, dtype=float)
    M = np.empty((5, 5))
    bias = np.empty(5)
    _dynamics_mats(q, np.zeros(N_DOF), 0.0, 0.0, params.packed(), M, bias)
    return M


def bias_torques(q: np.ndarray, qdot: np.ndarray, base_accel: float,
                 params: PlantParams, gravity_on: bool = True) -> np.ndarray:
    """Generalized forces at zero joint acceleration (no passive terms)."""
    M = np.empty((5, 5))
    bias = np.empty(5)
    _dynamics_mats(np.asarray(q, dtype=float), np.asarray(qdot, dtype=float),
                   float(base_accel), 1.0 if gravity_on else 0.0,
                   params.packed(), M, bias)
    return bias


def forward_dynamics(state: PlantState, tau: JointTorques, base_accel: float,
                     params: PlantParams) -> np.ndarray:
    """Joint accelerations for the given state, applied torques and base motion."""
    if not math.isfinite(base_accel):
        raise ValueError("base_accel must be finite")
    qdd = _forward_dynamics(state.q, state.qdot, tau.tau, float(base_accel),
                            params.packed())
    if not np.all(np.isfinite(qdd)):
        raise RuntimeError("mass matrix not positive definite (invalid parameters?)")
    return qdd


def step(state: PlantState, tau: JointTorques, base, t: float, dt: float,
         params: PlantParams, joint_limits: np.ndarray | None = None) -> PlantState:
    """Advance one RK4 step of length ``dt`` starting at time ``t``.

    ``base`` is a trajectory object providing ``accel_at``/``vel_at``/``pos_at``
    (see :mod:`neckmpc.perturbation`), or ``None`` for a stationary base.
    """
    if dt <= 0:
        raise ValueError("dt must be positive")
    if base is None:
        ay0 = aym = ay1 = 0.0
        y1, vy1 = state.base_y, state.base_vy
    else:
        ay0 = float(base.accel_at(t))
        aym = float(base.accel_at(t + 0.5 * dt))
        ay1 = float(base.accel_at(t + dt))
        y1 = float(base.pos_at(t + dt))
        vy1 = float(base.vel_at(t + dt))
    x = _rk4_step(state.as_vector(), tau.tau, ay0, aym, ay1, dt, params.packed())
    limits = DEFAULT_JOINT_LIMITS if joint_limits is None else np.asarray(joint_limits)
    over = np.abs(x[:N_DOF]) > limits + 0.5 * np.pi
    if np.any(over) or not np.all(np.isfinite(x)):
        bad = [DOF_NAMES[i] for i in range(N_DOF) if over[i]] or ["non-finite state"]
        raise SimulationDiverged(
            f"state escaped joint limits by more than 90 degrees at t={t + dt:.3f} s: "
            + ", ".join(bad))
    return PlantState.from_vector(x, base_y=y1, base_vy=vy1)


def head_kinematics(state: PlantState, params: PlantParams) -> HeadKinematics:
    """Forward kinematics T1 -> lower joint -> upper joint -> head CG."""
    out = _head_kinematics_core(state.q, state.qdot, state.base_y, state.base_vy,
                                params.packed())
    return HeadKinematics(
        roll=out[0], pitch=out[1], yaw=out[2], y=out[3],
        wroll=out[4], wyaw=out[6], vy=out[7],
        head_t1_angle=out[1], cg_t1_anterior=out[8])


def gravity_compensation(q: np.ndarray, params: PlantParams) -> JointTorques:
    """Torques holding configuration ``q`` static under gravity (base at rest)."""
    q = np.asarray(q, dtype=float)
    tau = (bias_torques(q, np.zeros(N_DOF), 0.0, params)
           + params.passive_stiffness * (q - params.passive_rest))
    return JointTorques(tau)


def total_energy(state: PlantState, params: PlantParams) -> float:
    """Kinetic plus potential (gravity and passive-spring) energy."""
    T, V = _energy(state.q, state.qdot, state.base_vy, params.packed())
    return T + V
