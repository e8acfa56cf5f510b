"""Closed-loop orchestration: plant + sensors + integrators + controller.

One run owns its controller and integrator state, steps the plant at the
control period and records everything into a flat, array-backed log with
wall-clock telemetry (real-time factor = wall time / simulated time).
"""

from __future__ import annotations

import csv
import hashlib
import json
import math
import time
from dataclasses import dataclass, field

import numpy as np

from . import plant as _plant
from .plant import (N_DOF, DOF_NAMES, PlantParams, PlantState, JointTorques,
                    SimulationDiverged, head_kinematics, step)
from .sensory import IntegratorConfig, IntegratorState, sense, integrator_update
from .mpc import MpcConfig, WeightVector, controller_step

#: consecutive non-converged solves tolerated before a run aborts
MAX_SOLVER_FAILURES = 20

_HEAD_FIELDS = ("roll", "pitch", "yaw", "y", "wroll", "wpitch", "wyaw", "vy",
                "cg_t1_anterior")


@dataclass
class SimulationLog:
    """Per-step record of a closed-loop run plus run metadata."""

    t: np.ndarray
    q: np.ndarray                 # (n, 5)
    qdot: np.ndarray              # (n, 5)
    base_y: np.ndarray
    base_vy: np.ndarray
    base_ay: np.ndarray
    tau_mpc: np.ndarray           # (n, 5)
    tau_integrator: np.ndarray    # (n, 5)
    tau_applied: np.ndarray       # (n, 5)
    head: dict[str, np.ndarray]   # global head kinematics channels
    solver_cost: np.ndarray
    solver_iterations: np.ndarray
    solver_converged: np.ndarray
    solver_time: np.ndarray
    dt: float
    duration: float
    seed: int = 0
    config_hash: str = ""
    wall_clock: float = 0.0
    rtf: float = 0.0
    aborted: bool = False
    abort_reason: str = ""
    initial_posture: np.ndarray = field(default_factory=lambda: np.zeros(N_DOF))

    def __len__(self) -> int:
        return len(self.t)

    # -- export / import ----------------------------------------------------

    CSV_COLUMNS = (
        ["t"]
        + [f"q_{n}" for n in DOF_NAMES]
        + [f"qd_{n}" for n in DOF_NAMES]
        + ["base_y", "base_vy", "base_ay"]
        + [f"tau_mpc_{n}" for n in DOF_NAMES]
        + [f"tau_int_{n}" for n in DOF_NAMES]
        + [f"tau_{n}" for n in DOF_NAMES]
        + [f"head_{c}" for c in _HEAD_FIELDS]
        + ["solver_cost", "solver_iterations", "solver_converged", "solver_time"]
    )

    def to_matrix(self) -> np.ndarray:
        cols = [self.t, *self.q.T, *self.qdot.T, self.base_y, self.base_vy,
                self.base_ay, *self.tau_mpc.T, *self.tau_integrator.T,
                *self.tau_applied.T, *[self.head[c] for c in _HEAD_FIELDS],
                self.solver_cost, self.solver_iterations.astype(float),
                self.solver_converged.astype(float), self.solver_time]
        return np.column_stack(cols)

    def write_csv(self, path) -> None:
        mat = self.to_matrix()
        with open(path, "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(self.CSV_COLUMNS)
            for row in mat:
                w.writerow([repr(v) for v in row])

    def metadata(self) -> dict:
        return {
            "dt": self.dt,
            "duration": self.duration,
            "seed": self.seed,
            "config_hash": self.config_hash,
            "wall_clock": self.wall_clock,
            "rtf": self.rtf,
            "rtf_definition": "wall-clock time / simulated time",
            "aborted": self.aborted,
            "abort_reason": self.abort_reason,
            "steps": int(len(self.t)),
            "initial_posture": self.initial_posture.tolist(),
        }

    def write_meta(self, path) -> None:
        with open(path, "w") as f:
            json.dump(self.metadata(), f, indent=2)
            f.write("\n")

    @classmethod
    def read_csv(cls, path, meta_path=None) -> "SimulationLog":
        with open(path, newline="") as f:
            r = csv.reader(f)
            header = next(r)
            if header != cls.CSV_COLUMNS:
                raise ValueError(f"unexpected log columns in {path}")
            mat = np.array([[float(v) for v in row] for row in r])
        meta = {}
        if meta_path is not None:
            with open(meta_path) as f:
                meta = json.load(f)
        c = {name: mat[:, i] for i, name in enumerate(cls.CSV_COLUMNS)}
        log = cls(
            t=c["t"],
            q=np.column_stack([c[f"q_{n}"] for n in DOF_NAMES]),
            qdot=np.column_stack([c[f"qd_{n}"] for n in DOF_NAMES]),
            base_y=c["base_y"], base_vy=c["base_vy"], base_ay=c["base_ay"],
            tau_mpc=np.column_stack([c[f"tau_mpc_{n}"] for n in DOF_NAMES]),
            tau_integrator=np.column_stack([c[f"tau_int_{n}"] for n in DOF_NAMES]),
            tau_applied=np.column_stack([c[f"tau_{n}"] for n in DOF_NAMES]),
            head={name: c[f"head_{name}"] for name in _HEAD_FIELDS},
            solver_cost=c["solver_cost"],
            solver_iterations=c["solver_iterations"].astype(int),
            solver_converged=c["solver_converged"] > 0.5,
            solver_time=c["solver_time"],
            dt=float(mat[1, 0] - mat[0, 0]) if len(mat) > 1 else 0.0,
            duration=float(mat[-1, 0]),
            seed=int(meta.get("seed", 0)),
            config_hash=meta.get("config_hash", ""),
            wall_clock=float(meta.get("wall_clock", 0.0)),
            rtf=float(meta.get("rtf", 0.0)),
            aborted=bool(meta.get("aborted", False)),
            abort_reason=meta.get("abort_reason", ""),
            initial_posture=np.asarray(meta.get("initial_posture", np.zeros(N_DOF))),
        )
        return log


DEFAULT_INITIAL_POSTURE = np.array([0.0, 0.0, 0.0, math.radians(11.36), 0.0])


def run_closed_loop(params: PlantParams, integrator_cfg: IntegratorConfig,
                    mpc_cfg: MpcConfig, W: WeightVector, base, duration: float,
                    dt: float | None = None,
                    initial_posture: np.ndarray | None = None,
                    seed: int = 0, config_hash: str = "") -> SimulationLog:
    """Run the full loop: sense -> integrators -> controller -> plant step.

    ``base`` is a trajectory from :mod:`neckmpc.perturbation` or ``None`` for
    an unperturbed run.  Aborts (with a partial log) on plant divergence or
    more than ``MAX_SOLVER_FAILURES`` consecutive non-converged solves.
    """
    dt = mpc_cfg.control_period if dt is None else dt
    if base is not None and duration > base.duration + 1e-9:
        raise ValueError("duration exceeds the base trajectory record")
    q0 = DEFAULT_INITIAL_POSTURE if initial_posture is None else np.asarray(initial_posture, dtype=float)
    n = int(round(duration / dt))

    icfg = integrator_cfg
    if (any(icfg.his_enabled) and icfg.his_reference is None) or \
            (any(icfg.hot_enabled) and icfg.hot_reference is None):
        # anchor the integrators at the starting posture
        from .plant import _head_kinematics_core
        hk0 = _head_kinematics_core(q0, np.zeros(N_DOF), 0.0, 0.0, params.packed())
        his_ref = icfg.his_reference if icfg.his_reference is not None \
            else np.array([hk0[0], hk0[1], hk0[2]])
        hot_ref = icfg.hot_reference if icfg.hot_reference is not None else q0.copy()
        icfg = IntegratorConfig(icfg.his_enabled.copy(), icfg.hot_enabled.copy(),
                                icfg.his_gain.copy(), icfg.hot_gain.copy(),
                                icfg.windup_limit, his_ref, hot_ref)

    t_arr = np.zeros(n)
    q_arr = np.zeros((n, N_DOF))
    qd_arr = np.zeros((n, N_DOF))
    by = np.zeros(n)
    bvy = np.zeros(n)
    bay = np.zeros(n)
    t_mpc = np.zeros((n, N_DOF))
    t_int = np.zeros((n, N_DOF))
    t_app = np.zeros((n, N_DOF))
    head = {name: np.zeros(n) for name in _HEAD_FIELDS}
    s_cost = np.zeros(n)
    s_iter = np.zeros(n, dtype=int)
    s_conv = np.zeros(n, dtype=bool)
    s_time = np.zeros(n)

    state = PlantState(q=q0.copy())
    if base is not None:
        state.base_y = float(base.pos_at(0.0))
        state.base_vy = float(base.vel_at(0.0))
    istate = IntegratorState()
    warm = None
    aborted = False
    abort_reason = ""
    failures = 0
    wall0 = time.perf_counter()
    steps_done = 0

    for i in range(n):
        t = i * dt
        ay_now = float(base.accel_at(t)) if base is not None else 0.0
        fb = sense(state, params)
        istate, tau_i = integrator_update(istate, fb, icfg, dt)
        sol = controller_step(state, fb, ay_now, W, mpc_cfg, params, warm=warm,
                              t_now=t, base_trajectory=base)
        warm = sol
        tau_total = JointTorques(sol.u0.tau + tau_i.tau)

        t_arr[i] = t
        q_arr[i] = state.q
        qd_arr[i] = state.qdot
        by[i] = state.base_y
        bvy[i] = state.base_vy
        bay[i] = ay_now
        t_mpc[i] = sol.u0.tau
        t_int[i] = tau_i.tau
        t_app[i] = tau_total.tau
        hk_raw = _plant._head_kinematics_core(state.q, state.qdot, state.base_y,
                                              state.base_vy, params.packed())
        for j, name in enumerate(_HEAD_FIELDS[:-1]):
            head[name][i] = hk_raw[j]
        head["cg_t1_anterior"][i] = hk_raw[8]
        s_cost[i] = sol.cost
        s_iter[i] = sol.iterations
        s_conv[i] = sol.converged
        s_time[i] = sol.solve_time
        steps_done = i + 1

        failures = 0 if sol.converged else failures + 1
        if failures > MAX_SOLVER_FAILURES:
            aborted = True
            abort_reason = (f"{failures} consecutive non-converged solves at t={t:.3f} s")
            break
        try:
            state = step(state, tau_total, base, t, dt, params,
                         joint_limits=mpc_cfg.joint_limits)
        except SimulationDiverged as err:
            aborted = True
            abort_reason = str(err)
            break

    wall = time.perf_counter() - wall0
    sl = slice(0, steps_done)
    simulated = steps_done * dt
    return SimulationLog(
        t=t_arr[sl], q=q_arr[sl], qdot=qd_arr[sl], base_y=by[sl], base_vy=bvy[sl],
        base_ay=bay[sl], tau_mpc=t_mpc[sl], tau_integrator=t_int[sl],
        tau_applied=t_app[sl], head={k: v[sl] for k, v in head.items()},
        solver_cost=s_cost[sl], solver_iterations=s_iter[sl],
        solver_converged=s_conv[sl], solver_time=s_time[sl],
        dt=dt, duration=simulated, seed=seed, config_hash=config_hash,
        wall_clock=wall, rtf=wall / simulated if simulated > 0 else 0.0,
        aborted=aborted, abort_reason=abort_reason, initial_posture=q0.copy())


@dataclass
class SteadyStateReport:
    settled: bool
    settling_time: float
    joint_errors: np.ndarray       # rad, final q minus initial posture
    head_in_space_pitch: float     # rad, final deviation from the initial pitch
    head_t1_angle: float           # rad, final deviation of the head-T1 angle
    cg_t1_anterior: float          # m, final


def steady_state_report(log: SimulationLog, tolerance: float = 0.01) -> SteadyStateReport:
    """Settling time and residual posture errors of an unperturbed run.

    Settling time is the first instant after which every joint rate stays
    below ``tolerance`` for the rest of the log; a run that never settles is
    reported as such, not raised.
    """
    rates_ok = np.all(np.abs(log.qdot) < tolerance, axis=1)
    settled = False
    settling_time = math.inf
    # last index where rates violate the tolerance
    bad = np.nonzero(~rates_ok)[0]
    if len(bad) == 0:
        settled = True
        settling_time = 0.0
    elif bad[-1] + 1 < len(log.t):
        settled = True
        settling_time = float(log.t[bad[-1] + 1])
    errors = log.q[-1] - log.initial_posture
    pitch0 = float(np.sum(log.initial_posture[[1, 3]]))
    pitch_dev = float(log.head["pitch"][-1]) - pitch0
    return SteadyStateReport(
        settled=settled, settling_time=settling_time, joint_errors=errors,
        head_in_space_pitch=pitch_dev,
        head_t1_angle=pitch_dev,
        cg_t1_anterior=float(log.head["cg_t1_anterior"][-1]))


def config_fingerprint(payload: dict) -> str:
    """Stable hash of a configuration dictionary for log provenance."""
    blob = json.dumps(payload, sort_keys=True, default=str).encode()
    return hashlib.sha256(blob).hexdigest()[:16]
