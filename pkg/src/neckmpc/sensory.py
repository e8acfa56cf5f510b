"""Sensory feedback extraction and the posture-drift integrators.

The controller consumes joint rates only (partial somatosensory feedback);
vestibular head-in-space signals feed the drift integrators.  Two integrator
families act per joint, both guarding the starting posture: head-in-space
(HiS) channels integrate the global head orientation angle about the
joint's roll and pitch axes, head-on-trunk (HoT) channels integrate the
joint's own angles, each measured against its reference (anchored at the
start of a run).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .plant import N_DOF, PlantParams, PlantState, JointTorques, _head_kinematics_core

PRESET_NAMES = ("muscle", "muscle_unhis", "full_integrators")

# joint -> (roll DoF, pitch DoF) indices for the HiS channels
_HIS_DOF = ((0, 1), (2, 3))
# joint -> owned DoF indices for the HoT channels
_HOT_DOF = ((0, 1), (2, 3, 4))


@dataclass
class SensoryFeedback:
    joint_rates: np.ndarray          # rad/s, somatosensory
    head_in_space_angles: np.ndarray  # rad: roll, pitch, yaw (vestibular)
    head_in_space_rates: np.ndarray   # rad/s
    head_on_trunk_angles: np.ndarray  # rad, relative joint angles


@dataclass
class IntegratorConfig:
    his_enabled: np.ndarray = field(default_factory=lambda: np.zeros(2, dtype=bool))
    hot_enabled: np.ndarray = field(default_factory=lambda: np.zeros(2, dtype=bool))
    his_gain: np.ndarray = field(default_factory=lambda: np.full(2, 8.0))
    hot_gain: np.ndarray = field(default_factory=lambda: np.full(2, 8.0))
    windup_limit: float = 1.0
    # references the channels integrate against; None anchors at run start
    his_reference: np.ndarray | None = None
    hot_reference: np.ndarray | None = None

    def __post_init__(self):
        self.his_enabled = np.asarray(self.his_enabled, dtype=bool)
        self.hot_enabled = np.asarray(self.hot_enabled, dtype=bool)
        self.his_gain = np.asarray(self.his_gain, dtype=float)
        self.hot_gain = np.asarray(self.hot_gain, dtype=float)
        for name in ("his_enabled", "hot_enabled", "his_gain", "hot_gain"):
            if getattr(self, name).shape != (2,):
                raise ValueError(f"{name} must hold one value per joint (lower, upper)")
        if np.any(self.his_gain < 0) or np.any(self.hot_gain < 0):
            raise ValueError("integrator gains must be non-negative")
        if not self.windup_limit > 0:
            raise ValueError("windup_limit must be positive")
        if self.his_reference is not None:
            self.his_reference = np.asarray(self.his_reference, dtype=float)
            if self.his_reference.shape != (3,):
                raise ValueError("his_reference must hold roll, pitch, yaw")
        if self.hot_reference is not None:
            self.hot_reference = np.asarray(self.hot_reference, dtype=float)
            if self.hot_reference.shape != (N_DOF,):
                raise ValueError(f"hot_reference must have shape ({N_DOF},)")


@dataclass
class IntegratorState:
    his_integral: np.ndarray = field(default_factory=lambda: np.zeros((2, 2)))
    hot_integral: np.ndarray = field(default_factory=lambda: np.zeros(N_DOF))

    def copy(self) -> "IntegratorState":
        return IntegratorState(self.his_integral.copy(), self.hot_integral.copy())


def sense(state: PlantState, params: PlantParams) -> SensoryFeedback:
    """Noise-free, delay-free sensory extraction from the plant state."""
    out = _head_kinematics_core(state.q, state.qdot, state.base_y, state.base_vy,
                                params.packed())
    return SensoryFeedback(
        joint_rates=state.qdot.copy(),
        head_in_space_angles=np.array([out[0], out[1], out[2]]),
        head_in_space_rates=np.array([out[4], out[5], out[6]]),
        head_on_trunk_angles=state.q.copy())


def integrator_update(istate: IntegratorState, fb: SensoryFeedback,
                      cfg: IntegratorConfig, dt: float) -> tuple[IntegratorState, JointTorques]:
    """Advance the enabled integrators one step and return their torques.

    Integrals are clamped to the windup limit; each enabled channel
    contributes ``-gain * integral`` on its joint axis, disabled channels
    contribute exactly zero.
    """
    if dt <= 0:
        raise ValueError("dt must be positive")
    new = istate.copy()
    tau = np.zeros(N_DOF)
    lim = cfg.windup_limit
    ref = cfg.hot_reference if cfg.hot_reference is not None else np.zeros(N_DOF)
    href = cfg.his_reference if cfg.his_reference is not None else np.zeros(3)
    for j in range(2):
        if cfg.his_enabled[j]:
            for a, dof in enumerate(_HIS_DOF[j]):
                val = new.his_integral[j, a] + (fb.head_in_space_angles[a] - href[a]) * dt
                val = min(max(val, -lim), lim)
                new.his_integral[j, a] = val
                tau[dof] -= cfg.his_gain[j] * val
        if cfg.hot_enabled[j]:
            for dof in _HOT_DOF[j]:
                val = new.hot_integral[dof] + (fb.head_on_trunk_angles[dof] - ref[dof]) * dt
                val = min(max(val, -lim), lim)
                new.hot_integral[dof] = val
                tau[dof] -= cfg.hot_gain[j] * val
    return new, JointTorques(tau)


def preset_configuration(name: str) -> IntegratorConfig:
    """Named integrator layouts: no integrators, upper-joint HiS only, or all on."""
    if name == "muscle":
        return IntegratorConfig()
    if name == "muscle_unhis":
        return IntegratorConfig(his_enabled=np.array([False, True]))
    if name == "full_integrators":
        return IntegratorConfig(his_enabled=np.array([True, True]),
                                hot_enabled=np.array([True, True]))
    raise ValueError(f"unknown integrator preset {name!r}; valid names: "
                     + ", ".join(PRESET_NAMES))
