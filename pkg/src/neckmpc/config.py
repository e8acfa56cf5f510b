"""Run configuration: strict YAML schema, defaults, and object builders.

Every section is optional and falls back to documented defaults; unknown
sections or keys are rejected with a message naming them.  The effective
(merged) configuration is hashed into every output for provenance.
"""

from __future__ import annotations

import copy
import hashlib
import json
import math

import numpy as np
import yaml

from .plant import N_DOF, PlantParams
from .perturbation import MultisineSpec, generate_multisine, step_pulse
from .sensory import IntegratorConfig, preset_configuration
from .mpc import MpcConfig, WeightVector, TUNED_LATERAL_WEIGHTS
from .tuning import GaConfig
from .forest import ForestConfig


class ConfigError(ValueError):
    """Configuration file problem; message names the offending section/key."""


DEFAULTS: dict = {
    "plant": {
        "neck_mass": 1.1,
        "neck_length": 0.12,
        "neck_cg_offset": 0.06,
        "head_mass": 4.2,
        "head_cg_distance": 0.1346,
        "head_cg_anterior_offset": 0.0,
        "neck_inertia": [0.0030, 0.0030, 0.0015],
        "head_inertia": [0.0230, 0.0270, 0.0180],
        "passive_stiffness": [25.0] * N_DOF,
        "passive_damping": [1.2] * N_DOF,
        "passive_rest": [0.0, math.radians(4.0), 0.0, math.radians(-2.0), 0.0],
        "gravity": 9.81,
        "initial_posture": [0.0, 0.0, 0.0, math.radians(11.36), 0.0],
    },
    "perturbation": {
        "kind": "multisine",          # multisine | pulse | none
        "duration": 60.0,
        "dt": 0.01,
        "phase_seed": 0,
        "f_lo": 0.25,
        "f_hi": 8.0,
        "n_bins": 20,
        "amplitude": 0.002,
        "period": None,               # multisine period; None = duration
        "pulse_amplitude": 0.02,
        "pulse_onset": 1.0,
        "pulse_width": 0.5,
    },
    "integrators": {
        "preset": "muscle",           # muscle | muscle_unhis | full_integrators
        "his_gain": [8.0, 8.0],
        "hot_gain": [8.0, 8.0],
        "windup_limit": 1.0,
    },
    "mpc": {
        "interval_count": 10,
        "interval_length": 0.040,
        "nodes_per_interval": 4,
        "control_period": 0.010,
        "torque_bounds": [30.0, 30.0, 20.0, 20.0, 20.0],
        "joint_limits": [math.radians(45.0)] * 2 + [math.radians(70.0)] * 3,
        "limit_penalty": 1.0e4,
        "max_iterations": 30,
        "tolerance": 1.0e-6,
        "warm_start": True,
        "preview": "none",
    },
    "weights": {
        "effort": {k: float(v) for k, v in zip(WeightVector.EFFORT_KEYS,
                                               TUNED_LATERAL_WEIGHTS.effort)},
        "conflict": {k: float(v) for k, v in zip(WeightVector.CONFLICT_KEYS,
                                                 TUNED_LATERAL_WEIGHTS.conflict)},
    },
    "ga": {
        "population": 32,
        "generations": 20,
        "crossover_prob": 0.9,
        "crossover_eta": 15.0,
        "mutation_prob": 0.1,
        "mutation_eta": 20.0,
        "lower_bound": 0.1,
        "upper_bound": 100.0,
        "seed": 0,
        "parallel_width": 1,
    },
    "forest": {
        "tree_count": 200,
        "max_depth": 8,
        "min_samples_leaf": 5,
        "bootstrap_fraction": 1.0,
        "features_per_split": 4,
        "seed": 0,
    },
    "io": {
        "out_dir": "out",
        "seed": 0,
        "plot": False,
    },
}


def _merge_strict(defaults: dict, user: dict, path: str) -> dict:
    out = copy.deepcopy(defaults)
    for key, val in user.items():
        where = f"{path}.{key}" if path else str(key)
        if key not in defaults:
            raise ConfigError(f"unknown configuration key: {where}")
        if isinstance(defaults[key], dict) and not isinstance(val, dict):
            raise ConfigError(f"section {where} must be a mapping")
        if isinstance(defaults[key], dict):
            out[key] = _merge_strict(defaults[key], val, where)
        else:
            out[key] = val
    return out


def load_config(path=None) -> dict:
    """Merged effective configuration; strict about unknown keys."""
    user = {}
    if path is not None:
        with open(path) as f:
            user = yaml.safe_load(f) or {}
        if not isinstance(user, dict):
            raise ConfigError(f"config root must be a mapping: {path}")
    return _merge_strict(DEFAULTS, user, "")


def config_hash(cfg: dict) -> str:
    blob = json.dumps(cfg, sort_keys=True, default=str).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


def print_defaults() -> str:
    return yaml.safe_dump(DEFAULTS, sort_keys=False, default_flow_style=None)


# ---------------------------------------------------------------------------
# builders
# ---------------------------------------------------------------------------


def make_plant(cfg: dict) -> PlantParams:
    c = cfg["plant"]
    try:
        return PlantParams(
            neck_mass=float(c["neck_mass"]), neck_length=float(c["neck_length"]),
            neck_cg_offset=float(c["neck_cg_offset"]), head_mass=float(c["head_mass"]),
            head_cg_distance=float(c["head_cg_distance"]),
            head_cg_anterior_offset=float(c["head_cg_anterior_offset"]),
            neck_inertia=np.asarray(c["neck_inertia"], dtype=float),
            head_inertia=np.asarray(c["head_inertia"], dtype=float),
            passive_stiffness=np.asarray(c["passive_stiffness"], dtype=float),
            passive_damping=np.asarray(c["passive_damping"], dtype=float),
            passive_rest=np.asarray(c["passive_rest"], dtype=float),
            gravity=float(c["gravity"]))
    except ValueError as err:
        raise ConfigError(f"plant: {err}") from None


def initial_posture(cfg: dict) -> np.ndarray:
    q0 = np.asarray(cfg["plant"]["initial_posture"], dtype=float)
    if q0.shape != (N_DOF,):
        raise ConfigError("plant.initial_posture must hold one angle per DoF")
    return q0


def make_base(cfg: dict, seed_offset: int = 0):
    c = cfg["perturbation"]
    kind = c["kind"]
    if kind == "none":
        return None
    if kind == "pulse":
        try:
            return step_pulse(float(c["pulse_amplitude"]), float(c["pulse_onset"]),
                              float(c["pulse_width"]), float(c["duration"]),
                              float(c["dt"]))
        except ValueError as err:
            raise ConfigError(f"perturbation: {err}") from None
    if kind != "multisine":
        raise ConfigError(f"perturbation.kind must be multisine, pulse or none, got {kind!r}")
    from .perturbation import default_multisine_spec
    try:
        spec = default_multisine_spec(
            duration=float(c["duration"]), dt=float(c["dt"]),
            phase_seed=int(c["phase_seed"]) + seed_offset,
            amplitude=float(c["amplitude"]), f_lo=float(c["f_lo"]),
            f_hi=float(c["f_hi"]), n_bins=int(c["n_bins"]),
            period=None if c["period"] is None else float(c["period"]))
        return generate_multisine(spec)
    except ValueError as err:
        raise ConfigError(f"perturbation: {err}") from None


def make_integrators(cfg: dict, preset: str | None = None) -> IntegratorConfig:
    c = cfg["integrators"]
    name = preset or c["preset"]
    try:
        ic = preset_configuration(name)
        return IntegratorConfig(
            his_enabled=ic.his_enabled, hot_enabled=ic.hot_enabled,
            his_gain=np.asarray(c["his_gain"], dtype=float),
            hot_gain=np.asarray(c["hot_gain"], dtype=float),
            windup_limit=float(c["windup_limit"]))
    except ValueError as err:
        raise ConfigError(f"integrators: {err}") from None


def make_mpc(cfg: dict) -> MpcConfig:
    c = cfg["mpc"]
    try:
        return MpcConfig(
            interval_count=int(c["interval_count"]),
            interval_length=float(c["interval_length"]),
            nodes_per_interval=int(c["nodes_per_interval"]),
            control_period=float(c["control_period"]),
            torque_bounds=np.asarray(c["torque_bounds"], dtype=float),
            joint_limits=np.asarray(c["joint_limits"], dtype=float),
            limit_penalty=float(c["limit_penalty"]),
            max_iterations=int(c["max_iterations"]),
            tolerance=float(c["tolerance"]),
            warm_start=bool(c["warm_start"]),
            preview=str(c["preview"]))
    except ValueError as err:
        raise ConfigError(f"mpc: {err}") from None


def make_weights(cfg: dict) -> WeightVector:
    c = cfg["weights"]
    try:
        return WeightVector.from_mapping(c["effort"], c["conflict"])
    except ValueError as err:
        raise ConfigError(f"weights: {err}") from None


def make_ga(cfg: dict) -> GaConfig:
    c = cfg["ga"]
    lo, hi = c["lower_bound"], c["upper_bound"]
    lo = np.full(10, float(lo)) if np.isscalar(lo) else np.asarray(lo, dtype=float)
    hi = np.full(10, float(hi)) if np.isscalar(hi) else np.asarray(hi, dtype=float)
    try:
        return GaConfig(
            population=int(c["population"]), generations=int(c["generations"]),
            crossover_prob=float(c["crossover_prob"]),
            crossover_eta=float(c["crossover_eta"]),
            mutation_prob=float(c["mutation_prob"]),
            mutation_eta=float(c["mutation_eta"]),
            lower_bounds=lo, upper_bounds=hi,
            seed=int(c["seed"]), parallel_width=int(c["parallel_width"]))
    except ValueError as err:
        raise ConfigError(f"ga: {err}") from None


def make_forest(cfg: dict) -> ForestConfig:
    c = cfg["forest"]
    try:
        return ForestConfig(
            tree_count=int(c["tree_count"]), max_depth=int(c["max_depth"]),
            min_samples_leaf=int(c["min_samples_leaf"]),
            bootstrap_fraction=float(c["bootstrap_fraction"]),
            features_per_split=int(c["features_per_split"]), seed=int(c["seed"]))
    except ValueError as err:
        raise ConfigError(f"forest: {err}") from None
