"""Response analysis: time-domain errors and base-to-head frequency responses.

The twelve tuning objectives are root-mean-square errors between a simulated
run and a reference: six time-domain channels (global head roll, yaw,
lateral position and their rates) and gain/phase of three frequency response
functions (head lateral velocity, roll rate and yaw rate, each against the
base lateral velocity at the multisine-excited bins).
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field

import numpy as np

#: objective order: time-domain RMSEs then FRF gain and phase RMSEs
FEVAL_NAMES = ("roll", "yaw", "y", "wroll", "wyaw", "vy",
               "g_vy", "g_wroll", "g_wyaw", "p_vy", "p_wroll", "p_wyaw")

#: head log channels feeding the six time-domain objectives
TIME_CHANNELS = ("roll", "yaw", "y", "wroll", "wyaw", "vy")

#: FRF output channels (input is always base lateral velocity)
FRF_CHANNELS = ("vy", "wroll", "wyaw")

DEFAULT_PENALTY = 1.0e6


@dataclass
class FrfEstimate:
    """Complex response per channel at the excited multisine bins."""

    frequencies: np.ndarray
    response: dict[str, np.ndarray]     # channel -> complex H at each bin

    def gain(self, channel: str) -> np.ndarray:
        return np.abs(self.response[channel])

    def phase(self, channel: str) -> np.ndarray:
        """Phase in radians, unwrapped across the band."""
        return np.unwrap(np.angle(self.response[channel]))


@dataclass
class FevalVector:
    values: np.ndarray

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=float)
        if self.values.shape != (12,):
            raise ValueError("a feval vector holds exactly 12 objectives")

    def __getitem__(self, i):
        return self.values[i]

    def total(self) -> float:
        return float(np.sum(self.values))

    def as_dict(self) -> dict[str, float]:
        return {n: float(v) for n, v in zip(FEVAL_NAMES, self.values)}

    @classmethod
    def penalty(cls, value: float = DEFAULT_PENALTY) -> "FevalVector":
        return cls(np.full(12, float(value)))


def _fundamental_period(freqs: np.ndarray) -> float:
    """Shortest period in which every excited bin completes whole cycles."""
    from fractions import Fraction
    fracs = [Fraction(float(f)).limit_denominator(10 ** 6) for f in freqs]
    g = fracs[0]
    for fr in fracs[1:]:
        g = Fraction(math.gcd(g.numerator, fr.numerator),
                     (g.denominator * fr.denominator)
                     // math.gcd(g.denominator, fr.denominator))
    return float(1.0 / g)


def estimate_frf(input_signal: np.ndarray, output_signal: np.ndarray, dt: float,
                 excited_freqs: np.ndarray, discard_periods: int = 1) -> np.ndarray:
    """Single-channel frequency response at the excited bins.

    The first ``discard_periods`` multisine periods are dropped as transient
    and the response is averaged over the remaining full periods.  Raises if
    fewer than one full period survives or a bin is not periodic in the
    analysis window.
    """
    u = np.asarray(input_signal, dtype=float)
    y = np.asarray(output_signal, dtype=float)
    if u.shape != y.shape or u.ndim != 1:
        raise ValueError("input and output must be equal-length 1-d series")
    freqs = np.asarray(excited_freqs, dtype=float)
    period = _fundamental_period(freqs)
    n_per = int(round(period / dt))
    if abs(n_per * dt - period) > 1e-9 * max(1.0, period):
        raise ValueError("dt does not divide the multisine period")
    n_periods = len(u) // n_per
    if n_periods - discard_periods < 1:
        raise ValueError(
            f"record holds {n_periods} full periods of {period:g} s; need at "
            f"least {discard_periods + 1} (transient discard plus one)")
    H = np.zeros((n_periods - discard_periods, len(freqs)), dtype=complex)
    t = dt * np.arange(n_per)
    # single-bin Fourier projections per period
    basis = np.exp(-2j * np.pi * freqs[:, None] * t[None, :])
    for p in range(discard_periods, n_periods):
        seg = slice(p * n_per, (p + 1) * n_per)
        U = basis @ u[seg]
        Y = basis @ y[seg]
        bad = np.abs(U) < 1e-14 * max(1.0, np.abs(u).max()) * n_per
        if np.any(bad):
            raise ValueError(
                f"excitation has no power at bins {freqs[bad]} Hz in the window")
        H[p - discard_periods] = Y / U
    return H.mean(axis=0)


def estimate_frf_set(base, log, discard_periods: int = 1) -> FrfEstimate:
    """Head-response FRFs of a simulation log against its base trajectory.

    Input is the base lateral velocity; outputs are the head lateral
    velocity, roll rate and yaw rate.
    """
    freqs = np.asarray(base.excited_frequencies, dtype=float)
    if len(freqs) == 0:
        raise ValueError("base trajectory carries no excited-bin metadata")
    u = base.vel_at(log.t)
    resp = {}
    for ch in FRF_CHANNELS:
        resp[ch] = estimate_frf(u, log.head[ch], log.dt, freqs, discard_periods)
    return FrfEstimate(frequencies=freqs, response=resp)


def time_domain_rmse(sim: np.ndarray, ref: np.ndarray) -> float:
    """Root of the mean squared pointwise difference."""
    sim = np.asarray(sim, dtype=float)
    ref = np.asarray(ref, dtype=float)
    if sim.shape != ref.shape:
        raise ValueError(f"series lengths differ: {sim.shape} vs {ref.shape}")
    return float(np.sqrt(np.mean((sim - ref) ** 2)))


@dataclass
class ReferenceSet:
    """Reference responses a candidate run is scored against."""

    t: np.ndarray
    series: dict[str, np.ndarray]       # the six time-domain channels
    frequencies: np.ndarray
    frf_gain: dict[str, np.ndarray]     # linear gain per FRF channel
    frf_phase: dict[str, np.ndarray]    # unwrapped phase, rad
    dt: float = 0.0

    @classmethod
    def from_log(cls, log, base, discard_periods: int = 1) -> "ReferenceSet":
        frf = estimate_frf_set(base, log, discard_periods)
        return cls(
            t=log.t.copy(),
            series={ch: log.head[ch].copy() for ch in TIME_CHANNELS},
            frequencies=frf.frequencies.copy(),
            frf_gain={ch: frf.gain(ch) for ch in FRF_CHANNELS},
            frf_phase={ch: frf.phase(ch) for ch in FRF_CHANNELS},
            dt=log.dt)

    # CSV schema: one file for time series, one for the FRF table
    def write_csv(self, series_path, frf_path) -> None:
        with open(series_path, "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(["t"] + list(TIME_CHANNELS))
            for i in range(len(self.t)):
                w.writerow([repr(self.t[i])]
                           + [repr(self.series[ch][i]) for ch in TIME_CHANNELS])
        with open(frf_path, "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(["f", "g_vy", "p_vy", "g_wroll", "p_wroll", "g_wyaw", "p_wyaw"])
            for i in range(len(self.frequencies)):
                row = [self.frequencies[i]]
                for ch in FRF_CHANNELS:
                    row += [self.frf_gain[ch][i], self.frf_phase[ch][i]]
                w.writerow([repr(float(v)) for v in row])

    @classmethod
    def read_csv(cls, series_path, frf_path) -> "ReferenceSet":
        with open(series_path, newline="") as f:
            r = csv.reader(f)
            header = next(r)
            if header != ["t"] + list(TIME_CHANNELS):
                raise ValueError(f"unexpected series columns in {series_path}")
            mat = np.array([[float(v) for v in row] for row in r])
        with open(frf_path, newline="") as f:
            r = csv.reader(f)
            header = next(r)
            if header != ["f", "g_vy", "p_vy", "g_wroll", "p_wroll", "g_wyaw", "p_wyaw"]:
                raise ValueError(f"unexpected FRF columns in {frf_path}")
            fm = np.array([[float(v) for v in row] for row in r])
        return cls(
            t=mat[:, 0],
            series={ch: mat[:, 1 + i] for i, ch in enumerate(TIME_CHANNELS)},
            frequencies=fm[:, 0],
            frf_gain={"vy": fm[:, 1], "wroll": fm[:, 3], "wyaw": fm[:, 5]},
            frf_phase={"vy": fm[:, 2], "wroll": fm[:, 4], "wyaw": fm[:, 6]},
            dt=float(mat[1, 0] - mat[0, 0]) if len(mat) > 1 else 0.0)


def evaluate_fevals(log, reference: ReferenceSet, base=None,
                    penalty: float = DEFAULT_PENALTY,
                    discard_periods: int = 1) -> FevalVector:
    """Score a run against a reference on all twelve objectives.

    Gain errors are taken on a log-magnitude (dB) scale, phase errors in
    degrees.  Aborted runs score the penalty value on every objective.
    """
    if getattr(log, "aborted", False):
        return FevalVector.penalty(penalty)
    vals = np.empty(12)
    n = min(len(log.t), len(reference.t))
    for i, ch in enumerate(TIME_CHANNELS):
        vals[i] = time_domain_rmse(log.head[ch][:n], reference.series[ch][:n])
    if base is None:
        raise ValueError("base trajectory required for the FRF objectives")
    frf = estimate_frf_set(base, log, discard_periods)
    for i, ch in enumerate(FRF_CHANNELS):
        g_sim = 20.0 * np.log10(np.maximum(frf.gain(ch), 1e-300))
        g_ref = 20.0 * np.log10(np.maximum(reference.frf_gain[ch], 1e-300))
        vals[6 + i] = time_domain_rmse(g_sim, g_ref)
        p_sim = np.degrees(frf.phase(ch))
        p_ref = np.degrees(reference.frf_phase[ch])
        vals[9 + i] = time_domain_rmse(p_sim, p_ref)
    return FevalVector(vals)
