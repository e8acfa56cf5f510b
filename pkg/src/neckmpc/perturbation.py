"""Prescribed base (T1) lateral motion: periodic multisines and test pulses.

Trajectories carry closed-form position/velocity/acceleration so integrators
can sample them at arbitrary stage times without interpolation error.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from fractions import Fraction

import numpy as np

_TWO_PI = 2.0 * math.pi


@dataclass
class MultisineSpec:
    """Excited-bin description of a periodic multisine.

    Every frequency must be an integer multiple of 1/duration so the signal
    is periodic in the record; ``signal_kind`` selects whether ``amplitudes``
    are displacement (m) or acceleration (m/s^2) amplitudes.
    """

    frequencies: np.ndarray
    amplitudes: np.ndarray
    phase_seed: int = 0
    duration: float = 60.0
    dt: float = 0.01
    signal_kind: str = "position"

    def __post_init__(self):
        self.frequencies = np.asarray(self.frequencies, dtype=float)
        self.amplitudes = np.asarray(self.amplitudes, dtype=float)
        if self.frequencies.ndim != 1 or self.frequencies.shape != self.amplitudes.shape:
            raise ValueError("frequencies and amplitudes must be 1-d arrays of equal length")
        if np.any(self.frequencies <= 0):
            raise ValueError("frequencies must be positive")
        if len(np.unique(self.frequencies)) != len(self.frequencies):
            raise ValueError("frequencies must be distinct")
        if self.duration <= 0 or self.dt <= 0:
            raise ValueError("duration and dt must be positive")
        n = self.duration / self.dt
        if abs(n - round(n)) > 1e-9:
            raise ValueError("dt must divide duration")
        for f in self.frequencies:
            cycles = f * self.duration
            if abs(cycles - round(cycles)) > 1e-9:
                raise ValueError(
                    f"frequency {f:g} Hz is not periodic in {self.duration:g} s "
                    f"({cycles:g} cycles); use an integer multiple of "
                    f"{1.0 / self.duration:g} Hz")
        if self.signal_kind not in ("position", "acceleration"):
            raise ValueError("signal_kind must be 'position' or 'acceleration'")


@dataclass
class BaseTrajectory:
    """Sampled base motion with an exact analytic backing.

    ``y``/``vy``/``ay`` are mutually consistent closed-form derivatives; the
    ``*_at`` methods evaluate the analytic form at arbitrary times.
    """

    t: np.ndarray
    y: np.ndarray
    vy: np.ndarray
    ay: np.ndarray
    kind: str = "zero"
    # multisine payload: displacement amplitude, angular frequency, phase
    amps: np.ndarray = field(default_factory=lambda: np.zeros(0))
    omegas: np.ndarray = field(default_factory=lambda: np.zeros(0))
    phases: np.ndarray = field(default_factory=lambda: np.zeros(0))
    # pulse payload
    pulse_amplitude: float = 0.0
    pulse_onset: float = 0.0
    pulse_width: float = 0.0
    excited_frequencies: np.ndarray = field(default_factory=lambda: np.zeros(0))

    @property
    def duration(self) -> float:
        return float(self.t[-1])

    @property
    def dt(self) -> float:
        return float(self.t[1] - self.t[0])

    def pos_at(self, t):
        return self._eval(t, 0)

    def vel_at(self, t):
        return self._eval(t, 1)

    def accel_at(self, t):
        return self._eval(t, 2)

    def _eval(self, t, order):
        t = np.asarray(t, dtype=float)
        if self.kind == "multisine":
            ph = self.omegas * t[..., None] + self.phases
            if order == 0:
                out = np.sum(self.amps * np.sin(ph), axis=-1)
            elif order == 1:
                out = np.sum(self.amps * self.omegas * np.cos(ph), axis=-1)
            else:
                out = -np.sum(self.amps * self.omegas ** 2 * np.sin(ph), axis=-1)
            return out if out.ndim else float(out)
        if self.kind == "pulse":
            return _pulse_eval(t, self.pulse_amplitude, self.pulse_onset,
                               self.pulse_width, order)
        return np.zeros_like(t) if t.ndim else 0.0

    def fundamental_period(self) -> float:
        """Shortest period in which every excited bin completes whole cycles."""
        freqs = self.excited_frequencies
        if len(freqs) == 0:
            raise ValueError("trajectory has no excited frequencies")
        fracs = [Fraction(f).limit_denominator(10 ** 6) for f in freqs]
        g = fracs[0]
        for fr in fracs[1:]:
            g = Fraction(math.gcd(g.numerator, fr.numerator),
                         (g.denominator * fr.denominator) //
                         math.gcd(g.denominator, fr.denominator))
        return float(1.0 / g)


def _pulse_eval(t, amp, onset, width, order):
    t = np.asarray(t, dtype=float)
    tau = (t - onset) / width
    inside = (tau > 0.0) & (tau < 1.0)
    w = _TWO_PI / width
    if order == 0:
        out = np.where(inside, 0.5 * amp * (1.0 - np.cos(_TWO_PI * tau)), 0.0)
    elif order == 1:
        out = np.where(inside, 0.5 * amp * w * np.sin(_TWO_PI * tau), 0.0)
    else:
        out = np.where(inside, 0.5 * amp * w * w * np.cos(_TWO_PI * tau), 0.0)
    return out if out.ndim else float(out)


def generate_multisine(spec: MultisineSpec) -> BaseTrajectory:
    """Seeded pseudorandom-phase multisine with analytic derivatives."""
    rng = np.random.default_rng(spec.phase_seed)
    phases = rng.uniform(0.0, _TWO_PI, len(spec.frequencies))
    omegas = _TWO_PI * spec.frequencies
    if spec.signal_kind == "position":
        amps = spec.amplitudes.astype(float)
    else:
        # acceleration amplitudes: y = -(A/w^2) sin so that ydd = A sin
        amps = -spec.amplitudes / omegas ** 2
    n = int(round(spec.duration / spec.dt))
    t = spec.dt * np.arange(n + 1)
    traj = BaseTrajectory(
        t=t, y=np.zeros(n + 1), vy=np.zeros(n + 1), ay=np.zeros(n + 1),
        kind="multisine", amps=amps, omegas=omegas, phases=phases,
        excited_frequencies=spec.frequencies.copy())
    traj.y = traj.pos_at(t)
    traj.vy = traj.vel_at(t)
    traj.ay = traj.accel_at(t)
    return traj


def step_pulse(amplitude: float, onset: float, width: float, duration: float,
               dt: float) -> BaseTrajectory:
    """Raised-cosine lateral displacement pulse returning to rest."""
    if width <= 0:
        raise ValueError("width must be positive")
    if width > duration:
        raise ValueError(f"pulse width {width:g} s exceeds duration {duration:g} s")
    if onset < 0 or onset + width > duration:
        raise ValueError("pulse must lie inside [0, duration]")
    n = int(round(duration / dt))
    t = dt * np.arange(n + 1)
    traj = BaseTrajectory(
        t=t, y=np.zeros(n + 1), vy=np.zeros(n + 1), ay=np.zeros(n + 1),
        kind="pulse", pulse_amplitude=float(amplitude), pulse_onset=float(onset),
        pulse_width=float(width))
    traj.y = traj.pos_at(t)
    traj.vy = traj.vel_at(t)
    traj.ay = traj.accel_at(t)
    return traj


def zero_trajectory(duration: float, dt: float) -> BaseTrajectory:
    """Stationary base over the given window."""
    n = int(round(duration / dt))
    t = dt * np.arange(n + 1)
    z = np.zeros(n + 1)
    return BaseTrajectory(t=t, y=z, vy=z.copy(), ay=z.copy(), kind="zero")


def default_multisine_spec(duration: float = 60.0, dt: float = 0.01,
                           phase_seed: int = 0, amplitude: float = 0.002,
                           f_lo: float = 0.25, f_hi: float = 8.0,
                           n_bins: int = 20, period: float | None = None) -> MultisineSpec:
    """Log-spaced excited bins over the default band.

    Bins snap to multiples of 1/period (period defaults to the record
    duration); displacement amplitude is flat up to 2 Hz and rolls off as 1/f
    above.  With ``period`` shorter than ``duration`` the record holds several
    full signal periods, which frequency-response estimation needs.
    """
    if period is None:
        period = duration
    cycles = duration / period
    if abs(cycles - round(cycles)) > 1e-9:
        raise ValueError("duration must be a whole number of periods")
    raw = np.geomspace(f_lo, f_hi, n_bins)
    bins = np.unique(np.maximum(1, np.round(raw * period)))
    freqs = bins / period
    amps = amplitude * np.minimum(1.0, 2.0 / freqs)
    return MultisineSpec(frequencies=freqs, amplitudes=amps, phase_seed=phase_seed,
                         duration=duration, dt=dt, signal_kind="position")
