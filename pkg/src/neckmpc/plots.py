"""SVG figure emission for simulation, posture, FRF and importance outputs."""

from __future__ import annotations

import numpy as np
import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

from .plant import DOF_NAMES  # noqa: E402
from .analysis import FRF_CHANNELS, FEVAL_NAMES  # noqa: E402
from .tuning import WEIGHT_KEYS  # noqa: E402


def plot_timeseries(log, path) -> None:
    fig, axes = plt.subplots(4, 1, figsize=(9, 10), sharex=True)
    for i, name in enumerate(DOF_NAMES):
        axes[0].plot(log.t, np.degrees(log.q[:, i]), label=name)
    axes[0].set_ylabel("joint angle [deg]")
    axes[0].legend(fontsize=7, ncol=3)
    axes[1].plot(log.t, 1000 * log.head["y"], label="head y")
    axes[1].plot(log.t, 1000 * log.base_y, label="base y", ls="--")
    axes[1].set_ylabel("lateral [mm]")
    axes[1].legend(fontsize=7)
    axes[2].plot(log.t, np.degrees(log.head["roll"]), label="roll")
    axes[2].plot(log.t, np.degrees(log.head["yaw"]), label="yaw")
    axes[2].plot(log.t, np.degrees(log.head["pitch"]), label="pitch")
    axes[2].set_ylabel("head angle [deg]")
    axes[2].legend(fontsize=7)
    for i, name in enumerate(DOF_NAMES):
        axes[3].plot(log.t, log.tau_applied[:, i], label=name)
    axes[3].set_ylabel("torque [N m]")
    axes[3].set_xlabel("time [s]")
    fig.tight_layout()
    fig.savefig(path, format="svg")
    plt.close(fig)


def plot_posture(logs: dict, path) -> None:
    """Transient joint-angle comparison across integrator presets."""
    fig, axes = plt.subplots(2, 1, figsize=(9, 6), sharex=True)
    for preset, log in logs.items():
        axes[0].plot(log.t, np.degrees(log.q[:, 1]), label=preset)
        axes[1].plot(log.t, np.degrees(log.q[:, 3]), label=preset)
    axes[0].set_ylabel("lower pitch [deg]")
    axes[1].set_ylabel("upper pitch [deg]")
    axes[1].set_xlabel("time [s]")
    axes[0].legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(path, format="svg")
    plt.close(fig)


def plot_frf(frf, path, reference=None) -> None:
    fig, axes = plt.subplots(2, len(FRF_CHANNELS), figsize=(11, 6), sharex=True)
    for c, ch in enumerate(FRF_CHANNELS):
        axes[0, c].loglog(frf.frequencies, frf.gain(ch), "o-", label="simulated")
        if reference is not None:
            axes[0, c].loglog(reference.frequencies, reference.frf_gain[ch], "s--",
                              label="reference")
        axes[0, c].set_title(ch)
        axes[1, c].semilogx(frf.frequencies, np.degrees(frf.phase(ch)), "o-")
        if reference is not None:
            axes[1, c].semilogx(reference.frequencies,
                                np.degrees(reference.frf_phase[ch]), "s--")
        axes[1, c].set_xlabel("frequency [Hz]")
    axes[0, 0].set_ylabel("gain")
    axes[1, 0].set_ylabel("phase [deg]")
    axes[0, 0].legend(fontsize=7)
    fig.tight_layout()
    fig.savefig(path, format="svg")
    plt.close(fig)


def plot_importance(matrix, path) -> None:
    fig, ax = plt.subplots(figsize=(9, 6))
    im = ax.imshow(matrix.values, aspect="auto", cmap="viridis")
    ax.set_xticks(range(len(WEIGHT_KEYS)))
    ax.set_xticklabels([f"W_{k}" for k in WEIGHT_KEYS], rotation=45, fontsize=8)
    ax.set_yticks(range(len(FEVAL_NAMES)))
    ax.set_yticklabels(FEVAL_NAMES, fontsize=8)
    fig.colorbar(im, ax=ax, label="normalized importance")
    fig.tight_layout()
    fig.savefig(path, format="svg")
    plt.close(fig)
