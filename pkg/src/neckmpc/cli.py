"""Command-line entry point: simulate | posture | frf | tune | importance.

Exit codes: 0 success, 2 configuration or usage error, 3 runtime abort.
All outputs embed the effective-configuration hash for reproducibility.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from . import config as cfgmod
from .config import ConfigError
from .analysis import (FEVAL_NAMES, ReferenceSet, estimate_frf_set, evaluate_fevals)
from .harness import SimulationLog, run_closed_loop, steady_state_report
from .mpc import WeightVector
from .sensory import PRESET_NAMES
from .tuning import (run_ga, select_knee, read_samples_csv, write_samples_csv,
                     write_archive_csv, WEIGHT_KEYS)
from .forest import importance_matrix

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_RUNTIME = 3


def _load(args):
    cfg = cfgmod.load_config(args.config)
    if args.seed is not None:
        cfg["io"]["seed"] = args.seed
    if args.out is not None:
        cfg["io"]["out_dir"] = args.out
    if args.plot:
        cfg["io"]["plot"] = True
    return cfg


def _outdir(cfg) -> Path:
    out = Path(cfg["io"]["out_dir"])
    out.mkdir(parents=True, exist_ok=True)
    return out


def _run_one(cfg, preset=None, duration=None, base=None):
    params = cfgmod.make_plant(cfg)
    icfg = cfgmod.make_integrators(cfg, preset)
    mpc_cfg = cfgmod.make_mpc(cfg)
    W = cfgmod.make_weights(cfg)
    if base is None and cfg["perturbation"]["kind"] != "none":
        base = cfgmod.make_base(cfg, seed_offset=int(cfg["io"]["seed"]))
    duration = duration if duration is not None else (
        base.duration if base is not None else 5.0)
    return run_closed_loop(
        params, icfg, mpc_cfg, W, base, duration,
        initial_posture=cfgmod.initial_posture(cfg),
        seed=int(cfg["io"]["seed"]), config_hash=cfgmod.config_hash(cfg)), base


def cmd_simulate(args) -> int:
    cfg = _load(args)
    out = _outdir(cfg)
    log, base = _run_one(cfg, preset=args.preset, duration=args.duration)
    log.write_csv(out / "log.csv")
    log.write_meta(out / "meta.json")
    if cfg["io"]["plot"]:
        from . import plots
        plots.plot_timeseries(log, out / "timeseries.svg")
    print(f"simulated {log.duration:.2f} s in {log.wall_clock:.2f} s wall "
          f"(RTF {log.rtf:.2f}); log at {out / 'log.csv'}")
    if log.aborted:
        print(f"run aborted: {log.abort_reason}", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


def cmd_posture(args) -> int:
    cfg = _load(args)
    out = _outdir(cfg)
    presets = list(PRESET_NAMES) if args.presets == "all" else [args.presets]
    for p in presets:
        if p not in PRESET_NAMES:
            raise ConfigError(f"unknown preset {p!r}; valid: {', '.join(PRESET_NAMES)}")
    cfg_unperturbed = dict(cfg)
    cfg_unperturbed["perturbation"] = dict(cfg["perturbation"], kind="none")
    rows = []
    logs = {}
    aborted = False
    for preset in presets:
        log, _ = _run_one(cfg_unperturbed, preset=preset, duration=args.duration)
        logs[preset] = log
        rep = steady_state_report(log)
        aborted = aborted or log.aborted
        rows.append({
            "preset": preset,
            "settled": rep.settled,
            "settling_time_s": rep.settling_time,
            "joint_errors_deg": np.degrees(rep.joint_errors).round(4).tolist(),
            "head_in_space_pitch_deg": round(float(np.degrees(rep.head_in_space_pitch)), 4),
            "cg_t1_anterior_mm": round(rep.cg_t1_anterior * 1000, 3),
            "rtf": round(log.rtf, 3),
            "aborted": log.aborted,
        })
    report = {"config_hash": cfgmod.config_hash(cfg), "rows": rows}
    with open(out / "posture.json", "w") as f:
        json.dump(report, f, indent=2)
    for row in rows:
        print(f"{row['preset']:18s} settled={row['settled']} "
              f"t={row['settling_time_s']:.2f}s "
              f"errors={row['joint_errors_deg']} deg "
              f"pitch={row['head_in_space_pitch_deg']:.3f} deg "
              f"cg={row['cg_t1_anterior_mm']:.1f} mm")
    if cfg["io"]["plot"]:
        from . import plots
        plots.plot_posture(logs, out / "posture.svg")
    return EXIT_RUNTIME if aborted else EXIT_OK


def cmd_frf(args) -> int:
    cfg = _load(args)
    out = _outdir(cfg)
    log, base = _run_one(cfg)
    if log.aborted:
        print(f"run aborted: {log.abort_reason}", file=sys.stderr)
        return EXIT_RUNTIME
    if base is None or len(base.excited_frequencies) == 0:
        raise ConfigError("frf requires a multisine perturbation (excited bins)")
    frf = estimate_frf_set(base, log)
    with open(out / "frf.csv", "w") as f:
        f.write("f,g_vy,p_vy,g_wroll,p_wroll,g_wyaw,p_wyaw\n")
        for i, fr in enumerate(frf.frequencies):
            cells = [fr]
            for ch in ("vy", "wroll", "wyaw"):
                cells += [frf.gain(ch)[i], frf.phase(ch)[i]]
            f.write(",".join(repr(float(c)) for c in cells) + "\n")
    reference = None
    if args.reference is not None:
        series_path, frf_path = args.reference, args.reference_frf
        if frf_path is None:
            raise ConfigError("--reference-frf is required with --reference")
        reference = ReferenceSet.read_csv(series_path, frf_path)
        fe = evaluate_fevals(log, reference, base=base)
        with open(out / "fevals.json", "w") as f:
            json.dump({"config_hash": cfgmod.config_hash(cfg),
                       "fevals": fe.as_dict()}, f, indent=2)
        print("fevals: " + " ".join(f"{n}={v:.4g}" for n, v in fe.as_dict().items()))
    if cfg["io"]["plot"]:
        from . import plots
        plots.plot_frf(frf, out / "frf.svg", reference)
    print(f"FRF table at {out / 'frf.csv'}")
    return EXIT_OK


def _self_identification_reference(cfg):
    """Reference responses simulated with the configured weight vector."""
    log, base = _run_one(cfg)
    if log.aborted:
        raise RuntimeError(f"reference run aborted: {log.abort_reason}")
    return ReferenceSet.from_log(log, base), base


def cmd_tune(args) -> int:
    cfg = _load(args)
    out = _outdir(cfg)
    ga_cfg = cfgmod.make_ga(cfg)
    reference, base = _self_identification_reference(cfg)
    evaluator = _TuneEvaluator(cfg, reference, base)
    resume = read_samples_csv(args.resume) if args.resume else None
    archive, samples = run_ga(ga_cfg, evaluator, resume_samples=resume)
    write_archive_csv(archive, out / "archive.csv")
    write_samples_csv(samples, out / "samples.csv")
    knee = select_knee(archive)
    with open(out / "knee.json", "w") as f:
        json.dump({
            "config_hash": cfgmod.config_hash(cfg),
            "weights": {k: float(v) for k, v in zip(WEIGHT_KEYS, knee.weights)},
            "fevals": {n: float(v) for n, v in zip(FEVAL_NAMES, knee.fevals)},
            "generation": knee.generation,
        }, f, indent=2)
    print(f"archive of {len(archive)} entries from {len(samples)} evaluations; "
          f"knee sum-of-fevals {knee.fevals.sum():.4g}")
    return EXIT_OK


class _TuneEvaluator:
    """Closed-loop candidate evaluation against a fixed reference."""

    def __init__(self, cfg, reference, base):
        self.cfg = cfg
        self.reference = reference
        self.base = base

    def __call__(self, W: WeightVector):
        params = cfgmod.make_plant(self.cfg)
        icfg = cfgmod.make_integrators(self.cfg)
        mpc_cfg = cfgmod.make_mpc(self.cfg)
        log = run_closed_loop(
            params, icfg, mpc_cfg, W, self.base, self.base.duration,
            initial_posture=cfgmod.initial_posture(self.cfg),
            seed=int(self.cfg["io"]["seed"]))
        return evaluate_fevals(log, self.reference, base=self.base)


def cmd_importance(args) -> int:
    cfg = _load(args)
    out = _outdir(cfg)
    samples = read_samples_csv(args.samples)
    if not samples:
        raise ConfigError(f"samples file {args.samples} is empty")
    matrix = importance_matrix(samples, cfgmod.make_forest(cfg))
    matrix.write_csv(out / "importance.csv")
    if matrix.flagged_rows:
        print("rows with no splits (importance all zero): "
              + ", ".join(matrix.flagged_rows))
    if cfg["io"]["plot"]:
        from . import plots
        plots.plot_importance(matrix, out / "importance.svg")
    print(f"importance matrix at {out / 'importance.csv'}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(
        prog="neckmpc",
        description="Head-neck postural stabilization pipeline")
    ap.add_argument("--print-defaults", action="store_true",
                    help="print the default configuration and exit")
    sub = ap.add_subparsers(dest="command")

    def common(p):
        p.add_argument("--config", default=None, help="YAML configuration file")
        p.add_argument("--seed", type=int, default=None)
        p.add_argument("--out", default=None, help="output directory")
        p.add_argument("--plot", action="store_true", help="emit SVG figures")

    p = sub.add_parser("simulate", help="closed-loop run under the configured perturbation")
    common(p)
    p.add_argument("--preset", default=None, choices=PRESET_NAMES)
    p.add_argument("--duration", type=float, default=None)
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("posture", help="unperturbed steady-state comparison of presets")
    common(p)
    p.add_argument("--presets", default="all")
    p.add_argument("--duration", type=float, default=8.0)
    p.set_defaults(func=cmd_posture)

    p = sub.add_parser("frf", help="frequency response of a fresh run")
    common(p)
    p.add_argument("--reference", default=None, help="reference time-series CSV")
    p.add_argument("--reference-frf", default=None, help="reference FRF CSV")
    p.set_defaults(func=cmd_frf)

    p = sub.add_parser("tune", help="multi-objective weight search")
    common(p)
    p.add_argument("--resume", default=None, help="samples.csv to continue from")
    p.set_defaults(func=cmd_tune)

    p = sub.add_parser("importance", help="random-forest weight importance")
    common(p)
    p.add_argument("samples", help="samples.csv from a tune run")
    p.set_defaults(func=cmd_importance)
    return ap


def main(argv=None) -> int:
    ap = build_parser()
    args = ap.parse_args(argv)
    if args.print_defaults:
        print(cfgmod.print_defaults(), end="")
        return EXIT_OK
    if not getattr(args, "command", None):
        ap.print_help()
        return EXIT_CONFIG
    try:
        return args.func(args)
    except ConfigError as err:
        print(f"configuration error: {err}", file=sys.stderr)
        return EXIT_CONFIG
    except FileNotFoundError as err:
        print(f"missing file: {err}", file=sys.stderr)
        return EXIT_CONFIG
    except RuntimeError as err:
        print(f"runtime failure: {err}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
