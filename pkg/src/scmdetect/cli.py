"""Command-line front end.

``detect`` exits with 0 (H0), 10 (H1), 11 (no calibration), 12 (malformed
block) or 13 (any other error). The other subcommands exit 0 on success and 1
on failure; every subcommand leaves a ``manifest.json`` in its output
directory, including on failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import signal
import sys
import time
from importlib import resources
from pathlib import Path

from . import __version__
from .detectors import CalibrationRegistry, Detector, calibrate, decide
from .harness import (
    ExperimentConfig,
    run_histogram_study,
    run_mpfit_study,
    run_power_experiment,
    run_spike_study,
    write_manifest,
)
from .spectral import FrequencyGrid, SmoothingSpec
from .tsgen import BlockFormatError, SimulationConfig, read_block, write_block

EXIT_H0 = 0
EXIT_H1 = 10
EXIT_NO_CALIBRATION = 11
EXIT_MALFORMED = 12
EXIT_ERROR = 13

FULL_TRIALS = 10_000

DEFAULT_CONFIGS = {
    "benchmark": "table1.json",
    "calibrate": "table1.json",
    "spike": "spike.json",
    "mpfit": "mpfit.json",
    "histogram": "histogram.json",
    "simulate": "simulate.json",
}

log = logging.getLogger("scmdetect")


class ConfigError(ValueError):
    pass


def _read_json(path: str | None, command: str) -> dict:
    if path is None:
        text = resources.files("scmdetect").joinpath("configs", DEFAULT_CONFIGS[command]).read_text()
    else:
        text = Path(path).read_text()
    try:
        return json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON: {exc}") from exc


def _experiment(args) -> ExperimentConfig:
    try:
        cfg = ExperimentConfig.from_dict(_read_json(args.config, args.command))
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid configuration: {exc}") from exc
    over = {"seed": args.seed, "stride": args.stride}
    trials = FULL_TRIALS if getattr(args, "full", False) else args.trials
    if trials is not None:
        if args.command in ("benchmark", "calibrate"):
            over.update(n_calibration_trials=trials, n_power_trials=trials)
        else:
            over["n_reps"] = trials
    if getattr(args, "fixed_filter", False):
        if cfg.signal is None:
            raise ConfigError("--fixed-filter needs a signal in the configuration")
        from dataclasses import replace

        over["signal"] = replace(cfg.signal, fixed_filter=True)
    try:
        return cfg.with_overrides(**over)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid configuration: {exc}") from exc


# ---------------------------------------------------------------- subcommands


def cmd_simulate(args, out: Path, state: dict) -> int:
    try:
        cfg = SimulationConfig.from_dict(_read_json(args.config, "simulate"))
        if args.seed is not None:
            from dataclasses import replace

            cfg = replace(cfg, seed=args.seed)
    except (KeyError, TypeError, ValueError) as exc:
        raise ConfigError(f"invalid simulation config: {exc}") from exc
    block = cfg.generate()
    write_block(out / "block.scdb", block)
    (out / "block.json").write_text(cfg.dumps())
    state["outputs"] += ["block.scdb", "block.json"]
    return 0


def cmd_calibrate(args, out: Path, state: dict) -> int:
    cfg = _experiment(args)
    state["config"] = cfg
    path = out / "calibration.json"
    registry = CalibrationRegistry.load(path) if path.exists() else CalibrationRegistry()
    for r, (N, M, B) in enumerate(cfg.rows):
        cals = calibrate(
            cfg.detectors, cfg.noise(M), N, B, cfg.alpha, cfg.n_calibration_trials,
            seed=(cfg.seed, r, 0), stride=cfg.stride, workers=args.workers,
        )
        for cal in cals.values():
            registry.put(cal)
            log.info("%s N=%d M=%d B=%d threshold %.6f", cal.detector.label, N, M, B, cal.threshold)
    registry.save(path)
    state["outputs"].append("calibration.json")
    return 0


def cmd_detect(args, out: Path, state: dict) -> int:
    try:
        block = read_block(args.block)
    except (BlockFormatError, OSError) as exc:
        print(f"error: malformed block: {exc}", file=sys.stderr)
        return EXIT_MALFORMED
    M, N = block.samples.shape
    detector = Detector.parse(args.detector)
    threshold = args.threshold
    B = args.B
    if threshold is None:
        if args.registry is None or not Path(args.registry).exists():
            print("error: no calibration registry and no --threshold", file=sys.stderr)
            return EXIT_NO_CALIBRATION
        registry = CalibrationRegistry.load(args.registry)
        cal = None
        for key in sorted(registry.entries):
            e = registry.entries[key]
            if (e.detector, e.N, e.M) == (detector, N, M) and (B is None or e.B == B) and (
                args.stride is None or e.stride == args.stride
            ):
                cal = e
                break
        if cal is None:
            print(f"error: no calibration for {detector.label} at N={N}, M={M}, B={B}", file=sys.stderr)
            return EXIT_NO_CALIBRATION
        B, threshold = cal.B, cal
        stride = cal.stride
    else:
        if B is None:
            raise ConfigError("--B is required together with --threshold")
        stride = args.stride or 1
    report = decide(detector, block, SmoothingSpec(B), FrequencyGrid(N, stride=stride), threshold)
    (out / "report.json").write_text(report.to_json())
    state["outputs"].append("report.json")
    state["extra"] = {"decision": report.decision, "aggregate": report.aggregate}
    print(f"{detector.label}: aggregate {report.aggregate:.6f} threshold {report.threshold:.6f} -> {report.decision}")
    return EXIT_H1 if report.decision == "H1" else EXIT_H0


def cmd_benchmark(args, out: Path, state: dict) -> int:
    cfg = _experiment(args)
    state["config"] = cfg
    table = run_power_experiment(cfg, workers=args.workers)
    name = f"{cfg.name}.csv"
    table.write_csv(out / name)
    state["outputs"].append(name)
    for row in table.rows:
        cells = "  ".join(
            f"{d.label}={row.cells[d].power:.3f}" for d in table.detectors if d in row.cells
        )
        print(f"N={row.N} M={row.M} B={row.B}  {cells}{'  ERROR ' + row.error if row.error else ''}")
    return 1 if any(r.error for r in table.rows) else 0


def cmd_spike(args, out: Path, state: dict) -> int:
    cfg = _experiment(args)
    state["config"] = cfg
    study = run_spike_study(cfg, workers=args.workers)
    study.write_csv(out / "spike.csv")
    study.write_curve_csv(out / "fig1_curve.csv")
    state["outputs"] += ["spike.csv", "fig1_curve.csv"]
    print(f"lambda1 at nu*: mean {study.mean:.4f} (sd {study.std:.4f}); phi(gamma*) = {study.phi_star:.4f}")
    return 0


def cmd_mpfit(args, out: Path, state: dict) -> int:
    cfg = _experiment(args)
    if args.exclude_spikes:
        cfg = cfg.with_overrides(exclude_spikes=True)
    state["config"] = cfg
    study = run_mpfit_study(cfg, workers=args.workers)
    study.write_csv(out / "mpfit.csv")
    state["outputs"].append("mpfit.csv")
    if study.curves is not None:
        study.curves.write_csv(out / "fig2_curve.csv")
        state["outputs"].append("fig2_curve.csv")
    print(f"sup-distance per rep: {' '.join(f'{v:.4f}' for v in study.sup_distances)}")
    return 0


def cmd_histogram(args, out: Path, state: dict) -> int:
    cfg = _experiment(args)
    state["config"] = cfg
    study = run_histogram_study(cfg, workers=args.workers)
    study.write_csv(out / "fig4_histogram.csv")
    study.write_samples_csv(out / "fig4_samples.csv")
    state["outputs"] += ["fig4_histogram.csv", "fig4_samples.csv"]
    return 0


COMMANDS = {
    "simulate": cmd_simulate,
    "calibrate": cmd_calibrate,
    "detect": cmd_detect,
    "benchmark": cmd_benchmark,
    "spike": cmd_spike,
    "mpfit": cmd_mpfit,
    "histogram": cmd_histogram,
}


# ---------------------------------------------------------------- parser


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(
        prog="scmdetect",
        description="Signal detection from the sample spectral coherence matrix.",
    )
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, config_help):
        sp.add_argument("--config", help=config_help)
        sp.add_argument("--out", default=".", help="output directory (created if missing)")
        sp.add_argument("--seed", type=int, help="override the master seed")

    def experiment(sp):
        sp.add_argument("--workers", type=int, default=None,
                        help="worker processes (default: available CPUs); results do not depend on it")
        sp.add_argument("--stride", type=int, help="keep every stride-th Fourier frequency")
        sp.add_argument("--trials", type=int, help="trials per cell (or repetitions for studies)")
        sp.add_argument("--full", action="store_true", help=f"use {FULL_TRIALS} trials per cell")

    sp = sub.add_parser("simulate", help="write a simulated SCDB1 block and its JSON sidecar")
    common(sp, "simulation JSON (keys M, N, seed, noise, signal)")
    sp.set_defaults(stride=None, trials=None, workers=1)

    sp = sub.add_parser("calibrate", help="calibrate detector thresholds on simulated H0 data")
    common(sp, "experiment JSON (default: packaged table1.json)")
    experiment(sp)

    sp = sub.add_parser("detect", help="test one block; exit 0 for H0, 10 for H1")
    sp.add_argument("block", help="SCDB1 block file")
    sp.add_argument("--registry", help="calibration registry JSON written by `calibrate`")
    sp.add_argument("--detector", default="le1", help="le1, le2, lss_frobenius, lss_logdet or mcc")
    sp.add_argument("--threshold", type=float, help="use this threshold instead of the registry")
    sp.add_argument("--B", type=int, help="smoothing span (taken from the registry when omitted)")
    sp.add_argument("--stride", type=int, help="keep every stride-th Fourier frequency")
    sp.add_argument("--out", default=".", help="output directory for report.json")
    sp.set_defaults(config=None, seed=None, trials=None, workers=1)

    sp = sub.add_parser("benchmark", help="power table (calibration + power per row)")
    common(sp, "experiment JSON (default: packaged table1.json)")
    experiment(sp)
    sp.add_argument("--fixed-filter", action="store_true",
                    help="keep one random FIR filter per row instead of redrawing it per trial")

    sp = sub.add_parser("spike", help="largest eigenvalue at the peak-SNR frequency")
    common(sp, "experiment JSON (default: packaged spike.json)")
    experiment(sp)

    sp = sub.add_parser("mpfit", help="ESD deviation from the Marcenko-Pastur law")
    common(sp, "experiment JSON (default: packaged mpfit.json)")
    experiment(sp)
    sp.add_argument("--exclude-spikes", action="store_true",
                    help="drop the K largest eigenvalues of each frame before forming the ESD")

    sp = sub.add_parser("histogram", help="largest-eigenvalue statistic under H0 and H1")
    common(sp, "experiment JSON (default: packaged histogram.json)")
    experiment(sp)
    return p


def _interrupt(signum, frame):
    raise KeyboardInterrupt(f"signal {signum}")


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(asctime)s %(levelname)s %(message)s",
    )
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    state = {"config": None, "outputs": [], "extra": {}}
    failure_code = EXIT_ERROR if args.command == "detect" else 1
    status, code = "failed", failure_code
    t0 = time.perf_counter()
    previous = signal.signal(signal.SIGTERM, _interrupt)
    try:
        code = COMMANDS[args.command](args, out, state)
        status = "ok" if code in (0, EXIT_H1) else "failed"
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        state["extra"]["error"] = str(exc)
    except KeyboardInterrupt as exc:
        status = "interrupted"
        state["extra"]["error"] = f"interrupted {exc}"
        code = 130
    except Exception as exc:
        log.exception("%s failed", args.command)
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        state["extra"]["error"] = f"{type(exc).__name__}: {exc}"
    finally:
        signal.signal(signal.SIGTERM, previous)
        write_manifest(
            out / "manifest.json", state["config"], status, state["outputs"],
            wall_time=time.perf_counter() - t0, workers=getattr(args, "workers", None),
            extra={"command": args.command, "exit_code": code, **state["extra"]},
        )
    return code


if __name__ == "__main__":
    sys.exit(main())
