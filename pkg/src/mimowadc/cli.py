"""Command line front end: ``mimowadc <command> --config FILE --out DIR --seed N``."""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from .config import CONFIG_PRESETS, load_config
from .data import csv_export
from .errors import NumericalError, StageError, ValidationError
from .pipeline import (
    Pipeline,
    ensure_dir,
    write_json,
    write_modes_csv,
    write_outputs,
    write_residue_csv,
    write_sweep,
)

EXIT_OK, EXIT_VALIDATION, EXIT_NUMERICAL, EXIT_IO = 0, 1, 2, 3

COMMANDS = ("simulate", "identify", "modes", "select-loop", "design", "run", "delay-sweep")


def _parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", default="two_area",
                        help=f"YAML config file or shipped name ({', '.join(CONFIG_PRESETS)})")
    common.add_argument("--out", help="output directory (overrides the config)")
    common.add_argument("--seed", type=int, help="RNG seed (overrides the config)")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="mimowadc", description="Measurement-based wide-area damping control.")
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("simulate", parents=[common], help="run the probe experiments and export them as CSV")
    sub.add_parser("identify", parents=[common], help="fit the shared-denominator MIMO model")
    sub.add_parser("modes", parents=[common], help="list modes and the FFT cross-check")
    sub.add_parser("select-loop", parents=[common], help="residue table and the chosen control loop")
    sub.add_parser("design", parents=[common], help="DLQR + Kalman design for the chosen loop")
    run = sub.add_parser("run", parents=[common], help="full pipeline with report, traces and figures")
    run.add_argument("--no-figures", action="store_true", help="skip the PNG figures")
    sweep = sub.add_parser("delay-sweep", parents=[common], help="closed-loop runs over extra loop delays")
    sweep.add_argument("--delays", type=float, nargs="+", help="extra delays in seconds")
    return parser


def _load(args):
    cfg = load_config(args.config)
    changes = {}
    if args.out:
        changes["output_dir"] = args.out
    if args.seed is not None:
        changes["seed"] = args.seed
    return cfg.replace(**changes) if changes else cfg


def _cmd_simulate(pipe, out, args):
    paths = []
    for idx, win in enumerate(pipe.experiments):
        inp = pipe.channels[0][idx] if idx < len(pipe.channels[0]) else str(idx)
        path = out / f"experiment_{inp}.csv"
        csv_export(win, path)
        paths.append(path)
    for p in paths:
        print(p)


def _cmd_identify(pipe, out, args):
    model, fit, order_reports = pipe.identified
    write_json(model.to_dict(), out / "model.json")
    write_json(fit.to_dict(), out / "fit.json")
    print(f"order {model.order}, output error {fit.output_error:.3e}, "
          f"converged {fit.converged} after {fit.iterations} iterations")
    if order_reports:
        for k, r in order_reports.items():
            print(f"  k={k}: " + ("rank-deficient" if r is None else f"{r.output_error:.3e}"))
    print("poles: " + ", ".join(f"{p:.6f}" for p in model.poles()))


def _cmd_modes(pipe, out, args):
    modes, dominant = pipe.modes
    write_modes_csv(modes, out / "modes.csv")
    for md in modes:
        mark = "*" if md is dominant else " "
        print(f"{mark} {md.frequency:8.4f} Hz  zeta {md.damping:7.4f}  energy {md.residue_energy:.4e}")
    print(f"inter-area mode {dominant.frequency:.4f} Hz, FFT cross-check {pipe.fft_frequency:.4f} Hz")


def _cmd_select_loop(pipe, out, args):
    table, (i, j) = pipe.residues
    write_residue_csv(table, out / "residues.csv")
    print(f"{'':>8}" + "".join(f"{n:>9}" for n in table.input_names))
    for name, row in zip(table.output_names, table.normalized):
        print(f"{name:>8}" + "".join(f"{v:9.4f}" for v in row))
    print(f"selected loop: {table.output_names[i]} <- {table.input_names[j]}")


def _cmd_design(pipe, out, args):
    design = pipe.design
    write_json(design.to_dict(), out / "design.json")
    print(f"loop {design.output_name} <- {design.input_name}, order {design.realization.n_states}")
    print("gain: " + " ".join(f"{g:.6g}" for g in design.dlqr.gain.ravel()))


def _cmd_run(pipe, out, args):
    report = pipe.report()
    write_outputs(pipe, report, figures=not args.no_figures)
    sys.stdout.write(report.to_text())


def _cmd_delay_sweep(pipe, out, args):
    sweep = pipe.delay_sweep(args.delays)
    write_sweep(pipe, sweep, out)
    print(f"relative error of {pipe.sweep_channel}:")
    for name, rows in sweep[0].items():
        print(f"case {name}")
        for r in rows:
            print(f"  {r.delay:7.3f} s  {r.relative_error:.6f}  area {r.auc:.6e}")


HANDLERS = {
    "simulate": _cmd_simulate,
    "identify": _cmd_identify,
    "modes": _cmd_modes,
    "select-loop": _cmd_select_loop,
    "design": _cmd_design,
    "run": _cmd_run,
    "delay-sweep": _cmd_delay_sweep,
}


def exit_code(exc):
    cause = exc.cause if isinstance(exc, StageError) else exc
    if isinstance(cause, OSError):
        return EXIT_IO
    if isinstance(cause, NumericalError):
        return EXIT_NUMERICAL
    return EXIT_VALIDATION


def main(argv=None):
    args = _parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = _load(args)
        pipe = Pipeline(cfg)
        out = ensure_dir(Path(cfg.output_dir))
        HANDLERS[args.command](pipe, out, args)
    except (StageError, ValidationError, NumericalError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exit_code(exc)
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
