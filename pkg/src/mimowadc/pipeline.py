"""End-to-end run: probe, identify, pick the mode and loop, design, evaluate, report."""

from __future__ import annotations

import contextlib
import csv
import datetime as _dt
import json
import logging
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path

import numpy as np

from . import __version__
from .config import PipelineConfig
from .control import closed_loop_sim, design_wadc
from .data import DataWindow, csv_export, csv_import
from .errors import StageError, ValidationError, WadcError
from .ident import RefineOptions, identify, select_order
from .metrics import metric_auc, metric_peak, metric_relative_error, reduction_percent
from .modal import extract_modes, fft_dominant_frequency, inter_area_mode, residue_table, select_loop
from .plant import (
    DisturbanceSpec,
    add_noise_snr,
    apply_disturbance,
    build_swing_surrogate,
    load_preset,
    measurement_channel,
)

log = logging.getLogger(__name__)


@contextlib.contextmanager
def stage(name):
    try:
        yield
    except StageError:
        raise
    except (WadcError, OSError) as exc:
        raise StageError(name, exc) from exc


def _utc_now():
    return _dt.datetime.now(_dt.timezone.utc).isoformat(timespec="seconds")


@dataclass
class CaseResult:
    name: str
    target: str
    off: DataWindow
    on: DataWindow
    metrics: dict


@dataclass
class SweepRow:
    delay: float
    total_delay: float
    relative_error: float
    auc: float


@dataclass
class RunReport:
    data: dict
    provenance: dict = field(default_factory=dict)

    def to_dict(self):
        return {**self.data, "provenance": self.provenance}

    def to_json(self):
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    def to_text(self):
        return format_report(self.to_dict())

    @property
    def reductions(self):
        out = {}
        for case in self.data.get("evaluation") or []:
            for ch, m in case["channels"].items():
                out[(case["name"], ch)] = m["reduction_percent"]
        return out


def strip_timestamps(report_dict):
    d = json.loads(json.dumps(report_dict))
    d.get("provenance", {}).pop("timestamps", None)
    return d


class Pipeline:
    """Lazily evaluated stages; each property runs its prerequisites once."""

    def __init__(self, config: PipelineConfig):
        self.config = config
        self._seeds = np.random.SeedSequence(config.seed).spawn(3)

    # ------------------------------------------------------------ plant and data
    @cached_property
    def params(self):
        if self.config.plant.preset is None:
            return None
        with stage("plant"):
            return load_preset(self.config.plant.preset)

    @cached_property
    def plant(self):
        return None if self.params is None else build_swing_surrogate(self.params)

    @cached_property
    def monitored_plant(self):
        return None if self.params is None else build_swing_surrogate(self.params, monitors=True)

    @cached_property
    def channels(self):
        pc = self.config.plant
        if self.plant is not None:
            inputs = tuple(pc.inputs) if pc.inputs else self.plant.input_names
            outputs = tuple(pc.outputs) if pc.outputs else self.plant.output_names
            for name in inputs:
                if name not in self.plant.input_names:
                    raise StageError("plant", ValidationError(f"unknown input channel '{name}'"))
            for name in outputs:
                if name not in self.plant.output_names:
                    raise StageError("plant", ValidationError(f"unknown output channel '{name}'"))
            return inputs, outputs
        if not pc.inputs or not pc.outputs:
            raise StageError("plant", ValidationError("CSV data needs plant.inputs and plant.outputs"))
        return tuple(pc.inputs), tuple(pc.outputs)

    @cached_property
    def experiments(self):
        """Identification windows, one per probed input."""
        cfg = self.config
        inputs, outputs = self.channels
        with stage("simulate"):
            if self.plant is None:
                return [csv_import(p) for p in cfg.plant.csv]
            s, pr = cfg.sampling, cfg.probe
            rng = np.random.default_rng(self._seeds[0])
            windows = []
            for idx, inp in enumerate(inputs):
                spec = DisturbanceSpec(pr.kind, inp, pr.start, pr.duration, pr.amplitude,
                                       pr.cutoff_hz, seed=cfg.seed + idx)
                raw = apply_disturbance(self.plant, spec, s.window, s.raw_sample_time)
                win = measurement_channel(raw, s.decimation, s.window, disturbance_start=pr.start)
                if s.snr_db is not None:
                    win = add_noise_snr(win, s.snr_db, rng, outputs)
                    win = measurement_channel(win, 1, s.window, disturbance_start=pr.start)
                windows.append(win.select(list(inputs) + list(outputs)))
            return windows

    # ------------------------------------------------------------ identification
    @cached_property
    def identified(self):
        cfg = self.config.identification
        inputs, outputs = self.channels
        opts = RefineOptions(max_iter=cfg.max_iter, rel_tol=cfg.rel_tol, margin=cfg.margin)
        with stage("identify"):
            order_reports = None
            k = cfg.order
            if cfg.candidates:
                k, order_reports = select_order(self.experiments, inputs, outputs, cfg.candidates, opts)
            model, fit = identify(self.experiments, inputs, outputs, k, opts)
        return model, fit, order_reports

    @property
    def model(self):
        return self.identified[0]

    @cached_property
    def modes(self):
        with stage("modes"):
            modes = extract_modes(self.model)
            return modes, inter_area_mode(modes, tuple(self.config.modes.band))

    @cached_property
    def residues(self):
        with stage("select-loop"):
            table = residue_table(self.model, self.modes[1])
            return table, select_loop(table)

    @property
    def loop(self):
        return self.residues[1]

    @cached_property
    def fft_frequency(self):
        """Spectral cross-check on the experiment that probed the selected input."""
        i, j = self.loop
        out, inp = self.model.output_names[i], self.model.input_names[j]
        windows = self.experiments
        energies = [float(np.sum(np.square(w[inp]))) if inp in w else 0.0 for w in windows]
        win = windows[int(np.argmax(energies))]
        with stage("modes"):
            return fft_dominant_frequency(win[out], win.sample_time, tuple(self.config.modes.band))

    # ------------------------------------------------------------ design and evaluation
    @cached_property
    def design(self):
        c = self.config.controller
        with stage("design"):
            return design_wadc(self.model, self.loop, rho=c.rho, process_noise=c.process_noise,
                               measurement_noise=c.measurement_noise, saturation=c.saturation,
                               delay=c.delay)

    def _disturbance(self, case):
        return DisturbanceSpec(case.kind, case.target, case.start, case.duration, case.amplitude)

    def _run(self, design, case, enabled):
        c = self.config.controller
        seed = int(self._seeds[2].generate_state(1)[0])
        return closed_loop_sim(self.monitored_plant, design, self._disturbance(case), c.horizon,
                               seed=seed, noise_std=c.noise_std, enabled=enabled)

    @cached_property
    def metric_channels(self):
        chans = self.config.metrics.channels
        if chans:
            return tuple(chans)
        out = self.model.output_names[self.loop[0]]
        return (out,) + tuple(n for n in self.monitored_plant.output_names if n.startswith("dw_"))

    def _case_metrics(self, case, off, on):
        m = self.config.metrics
        T = off.sample_time
        lo = case.start if m.auc_from is None else m.auc_from
        hi = m.auc_to
        result = {}
        for ch in self.metric_channels:
            if ch not in off:
                raise ValidationError(f"metric channel '{ch}' is not a plant signal")
            a_off = metric_auc(off[ch], T, lo, hi)
            a_on = metric_auc(on[ch], T, lo, hi)
            entry = {"auc_without": a_off, "auc_with": a_on,
                     "reduction_percent": reduction_percent(a_off, a_on)}
            if m.peak_times:
                entry["peaks"] = [
                    {"time": t, "without": metric_peak(off[ch], T, t), "with": metric_peak(on[ch], T, t)}
                    for t in m.peak_times
                ]
            result[ch] = entry
        return result

    @cached_property
    def evaluation(self):
        if self.monitored_plant is None:
            return None
        results = []
        with stage("evaluate"):
            for case in self.config.disturbances:
                off = self._run(self.design, case, enabled=False)
                on = self._run(self.design, case, enabled=self.config.controller.enabled)
                results.append(CaseResult(case.name, case.target, off, on, self._case_metrics(case, off, on)))
        return results

    @property
    def sweep_channel(self):
        return self.config.metrics.sweep_channel or self.model.output_names[self.loop[0]]

    def delay_sweep(self, delays=None):
        """Per case: rows sorted by delay, errors against the smallest-delay run."""
        delays = self.config.delays if delays is None else tuple(delays)
        if not delays:
            raise StageError("delay-sweep", ValidationError("empty delay list"))
        if self.monitored_plant is None:
            raise StageError("delay-sweep", ValidationError("delay sweep needs a plant preset"))
        base = self.config.controller.delay
        ch = self.sweep_channel
        m = self.config.metrics
        tables, traces = {}, {}
        with stage("delay-sweep"):
            ordered = sorted(delays)
            for case in self.config.disturbances:
                runs = {}
                for d in sorted(set(ordered)):
                    runs[d] = self._run(self.design.with_delay(base + d), case, True)
                ref = runs[ordered[0]]
                lo = case.start if m.auc_from is None else m.auc_from
                rows = [
                    SweepRow(d, base + d, metric_relative_error(ref[ch], runs[d][ch]),
                             metric_auc(runs[d][ch], ref.sample_time, lo, m.auc_to))
                    for d in ordered
                ]
                tables[case.name] = rows
                traces[case.name] = runs
        return tables, traces

    @cached_property
    def sweep(self):
        if not self.config.delays or self.monitored_plant is None:
            return None
        return self.delay_sweep()

    # ------------------------------------------------------------ report
    def report(self, include_sweep=True):
        started = _utc_now()
        model, fit, order_reports = self.identified
        modes, dominant = self.modes
        table, loop = self.residues
        design = self.design
        evaluation = self.evaluation
        sweep = self.sweep if include_sweep else None
        data = {
            "plant": self.config.plant.preset or list(self.config.plant.csv),
            "model": {
                "order": model.order,
                "sample_time": model.sample_time,
                "denominator": model.denominator.tolist(),
                "poles": [[p.real, p.imag] for p in model.poles()],
                "fit": fit.to_dict(),
                "order_selection": None if order_reports is None else {
                    str(k): (None if r is None else r.output_error) for k, r in order_reports.items()
                },
            },
            "modes": [md.to_dict() for md in modes],
            "inter_area_mode": dominant.to_dict(),
            "fft_frequency_hz": self.fft_frequency,
            "residues": {
                "outputs": list(table.output_names),
                "inputs": list(table.input_names),
                "normalized": table.normalized.tolist(),
                "magnitude": table.magnitudes.tolist(),
            },
            "selected_loop": {"output": model.output_names[loop[0]], "input": model.input_names[loop[1]]},
            "design": design.to_dict(),
            "evaluation": None if evaluation is None else [
                {"name": c.name, "target": c.target, "channels": c.metrics} for c in evaluation
            ],
            "delay_sweep": None if sweep is None else {
                "channel": self.sweep_channel,
                "cases": {
                    name: [vars(r) for r in rows] for name, rows in sweep[0].items()
                },
            },
        }
        prov = {
            "config_hash": self.config.digest(),
            "seed": self.config.seed,
            "version": __version__,
            "timestamps": {"started": started, "finished": _utc_now()},
        }
        return RunReport(data, prov)


def run_pipeline(config, write=True, figures=True):
    """Full flow; with ``write`` the report, traces and figures land in ``config.output_dir``."""
    pipe = Pipeline(config)
    report = pipe.report()
    if write:
        write_outputs(pipe, report, figures=figures)
    return report


def delay_sweep(config, delays):
    pipe = Pipeline(config)
    tables, _ = pipe.delay_sweep(delays)
    return tables


# ------------------------------------------------------------------ file output

def ensure_dir(path):
    with stage("write"):
        Path(path).mkdir(parents=True, exist_ok=True)
    return Path(path)


def write_json(obj, path):
    with stage("write"):
        Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def write_case_traces(case, path):
    chans = {}
    for name in case.off.names:
        chans[f"{name}__without"] = case.off[name]
        chans[f"{name}__with"] = case.on[name]
    with stage("write"):
        csv_export(DataWindow(case.off.sample_time, chans), path)


def write_residue_csv(table, path):
    with stage("write"), open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["output", "input", "normalized", "magnitude", "real", "imag"])
        for i, out in enumerate(table.output_names):
            for j, inp in enumerate(table.input_names):
                r = table.raw[i, j]
                w.writerow([out, inp, repr(float(table.normalized[i, j])),
                            repr(float(abs(r))), repr(float(r.real)), repr(float(r.imag))])


def write_modes_csv(modes, path):
    with stage("write"), open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["frequency_hz", "damping_ratio", "s_real", "s_imag", "z_real", "z_imag", "modal_energy"])
        for md in modes:
            w.writerow([repr(md.frequency), repr(md.damping), repr(md.s.real), repr(md.s.imag),
                        repr(md.z.real), repr(md.z.imag), repr(md.residue_energy)])


def write_sweep(pipe, sweep, out):
    tables, traces = sweep
    ch = pipe.sweep_channel
    with stage("write"), open(out / "delay_sweep.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["case", "delay", "total_delay", "relative_error", "auc"])
        for name, rows in tables.items():
            for r in rows:
                w.writerow([name, repr(r.delay), repr(r.total_delay), repr(r.relative_error), repr(r.auc)])
    for name, runs in traces.items():
        chans = {f"{ch}__delay_{d!r}": run[ch] for d, run in runs.items()}
        T = next(iter(runs.values())).sample_time
        with stage("write"):
            csv_export(DataWindow(T, chans), out / f"sweep_{name}.csv")


def write_outputs(pipe, report, figures=True):
    out = ensure_dir(pipe.config.output_dir)
    with stage("write"):
        (out / "report.json").write_text(report.to_json(), encoding="utf-8")
        (out / "report.txt").write_text(report.to_text(), encoding="utf-8")
    write_json(pipe.config.to_dict(), out / "config_used.json")
    write_json(pipe.model.to_dict(), out / "model.json")
    write_modes_csv(pipe.modes[0], out / "modes.csv")
    write_residue_csv(pipe.residues[0], out / "residues.csv")
    if pipe.evaluation:
        for case in pipe.evaluation:
            write_case_traces(case, out / f"traces_{case.name}.csv")
    if pipe.sweep:
        write_sweep(pipe, pipe.sweep, out)
    if figures:
        from . import plotting

        with stage("plot"):
            plotting.render_all(pipe, out / "figures")


# ------------------------------------------------------------------ text report

def format_report(d):
    lines = []
    add = lines.append
    add("WIDE-AREA DAMPING CONTROL RUN")
    add(f"plant: {d['plant']}")
    m = d["model"]
    fit = m["fit"]
    add("")
    add(f"identified model: order {m['order']}, sample time {m['sample_time']:g} s")
    add(f"  output error {fit['output_error']:.3e}, converged {fit['converged']}, "
        f"{fit['iterations']} iterations, LS condition {fit['condition_number']:.3e}")
    if m.get("order_selection"):
        sel = ", ".join(f"k={k}: {'rank-deficient' if v is None else f'{v:.3e}'}"
                        for k, v in m["order_selection"].items())
        add(f"  order selection: {sel}")
    add("")
    add("modes (Hz, damping ratio, modal energy):")
    for md in d["modes"]:
        add(f"  {md['frequency_hz']:8.4f}  {md['damping_ratio']:7.4f}  {md['residue_energy']:.4e}")
    ia = d["inter_area_mode"]
    add(f"inter-area mode: {ia['frequency_hz']:.4f} Hz, damping {ia['damping_ratio']:.4f}; "
        f"FFT cross-check {d['fft_frequency_hz']:.4f} Hz")
    add("")
    res = d["residues"]
    add("normalized residues (rows: outputs, columns: inputs):")
    add(f"  {'':>6} " + " ".join(f"{n:>7}" for n in res["inputs"]))
    for name, row in zip(res["outputs"], res["normalized"]):
        add(f"  {name:>6} " + " ".join(f"{v:7.4f}" for v in row))
    sl = d["selected_loop"]
    add(f"selected loop: {sl['output']} <- {sl['input']}")
    add("")
    des = d["design"]
    add(f"controller: order {des['order']}, rho {des['rho']:g}, delay {des['delay']:g} s, "
        f"saturation {des['saturation']}")
    add("  gain: " + " ".join(f"{g:.6g}" for g in des["gain"]))
    if d.get("evaluation"):
        add("")
        add("area under |signal| (without -> with controller):")
        for case in d["evaluation"]:
            add(f"  case {case['name']} (disturbance on {case['target']}):")
            for ch, e in case["channels"].items():
                add(f"    {ch:>6}: {e['auc_without']:.6e} -> {e['auc_with']:.6e}  "
                    f"({e['reduction_percent']:.2f}% reduction)")
                for p in e.get("peaks", []):
                    add(f"            peak at {p['time']:g} s: {p['without']:.6e} -> {p['with']:.6e}")
    if d.get("delay_sweep"):
        sw = d["delay_sweep"]
        add("")
        add(f"delay sweep on {sw['channel']} (extra delay s, relative error, area):")
        for name, rows in sw["cases"].items():
            add(f"  case {name}:")
            for r in rows:
                add(f"    {r['delay']:6.3f}  {r['relative_error']:.6f}  {r['auc']:.6e}")
    prov = d.get("provenance", {})
    add("")
    add(f"config hash {prov.get('config_hash', '')}, seed {prov.get('seed')}, version {prov.get('version')}")
    ts = prov.get("timestamps")
    if ts:
        add(f"started {ts['started']}, finished {ts['finished']}")
    return "\n".join(lines) + "\n"
