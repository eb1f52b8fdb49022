import dataclasses
import json
import subprocess
import sys

import numpy as np
import pytest
import yaml

from mimowadc.cli import main
from mimowadc.config import PipelineConfig, config_from_dict, load_config
from mimowadc.data import csv_import
from mimowadc.errors import StageError, ValidationError
from mimowadc.metrics import metric_auc, metric_peak, metric_relative_error, reduction_percent
from mimowadc.pipeline import Pipeline, run_pipeline, strip_timestamps


@pytest.fixture(scope="module")
def run_dir(tmp_path_factory):
    out = tmp_path_factory.mktemp("two_area")
    cfg = load_config("two_area").replace(output_dir=str(out))
    report = run_pipeline(cfg, figures=False)
    return out, report, cfg


def _write_yaml(path, data):
    path.write_text(yaml.safe_dump(data))
    return path


def test_shipped_configs_load():
    for name in ("two_area", "ten_machine"):
        cfg = load_config(name)
        assert isinstance(cfg, PipelineConfig)
        assert config_from_dict(cfg.to_dict()) == cfg


@pytest.mark.parametrize("data, match", [
    ({"bogus": 1}, "bogus"),
    ({"controller": {"rhoo": 1.0}}, "rhoo"),
    ({"disturbances": [{"name": "a", "targett": "u_1"}]}, "targett"),
    ({"sampling": {"decimation": 0}}, "decimation"),
    ({"modes": {"band": [0.1, 20.0]}}, "Nyquist"),
    ({"controller": {"rho": -1.0}}, "rho"),
    ({"disturbances": [{"name": "a"}, {"name": "a"}]}, "unique"),
    ({"seed": 1.5}, "seed"),
])
def test_config_rejections(data, match):
    with pytest.raises(ValidationError, match=match):
        config_from_dict(data)


def test_config_digest_tracks_content():
    a = load_config("two_area")
    assert a.digest() == load_config("two_area").digest()
    assert a.digest() != a.replace(seed=1).digest()
    assert a.digest() == a.replace(output_dir="elsewhere").digest()


def test_report_contents(run_dir):
    _, report, _ = run_dir
    d = report.to_dict()
    in_band = [m for m in d["modes"] if 0.1 <= m["frequency_hz"] <= 1.0]
    assert len(in_band) == 1
    assert set(d["selected_loop"]) == {"output", "input"}
    assert min(report.reductions.values()) >= 40.0
    assert d["provenance"]["seed"] == 0
    assert set(d["provenance"]["timestamps"]) == {"started", "finished"}


def test_reduction_arithmetic_is_exact(run_dir):
    _, report, _ = run_dir
    for case in report.data["evaluation"]:
        for e in case["channels"].values():
            assert e["reduction_percent"] == 100.0 * (1.0 - e["auc_with"] / e["auc_without"])


def test_metrics_recomputable_from_csv(run_dir):
    out, _, cfg = run_dir
    report = json.loads((out / "report.json").read_text())
    for case, spec in zip(report["evaluation"], cfg.disturbances):
        traces = csv_import(out / f"traces_{case['name']}.csv")
        for ch, e in case["channels"].items():
            off = metric_auc(traces[f"{ch}__without"], traces.sample_time, spec.start)
            on = metric_auc(traces[f"{ch}__with"], traces.sample_time, spec.start)
            assert off == pytest.approx(e["auc_without"], rel=1e-12)
            assert on == pytest.approx(e["auc_with"], rel=1e-12)
            assert reduction_percent(off, on) == pytest.approx(e["reduction_percent"], rel=1e-10)
            for p in e["peaks"]:
                assert metric_peak(traces[f"{ch}__with"], traces.sample_time, p["time"]) == p["with"]
    sweep = report["delay_sweep"]
    for name, rows in sweep["cases"].items():
        win = csv_import(out / f"sweep_{name}.csv")
        ch = sweep["channel"]
        ref = win[f"{ch}__delay_{rows[0]['delay']!r}"]
        for r in rows:
            err = metric_relative_error(ref, win[f"{ch}__delay_{r['delay']!r}"])
            assert err == pytest.approx(r["relative_error"], rel=1e-12, abs=1e-15)


def test_output_files(run_dir):
    out, _, _ = run_dir
    for name in ("report.json", "report.txt", "config_used.json", "model.json", "modes.csv",
                 "residues.csv", "delay_sweep.csv", "traces_area1.csv", "traces_area2.csv"):
        assert (out / name).is_file(), name
    text = (out / "report.txt").read_text()
    assert "selected loop" in text and "reduction" in text


def test_determinism(run_dir, tmp_path):
    out, first, cfg = run_dir
    second = run_pipeline(cfg.replace(output_dir=str(tmp_path)), figures=False)
    a = json.dumps(strip_timestamps(first.to_dict()), sort_keys=True).encode()
    b = json.dumps(strip_timestamps(second.to_dict()), sort_keys=True).encode()
    assert a == b
    assert (out / "traces_area1.csv").read_bytes() == (tmp_path / "traces_area1.csv").read_bytes()


def test_disabled_controller_gives_identical_traces():
    cfg = load_config("two_area")
    cfg = cfg.replace(controller=dataclasses.replace(cfg.controller, enabled=False), delays=())
    pipe = Pipeline(cfg)
    for case in pipe.evaluation:
        for name in case.off.names:
            assert np.array_equal(case.off[name], case.on[name])
        assert all(e["reduction_percent"] == 0.0 for e in case.metrics.values())


def test_delay_sweep_edge_cases():
    pipe = Pipeline(load_config("two_area"))
    single, _ = pipe.delay_sweep([0.05])
    for rows in single.values():
        assert len(rows) == 1 and rows[0].relative_error == 0.0
    dup, _ = pipe.delay_sweep([0.3, 0.05, 0.3])
    for rows in dup.values():
        assert [r.delay for r in rows] == [0.05, 0.3, 0.3]
        assert rows[1].relative_error == rows[2].relative_error
        assert rows[1].auc == rows[2].auc
    with pytest.raises(StageError):
        pipe.delay_sweep([])


def test_stage_errors_name_the_stage():
    cfg = load_config("two_area")
    bad = cfg.replace(modes=dataclasses.replace(cfg.modes, band=(1.8, 2.5)))
    with pytest.raises(StageError) as info:
        Pipeline(bad).modes
    assert info.value.stage == "modes"


def test_csv_mode_identifies_without_evaluation(tmp_path):
    from mimowadc.data import csv_export

    pipe = Pipeline(load_config("two_area"))
    paths = []
    for idx, win in enumerate(pipe.experiments):
        p = tmp_path / f"exp{idx}.csv"
        csv_export(win, p)
        paths.append(str(p))
    cfg = load_config("two_area")
    cfg = cfg.replace(plant=dataclasses.replace(cfg.plant, preset=None, csv=tuple(paths),
                                                inputs=pipe.channels[0], outputs=pipe.channels[1]),
                      delays=())
    csv_pipe = Pipeline(cfg)
    assert csv_pipe.modes[1].frequency == pytest.approx(pipe.modes[1].frequency, abs=1e-9)
    assert csv_pipe.evaluation is None


def test_cli_run_and_subcommands(tmp_path, capsys):
    out = tmp_path / "cli"
    assert main(["run", "--out", str(out), "--no-figures"]) == 0
    assert (out / "report.json").is_file()
    for cmd in ("simulate", "identify", "modes", "select-loop", "design"):
        assert main([cmd, "--out", str(out)]) == 0, cmd
    assert main(["delay-sweep", "--out", str(out), "--delays", "0.001", "0.05"]) == 0
    printed = capsys.readouterr().out
    assert "selected loop" in printed and "inter-area mode" in printed


def test_cli_seed_override(tmp_path):
    assert main(["identify", "--out", str(tmp_path), "--seed", "7"]) == 0


def test_cli_validation_exit_code(tmp_path, capsys):
    cfg = _write_yaml(tmp_path / "bad.yaml", {"controller": {"unknown_key": 1}})
    assert main(["run", "--config", str(cfg), "--out", str(tmp_path)]) == 1
    assert "unknown_key" in capsys.readouterr().err


def test_cli_numerical_exit_code(tmp_path):
    data = load_config("two_area").to_dict()
    data["modes"]["band"] = [1.8, 2.5]
    cfg = _write_yaml(tmp_path / "band.yaml", data)
    assert main(["modes", "--config", str(cfg), "--out", str(tmp_path)]) == 2


def test_cli_io_exit_code(tmp_path):
    assert main(["run", "--config", str(tmp_path / "missing.yaml")]) == 3
    blocker = tmp_path / "file"
    blocker.write_text("x")
    assert main(["identify", "--out", str(blocker / "sub")]) == 3


def test_console_entry_point(tmp_path):
    proc = subprocess.run([sys.executable, "-m", "mimowadc.cli", "modes", "--out", str(tmp_path)],
                          capture_output=True, text=True, timeout=120)
    assert proc.returncode == 0, proc.stderr
    assert "FFT cross-check" in proc.stdout
