"""Pipeline configuration: a YAML (or JSON) file mapped onto frozen dataclasses.

Unknown keys anywhere are rejected so that typos fail loudly.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

import yaml

from .errors import ValidationError

CONFIG_PRESETS = ("two_area", "ten_machine")


@dataclass(frozen=True)
class PlantSection:
    preset: str | None = "two_area"
    csv: tuple = ()  # external measurement windows, one CSV per experiment
    inputs: tuple | None = None
    outputs: tuple | None = None


@dataclass(frozen=True)
class ProbeSection:
    kind: str = "pulse"
    start: float = 1.0
    duration: float = 0.05
    amplitude: float = 0.05
    cutoff_hz: float = 2.0


@dataclass(frozen=True)
class SamplingSection:
    raw_sample_time: float = 0.0032
    decimation: int = 10
    window: float = 20.0
    snr_db: float | None = None


@dataclass(frozen=True)
class IdentificationSection:
    order: int = 5
    candidates: tuple | None = None
    max_iter: int = 200
    rel_tol: float = 1e-10
    margin: float = 1e-3


@dataclass(frozen=True)
class ModesSection:
    band: tuple = (0.1, 1.0)


@dataclass(frozen=True)
class ControllerSection:
    enabled: bool = True
    rho: float = 1.0
    process_noise: float = 1e-6
    measurement_noise: float = 1e-4
    saturation: float | None = 0.1
    delay: float = 0.15
    horizon: float = 20.0
    noise_std: float = 0.0


@dataclass(frozen=True)
class DisturbanceCase:
    name: str = "case1"
    kind: str = "pulse"
    target: str = "u_1"
    start: float = 1.0
    duration: float = 0.05
    amplitude: float = 0.05


@dataclass(frozen=True)
class MetricsSection:
    channels: tuple = ()
    auc_from: float | None = None
    auc_to: float | None = None
    peak_times: tuple = ()
    sweep_channel: str | None = None


@dataclass(frozen=True)
class PipelineConfig:
    plant: PlantSection = field(default_factory=PlantSection)
    probe: ProbeSection = field(default_factory=ProbeSection)
    sampling: SamplingSection = field(default_factory=SamplingSection)
    identification: IdentificationSection = field(default_factory=IdentificationSection)
    modes: ModesSection = field(default_factory=ModesSection)
    controller: ControllerSection = field(default_factory=ControllerSection)
    disturbances: tuple = (DisturbanceCase(),)
    metrics: MetricsSection = field(default_factory=MetricsSection)
    delays: tuple = (0.001, 0.05, 0.3, 0.5)
    output_dir: str = "wadc_out"
    seed: int = 0

    def __post_init__(self):
        s = self.sampling
        if s.raw_sample_time <= 0 or s.window <= 0:
            raise ValidationError("sampling durations must be positive")
        if int(s.decimation) != s.decimation or s.decimation < 1:
            raise ValidationError("sampling.decimation must be an integer >= 1")
        lo, hi = self.modes.band
        nyquist = 0.5 / (s.raw_sample_time * s.decimation)
        if not 0 < lo < hi < nyquist:
            raise ValidationError(f"modes.band must satisfy 0 < low < high < {nyquist:g} Hz (Nyquist)")
        c = self.controller
        if c.rho <= 0 or c.horizon <= 0 or c.delay < 0:
            raise ValidationError("controller rho and horizon must be positive and delay non-negative")
        if c.process_noise < 0 or c.measurement_noise < 0 or c.noise_std < 0:
            raise ValidationError("noise settings must be non-negative")
        if c.saturation is not None and c.saturation <= 0:
            raise ValidationError("controller.saturation must be positive or null")
        p = self.probe
        if p.duration <= 0 or p.start < 0:
            raise ValidationError("probe duration must be positive and start non-negative")
        if self.identification.order < 0:
            raise ValidationError("identification.order must be non-negative")
        if self.identification.candidates is not None and not self.identification.candidates:
            raise ValidationError("identification.candidates must be non-empty when given")
        if any(d < 0 for d in self.delays):
            raise ValidationError("delays must be non-negative")
        if not self.disturbances:
            raise ValidationError("at least one disturbance case is required")
        names = [d.name for d in self.disturbances]
        if len(set(names)) != len(names):
            raise ValidationError("disturbance case names must be unique")
        for d in self.disturbances:
            if d.duration <= 0 or d.start < 0:
                raise ValidationError(f"disturbance {d.name}: duration must be positive, start >= 0")
            if d.start + d.duration > c.horizon:
                raise ValidationError(f"disturbance {d.name} ends after the horizon")
        if self.plant.preset is None and not self.plant.csv:
            raise ValidationError("plant needs a preset or csv files")

    def to_dict(self):
        return _plain(dataclasses.asdict(self))

    def digest(self):
        """Hash of everything that can change a result; the output location is left out."""
        content = self.to_dict()
        content.pop("output_dir")
        text = json.dumps(content, sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(text.encode()).hexdigest()

    def replace(self, **changes):
        return dataclasses.replace(self, **changes)


def _plain(obj):
    if isinstance(obj, dict):
        return {k: _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    return obj


def _tuplify(value):
    if isinstance(value, list):
        return tuple(_tuplify(v) for v in value)
    return value


def _section(cls, data, where):
    if data is None:
        return cls()
    if not isinstance(data, dict):
        raise ValidationError(f"'{where}' must be a mapping")
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(data) - names)
    if unknown:
        raise ValidationError(f"unknown key(s) in '{where}': {', '.join(unknown)}")
    kwargs = {}
    for f in dataclasses.fields(cls):
        if f.name not in data:
            continue
        value = _tuplify(data[f.name])
        if f.type in ("float", "float | None") and isinstance(value, (int, float)) and not isinstance(value, bool):
            value = float(value)
        if f.type == "int" and isinstance(value, float) and value.is_integer():
            value = int(value)
        kwargs[f.name] = value
    try:
        return cls(**kwargs)
    except TypeError as exc:
        raise ValidationError(f"bad '{where}' section: {exc}") from None


def config_from_dict(data):
    if not isinstance(data, dict):
        raise ValidationError("configuration must be a mapping")
    top = {f.name for f in dataclasses.fields(PipelineConfig)}
    unknown = sorted(set(data) - top)
    if unknown:
        raise ValidationError(f"unknown top-level key(s): {', '.join(unknown)}")
    plant = dict(data.get("plant") or {})
    if isinstance(plant.get("csv"), str):
        plant["csv"] = [plant["csv"]]
    cases = data.get("disturbances")
    if cases is None:
        cases = [{}]
    if not isinstance(cases, list):
        raise ValidationError("'disturbances' must be a list")
    kwargs = dict(
        plant=_section(PlantSection, plant, "plant"),
        probe=_section(ProbeSection, data.get("probe"), "probe"),
        sampling=_section(SamplingSection, data.get("sampling"), "sampling"),
        identification=_section(IdentificationSection, data.get("identification"), "identification"),
        modes=_section(ModesSection, data.get("modes"), "modes"),
        controller=_section(ControllerSection, data.get("controller"), "controller"),
        disturbances=tuple(_section(DisturbanceCase, c, f"disturbances[{i}]") for i, c in enumerate(cases)),
        metrics=_section(MetricsSection, data.get("metrics"), "metrics"),
    )
    if "delays" in data:
        kwargs["delays"] = tuple(float(d) for d in data["delays"])
    if "output_dir" in data:
        kwargs["output_dir"] = str(data["output_dir"])
    if "seed" in data:
        if not isinstance(data["seed"], int) or isinstance(data["seed"], bool):
            raise ValidationError("seed must be an integer")
        kwargs["seed"] = data["seed"]
    return PipelineConfig(**kwargs)


def load_config(source):
    """Read a config file, or one of the shipped ones by name."""
    if isinstance(source, str) and source in CONFIG_PRESETS:
        text = resources.files("mimowadc").joinpath("presets", f"{source}.yaml").read_text("utf-8")
    else:
        text = Path(source).read_text("utf-8")
    try:
        data = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        raise ValidationError(f"cannot parse config: {exc}") from None
    return config_from_dict(data or {})
