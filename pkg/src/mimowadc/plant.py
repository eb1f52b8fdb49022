"""Desk-scale plants and the measurement chain.

Two plant families are provided: the coupled two-input/two-output
differential-equation example, and a linear multi-machine swing surrogate
whose outputs are tie-line power deviations (weighted rotor-angle
combinations across the inter-group cut).
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from importlib import resources

import numpy as np

from .data import DataWindow
from .errors import ValidationError
from .lti import StateSpaceModel, dlsim, ss_tustin

PRESETS = ("two_area", "ten_machine")


@dataclass(frozen=True)
class CoupledExampleParams:
    a0: float = 1.0
    a1: float = 1.0
    a2: float = 1.0

    def __post_init__(self):
        for name in ("a0", "a1", "a2"):
            if not getattr(self, name) > 0:
                raise ValidationError(f"{name} must be strictly positive")


def build_coupled_example(params):
    """Four-state model of ``y1'' + a1 y1' + a0(y1 + y2) = u1``, ``y2' + a2(y2 - y1) = u2``."""
    a0, a1, a2 = params.a0, params.a1, params.a2
    A = np.array([
        [0.0, 1.0, 0.0, 0.0],
        [-a0, -a1, 0.0, -a0],
        [0.0, 0.0, 0.0, 1.0],
        [a2, 0.0, 0.0, -a2],
    ])
    B = np.array([[0.0, 0.0], [1.0, 0.0], [0.0, 0.0], [0.0, 1.0]])
    C = np.array([[1.0, 0.0, 0.0, 0.0], [0.0, 0.0, 0.0, 1.0]])
    return StateSpaceModel(A, B, C, np.zeros((2, 2)), None,
                           ("u_1", "u_2"), ("y_1", "y_2"))


@dataclass(frozen=True)
class SwingSurrogateParams:
    """Linearised swing dynamics ``M_i w_i' = -sum_j K_ij d_j - D_i w_i - sum_j E_ij w_j + g_i u_i``.

    ``tie_lines`` maps an output name to a weight vector over machine angles;
    weights must sum to zero so each output is a combination of angle
    differences. ``relative_damping`` (E) is an optional symmetric matrix with
    zero row sums acting on speed differences only, e.g. damping between
    machines of one coherent group; it leaves a coherent group-vs-group swing
    untouched.
    """

    inertia: tuple
    damping: tuple
    sync: tuple
    input_gain: tuple
    tie_lines: tuple
    name: str = "custom"
    groups: tuple = field(default=())
    relative_damping: tuple | None = None

    def __post_init__(self):
        M = np.asarray(self.inertia, dtype=float)
        n = M.size
        D = np.asarray(self.damping, dtype=float)
        K = np.asarray(self.sync, dtype=float)
        g = np.asarray(self.input_gain, dtype=float)
        if n < 1:
            raise ValidationError("need at least one machine")
        if D.shape != (n,) or g.shape != (n,) or K.shape != (n, n):
            raise ValidationError("inertia, damping, input_gain and sync sizes disagree")
        if np.any(M <= 0):
            raise ValidationError("inertia must be positive")
        if np.any(D < 0):
            raise ValidationError("damping must be non-negative")
        scale = max(1.0, float(np.max(np.abs(K))))
        if not np.allclose(K, K.T, atol=1e-12 * scale):
            raise ValidationError("synchronizing matrix must be symmetric")
        if not np.allclose(K.sum(axis=1), 0.0, atol=1e-9 * scale):
            raise ValidationError("synchronizing matrix rows must sum to zero")
        E = np.zeros((n, n)) if self.relative_damping is None else np.asarray(self.relative_damping, dtype=float)
        if E.shape != (n, n):
            raise ValidationError("relative_damping must be an n-by-n matrix")
        escale = max(1.0, float(np.max(np.abs(E))))
        if not np.allclose(E, E.T, atol=1e-12 * escale) or not np.allclose(E.sum(axis=1), 0.0, atol=1e-9 * escale):
            raise ValidationError("relative_damping must be symmetric with zero row sums")
        if n and np.linalg.eigvalsh(E).min() < -1e-12 * escale:
            raise ValidationError("relative_damping must be positive semidefinite")
        object.__setattr__(self, "relative_damping", tuple(map(tuple, E.tolist())))
        ties = tuple((str(name), tuple(float(w) for w in weights)) for name, weights in self.tie_lines)
        for name, weights in ties:
            if len(weights) != n:
                raise ValidationError(f"tie line '{name}' has {len(weights)} weights for {n} machines")
            if abs(sum(weights)) > 1e-9 * max(1.0, max(abs(w) for w in weights)):
                raise ValidationError(f"tie line '{name}' weights must sum to zero")
        if n > 1 and not ties:
            raise ValidationError("at least one tie-line output is required")
        object.__setattr__(self, "tie_lines", ties)
        object.__setattr__(self, "inertia", tuple(M.tolist()))
        object.__setattr__(self, "damping", tuple(D.tolist()))
        object.__setattr__(self, "sync", tuple(map(tuple, K.tolist())))
        object.__setattr__(self, "input_gain", tuple(g.tolist()))
        object.__setattr__(self, "groups", tuple(tuple(grp) for grp in self.groups))

    @property
    def n_machines(self):
        return len(self.inertia)

    @classmethod
    def from_dict(cls, d):
        known = {"name", "inertia", "damping", "sync", "input_gain", "tie_lines", "groups",
                 "relative_damping", "description"}
        unknown = set(d) - known
        if unknown:
            raise ValidationError(f"unknown preset keys: {sorted(unknown)}")
        ties = d["tie_lines"]
        if isinstance(ties, dict):
            ties = list(ties.items())
        return cls(d["inertia"], d["damping"], d["sync"], d["input_gain"], ties,
                   d.get("name", "custom"), d.get("groups", ()), d.get("relative_damping"))

    def permuted(self, order):
        """Same plant with machines relabelled by ``order`` (used in symmetry checks)."""
        order = list(order)
        K = np.asarray(self.sync)[np.ix_(order, order)]
        return SwingSurrogateParams(
            [self.inertia[i] for i in order],
            [self.damping[i] for i in order],
            K,
            [self.input_gain[i] for i in order],
            [(n, [w[i] for i in order]) for n, w in self.tie_lines],
            self.name,
            relative_damping=np.asarray(self.relative_damping)[np.ix_(order, order)],
        )


def load_preset(name):
    """Load a shipped plant preset (``two_area`` or ``ten_machine``) or a JSON file path."""
    if name in PRESETS:
        text = resources.files("mimowadc").joinpath("presets", f"{name}.json").read_text("utf-8")
    else:
        try:
            with open(name, encoding="utf-8") as fh:
                text = fh.read()
        except OSError as exc:
            raise ValidationError(f"unknown preset '{name}' ({exc})") from None
    return SwingSurrogateParams.from_dict(json.loads(text))


def build_swing_surrogate(params, monitors=False):
    """Continuous 2n-state model with states (angles, speeds).

    Outputs are the tie-line deviations. With ``monitors=True`` the speed
    deviation of every machine relative to the centre of inertia is appended
    as ``dw_<i>``.
    """
    n = params.n_machines
    M = np.asarray(params.inertia)
    D = np.asarray(params.damping)
    K = np.asarray(params.sync)
    g = np.asarray(params.input_gain)
    A = np.zeros((2 * n, 2 * n))
    A[:n, n:] = np.eye(n)
    A[n:, :n] = -K / M[:, None]
    E = np.asarray(params.relative_damping)
    A[n:, n:] = -(np.diag(D) + E) / M[:, None]
    B = np.zeros((2 * n, n))
    B[n:, :] = np.diag(g / M)
    rows, names = [], []
    for name, weights in params.tie_lines:
        rows.append(np.concatenate([weights, np.zeros(n)]))
        names.append(name)
    if monitors:
        coi = M / M.sum()
        for i in range(n):
            row = np.zeros(2 * n)
            row[n:] = -coi
            row[n + i] += 1.0
            rows.append(row)
            names.append(f"dw_{i + 1}")
    C = np.array(rows).reshape(len(rows), 2 * n)
    states = [f"delta_{i + 1}" for i in range(n)] + [f"omega_{i + 1}" for i in range(n)]
    return StateSpaceModel(A, B, C, np.zeros((len(rows), n)), None,
                           tuple(f"u_{i + 1}" for i in range(n)), tuple(names), tuple(states))


def mode_frequencies(model):
    """Frequencies (Hz) and damping ratios of the oscillatory eigenvalue pairs, ascending."""
    ev = np.linalg.eigvals(model.A)
    ev = ev[ev.imag > 1e-9]
    order = np.argsort(ev.imag)
    ev = ev[order]
    return ev.imag / (2 * math.pi), -ev.real / np.abs(ev)


@dataclass(frozen=True)
class DisturbanceSpec:
    """Input-channel disturbance.

    ``pulse`` is a rectangular pulse on ``[start, start + duration)``;
    ``step`` holds ``amplitude`` from ``start`` on (``duration`` only
    validated); ``probe`` is white noise of std ``amplitude`` smoothed by a
    first-order low-pass with corner ``cutoff_hz`` over the same interval.
    """

    kind: str = "pulse"
    target: str = "u_1"
    start: float = 1.0
    duration: float = 0.05
    amplitude: float = 0.05
    cutoff_hz: float = 2.0
    seed: int = 0

    def __post_init__(self):
        if self.kind not in ("pulse", "step", "probe"):
            raise ValidationError(f"unknown disturbance kind '{self.kind}'")
        if not self.duration > 0:
            raise ValidationError("disturbance duration must be positive")
        if self.start < 0:
            raise ValidationError("disturbance start must be non-negative")

    @property
    def end(self):
        return self.start + self.duration

    def sequence(self, times):
        t = np.asarray(times, dtype=float)
        eps = 1e-9 * (t[1] - t[0]) if t.size > 1 else 1e-12
        if self.kind == "pulse":
            return np.where((t >= self.start - eps) & (t < self.end - eps), self.amplitude, 0.0)
        if self.kind == "step":
            return np.where(t >= self.start - eps, self.amplitude, 0.0)
        rng = np.random.default_rng(self.seed)
        dt = t[1] - t[0] if t.size > 1 else 1.0
        alpha = 1.0 - math.exp(-2 * math.pi * self.cutoff_hz * dt)
        raw = rng.normal(0.0, self.amplitude, t.size)
        out = np.zeros_like(t)
        acc = 0.0
        active = (t >= self.start - eps) & (t < self.end - eps)
        for k in range(t.size):
            acc += alpha * ((raw[k] if active[k] else 0.0) - acc)
            out[k] = acc if active[k] else 0.0
        return out


def input_window(model, specs, horizon, sample_time, start_time=0.0):
    """Input channels realising one or more disturbances over ``[0, horizon)``."""
    if isinstance(specs, DisturbanceSpec):
        specs = [specs]
    n = int(round(horizon / sample_time))
    times = start_time + sample_time * np.arange(n)
    channels = {u: np.zeros(n) for u in model.input_names}
    for spec in specs:
        if spec.target not in channels:
            raise ValidationError(f"unknown input channel '{spec.target}'; have {list(channels)}")
        if horizon + 1e-9 < spec.end - start_time and spec.kind != "step":
            raise ValidationError(
                f"horizon {horizon} s is shorter than the disturbance end {spec.end} s"
            )
        if horizon + 1e-9 < spec.start - start_time:
            raise ValidationError(f"horizon {horizon} s ends before the disturbance starts")
        channels[spec.target] = channels[spec.target] + spec.sequence(times)
    return DataWindow(sample_time, channels, start_time)


def apply_disturbance(model, spec, horizon, sample_time):
    """Simulate the plant's response; the window carries all inputs and outputs."""
    if model.is_discrete:
        if not math.isclose(model.dt, sample_time, rel_tol=1e-9):
            raise ValidationError("discrete model sample time differs from the requested one")
        dmodel = model
    else:
        dmodel = ss_tustin(model, sample_time)
    win = input_window(dmodel, spec, horizon, sample_time)
    U = np.column_stack([win[u] for u in dmodel.input_names])
    Y, _ = dlsim(dmodel, U)
    outputs = {name: Y[:, i] for i, name in enumerate(dmodel.output_names)}
    return win.with_channels(**outputs)


def measurement_channel(raw, decimation, window_length, noise_std=0.0, rng=None,
                        disturbance_start=None, noise_channels=None):
    """Down-sample, cut the analysis window, add white noise and remove the pre-event mean.

    No anti-alias filter is applied before decimation; content above the new
    Nyquist frequency folds back.
    """
    if int(decimation) != decimation or decimation < 1:
        raise ValidationError("decimation must be an integer >= 1")
    decimation = int(decimation)
    if noise_std < 0:
        raise ValidationError("noise_std must be non-negative")
    dt = raw.sample_time * decimation
    n = int(round(window_length / dt))
    available = (len(raw) + decimation - 1) // decimation
    if n < 1 or n > available:
        raise ValidationError(
            f"window of {window_length} s ({n} samples) exceeds the {available} decimated samples"
        )
    if rng is None:
        rng = np.random.default_rng(0)
    elif isinstance(rng, (int, np.integer)):
        rng = np.random.default_rng(int(rng))
    noisy = set(raw.names if noise_channels is None else noise_channels)
    times = raw.start_time + dt * np.arange(n)
    out = {}
    for name in raw.names:
        x = raw[name][::decimation][:n].astype(float)
        if noise_std > 0 and name in noisy:
            x = x + rng.normal(0.0, noise_std, n)
        if disturbance_start is not None:
            pre = times < disturbance_start - 1e-9 * dt
            if np.any(pre):
                x = x - x[pre].mean()
        out[name] = x
    return DataWindow(dt, out, raw.start_time)


def delay_samples(delay, sample_time):
    """Nearest whole number of samples, halves rounded up."""
    if delay < 0:
        raise ValidationError("delay must be non-negative")
    return int(math.floor(delay / sample_time + 0.5 + 1e-9))


def delay_block(signal, delay):
    """Shift every channel right by the rounded delay, zero-filling the front."""
    k = delay_samples(delay, signal.sample_time)
    if k == 0:
        return signal
    out = {}
    for name in signal.names:
        x = signal[name]
        shifted = np.zeros_like(x)
        if k < x.size:
            shifted[k:] = x[: x.size - k]
        out[name] = shifted
    return DataWindow(signal.sample_time, out, signal.start_time)


def add_noise_snr(window, snr_db, rng, channels=None):
    """White Gaussian noise on the chosen channels at ``snr_db`` relative to each channel's RMS."""
    if rng is None or isinstance(rng, (int, np.integer)):
        rng = np.random.default_rng(rng)
    names = window.names if channels is None else tuple(channels)
    extra = {}
    for name in names:
        x = window[name]
        rms = float(np.sqrt(np.mean(np.square(x))))
        sigma = rms * 10.0 ** (-snr_db / 20.0)
        extra[name] = x + rng.normal(0.0, sigma, x.size) if sigma > 0 else x.copy()
    return window.with_channels(**extra)
