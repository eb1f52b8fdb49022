"""Modes, residues and loop selection for an identified MIMO model."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import NumericalError, ValidationError
from .lti import partial_fractions, tustin_d2c, z_to_s


@dataclass(frozen=True)
class ModeInfo:
    z: complex
    s: complex
    frequency: float
    damping: float
    residue_energy: float = 0.0

    @classmethod
    def from_z(cls, z, sample_time, residue_energy=0.0):
        s = complex(z_to_s(z, sample_time))
        mag = abs(s)
        damping = -s.real / mag if mag > 0 else 0.0
        return cls(complex(z), s, abs(s.imag) / (2 * math.pi), damping, residue_energy)

    def to_dict(self):
        return {
            "z": [self.z.real, self.z.imag],
            "s": [self.s.real, self.s.imag],
            "frequency_hz": self.frequency,
            "damping_ratio": self.damping,
            "residue_energy": self.residue_energy,
        }


@dataclass(frozen=True, eq=False)
class ResidueTable:
    mode: ModeInfo
    raw: np.ndarray  # complex residues, [output, input]
    input_names: tuple
    output_names: tuple

    @property
    def magnitudes(self):
        return np.abs(self.raw)

    @property
    def normalized(self):
        mag = self.magnitudes
        peak = mag.max()
        if peak == 0:
            return np.zeros_like(mag)
        out = mag / peak
        out[np.unravel_index(np.argmax(mag), mag.shape)] = 1.0
        return out

    @property
    def argmax(self):
        return select_loop(self)


def _loop_residues(model, s_pole, tol=1e-6):
    """Continuous-domain residue of every loop at ``s_pole``."""
    m, p = model.shape
    raw = np.zeros((m, p), complex)
    for i in range(m):
        for j in range(p):
            if not np.any(model.numerators[i, j]):
                continue
            pr = partial_fractions(tustin_d2c(model.loop_tf(i, j)))
            dist = np.abs(pr.poles - s_pole)
            idx = int(np.argmin(dist))
            if dist[idx] > tol * max(1.0, abs(s_pole)):
                raise ValidationError(
                    f"pole {s_pole:.6g} not found in the denominator of loop "
                    f"{model.output_names[i]}<-{model.input_names[j]} (nearest {pr.poles[idx]:.6g})"
                )
            raw[i, j] = pr.residues[idx]
    return raw


def modal_energy(residues, s):
    """Squared-area of the impulse-response terms a pole contributes, summed over loops.

    ``|r|^2 / (2|sigma|)`` per term, doubled for a conjugate pair; lightly damped
    modes weigh more than their bare residue would suggest.
    """
    sigma = -s.real
    if sigma <= 0:
        return float("inf")
    terms = 2 if s.imag > 0 else 1
    return float(terms * np.sum(np.abs(residues) ** 2) / (2 * sigma))


def extract_modes(model):
    """One entry per conjugate pair (positive-frequency member) and per real pole, by frequency."""
    modes = []
    for z in model.poles():
        if z.imag < -1e-12 * max(1.0, abs(z)):
            continue
        if abs(z.imag) <= 1e-12 * max(1.0, abs(z)):
            z = complex(z.real, 0.0)
        base = ModeInfo.from_z(z, model.sample_time)
        energy = modal_energy(_loop_residues(model, base.s), base.s)
        modes.append(ModeInfo(base.z, base.s, base.frequency, base.damping, energy))
    modes.sort(key=lambda md: (md.frequency, md.s.real))
    return modes


def inter_area_mode(modes, band=(0.1, 1.0)):
    """In-band mode carrying the largest modal energy across loops (ties: lower frequency)."""
    lo, hi = band
    inband = [md for md in modes if lo <= md.frequency <= hi]
    if not inband:
        found = ", ".join(f"{md.frequency:.3f}" for md in modes) or "none"
        raise NumericalError(
            f"no mode in the {lo}-{hi} Hz band (found: {found} Hz); identification likely failed"
        )
    return max(inband, key=lambda md: (md.residue_energy, -md.frequency))


def residue_table(model, mode, tol=1e-6):
    return ResidueTable(mode, _loop_residues(model, mode.s, tol), model.input_names, model.output_names)


def select_loop(table):
    """(output index, input index) of the largest normalised residue; ties go to lower indices."""
    mag = np.asarray(table.normalized if isinstance(table, ResidueTable) else table)
    if mag.size == 0:
        raise ValidationError("empty residue table")
    best = mag.max()
    rows, cols = np.nonzero(mag == best)
    order = np.lexsort((cols, rows))
    return int(rows[order[0]]), int(cols[order[0]])


def spectrum(x, sample_time, pad=8):
    """Hann-windowed, zero-padded one-sided magnitude spectrum of a mean-removed signal."""
    x = np.asarray(x, dtype=float)
    x = x - x.mean()
    n = x.size
    nfft = pad * n
    mag = np.abs(np.fft.rfft(x * np.hanning(n), nfft))
    freqs = np.fft.rfftfreq(nfft, sample_time)
    return freqs, mag


def fft_dominant_frequency(x, sample_time, band=(0.1, 1.0), pad=8):
    """Spectral peak within ``band`` refined by a parabola through the three top bins."""
    x = np.asarray(x, dtype=float)
    lo, hi = band
    if x.size * sample_time < 2.0 / lo - 1e-9 * sample_time:
        raise ValidationError(
            f"window of {x.size * sample_time:.3f} s holds fewer than two cycles of {lo} Hz"
        )
    freqs, mag = spectrum(x, sample_time, pad)
    idx = np.nonzero((freqs >= lo) & (freqs <= hi))[0]
    floor = 1e-12 * max(1.0, float(np.max(np.abs(x))))
    if idx.size == 0 or mag[idx].max() <= floor * x.size:
        raise NumericalError("no in-band spectral peak above the noise floor")
    k = idx[np.argmax(mag[idx])]
    if k == 0 or k == mag.size - 1 or mag[k] < mag[k - 1] or mag[k] < mag[k + 1]:
        raise NumericalError("in-band spectrum has no interior peak (energy lies outside the band)")
    ym1, y0, yp1 = mag[k - 1], mag[k], mag[k + 1]
    denom = ym1 - 2 * y0 + yp1
    offset = 0.5 * (ym1 - yp1) / denom if denom != 0 else 0.0
    return float(freqs[k] + offset * (freqs[1] - freqs[0]))
