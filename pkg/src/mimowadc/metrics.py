"""Scalar figures of merit computed from sampled channels."""

from __future__ import annotations

import numpy as np

from .errors import ValidationError


def _times(x, sample_time, start_time):
    return start_time + sample_time * np.arange(len(x))


def metric_auc(x, sample_time, t_from=None, t_to=None, start_time=0.0):
    """Trapezoidal area under ``|x|`` between ``t_from`` and ``t_to`` (seconds)."""
    x = np.asarray(x, dtype=float)
    t = _times(x, sample_time, start_time)
    lo = t[0] if t_from is None else t_from
    hi = t[-1] if t_to is None else t_to
    tol = 1e-9 * sample_time
    if lo < t[0] - tol or hi > t[-1] + tol:
        raise ValidationError(f"interval [{lo}, {hi}] s lies outside the signal [{t[0]}, {t[-1]}] s")
    mask = (t >= lo - tol) & (t <= hi + tol)
    if hi <= lo or mask.sum() < 2:
        raise ValidationError(f"empty integration interval [{lo}, {hi}] s")
    return float(np.trapezoid(np.abs(x[mask]), t[mask]))


def metric_relative_error(reference, delayed):
    ref = np.asarray(reference, dtype=float)
    other = np.asarray(delayed, dtype=float)
    if ref.shape != other.shape:
        raise ValidationError(f"length mismatch: {ref.shape} vs {other.shape}")
    norm = np.linalg.norm(ref)
    if norm == 0:
        raise ValidationError("reference signal has zero norm")
    return float(np.linalg.norm(ref - other) / norm)


def metric_peak(x, sample_time, at_time, start_time=0.0):
    """``|x|`` at the sample nearest ``at_time``."""
    x = np.asarray(x, dtype=float)
    pos = (at_time - start_time) / sample_time
    if pos < -0.5 or pos > len(x) - 0.5:
        raise ValidationError(f"time {at_time} s is outside the signal")
    idx = min(max(int(np.floor(pos + 0.5)), 0), len(x) - 1)
    return float(abs(x[idx]))


def reduction_percent(without, with_):
    if without == 0:
        return 0.0
    return 100.0 * (1.0 - with_ / without)
