"""Uniformly sampled multichannel signal blocks and their CSV form.

CSV layout: UTF-8, one header row, first column ``time`` in seconds, one
column per named channel, floats written with ``repr`` so that a round trip
is lossless.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from .errors import ValidationError


@dataclass(frozen=True, eq=False)
class DataWindow:
    sample_time: float
    channels: dict
    start_time: float = 0.0

    def __post_init__(self):
        if not self.sample_time > 0:
            raise ValidationError(f"sample time must be positive, got {self.sample_time}")
        chans = {}
        length = None
        for name, values in self.channels.items():
            arr = np.asarray(values, dtype=float).reshape(-1)
            arr.setflags(write=False)
            if length is None:
                length = arr.size
            elif arr.size != length:
                raise ValidationError(
                    f"channel '{name}' has {arr.size} samples, expected {length}"
                )
            chans[str(name)] = arr
        if not chans:
            raise ValidationError("a window needs at least one channel")
        if length < 1:
            raise ValidationError("channels must contain at least one sample")
        object.__setattr__(self, "channels", chans)
        object.__setattr__(self, "sample_time", float(self.sample_time))
        object.__setattr__(self, "start_time", float(self.start_time))

    def __len__(self):
        return next(iter(self.channels.values())).size

    def __getitem__(self, name):
        try:
            return self.channels[name]
        except KeyError:
            raise ValidationError(
                f"unknown channel '{name}'; available: {list(self.channels)}"
            ) from None

    def __contains__(self, name):
        return name in self.channels

    @property
    def names(self):
        return list(self.channels)

    @property
    def times(self):
        return self.start_time + self.sample_time * np.arange(len(self))

    @property
    def duration(self):
        return len(self) * self.sample_time

    def select(self, names):
        return DataWindow(self.sample_time, {n: self[n] for n in names}, self.start_time)

    def with_channels(self, **extra):
        merged = dict(self.channels)
        merged.update(extra)
        return DataWindow(self.sample_time, merged, self.start_time)

    def equals(self, other, time_rtol=1e-12):
        """Channel data bit-identical; sample and start times equal to ``time_rtol``."""
        return (
            self.names == other.names
            and np.isclose(self.sample_time, other.sample_time, rtol=time_rtol, atol=0)
            and np.isclose(self.start_time, other.start_time, rtol=0,
                           atol=time_rtol * self.sample_time)
            and all(np.array_equal(self[n], other[n]) for n in self.names)
        )


def csv_export(window, path):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["time", *window.names])
        cols = [window[n] for n in window.names]
        for k, t in enumerate(window.times):
            writer.writerow([repr(float(t))] + [repr(float(c[k])) for c in cols])


def csv_import(path, jitter_tol=1e-6):
    """Read a window written by :func:`csv_export` (or any file in that layout).

    Rows whose time stamp deviates from the uniform grid by more than
    ``jitter_tol * sample_time`` are rejected, with the file line number.
    """
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise ValidationError(f"{path}: empty file")
    header = [h.strip() for h in rows[0]]
    if len(header) < 2 or header[0] != "time":
        raise ValidationError(f"{path}: header must start with 'time' and name at least one channel")
    if len(set(header)) != len(header) or any(not h for h in header):
        raise ValidationError(f"{path}: duplicate or empty column names in header")
    data = []
    for lineno, row in enumerate(rows[1:], start=2):
        if not row:
            continue
        if len(row) != len(header):
            raise ValidationError(
                f"{path}: line {lineno} has {len(row)} fields, header has {len(header)}"
            )
        try:
            data.append([float(v) for v in row])
        except ValueError:
            raise ValidationError(f"{path}: line {lineno} contains a non-numeric field") from None
    if len(data) < 2:
        raise ValidationError(f"{path}: need at least two rows to infer the sample time")
    arr = np.array(data)
    t = arr[:, 0]
    steps = np.diff(t)
    if np.any(steps <= 0):
        bad = int(np.argmax(steps <= 0)) + 1
        raise ValidationError(f"{path}: time not strictly increasing at line {bad + 2}")
    dt = (t[-1] - t[0]) / (len(t) - 1)
    jitter = np.abs(t - (t[0] + dt * np.arange(len(t))))
    if np.any(jitter > jitter_tol * dt):
        bad = int(np.argmax(jitter > jitter_tol * dt))
        raise ValidationError(f"{path}: non-uniform time stamp at line {bad + 2}")
    return DataWindow(dt, {h: arr[:, i] for i, h in enumerate(header[1:], start=1)}, t[0])
