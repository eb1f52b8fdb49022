"""Static figures for a pipeline run (PNG, headless backend)."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .modal import spectrum  # noqa: E402


def _save(fig, path):
    fig.tight_layout()
    fig.savefig(path, dpi=110)
    plt.close(fig)
    return path


def plot_case(case, channels, path):
    fig, axes = plt.subplots(len(channels) + 1, 1, figsize=(8, 2.1 * (len(channels) + 1)), sharex=True)
    t = case.off.times
    for ax, ch in zip(axes, channels):
        ax.plot(t, case.off[ch], color="0.55", lw=1.0, label="without WADC")
        ax.plot(t, case.on[ch], color="tab:blue", lw=1.2, label="with WADC")
        ax.set_ylabel(ch)
        ax.grid(alpha=0.3)
    axes[0].legend(loc="upper right", fontsize=8)
    axes[0].set_title(f"{case.name}: disturbance on {case.target}")
    axes[-1].plot(t, case.on["u_wadc"], color="tab:red", lw=1.0)
    axes[-1].set_ylabel("u_wadc")
    axes[-1].set_xlabel("time [s]")
    axes[-1].grid(alpha=0.3)
    return _save(fig, path)


def plot_spectrum(signal, sample_time, band, mode_hz, fft_hz, path, label="signal"):
    freqs, mag = spectrum(signal, sample_time)
    keep = freqs <= max(3.0, 2 * band[1])
    fig, ax = plt.subplots(figsize=(7, 3.2))
    ax.plot(freqs[keep], mag[keep], color="k", lw=1.0)
    ax.axvspan(band[0], band[1], color="tab:green", alpha=0.08, label="inter-area band")
    ax.axvline(mode_hz, color="tab:blue", ls="--", label=f"identified {mode_hz:.4f} Hz")
    ax.axvline(fft_hz, color="tab:red", ls=":", label=f"FFT peak {fft_hz:.4f} Hz")
    ax.set_xlabel("frequency [Hz]")
    ax.set_ylabel(f"|FFT| of {label}")
    ax.legend(fontsize=8)
    ax.grid(alpha=0.3)
    return _save(fig, path)


def plot_residues(table, path):
    fig, ax = plt.subplots(figsize=(1.0 + 0.7 * len(table.input_names), 0.9 + 0.5 * len(table.output_names)))
    im = ax.imshow(table.normalized, cmap="viridis", vmin=0, vmax=1, aspect="auto")
    ax.set_xticks(range(len(table.input_names)), table.input_names, rotation=45)
    ax.set_yticks(range(len(table.output_names)), table.output_names)
    i, j = table.argmax
    ax.add_patch(plt.Rectangle((j - 0.5, i - 0.5), 1, 1, fill=False, ec="red", lw=2))
    ax.set_title(f"normalized residues at {table.mode.frequency:.3f} Hz")
    fig.colorbar(im, ax=ax)
    return _save(fig, path)


def plot_sweep(tables, channel, path):
    fig, ax = plt.subplots(figsize=(6, 3.2))
    for name, rows in tables.items():
        d = np.array([r.delay for r in rows]) * 1e3
        e = np.array([r.relative_error for r in rows])
        ax.plot(d, e, marker="o", label=name)
    ax.set_xlabel("extra delay [ms]")
    ax.set_ylabel(f"relative error of {channel}")
    ax.set_yscale("symlog", linthresh=0.1)
    ax.legend(fontsize=8)
    ax.grid(alpha=0.3)
    return _save(fig, path)


def render_all(pipe, outdir):
    outdir = Path(outdir)
    outdir.mkdir(parents=True, exist_ok=True)
    written = []
    table, (i, j) = pipe.residues
    written.append(plot_residues(table, outdir / "residues.png"))
    out, inp = pipe.model.output_names[i], pipe.model.input_names[j]
    win = max(pipe.experiments, key=lambda w: float(np.sum(np.square(w[inp]))) if inp in w else 0.0)
    written.append(plot_spectrum(win[out], win.sample_time, pipe.config.modes.band,
                                 pipe.modes[1].frequency, pipe.fft_frequency,
                                 outdir / "spectrum.png", label=out))
    for case in pipe.evaluation or []:
        written.append(plot_case(case, pipe.metric_channels, outdir / f"traces_{case.name}.png"))
    if pipe.sweep:
        written.append(plot_sweep(pipe.sweep[0], pipe.sweep_channel, outdir / "delay_sweep.png"))
    return written
