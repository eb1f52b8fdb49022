import math

import numpy as np
import pytest
from numpy.testing import assert_allclose

from mimowadc.ident import MimoTfModel
from mimowadc.lti import RationalTf, tustin_c2d


def random_stable_poles(rng, order, dt=None, rmin=0.3, rmax=0.95):
    """Conjugate-closed stable pole set of the given order."""
    poles = []
    while len(poles) < order:
        if order - len(poles) >= 2 and rng.random() < 0.7:
            if dt is None:
                p = complex(-rng.uniform(0.1, 3.0), rng.uniform(0.5, 10.0))
            else:
                p = rng.uniform(rmin, rmax) * np.exp(1j * rng.uniform(0.05, 2.5))
            poles += [p, p.conjugate()]
        else:
            poles.append(-rng.uniform(0.1, 3.0) if dt is None else rng.uniform(-rmax, rmax))
    return np.array(poles)


def random_continuous_tf(rng, order, proper_gap=1):
    den = np.real(np.poly(random_stable_poles(rng, order)))
    num = rng.normal(size=order + 1 - proper_gap)
    return RationalTf(num, den)


def random_discrete_tf(rng, order, dt=0.05):
    den = np.real(np.poly(random_stable_poles(rng, order, dt)))
    return RationalTf(rng.normal(size=order + 1), den, dt)


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)


def random_shared_model(rng, order, sample_time=0.032, n_out=2, n_in=2):
    """Stable shared-denominator model with one lightly damped pair (the dominant mode)."""
    freq = rng.uniform(0.2, 1.5)
    zeta = rng.uniform(0.03, 0.15)
    s = complex(-zeta * 2 * np.pi * freq, 2 * np.pi * freq * np.sqrt(1 - zeta**2))
    z = np.exp(s * sample_time)
    poles = [z, z.conjugate()]
    if order > 2:
        rest = random_stable_poles(rng, order - 2, sample_time, rmin=0.3, rmax=0.85)
        poles += list(rest)
    den = np.real(np.poly(poles))
    nums = rng.normal(size=(n_out, n_in, order + 1))
    return den, nums, freq


def ringdown_windows(den, nums, sample_time=0.032, n=500, snr_db=None, rng=None):
    """One pulse experiment per input; outputs are the shared-denominator responses."""
    from scipy.signal import lfilter

    from mimowadc.data import DataWindow

    n_out, n_in, _ = nums.shape
    windows = []
    for j in range(n_in):
        chans = {f"u_{q + 1}": np.zeros(n) for q in range(n_in)}
        u = np.zeros(n)
        u[10:13] = 1.0
        chans[f"u_{j + 1}"] = u
        for i in range(n_out):
            y = lfilter(nums[i, j], den, u)
            if snr_db is not None:
                y = y + rng.normal(0, np.sqrt(np.mean(y**2)) * 10 ** (-snr_db / 20), n)
            chans[f"y_{i + 1}"] = y
        windows.append(DataWindow(sample_time, chans))
    return windows


def model_from_poles(poles, residues, sample_time=0.032):
    """Discrete model whose continuous loops are ``sum_i residues[m, p, i] / (s - poles[i])``."""
    poles = np.asarray(poles, complex)
    den = np.real(np.poly(poles))
    m, p, _ = residues.shape
    nums = np.zeros((m, p, poles.size + 1))
    dens = []
    for i in range(m):
        for j in range(p):
            num = np.zeros(poles.size, complex)
            for q, r in enumerate(residues[i, j]):
                num += r * np.poly(np.delete(poles, q))
            d = tustin_c2d(RationalTf(np.real(num), den), sample_time)
            nums[i, j] = d.num
            dens.append(d.den)
    for d in dens[1:]:
        assert_allclose(d, dens[0], rtol=1e-13, atol=1e-13)
    names_in = tuple(f"u_{j + 1}" for j in range(p))
    names_out = tuple(f"y_{i + 1}" for i in range(m))
    return MimoTfModel(sample_time, poles.size, dens[0], nums, names_in, names_out)


def random_pole_model(rng, n_pairs=2, n_real=1, m=2, p=2):
    poles = []
    for _ in range(n_pairs):
        s = complex(-rng.uniform(0.05, 1.5), 2 * math.pi * rng.uniform(0.1, 2.5))
        poles += [s, s.conjugate()]
    poles += list(-rng.uniform(0.1, 3.0, n_real))
    R = np.zeros((m, p, len(poles)), complex)
    for q in range(0, 2 * n_pairs, 2):
        r = rng.normal(size=(m, p)) + 1j * rng.normal(size=(m, p))
        R[:, :, q], R[:, :, q + 1] = r, r.conj()
    R[:, :, 2 * n_pairs:] = rng.normal(size=(m, p, n_real))
    return model_from_poles(poles, R), np.array(poles), R


ACCEPTANCE = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE:
            terminalreporter.write_line(line)


def limit_residue(model, s, points=32):
    """``lim (s - p) G(s)`` per loop, as the mean of ``(s - p) G(s)`` around a small circle.

    ``(s - p) G(s)`` is analytic near a simple pole, so its circle mean equals the
    limit; the radius stays well away from both the pole and its neighbours,
    which keeps round-off out of the estimate.
    """
    from mimowadc.lti import s_to_z, z_to_s

    others = z_to_s(model.poles(), model.sample_time)
    gaps = np.abs(others - s)
    radius = 0.1 * np.sort(gaps)[1]
    d = radius * np.exp(2j * np.pi * np.arange(points) / points)
    out = np.zeros(model.shape, complex)
    for i in range(model.shape[0]):
        for j in range(model.shape[1]):
            out[i, j] = np.mean(d * model.loop_tf(i, j)(s_to_z(s + d, model.sample_time)))
    return out
