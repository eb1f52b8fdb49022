"""Linear-systems primitives shared by the rest of the package.

Coefficient conventions
-----------------------
* continuous (``dt is None``): descending powers of ``s``.
* discrete (``dt > 0``): ascending powers of ``z**-1`` with the denominator
  normalised so that its first coefficient is exactly 1.

Once numerator and denominator of a discrete transfer function are padded
to equal length, the ascending-``z**-1`` arrays are also the descending-``z``
coefficient arrays, so the same root finder serves both domains.

No pole/zero cancellation is performed anywhere.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .data import DataWindow
from .errors import IllConditionedError, UnsupportedMultiplicityError, ValidationError

__all__ = [
    "RationalTf",
    "StateSpaceModel",
    "PoleResidueForm",
    "poly_roots",
    "ss_to_tf",
    "tustin_c2d",
    "tustin_d2c",
    "ss_tustin",
    "z_to_s",
    "s_to_z",
    "partial_fractions",
    "tf_to_ss_controllable",
    "simulate_dt",
    "dlsim",
]


def _as_coeffs(values, name):
    arr = np.atleast_1d(np.asarray(values))
    if arr.ndim != 1 or arr.size == 0:
        raise ValidationError(f"{name} must be a nonempty 1-D coefficient list")
    if not np.iscomplexobj(arr):
        arr = arr.astype(float)
    return arr


def _check_dt(dt):
    if dt is not None and not dt > 0:
        raise ValidationError(f"sample time must be positive, got {dt}")


@dataclass(frozen=True, eq=False)
class RationalTf:
    """Single-input single-output rational transfer function.

    ``dt=None`` marks the continuous domain.
    """

    num: np.ndarray
    den: np.ndarray
    dt: float | None = None

    def __post_init__(self):
        num = _as_coeffs(self.num, "numerator")
        den = _as_coeffs(self.den, "denominator")
        _check_dt(self.dt)
        if not np.any(den != 0):
            raise ValidationError("denominator is identically zero")
        if self.dt is not None and den[0] != 1:
            if den[0] == 0:
                raise ValidationError("discrete denominator must start with a nonzero coefficient")
            num = num / den[0]
            den = den / den[0]
        object.__setattr__(self, "num", num)
        object.__setattr__(self, "den", den)

    @property
    def is_discrete(self):
        return self.dt is not None

    @property
    def order(self):
        if self.is_discrete:
            return len(self.den) - 1
        return len(np.trim_zeros(self.den, "f")) - 1

    def z_polys(self):
        """Equal-length numerator/denominator arrays, descending in z (or s)."""
        n = max(len(self.num), len(self.den))
        if self.is_discrete:
            num = np.concatenate([self.num, np.zeros(n - len(self.num))])
            den = np.concatenate([self.den, np.zeros(n - len(self.den))])
        else:
            num = np.concatenate([np.zeros(n - len(self.num)), self.num])
            den = np.concatenate([np.zeros(n - len(self.den)), self.den])
        return num, den

    def __call__(self, x):
        """Evaluate at ``s`` (continuous) or ``z`` (discrete)."""
        x = np.asarray(x, dtype=complex)
        if self.is_discrete:
            w = 1.0 / x
            return np.polyval(self.num[::-1], w) / np.polyval(self.den[::-1], w)
        return np.polyval(self.num, x) / np.polyval(self.den, x)

    def poles(self):
        _, den = self.z_polys()
        return poly_roots(np.trim_zeros(den, "f"))

    def __repr__(self):
        dom = "continuous" if self.dt is None else f"dt={self.dt:g}"
        return f"RationalTf(num={self.num.tolist()}, den={self.den.tolist()}, {dom})"


@dataclass(frozen=True, eq=False)
class StateSpaceModel:
    A: np.ndarray
    B: np.ndarray
    C: np.ndarray
    D: np.ndarray
    dt: float | None = None
    input_names: tuple = field(default=None)
    output_names: tuple = field(default=None)
    state_names: tuple = field(default=None)

    def __post_init__(self):
        A = np.atleast_2d(np.asarray(self.A, dtype=float))
        n = A.shape[0] if A.size else 0
        A = A.reshape(n, n) if n else np.zeros((0, 0))
        B = np.asarray(self.B, dtype=float)
        C = np.asarray(self.C, dtype=float)
        D = np.atleast_2d(np.asarray(self.D, dtype=float))
        if A.shape != (n, n):
            raise ValidationError(f"A must be square, got {A.shape}")
        m, p = D.shape
        B = B.reshape(n, p) if B.size == n * p else B
        C = C.reshape(m, n) if C.size == m * n else C
        if B.shape != (n, p) or C.shape != (m, n):
            raise ValidationError(
                f"inconsistent dimensions A{A.shape} B{B.shape} C{C.shape} D{D.shape}"
            )
        _check_dt(self.dt)
        names = {
            "input_names": (self.input_names, p, "u"),
            "output_names": (self.output_names, m, "y"),
            "state_names": (self.state_names, n, "x"),
        }
        for attr, (given, count, prefix) in names.items():
            if given is None:
                given = tuple(f"{prefix}_{i + 1}" for i in range(count))
            given = tuple(given)
            if len(given) != count:
                raise ValidationError(f"{attr} has {len(given)} entries, expected {count}")
            object.__setattr__(self, attr, given)
        for attr, val in zip("ABCD", (A, B, C, D)):
            object.__setattr__(self, attr, val)

    @property
    def n_states(self):
        return self.A.shape[0]

    @property
    def n_inputs(self):
        return self.D.shape[1]

    @property
    def n_outputs(self):
        return self.D.shape[0]

    @property
    def is_discrete(self):
        return self.dt is not None

    def select(self, outputs=None, inputs=None):
        """Sub-model restricted to named outputs and/or inputs."""
        oi = list(range(self.n_outputs)) if outputs is None else [self.output_names.index(o) for o in outputs]
        ii = list(range(self.n_inputs)) if inputs is None else [self.input_names.index(u) for u in inputs]
        return StateSpaceModel(
            self.A, self.B[:, ii], self.C[oi], self.D[np.ix_(oi, ii)], self.dt,
            tuple(self.input_names[i] for i in ii),
            tuple(self.output_names[o] for o in oi),
            self.state_names,
        )


@dataclass(frozen=True, eq=False)
class PoleResidueForm:
    """``sum(r_j / (x - p_j)) + direct(x)``, ``x`` being ``s`` or ``z``.

    ``direct`` holds descending polynomial coefficients in ``x``.
    """

    poles: np.ndarray
    residues: np.ndarray
    direct: np.ndarray
    dt: float | None = None

    def __call__(self, x):
        x = np.asarray(x, dtype=complex)
        total = np.polyval(self.direct, x) if len(self.direct) else np.zeros_like(x)
        for p, r in zip(self.poles, self.residues):
            total = total + r / (x - p)
        return total

    @property
    def terms(self):
        return list(zip(self.poles, self.residues))


def poly_roots(p):
    """Roots of a polynomial given in descending powers (companion eigenvalues)."""
    p = np.trim_zeros(_as_coeffs(p, "polynomial"), "f")
    if p.size < 2:
        raise ValidationError("polynomial of degree 0 has no roots")
    return np.roots(p).astype(complex)


def _charpoly(A):
    if A.shape[0] == 0:
        return np.array([1.0])
    return np.real_if_close(np.poly(A)).astype(float)


def ss_to_tf(model):
    """Grid ``[output][input]`` of transfer functions sharing ``det(xI - A)``.

    Uses ``C_i adj(xI-A) B_j = det(xI - A + B_j C_i) - det(xI - A)``.
    """
    A, B, C, D = model.A, model.B, model.C, model.D
    den = _charpoly(A)
    grid = []
    for i in range(model.n_outputs):
        row = []
        for j in range(model.n_inputs):
            num = _charpoly(A - np.outer(B[:, j], C[i])) - den + D[i, j] * den
            row.append(RationalTf(num, den.copy(), model.dt))
        grid.append(row)
    return grid


def _pow_poly(base, k):
    out = np.array([1.0])
    for _ in range(k):
        out = np.convolve(out, base)
    return out


def tustin_c2d(tf, sample_time):
    """Discretise with ``s = 2(1 - z^-1) / (T (1 + z^-1))``."""
    if tf.is_discrete:
        raise ValidationError("tustin_c2d expects a continuous transfer function")
    _check_dt(sample_time)
    num = np.trim_zeros(tf.num, "f")
    den = np.trim_zeros(tf.den, "f")
    if len(num) > len(den):
        raise IllConditionedError(
            "improper transfer function: bilinear map places poles at z = -1"
        )
    n = len(den) - 1
    gain = 2.0 / sample_time
    zm1 = np.array([1.0, -1.0])
    zp1 = np.array([1.0, 1.0])

    def substitute(coeffs):
        out = np.zeros(n + 1)
        deg = len(coeffs) - 1
        for i, c in enumerate(coeffs):
            power = deg - i
            term = np.convolve(_pow_poly(zm1, power), _pow_poly(zp1, n - power))
            out += c * gain**power * term
        return out

    num_z = substitute(num)
    den_z = substitute(den)
    if abs(den_z[0]) <= 1e-12 * np.max(np.abs(den_z)):
        raise IllConditionedError(
            f"bilinear substitution zeroes the leading denominator coefficient "
            f"(continuous pole at s = 2/T = {gain:g})"
        )
    return RationalTf(num_z / den_z[0], den_z / den_z[0], sample_time)


def tustin_d2c(tf, pole_tol=1e-9):
    """Inverse bilinear map ``s = (2/T)(z - 1)/(z + 1)``; result has a monic denominator."""
    if not tf.is_discrete:
        raise ValidationError("tustin_d2c expects a discrete transfer function")
    num, den = tf.z_polys()
    n = len(den) - 1
    if n > 0:
        for p in poly_roots(np.trim_zeros(den, "f")):
            if abs(p + 1) < pole_tol:
                raise IllConditionedError(f"pole {p:.6g} at z = -1 maps to infinity")
    half = tf.dt / 2.0
    sp = np.array([half, 1.0])  # 1 + sT/2
    sm = np.array([-half, 1.0])  # 1 - sT/2

    def substitute(coeffs):
        out = np.zeros(n + 1)
        for i, c in enumerate(coeffs):
            out += c * np.convolve(_pow_poly(sp, n - i), _pow_poly(sm, i))
        return out

    num_s = substitute(num)
    den_s = substitute(den)
    lead = den_s[0]
    if abs(lead) <= 1e-12 * np.max(np.abs(den_s)):
        raise IllConditionedError("pole at z = -1 maps to infinity")
    return RationalTf(num_s / lead, den_s / lead, None)


def z_to_s(z, sample_time):
    """Pole-by-pole inverse bilinear map."""
    z = np.asarray(z, dtype=complex)
    if np.any(np.abs(z + 1) < 1e-12):
        bad = z[np.abs(z + 1) < 1e-12]
        raise IllConditionedError(f"pole {bad.ravel()[0]:.6g} at z = -1 maps to infinity")
    return (2.0 / sample_time) * (z - 1) / (z + 1)


def s_to_z(s, sample_time):
    s = np.asarray(s, dtype=complex)
    return (1 + s * sample_time / 2) / (1 - s * sample_time / 2)


def ss_tustin(model, sample_time):
    """Bilinear discretisation of a state-space model; preserves the transfer function."""
    if model.is_discrete:
        raise ValidationError("model is already discrete")
    _check_dt(sample_time)
    n = model.n_states
    A, B, C, D = model.A, model.B, model.C, model.D
    if n == 0:
        return StateSpaceModel(A, B, C, D, sample_time, model.input_names,
                               model.output_names, model.state_names)
    M = np.eye(n) - A * sample_time / 2
    Minv = np.linalg.inv(M)
    Ad = Minv @ (np.eye(n) + A * sample_time / 2)
    Bd = Minv @ B * sample_time
    Cd = C @ Minv
    Dd = D + C @ Minv @ B * (sample_time / 2)
    return StateSpaceModel(Ad, Bd, Cd, Dd, sample_time, model.input_names,
                           model.output_names, model.state_names)


def partial_fractions(tf, cluster_tol=1e-6):
    """Expand into simple-pole terms plus a polynomial direct term.

    Discrete transfer functions are expanded in ``z`` (not ``z**-1``).
    Repeated poles (closer than ``cluster_tol``) are refused.
    """
    num, den = tf.z_polys()
    den = np.trim_zeros(den, "f")
    num = np.trim_zeros(num, "f")
    if num.size == 0:
        num = np.zeros(1)
    if den.size < 2:
        return PoleResidueForm(np.zeros(0, complex), np.zeros(0, complex),
                               np.atleast_1d(num / den[0]), tf.dt)
    poles = poly_roots(den)
    for i in range(len(poles)):
        for j in range(i + 1, len(poles)):
            if abs(poles[i] - poles[j]) < cluster_tol:
                raise UnsupportedMultiplicityError(
                    f"repeated pole near {poles[i]:.6g} (separation "
                    f"{abs(poles[i] - poles[j]):.2e} < {cluster_tol:g})"
                )
    if len(num) >= len(den):
        direct, rem = np.polydiv(num, den)
    else:
        direct, rem = np.zeros(0), num
    residues = np.polyval(rem, poles) / np.polyval(np.polyder(den), poles)
    return PoleResidueForm(poles, residues.astype(complex), direct, tf.dt)


def tf_to_ss_controllable(tf):
    """Controllable canonical realisation with state dimension equal to the denominator degree."""
    if tf.is_discrete:
        num, den = tf.num, tf.den
        if len(num) > len(den):
            raise ValidationError("improper transfer function: numerator longer than denominator")
        b = np.concatenate([num, np.zeros(len(den) - len(num))])
        a = den
    else:
        den = np.trim_zeros(tf.den, "f")
        num = np.trim_zeros(tf.num, "f")
        if len(num) > len(den):
            raise ValidationError("improper transfer function: numerator degree exceeds denominator")
        a = den / den[0]
        b = np.concatenate([np.zeros(len(den) - len(num)), num]) / den[0]
    n = len(a) - 1
    A = np.zeros((n, n))
    if n:
        A[0, :] = -a[1:]
        A[1:, :-1] = np.eye(n - 1)
    B = np.zeros((n, 1))
    if n:
        B[0, 0] = 1.0
    C = (b[1:] - b[0] * a[1:]).reshape(1, n)
    D = np.array([[b[0]]])
    return StateSpaceModel(A, B, C, D, tf.dt)


def dlsim(model, U, x0=None):
    """Array-level simulation. ``U`` is (N, p); returns outputs (N, m) and states (N, n)."""
    U = np.asarray(U, dtype=float)
    if U.ndim == 1:
        U = U[:, None]
    N = U.shape[0]
    if U.shape[1] != model.n_inputs:
        raise ValidationError(f"expected {model.n_inputs} input columns, got {U.shape[1]}")
    n = model.n_states
    x = np.zeros(n) if x0 is None else np.asarray(x0, dtype=float).copy()
    if x.shape != (n,):
        raise ValidationError(f"initial state must have length {n}")
    A, B, C, D = model.A, model.B, model.C, model.D
    X = np.empty((N, n))
    for k in range(N):
        X[k] = x
        x = A @ x + B @ U[k]
    Y = X @ C.T + U @ D.T
    return Y, X


def simulate_dt(model, inputs, x0=None):
    """Simulate a discrete model driven by the model's named input channels."""
    if not model.is_discrete:
        raise ValidationError("simulate_dt needs a discrete model")
    if not np.isclose(inputs.sample_time, model.dt, rtol=1e-9, atol=0):
        raise ValidationError(
            f"sample time mismatch: window {inputs.sample_time} vs model {model.dt}"
        )
    missing = [u for u in model.input_names if u not in inputs.channels]
    if missing:
        raise ValidationError(f"input window lacks channels {missing}")
    U = np.column_stack([inputs.channels[u] for u in model.input_names]) if model.n_inputs else np.zeros((len(inputs), 0))
    Y, _ = dlsim(model, U, x0)
    return DataWindow(
        inputs.sample_time,
        {name: Y[:, i] for i, name in enumerate(model.output_names)},
        inputs.start_time,
    )
