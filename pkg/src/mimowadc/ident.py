"""MIMO transfer-function identification with one shared denominator.

Every loop ``(output m, input p)`` is modelled as::

    dP_m(t) = sum_j b_j^{mp} u_p(t - j) - sum_j a_j dP_m(t - j),   j <= k

with the same ``a`` for all loops.  Fitting runs in two stages: a linear
least-squares fit of the stacked equation-error problem gives the starting
point, then a Levenberg-Marquardt search minimises the simulated-output
error of all loops jointly while keeping the denominator roots inside a
circle of radius ``1 - margin``.

Each loop regresses one output on one input, so the data for loop
``(m, p)`` should come from an experiment in which only input ``p`` was
active.  :func:`loop_blocks` picks, for every input, the window in which
that input carries the most energy.
"""

from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy.signal import lfilter

from .errors import RankDeficientError, ValidationError
from .lti import RationalTf

log = logging.getLogger(__name__)


@dataclass(frozen=True, eq=False)
class MimoTfModel:
    """Discrete MIMO model; ``numerators[m, p]`` holds ``b_0..b_k`` of loop (m, p)."""

    sample_time: float
    order: int
    denominator: np.ndarray
    numerators: np.ndarray
    input_names: tuple
    output_names: tuple

    def __post_init__(self):
        den = np.asarray(self.denominator, dtype=float)
        nums = np.asarray(self.numerators, dtype=float)
        k = int(self.order)
        if den.shape != (k + 1,) or den[0] != 1.0:
            raise ValidationError("denominator must be (1, a_1..a_k)")
        if nums.ndim != 3 or nums.shape[2] != k + 1:
            raise ValidationError("numerators must have shape (m, p, k+1)")
        if nums.shape[:2] != (len(self.output_names), len(self.input_names)):
            raise ValidationError("numerator grid does not match channel names")
        den.setflags(write=False)
        nums.setflags(write=False)
        object.__setattr__(self, "denominator", den)
        object.__setattr__(self, "numerators", nums)
        object.__setattr__(self, "order", k)
        object.__setattr__(self, "input_names", tuple(self.input_names))
        object.__setattr__(self, "output_names", tuple(self.output_names))

    @property
    def shape(self):
        return self.numerators.shape[:2]

    def loop_tf(self, m, p):
        """Transfer function of one loop; indices or channel names accepted."""
        if isinstance(m, str):
            m = self.output_names.index(m)
        if isinstance(p, str):
            p = self.input_names.index(p)
        return RationalTf(self.numerators[m, p].copy(), self.denominator.copy(), self.sample_time)

    def poles(self):
        if self.order == 0:
            return np.zeros(0, complex)
        return np.roots(self.denominator).astype(complex)

    def to_dict(self):
        return {
            "sample_time": self.sample_time,
            "order": self.order,
            "denominator": self.denominator.tolist(),
            "numerators": {
                f"{out}<-{inp}": self.numerators[i, j].tolist()
                for i, out in enumerate(self.output_names)
                for j, inp in enumerate(self.input_names)
            },
            "input_names": list(self.input_names),
            "output_names": list(self.output_names),
        }

    @classmethod
    def from_dict(cls, d):
        outs, ins = d["output_names"], d["input_names"]
        nums = np.array([[d["numerators"][f"{o}<-{i}"] for i in ins] for o in outs], dtype=float)
        return cls(d["sample_time"], d["order"], d["denominator"], nums, ins, outs)


@dataclass(frozen=True)
class FitReport:
    loop_errors: np.ndarray
    condition_number: float
    iterations: int
    converged: bool
    objective_init: float = float("nan")
    objective: float = float("nan")
    excluded: tuple = field(default=())

    @property
    def output_error(self):
        """Aggregate normalised output error over the fitted loops."""
        e = np.asarray(self.loop_errors, dtype=float)
        return float(np.sqrt(np.mean(e[np.isfinite(e)] ** 2))) if e.size else 0.0

    def to_dict(self):
        return {
            "loop_errors": np.asarray(self.loop_errors).tolist(),
            "output_error": self.output_error,
            "condition_number": self.condition_number,
            "iterations": self.iterations,
            "converged": self.converged,
            "objective_init": self.objective_init,
            "objective": self.objective,
            "excluded": [list(e) for e in self.excluded],
        }


@dataclass(frozen=True, eq=False)
class LoopBlock:
    """Regressors of one loop plus the raw series the output-error stage needs."""

    output: str
    input: str
    index: tuple
    X_his: np.ndarray
    X_num: np.ndarray
    X_den: np.ndarray
    u: np.ndarray
    y: np.ndarray

    @property
    def order(self):
        return self.X_den.shape[1]


@dataclass(frozen=True, eq=False)
class StackedSystem:
    blocks: tuple
    order: int

    @property
    def n_unknowns(self):
        return len(self.blocks) * (self.order + 1) + self.order

    @property
    def rhs(self):
        return np.concatenate([b.X_his for b in self.blocks])

    @property
    def matrix(self):
        """Dense design matrix: block-diagonal numerator columns, shared denominator columns."""
        k = self.order
        L = len(self.blocks)
        rows = sum(b.X_his.size for b in self.blocks)
        Phi = np.zeros((rows, L * (k + 1) + k))
        r = 0
        for h, b in enumerate(self.blocks):
            n = b.X_his.size
            Phi[r:r + n, h * (k + 1):(h + 1) * (k + 1)] = b.X_num
            Phi[r:r + n, L * (k + 1):] = b.X_den
            r += n
        return Phi


def build_regressors(window, input, output, k):
    """Equation-error regressors of one loop for rows ``t = k .. N-1``."""
    if k < 0 or int(k) != k:
        raise ValidationError("order must be a non-negative integer")
    k = int(k)
    u = np.asarray(window[input], dtype=float)
    y = np.asarray(window[output], dtype=float)
    N = u.size
    if N <= 2 * k + 1:
        raise ValidationError(f"window of {N} samples is too short for order {k}")
    rows = np.arange(k, N)
    X_num = np.column_stack([u[rows - j] for j in range(k + 1)])
    X_den = np.column_stack([-y[rows - j] for j in range(1, k + 1)]) if k else np.zeros((rows.size, 0))
    return LoopBlock(output, input, (None, None), y[rows].copy(), X_num, X_den, u.copy(), y.copy())


def stack_loops(blocks):
    blocks = tuple(blocks)
    if not blocks:
        raise ValidationError("no loops to stack")
    k = blocks[0].order
    for b in blocks:
        if b.order != k:
            raise ValidationError("all loops must share the model order")
        if not (b.X_num.shape[0] == b.X_den.shape[0] == b.X_his.size):
            raise ValidationError(f"loop {b.output}<-{b.input} has inconsistent row counts")
    n0 = blocks[0].X_his.size
    if any(b.X_his.size != n0 for b in blocks):
        raise ValidationError("all loops must share the observation window length")
    return StackedSystem(blocks, k)


def _rank_check(S, shape, what):
    tol = S.max(initial=0.0) * max(shape) * np.finfo(float).eps
    if S.size and (S.min() <= tol or S.max() == 0.0):
        raise RankDeficientError(
            f"{what} is rank deficient; smallest singular values {np.sort(S)[:3].tolist()}",
            singular_values=S,
        )


def _colscale(X):
    norms = np.linalg.norm(X, axis=0)
    norms[norms == 0] = 1.0
    return norms


def ls_initialize(stacked):
    """Least-squares solution of the stacked equation-error problem.

    The per-loop numerator blocks are eliminated by projection, the shared
    denominator is solved from the reduced problem, then each numerator is
    recovered; this is the same minimiser as a dense solve of the stacked
    matrix.  Returns ``(theta, condition_number)`` with ``theta`` ordered
    ``[b^1, ..., b^L, a]``.
    """
    k = stacked.order
    reduced_rows, reduced_rhs, projections = [], [], []
    conds = []
    for b in stacked.blocks:
        scale = _colscale(b.X_num)
        Q, R = np.linalg.qr(b.X_num / scale)
        S = np.linalg.svd(R, compute_uv=False)
        _rank_check(S, b.X_num.shape, f"input regressor of loop {b.output}<-{b.input}")
        conds.append(S.max() / S.min())
        projections.append((Q, R, scale))
        reduced_rows.append(b.X_den - Q @ (Q.T @ b.X_den))
        reduced_rhs.append(b.X_his - Q @ (Q.T @ b.X_his))
    if k:
        Rm = np.vstack(reduced_rows)
        rscale = _colscale(Rm)
        U, S, Vt = np.linalg.svd(Rm / rscale, full_matrices=False)
        _rank_check(S, Rm.shape, "shared denominator regressor")
        conds.append(S.max() / S.min())
        a = (Vt.T @ ((U.T @ np.concatenate(reduced_rhs)) / S)) / rscale
    else:
        a = np.zeros(0)
    thetas = []
    for b, (Q, R, scale) in zip(stacked.blocks, projections):
        target = b.X_his - b.X_den @ a
        thetas.append(np.linalg.solve(R, Q.T @ target) / scale)
    thetas.append(a)
    cond = float(max(conds)) if conds else 1.0
    if stacked.matrix.size <= 2_000_000:
        S = np.linalg.svd(stacked.matrix, compute_uv=False)
        cond = float(S.max() / S.min())
    return np.concatenate(thetas), cond


# ----------------------------------------------------------------- output error

def _shift(x, j):
    if j == 0:
        return x
    out = np.zeros_like(x)
    out[j:] = x[:-j]
    return out


def _loop_sim(b, a_full, u):
    v = lfilter([1.0], a_full, u)
    yhat = np.zeros_like(u)
    for j, bj in enumerate(b):
        yhat += bj * _shift(v, j)
    return v, yhat


def oe_residuals(theta, blocks, k):
    """Per-loop output-error residuals ``y - G(theta) u``."""
    L = len(blocks)
    a_full = np.concatenate([[1.0], theta[L * (k + 1):]])
    res = []
    for h, blk in enumerate(blocks):
        b = theta[h * (k + 1):(h + 1) * (k + 1)]
        _, yhat = _loop_sim(b, a_full, blk.u)
        res.append(blk.y - yhat)
    return res


def oe_objective(theta, blocks, k, jacobian=False):
    """Sum of squared simulated-output errors and its analytic gradient.

    With ``jacobian=True`` also returns the Gauss-Newton matrix ``J^T J``
    and ``J^T r`` for the model-output Jacobian ``J``.
    """
    theta = np.asarray(theta, dtype=float)
    L = len(blocks)
    nb = L * (k + 1)
    n = nb + k
    a_full = np.concatenate([[1.0], theta[nb:]])
    f = 0.0
    grad = np.zeros(n)
    JtJ = np.zeros((n, n)) if jacobian else None
    Jtr = np.zeros(n) if jacobian else None
    for h, blk in enumerate(blocks):
        b = theta[h * (k + 1):(h + 1) * (k + 1)]
        v, yhat = _loop_sim(b, a_full, blk.u)
        r = blk.y - yhat
        f += float(r @ r)
        w = lfilter([1.0], a_full, yhat)
        Jb = np.column_stack([_shift(v, j) for j in range(k + 1)])
        Ja = np.column_stack([-_shift(w, j) for j in range(1, k + 1)]) if k else np.zeros((r.size, 0))
        J = np.hstack([Jb, Ja])
        idx = np.r_[h * (k + 1):(h + 1) * (k + 1), nb:n]
        Jr = J.T @ r
        grad[idx] += -2.0 * Jr
        if jacobian:
            JtJ[np.ix_(idx, idx)] += J.T @ J
            Jtr[idx] += Jr
    if jacobian:
        return f, grad, JtJ, Jtr
    return f, grad


def max_root_radius(a):
    a_full = np.concatenate([[1.0], np.asarray(a, dtype=float)])
    if a_full.size < 2:
        return 0.0
    return float(np.max(np.abs(np.roots(a_full))))


def project_stable(a, margin):
    """Radially pull denominator roots into the disc of radius ``1 - margin``."""
    a_full = np.concatenate([[1.0], np.asarray(a, dtype=float)])
    if a_full.size < 2:
        return np.asarray(a, dtype=float)
    roots = np.roots(a_full)
    r = np.abs(roots)
    limit = 1.0 - margin
    roots = np.where(r > limit, roots * (limit / np.maximum(r, 1e-300)), roots)
    return np.real(np.poly(roots))[1:]


@dataclass(frozen=True)
class RefineOptions:
    max_iter: int = 200
    rel_tol: float = 1e-10
    margin: float = 1e-3
    lambda_init: float = 1e-3


def refine(theta0, blocks, options=None, *, sample_time=None, shape=None,
           input_names=None, output_names=None, excluded=(), condition_number=float("nan")):
    """Output-error refinement subject to ``max|root(a)| <= 1 - margin``.

    Returns ``(MimoTfModel, FitReport)``.  The objective never increases
    relative to the (projected) starting point.
    """
    opts = options or RefineOptions()
    blocks = tuple(blocks)
    k = blocks[0].order
    L = len(blocks)
    nb = L * (k + 1)
    theta = np.asarray(theta0, dtype=float).copy()
    if k and max_root_radius(theta[nb:]) > 1.0 - opts.margin:
        log.info("initial denominator violates the stability margin; projecting roots")
        theta[nb:] = project_stable(theta[nb:], opts.margin)
    f, _, JtJ, Jtr = oe_objective(theta, blocks, k, jacobian=True)
    f0 = f
    y_energy = sum(float(b.y @ b.y) for b in blocks)
    lam = opts.lambda_init
    nu = 2.0
    converged = False
    it = 0
    while it < opts.max_iter:
        it += 1
        if f <= 1e-28 * max(y_energy, 1e-300):
            converged = True
            break
        diag = np.diag(JtJ).copy()
        diag[diag <= 0] = 1.0
        accepted = False
        while lam < 1e12:
            try:
                step = np.linalg.solve(JtJ + lam * np.diag(diag), Jtr)
            except np.linalg.LinAlgError:
                lam *= nu
                nu *= 2
                continue
            cand = theta + step
            if k and max_root_radius(cand[nb:]) > 1.0 - opts.margin:
                lam *= nu
                nu *= 2
                continue
            f_new = oe_objective(cand, blocks, k)[0]
            # predicted decrease of the quadratic model (f counts r.r, not r.r/2)
            predicted = float(step @ (lam * diag * step + Jtr))
            if f_new < f:
                gain = (f - f_new) / max(predicted, 1e-300)
                lam *= max(1.0 / 3.0, 1.0 - (2.0 * gain - 1.0) ** 3)
                nu = 2.0
                accepted = True
                break
            lam *= nu
            nu *= 2
        if not accepted:
            converged = True  # no descent direction left: stationary point
            break
        rel = (f - f_new) / max(f, 1e-300)
        theta = cand
        f, _, JtJ, Jtr = oe_objective(theta, blocks, k, jacobian=True)
        lam = max(lam, 1e-15)
        if rel < opts.rel_tol:
            converged = True
            break
    if not converged:
        log.warning("output-error refinement stopped after %d iterations without converging", it)
    model, errors = _assemble(theta, blocks, k, sample_time, shape, input_names, output_names)
    report = FitReport(errors, condition_number, it, converged, f0, f, tuple(excluded))
    return model, report


def _assemble(theta, blocks, k, sample_time, shape, input_names, output_names):
    L = len(blocks)
    nb = L * (k + 1)
    if shape is None:
        outs = sorted({b.output for b in blocks}, key=[b.output for b in blocks].index)
        ins = sorted({b.input for b in blocks}, key=[b.input for b in blocks].index)
        output_names, input_names = outs, ins
        shape = (len(outs), len(ins))
    nums = np.zeros((*shape, k + 1))
    errors = np.full(shape, np.nan)
    res = oe_residuals(theta, blocks, k)
    for h, blk in enumerate(blocks):
        i = output_names.index(blk.output)
        j = input_names.index(blk.input)
        nums[i, j] = theta[h * (k + 1):(h + 1) * (k + 1)]
        ny = np.linalg.norm(blk.y)
        errors[i, j] = np.linalg.norm(res[h]) / ny if ny > 0 else 0.0
    den = np.concatenate([[1.0], theta[nb:]])
    model = MimoTfModel(sample_time if sample_time is not None else 1.0, k, den, nums,
                        tuple(input_names), tuple(output_names))
    return model, errors


# ----------------------------------------------------------------- orchestration

def _as_windows(windows):
    if hasattr(windows, "channels"):
        return [windows]
    windows = list(windows)
    if not windows:
        raise ValidationError("no data windows supplied")
    return windows


def loop_blocks(windows, inputs, outputs, k):
    """Regressor blocks for every loop whose input is excited; also returns excluded loops."""
    windows = _as_windows(windows)
    dt = windows[0].sample_time
    n0 = len(windows[0])
    for w in windows:
        if not np.isclose(w.sample_time, dt, rtol=1e-9) or len(w) != n0:
            raise ValidationError("all windows must share sample time and length")
    blocks, excluded = [], []
    for j, inp in enumerate(inputs):
        energies = [float(np.sum(np.square(w[inp]))) for w in windows]
        best = int(np.argmax(energies))
        if energies[best] == 0.0:
            warnings.warn(f"input '{inp}' carries no energy; its loops are set to zero", stacklevel=2)
            excluded += [(out, inp) for out in outputs]
            continue
        for i, out in enumerate(outputs):
            blk = build_regressors(windows[best], inp, out, k)
            blocks.append(LoopBlock(out, inp, (i, j), blk.X_his, blk.X_num, blk.X_den, blk.u, blk.y))
    if not blocks:
        raise ValidationError("no excited inputs: nothing to identify")
    return blocks, excluded


def identify(windows, inputs, outputs, k=5, options=None):
    """Least-squares start plus output-error refinement for a fixed order."""
    windows = _as_windows(windows)
    inputs, outputs = list(inputs), list(outputs)
    blocks, excluded = loop_blocks(windows, inputs, outputs, k)
    stacked = stack_loops(blocks)
    theta0, cond = ls_initialize(stacked)
    return refine(theta0, blocks, options, sample_time=windows[0].sample_time,
                  shape=(len(outputs), len(inputs)), input_names=inputs,
                  output_names=outputs, excluded=excluded, condition_number=cond)


def select_order(windows, inputs, outputs, candidates, options=None, floor=1e-6, improvement=0.10):
    """Elbow rule over increasing orders.

    The chosen order is the smallest candidate whose output error is already
    below ``floor`` or that the next candidate fails to improve by at least
    ``improvement`` (relative).  A rank-deficient fit counts as no
    improvement.  Returns ``(k, {k: FitReport or None})``.
    """
    cands = sorted(set(int(c) for c in candidates))
    if not cands:
        raise ValidationError("no candidate orders")
    reports = {}

    def err(k):
        if k not in reports:
            try:
                reports[k] = identify(windows, inputs, outputs, k, options)[1]
            except RankDeficientError:
                reports[k] = None
        r = reports[k]
        return np.inf if r is None else r.output_error

    for idx, k in enumerate(cands):
        e = err(k)
        if idx == len(cands) - 1 or e <= floor:
            return k, reports
        if not err(cands[idx + 1]) < (1.0 - improvement) * e:
            return k, reports
    return cands[-1], reports
