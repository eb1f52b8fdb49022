"""Wide-area damping controller: DLQR on the loop realization, Kalman estimation, closed-loop runs."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace

import numpy as np

from .data import DataWindow
from .errors import ConvergenceError, IllConditionedError, ValidationError
from .lti import StateSpaceModel, ss_tustin, tf_to_ss_controllable
from .plant import delay_samples, input_window

log = logging.getLogger(__name__)


@dataclass(frozen=True, eq=False)
class DlqrDesign:
    gain: np.ndarray  # (p, n)
    riccati: np.ndarray
    rho: float
    Q: np.ndarray
    iterations: int
    residual: float

    def to_dict(self):
        return {
            "gain": self.gain.tolist(),
            "rho": self.rho,
            "iterations": self.iterations,
            "residual": self.residual,
        }


def _riccati_step(P, A, B, Q, R):
    BtP = B.T @ P
    K = np.linalg.solve(R + BtP @ B, BtP @ A)
    Acl = A - B @ K
    # sum of PSD terms: same value as Q + A'PA - A'PBK without the cancellation
    P_new = Acl.T @ P @ Acl + Q + K.T @ R @ K
    return 0.5 * (P_new + P_new.T), K


def _modal_basis(A, max_cond=1e8):
    """Real block-diagonalising similarity, or identity if A is (nearly) defective."""
    n = A.shape[0]
    if n == 0:
        return np.eye(0)
    w, V = np.linalg.eig(A)
    Tm, rest = np.eye(n), []
    for idx in range(n):
        if w[idx].imag < 0:
            continue
        if w[idx].imag > 0:
            rest += [V[:, idx].real, V[:, idx].imag]
        else:
            rest.append(V[:, idx].real)
    if len(rest) == n:
        cand = np.column_stack(rest)
        cand = cand / np.linalg.norm(cand, axis=0)
        if np.linalg.cond(cand) < max_cond:
            Tm = cand
    return Tm


def dlqr(A, B, Q, R, tol=1e-12, max_iters=10_000):
    """Infinite-horizon discrete LQR by iterating the backward Riccati recursion from P = Q.

    The recursion runs in a real modal basis when A has a well-conditioned one;
    the iterates are the same up to that similarity, but companion-form
    realizations otherwise stall on rounding noise long before ``tol``.
    """
    A = np.atleast_2d(np.asarray(A, dtype=float))
    B = np.asarray(B, dtype=float)
    if B.ndim == 1:
        B = B.reshape(-1, 1)
    Q = np.atleast_2d(np.asarray(Q, dtype=float))
    R = np.atleast_2d(np.asarray(R, dtype=float))
    n, p = B.shape
    if A.shape != (n, n) or Q.shape != (n, n) or R.shape != (p, p):
        raise ValidationError(
            f"dlqr dimension mismatch: A {A.shape}, B {B.shape}, Q {Q.shape}, R {R.shape}"
        )
    if not np.allclose(R, R.T) or np.linalg.eigvalsh(0.5 * (R + R.T)).min() <= 0:
        raise ValidationError("control weight R must be symmetric positive definite")

    Tm = _modal_basis(A)
    At = np.linalg.solve(Tm, A @ Tm)
    Bt = np.linalg.solve(Tm, B)
    Qt = Tm.T @ (0.5 * (Q + Q.T)) @ Tm
    P = Qt
    residual = np.inf
    for it in range(1, max_iters + 1):
        P_new, _ = _riccati_step(P, At, Bt, Qt, R)
        scale = np.linalg.norm(P_new)
        residual = np.linalg.norm(P_new - P) / scale if scale > 0 else 0.0
        P = P_new
        if residual < tol:
            break
    else:
        raise ConvergenceError(
            f"Riccati iteration did not converge in {max_iters} steps", residual
        )
    Ti = np.linalg.inv(Tm)
    P = Ti.T @ P @ Ti
    P = 0.5 * (P + P.T)
    K = np.linalg.solve(R + B.T @ P @ B, B.T @ P @ A)
    radius = np.max(np.abs(np.linalg.eigvals(A - B @ K))) if n else 0.0
    if radius >= 1.0:
        raise ConvergenceError(
            f"Riccati solution does not stabilise the loop (spectral radius {radius:.6g}); "
            "check stabilisability and detectability",
            residual,
        )
    rho = float(R[0, 0]) if p == 1 else float(np.trace(R) / p)
    return DlqrDesign(K, P, rho, Q, it, float(residual))


def dlqr_for_loop(realization, rho=1.0):
    if not realization.is_discrete:
        raise ValidationError("dlqr_for_loop needs a discrete realization")
    if rho <= 0:
        raise ValidationError(f"rho must be positive, got {rho}")
    C = realization.C
    return dlqr(realization.A, realization.B, C.T @ C, rho * np.eye(realization.n_inputs))


@dataclass(frozen=True, eq=False)
class KalmanState:
    estimate: np.ndarray
    covariance: np.ndarray
    process_noise: np.ndarray
    measurement_noise: np.ndarray
    H: np.ndarray

    @classmethod
    def initial(cls, realization, process_noise=1e-6, measurement_noise=1e-4, covariance=None):
        n = realization.n_states
        Qn = np.asarray(process_noise, dtype=float)
        Qn = Qn * np.eye(n) if Qn.ndim == 0 else Qn
        Rn = np.atleast_2d(np.asarray(measurement_noise, dtype=float))
        if Rn.shape == (1, 1) and realization.n_outputs > 1:
            Rn = Rn[0, 0] * np.eye(realization.n_outputs)
        L = np.zeros((n, n)) if covariance is None else np.asarray(covariance, dtype=float)
        return cls(np.zeros(n), L, Qn, Rn, realization.C.copy())


def _sym(M):
    return 0.5 * (M + M.T)


def kalman_predict(state, model, u):
    u = np.atleast_1d(np.asarray(u, dtype=float))
    n = state.estimate.size
    if model.A.shape != (n, n) or u.size != model.B.shape[1]:
        raise ValidationError(
            f"kalman_predict dimension mismatch: state {n}, A {model.A.shape}, "
            f"B {model.B.shape}, u {u.size}"
        )
    A = model.A
    x = A @ state.estimate + model.B @ u
    L = _sym(A @ state.covariance @ A.T + state.process_noise)
    return replace(state, estimate=x, covariance=L)


def kalman_correct(state, z, feedthrough=None):
    """Standard corrector; ``feedthrough`` is the known D·u contribution to the measurement."""
    z = np.atleast_1d(np.asarray(z, dtype=float))
    H = state.H
    if z.size != H.shape[0]:
        raise ValidationError(f"measurement has {z.size} entries, observation matrix {H.shape}")
    L = state.covariance
    S = H @ L @ H.T + state.measurement_noise
    try:
        cond = np.linalg.cond(S)
    except np.linalg.LinAlgError:
        cond = np.inf
    if not np.isfinite(cond) or cond > 1e14:
        raise IllConditionedError(f"innovation covariance is singular (cond {cond:.3g})")
    G = np.linalg.solve(S.T, (L @ H.T).T).T
    predicted = H @ state.estimate
    if feedthrough is not None:
        predicted = predicted + np.atleast_1d(feedthrough)
    x = state.estimate + G @ (z - predicted)
    L = _sym((np.eye(L.shape[0]) - G @ H) @ L)
    return replace(state, estimate=x, covariance=L)


@dataclass(frozen=True, eq=False)
class WadcDesign:
    loop: tuple  # (output index, input index) in the identified model
    output_name: str
    input_name: str
    realization: StateSpaceModel
    dlqr: DlqrDesign
    kalman: KalmanState
    saturation: float | None = 0.1
    delay: float = 0.0
    extra: dict = field(default_factory=dict)

    @property
    def sample_time(self):
        return self.realization.dt

    def with_gain(self, gain):
        return replace(self, dlqr=replace(self.dlqr, gain=np.asarray(gain, dtype=float)))

    def with_delay(self, delay):
        return replace(self, delay=float(delay))

    def to_dict(self):
        return {
            "loop": {"output": self.output_name, "input": self.input_name},
            "order": self.realization.n_states,
            "gain": self.dlqr.gain.ravel().tolist(),
            "rho": self.dlqr.rho,
            "riccati_iterations": self.dlqr.iterations,
            "process_noise": float(self.kalman.process_noise[0, 0]) if self.kalman.process_noise.size else 0.0,
            "measurement_noise": float(self.kalman.measurement_noise[0, 0]),
            "saturation": self.saturation,
            "delay": self.delay,
        }


def design_wadc(model, loop, rho=1.0, process_noise=1e-6, measurement_noise=1e-4,
                saturation=0.1, delay=0.0):
    """Realize the chosen loop of an identified model and attach DLQR and Kalman parts."""
    i, j = loop
    tf = model.loop_tf(i, j)
    ss = tf_to_ss_controllable(tf)
    out_name, in_name = model.output_names[i], model.input_names[j]
    realization = StateSpaceModel(ss.A, ss.B, ss.C, ss.D, tf.dt,
                                  input_names=(in_name,), output_names=(out_name,))
    design = dlqr_for_loop(realization, rho)
    kalman = KalmanState.initial(realization, process_noise, measurement_noise)
    if saturation is not None and saturation <= 0:
        raise ValidationError("saturation must be positive or null")
    return WadcDesign((i, j), out_name, in_name, realization, design, kalman, saturation, float(delay))


def _discrete_plant(plant, sample_time):
    if plant.is_discrete:
        if not np.isclose(plant.dt, sample_time, rtol=1e-9, atol=0):
            raise ValidationError(
                f"plant sample time {plant.dt} differs from controller sample time {sample_time}"
            )
        return plant
    return ss_tustin(plant, sample_time)


def closed_loop_sim(plant, design, disturbance, horizon, seed=0, noise_std=0.0, enabled=True):
    """Run the plant with the WADC in the loop; returns every plant signal plus ``u_wadc``.

    The control for step k+1 is -K times the one-step-ahead estimate formed at step k,
    so the plant's own feedthrough never closes an algebraic loop.
    """
    T = design.sample_time
    dplant = _discrete_plant(plant, T)
    if design.output_name not in dplant.output_names:
        raise ValidationError(f"plant has no output {design.output_name!r}")
    if design.input_name not in dplant.input_names:
        raise ValidationError(f"plant has no input {design.input_name!r}")
    window = input_window(dplant, disturbance, horizon, T)
    U = np.column_stack([window[name] for name in dplant.input_names])
    N = U.shape[0]
    out_idx = dplant.output_names.index(design.output_name)
    in_idx = dplant.input_names.index(design.input_name)
    shift = delay_samples(design.delay, T)
    rng = np.random.default_rng(seed)
    noise = rng.normal(0.0, noise_std, N) if noise_std > 0 else np.zeros(N)

    A, B, C, D = dplant.A, dplant.B, dplant.C, dplant.D
    real = design.realization
    K = design.dlqr.gain
    kf = design.kalman
    x = np.zeros(dplant.n_states)
    Y = np.zeros((N, dplant.n_outputs))
    control = np.zeros(N)
    measured = np.zeros(N)
    u_now = 0.0
    for k in range(N):
        u = U[k].copy()
        u[in_idx] += u_now
        y = C @ x + D @ u
        Y[k] = y
        control[k] = u_now
        measured[k] = y[out_idx] + noise[k]
        z = measured[k - shift] if k >= shift else 0.0
        if enabled:
            kf = kalman_correct(kf, z, feedthrough=real.D @ np.atleast_1d(u_now))
            kf = kalman_predict(kf, real, u_now)
            u_next = float(-(K @ kf.estimate)[0])
            if design.saturation is not None:
                u_next = float(np.clip(u_next, -design.saturation, design.saturation))
        else:
            u_next = 0.0
        x = A @ x + B @ u
        u_now = u_next

    channels = {name: U[:, c] for c, name in enumerate(dplant.input_names)}
    channels.update({name: Y[:, c] for c, name in enumerate(dplant.output_names)})
    channels["u_wadc"] = control
    channels["measured"] = measured
    return DataWindow(T, channels)
