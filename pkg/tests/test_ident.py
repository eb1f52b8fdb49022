import dataclasses
import warnings

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from numpy.testing import assert_allclose

from mimowadc.config import load_config
from mimowadc.data import DataWindow
from mimowadc.errors import RankDeficientError, ValidationError
from mimowadc.ident import (
    MimoTfModel,
    RefineOptions,
    build_regressors,
    identify,
    loop_blocks,
    ls_initialize,
    max_root_radius,
    oe_objective,
    refine,
    select_order,
    stack_loops,
)
from mimowadc.pipeline import Pipeline
from mimowadc.plant import build_swing_surrogate, load_preset, mode_frequencies

from conftest import random_shared_model, ringdown_windows

IN, OUT = ["u_1", "u_2"], ["y_1", "y_2"]


def _ar_window(n=60):
    u = np.zeros(n)
    u[3] = 1.0
    u[20:23] = -0.5
    y = np.zeros(n)
    for t in range(1, n):
        y[t] = 0.5 * y[t - 1] + u[t - 1]
    return DataWindow(1.0, {"u": u, "y": y})


def _single_loop_theta(window, k):
    return ls_initialize(stack_loops([build_regressors(window, "u", "y", k)]))[0]


def test_regressor_rows():
    w = DataWindow(1.0, {"u": np.arange(10.0), "y": np.arange(10.0) ** 2})
    blk = build_regressors(w, "u", "y", 2)
    assert blk.X_his.shape == (8,) and blk.X_num.shape == (8, 3) and blk.X_den.shape == (8, 2)
    assert blk.X_his[0] == 4.0
    assert_allclose(blk.X_num[0], [2, 1, 0])
    assert_allclose(blk.X_den[0], [-1, 0])


def test_regressor_errors():
    w = DataWindow(1.0, {"u": np.zeros(5), "y": np.zeros(5)})
    with pytest.raises(ValidationError, match="too short"):
        build_regressors(w, "u", "y", 2)
    with pytest.raises(ValidationError, match="unknown channel"):
        build_regressors(w, "u", "z", 1)


def test_ar_recursion_exact():
    theta = _single_loop_theta(_ar_window(), 1)
    assert_allclose(theta, [0.0, 1.0, -0.5], atol=1e-12)


def test_zero_output_gives_zero_numerators():
    w = DataWindow(1.0, {"u": np.random.default_rng(1).normal(size=50), "y": np.zeros(50)})
    theta = _single_loop_theta(w, 0)
    assert_allclose(theta, 0.0, atol=1e-14)


def test_order_zero_is_static_gain(rng):
    u = rng.normal(size=80)
    y = 2.5 * u + 0.01 * rng.normal(size=80)
    w = DataWindow(1.0, {"u": u, "y": y})
    blk = build_regressors(w, "u", "y", 0)
    assert blk.X_den.shape == (80, 0)
    theta = _single_loop_theta(w, 0)
    assert theta[0] == pytest.approx(float(u @ y / (u @ u)), rel=1e-12)


def test_stack_dimension(rng):
    den, nums, _ = random_shared_model(rng, 2)
    blocks, _ = loop_blocks(ringdown_windows(den, nums), IN, OUT, 2)
    stacked = stack_loops(blocks)
    assert stacked.n_unknowns == 14
    assert stacked.matrix.shape[1] == 14
    single = stack_loops(blocks[:1])
    assert_allclose(single.matrix, np.hstack([blocks[0].X_num, blocks[0].X_den]))


def test_stack_rejects_mixed_orders(rng):
    w = ringdown_windows(*random_shared_model(rng, 3)[:2])
    b2 = loop_blocks(w, IN, OUT, 2)[0]
    b3 = loop_blocks(w, IN, OUT, 3)[0]
    with pytest.raises(ValidationError, match="order"):
        stack_loops([b2[0], b3[0]])


def test_loop_permutation_leaves_denominator(rng):
    den, nums, _ = random_shared_model(rng, 4)
    windows = ringdown_windows(den, nums, snr_db=30, rng=rng)
    blocks, _ = loop_blocks(windows, IN, OUT, 4)
    a = ls_initialize(stack_loops(blocks))[0]
    perm = [2, 0, 3, 1]
    b = ls_initialize(stack_loops([blocks[i] for i in perm]))[0]
    assert_allclose(b[-4:], a[-4:], atol=1e-10)
    for pos, i in enumerate(perm):
        assert_allclose(b[pos * 5:(pos + 1) * 5], a[i * 5:(i + 1) * 5], atol=1e-9)


def test_duplicate_loop_keeps_denominator(rng):
    den, nums, _ = random_shared_model(rng, 3)
    windows = ringdown_windows(den, nums, snr_db=30, rng=rng)
    blocks, _ = loop_blocks(windows, IN, OUT, 3)
    # a duplicated loop doubles that loop's weight, so only the noiseless case is invariant
    clean, _ = loop_blocks(ringdown_windows(den, nums), IN, OUT, 3)
    a = ls_initialize(stack_loops(clean))[0][-3:]
    b = ls_initialize(stack_loops(clean + [clean[1]]))[0][-3:]
    assert_allclose(b, a, atol=1e-10)
    assert ls_initialize(stack_loops(blocks + [blocks[1]]))[0].size == 5 * 4 + 3


def test_ls_recovers_true_coefficients(rng):
    den, nums, _ = random_shared_model(rng, 4)
    blocks, _ = loop_blocks(ringdown_windows(den, nums), IN, OUT, 4)
    theta = ls_initialize(stack_loops(blocks))[0]
    truth = np.concatenate([nums[0, 0], nums[1, 0], nums[0, 1], nums[1, 1], den[1:]])
    assert_allclose(theta, truth, atol=1e-6)


def test_rank_deficiency_reported():
    w = DataWindow(1.0, {"u": np.zeros(40), "y": np.ones(40)})
    blocks = [build_regressors(w, "u", "y", 2)]
    with pytest.raises(RankDeficientError, match="singular values") as info:
        ls_initialize(stack_loops(blocks))
    assert info.value.singular_values is not None


def _pole_match(found, truth):
    found = list(found)
    for p in truth:
        i = int(np.argmin(np.abs(np.asarray(found) - p)))
        yield abs(found.pop(i) - p)


@pytest.mark.parametrize("order", [2, 3, 4, 5, 6])
def test_refine_recovers_noiseless_model(rng, order):
    den, nums, _ = random_shared_model(rng, order)
    model, report = identify(ringdown_windows(den, nums), IN, OUT, order)
    assert max(_pole_match(model.poles(), np.roots(den))) < 1e-4
    assert report.output_error < 1e-8
    assert report.converged


def test_refine_is_noop_at_optimum(rng):
    den, nums, _ = random_shared_model(rng, 3)
    blocks, _ = loop_blocks(ringdown_windows(den, nums), IN, OUT, 3)
    theta0, _ = ls_initialize(stack_loops(blocks))
    model, report = refine(theta0, blocks, shape=(2, 2), input_names=IN, output_names=OUT, sample_time=0.032)
    assert_allclose(model.denominator[1:], theta0[-3:], atol=1e-9)
    assert report.objective <= report.objective_init


def test_refine_never_increases_objective(rng):
    den, nums, _ = random_shared_model(rng, 4)
    windows = ringdown_windows(den, nums, snr_db=20, rng=rng)
    _, report = identify(windows, IN, OUT, 3)
    assert report.objective <= report.objective_init


def test_refine_projects_unstable_start(rng):
    den, nums, _ = random_shared_model(rng, 2)
    blocks, _ = loop_blocks(ringdown_windows(den, nums), IN, OUT, 2)
    theta0 = ls_initialize(stack_loops(blocks))[0].copy()
    theta0[-2:] = np.real(np.poly([1.05, 0.2]))[1:]
    model, _ = refine(theta0, blocks, RefineOptions(max_iter=5))
    assert max_root_radius(model.denominator[1:]) <= 1 - 1e-3 + 1e-12


def test_refine_flags_non_convergence(rng):
    den, nums, _ = random_shared_model(rng, 4)
    windows = ringdown_windows(den, nums, snr_db=20, rng=rng)
    _, report = identify(windows, IN, OUT, 4, RefineOptions(max_iter=1, rel_tol=0.0))
    assert report.iterations == 1
    assert not report.converged


@pytest.mark.parametrize("seed", range(10))
def test_objective_gradient_matches_central_differences(seed):
    rng = np.random.default_rng(seed)
    k = int(rng.integers(1, 5))
    den, nums, _ = random_shared_model(rng, max(k, 2))
    blocks, _ = loop_blocks(ringdown_windows(den, nums, n=200, snr_db=25, rng=rng), IN, OUT, k)
    theta = rng.normal(size=4 * (k + 1) + k)
    theta[-k:] = np.real(np.poly(rng.uniform(-0.8, 0.8, k)))[1:]
    _, grad = oe_objective(theta, blocks, k)
    fd = np.empty_like(theta)
    for i in range(theta.size):
        h = 1e-6 * max(1.0, abs(theta[i]))
        e = np.zeros_like(theta)
        e[i] = h
        fd[i] = (oe_objective(theta + e, blocks, k)[0] - oe_objective(theta - e, blocks, k)[0]) / (2 * h)
    assert np.linalg.norm(grad - fd) <= 1e-5 * np.linalg.norm(fd)


def test_shared_denominator_is_structural(rng):
    den, nums, _ = random_shared_model(rng, 3)
    model, _ = identify(ringdown_windows(den, nums, snr_db=30, rng=rng), IN, OUT, 3)
    dens = [model.loop_tf(i, j).den for i in range(2) for j in range(2)]
    for d in dens[1:]:
        assert np.array_equal(d, dens[0])


def test_model_validation():
    with pytest.raises(ValidationError):
        MimoTfModel(1.0, 2, np.array([2.0, 0.1, 0.1]), np.zeros((1, 1, 3)), ("u",), ("y",))
    with pytest.raises(ValidationError):
        MimoTfModel(1.0, 2, np.array([1.0, 0.1, 0.1]), np.zeros((1, 1, 2)), ("u",), ("y",))


def test_model_round_trip_dict(rng):
    den, nums, _ = random_shared_model(rng, 3)
    model, _ = identify(ringdown_windows(den, nums), IN, OUT, 3)
    back = MimoTfModel.from_dict(model.to_dict())
    assert np.array_equal(back.denominator, model.denominator)
    assert np.array_equal(back.numerators, model.numerators)


def test_select_order_finds_true_order(rng):
    den = np.real(np.poly([0.97 * np.exp(0.15j), 0.97 * np.exp(-0.15j), 0.6]))
    nums = rng.normal(size=(2, 2, 4))
    k, reports = select_order(ringdown_windows(den, nums), IN, OUT, range(1, 7))
    assert k == 3
    assert reports[3].output_error < 1e-6


def test_select_order_single_candidate(rng):
    den, nums, _ = random_shared_model(rng, 3)
    k, reports = select_order(ringdown_windows(den, nums), IN, OUT, [4])
    assert k == 4 and list(reports) == [4]


def test_select_order_on_noise(rng):
    w = DataWindow(1.0, {"u_1": rng.normal(size=400), "u_2": rng.normal(size=400),
                         "y_1": rng.normal(size=400), "y_2": rng.normal(size=400)})
    k, _ = select_order([w], IN, OUT, [2, 3, 4, 5])
    assert k == 2


def test_select_order_rejects_empty():
    with pytest.raises(ValidationError):
        select_order([], IN, OUT, [])


def test_scale_equivariance(rng):
    den, nums, _ = random_shared_model(rng, 3)
    windows = ringdown_windows(den, nums)
    alpha = 4.0
    scaled = [w.with_channels(u_2=alpha * w["u_2"]) for w in windows]
    a, _ = identify(windows, IN, OUT, 3)
    b, _ = identify(scaled, IN, OUT, 3)
    assert_allclose(b.denominator, a.denominator, atol=1e-8)
    assert_allclose(b.numerators[:, 1], a.numerators[:, 1] / alpha, atol=1e-8)
    assert_allclose(b.numerators[:, 0], a.numerators[:, 0], atol=1e-8)


@settings(max_examples=15, deadline=None)
@given(st.integers(2, 6), st.integers(0, 2**31 - 1))
def test_fitted_models_are_stable(order, seed):
    rng = np.random.default_rng(seed)
    den, nums, _ = random_shared_model(rng, order)
    model, _ = identify(ringdown_windows(den, nums, snr_db=15, rng=rng), IN, OUT, order,
                        RefineOptions(max_iter=50))
    assert max_root_radius(model.denominator[1:]) <= 1 - 1e-3 + 1e-12


def test_unexcited_input_is_excluded(rng):
    den, nums, _ = random_shared_model(rng, 3)
    windows = ringdown_windows(den, nums)
    silent = [w.with_channels(u_2=np.zeros(len(w))) for w in windows[:1]]
    with pytest.warns(UserWarning, match="no energy"):
        model, report = identify(silent, IN, OUT, 3)
    assert np.all(model.numerators[:, 1] == 0)
    assert ("y_1", "u_2") in report.excluded


def test_two_area_mode_matches_eigenvalue():
    pipe = Pipeline(load_config("two_area"))
    true = mode_frequencies(build_swing_surrogate(load_preset("two_area")))[0]
    true = true[(true > 0.1) & (true < 1.0)][0]
    assert abs(pipe.modes[1].frequency - true) <= 0.02


def test_two_area_mode_under_40db_noise():
    cfg = load_config("two_area")
    true = mode_frequencies(build_swing_surrogate(load_preset("two_area")))[0]
    true = true[(true > 0.1) & (true < 1.0)][0]
    errors = []
    for seed in range(20):
        c = cfg.replace(sampling=dataclasses.replace(cfg.sampling, snr_db=40.0), seed=seed)
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            errors.append(abs(Pipeline(c).modes[1].frequency - true))
    assert max(errors) <= 0.05
