import csv
from dataclasses import replace

import numpy as np
import pytest

from dataset import Dataset, SyntheticConfig, generate_synthetic, make_rng
from errors import DomainError, ShapeMismatchError
from identities import check_dropout_explicit_form, check_noise_explicit_form, relative_error
from learners import LearnerKind, intercept_c_star
from neuralnet import MlpParams, MlpSpec, forward, init_params, tangent_forward
from nuisance import oracle_nuisance
from regfun import RegKind, RegMode, RegSchedule, Rescaling
from second_stage import (
    TRACE_COLUMNS, Injector, RegContext, SecondStageSpec, batch_gradients, bias_correction_dropout,
    bias_correction_noise, dropout_score, draw_perturbation, explicit_dropout_loss, explicit_noise_loss,
    export_trace_csv, fit_target, noise_scale_factor, oar_empirical_loss, predict, prepare_context, replay_ema,
)


def heterogeneous_data(n=200, seed=0):
    """pi = 1/2 everywhere, tau(x) = 1 + x"""
    rng = make_rng(seed)
    x = rng.standard_normal((n, 1))
    a = (rng.random(n) < 0.5).astype(float)
    mu0 = np.sin(x[:, 0])
    mu1 = mu0 + 1.0 + x[:, 0]
    y = np.where(a == 1, mu1, mu0) + 0.1 * rng.standard_normal(n)
    return Dataset(x=x, a=a, y=y, oracle_cate=mu1 - mu0, oracle_pi=np.full(n, 0.5),
                   oracle_mu0=mu0, oracle_mu1=mu1, seed=seed)


@pytest.fixture(scope='module')
def low_overlap():
    ds = generate_synthetic(SyntheticConfig(120, 2.0, 3))
    return ds, oracle_nuisance(ds, 0.05)


def _stage(**kwargs):
    reg = kwargs.pop('reg', RegSchedule())
    return SecondStageSpec(reg=reg, epochs=kwargs.pop('epochs', 3), **kwargs)


def test_target_architecture():
    assert _stage().target_spec(2) == MlpSpec((2, 4, 4, 8, 1), injection_index=2)
    assert _stage(inject_at='inputs').target_spec(2).injection_index == 0
    assert _stage(linear_target=True).target_spec(3) == MlpSpec((3, 1), injection_index=0)
    assert _stage(hidden_width=7).target_spec(2).layer_widths == (2, 7, 7, 7, 1)
    assert _stage(hidden_units=(3, 4, 12)).target_spec(1).layer_widths == (1, 3, 4, 12, 1)


def test_target_adopts_stage_one_widths():
    assert _stage().with_units((6, 8, 24)).target_spec(2).layer_widths == (2, 6, 8, 24, 1)
    assert _stage(hidden_width=5).with_units((6, 8, 24)).target_spec(2).layer_widths == (2, 5, 5, 5, 1)
    fixed = _stage(hidden_units=(3, 3, 3))
    assert fixed.with_units((6, 8, 24)) is fixed


def test_spec_validation():
    with pytest.raises(DomainError):
        _stage(noise_scale='cubic').validate()
    with pytest.raises(DomainError):
        _stage(trimming='soft').validate()
    with pytest.raises(DomainError):
        _stage(reg=RegSchedule(base=1.0), injector=Injector.DROPOUT).validate()
    _stage(reg=RegSchedule(base=1.0), injector=Injector.NOISE).validate()
    _stage(reg=RegSchedule(base=1.0), injector=Injector.DROPOUT).validate(injected=False)


def test_context_constant_regularization(low_overlap):
    ds, nuis = low_overlap
    stage = _stage(reg=RegSchedule(base=0.7, mode=RegMode.CR), injector=Injector.NOISE)
    ctx = prepare_context(stage, ds, nuis)
    np.testing.assert_array_equal(ctx.level, np.full(ds.n, 0.7))
    np.testing.assert_array_equal(ctx.kernel, np.zeros(ds.n))
    np.testing.assert_array_equal(ctx.target, nuis.trim * ctx.phi)
    np.testing.assert_array_equal(ctx.weight, np.ones(ds.n))


def test_context_adaptive_levels_average_to_base(low_overlap):
    ds, nuis = low_overlap
    ctx = prepare_context(_stage(reg=RegSchedule(base=0.5, mode=RegMode.DOAR)), ds, nuis)
    inside = nuis.trim == 1
    assert np.mean(ctx.level[inside]) == pytest.approx(0.5)
    assert np.any(ctx.kernel != 0)
    low = nuis.nu_hat < 0.1
    assert ctx.level[low & inside].mean() > ctx.level[~low & inside].mean()


def test_drop_trimming_zeroes_weights(low_overlap):
    ds, nuis = low_overlap
    assert nuis.trim.min() == 0.0
    ctx = prepare_context(_stage(trimming='drop'), ds, nuis)
    np.testing.assert_array_equal(ctx.weight[nuis.trim == 0], 0.0)


def test_context_length_checked(low_overlap):
    ds, nuis = low_overlap
    with pytest.raises(ShapeMismatchError):
        prepare_context(_stage(), ds.subset(np.arange(10)), nuis)


def test_empirical_loss():
    value = oar_empirical_loss([1.0, 2.0], [1.0, 0.5], [1.0, 0.0], [0.0, 1.0])
    assert value == pytest.approx((1.0 + 0.5) / 2)


def test_noise_scale_factor():
    np.testing.assert_allclose(noise_scale_factor(np.array([0.0, 0.25, 4.0])), [0.0, 1.0, 0.25])
    np.testing.assert_array_equal(noise_scale_factor(np.array([0.0, 2.0]), 'linear'), [1.0, 1.0])


def test_dropout_score_is_mean_zero():
    rng = np.random.default_rng(0)
    p = np.full(200_000, 0.3)
    keep = rng.random((200_000, 4)) >= 0.3
    scores = dropout_score(keep / 0.7, p)
    assert abs(scores.mean()) < 4 * scores.std() / np.sqrt(scores.size)
    np.testing.assert_array_equal(dropout_score(np.ones((2, 3)), np.zeros(2)), [0.0, 0.0])


def test_dropout_correction_vanishes_without_dropout():
    value = bias_correction_dropout(np.ones(2), np.zeros(2), np.ones(2), np.ones((2, 3)),
                                    np.array([0.0, 0.2]), np.ones(2), np.ones(2))
    assert value[0] == 0.0 and value[1] != 0.0


def _linear_row(n):
    """One covariate row repeated n times under g(x) = beta.x + c, perturbed at the inputs"""
    beta, c = np.array([0.8, -0.5]), 0.1
    params = MlpParams([beta[:, None]], [np.array([c])])
    x = np.tile([1.2, -0.7], (n, 1))
    return params, MlpSpec((2, 1), injection_index=0), x, beta


def test_noise_correction_matches_level_derivative():
    n, w, k, delta, level = 100_000, 0.7, 0.4, 1.5, 0.3
    params, spec, x, beta = _linear_row(n)
    stage = SecondStageSpec(injector=Injector.NOISE)
    levels = np.full(n, level)
    perturbation, eps = draw_perturbation(stage, levels, 2, make_rng(11))
    out, cache = forward(params, spec, x, perturbation)
    directional, _ = tangent_forward(cache, eps * noise_scale_factor(levels)[:, None])
    rows = bias_correction_noise(np.full(n, w), np.full(n, delta), out[:, 0], directional[:, 0], np.full(n, k))
    # d/dlambda of E[(delta - g(x + xi))^2] is |beta|^2
    assert rows.mean() == pytest.approx(w * beta @ beta * k, rel=0.03)


def test_dropout_correction_matches_rate_derivative():
    n, w, k, delta, p = 100_000, 0.7, 0.4, 1.5, 0.3
    params, spec, x, beta = _linear_row(n)
    stage = SecondStageSpec(injector=Injector.DROPOUT)
    rates = np.full(n, p)
    perturbation, _ = draw_perturbation(stage, rates, 2, make_rng(12))
    out, cache = forward(params, spec, x, perturbation)
    tangent = cache.interface_pre * perturbation.xi / (1.0 - rates)[:, None]
    directional, _ = tangent_forward(cache, tangent)
    rows = bias_correction_dropout(np.full(n, w), np.full(n, delta), out[:, 0], perturbation.xi, rates,
                                   directional[:, 0], np.full(n, k))
    # d/dp of E[(delta - g(x * xi))^2] is sum(beta^2 x^2) / (1 - p)^2
    expected = w * k * np.sum(beta ** 2 * x[0] ** 2) / (1.0 - p) ** 2
    assert rows.mean() == pytest.approx(expected, rel=0.03)


def _random_context(rng, n, injector):
    level = rng.uniform(0.1, 0.4, n) if injector == Injector.DROPOUT else rng.uniform(0.2, 1.0, n)
    return RegContext(
        phi=rng.standard_normal(n), weight=rng.uniform(0.5, 1.5, n), target=2.0 * rng.standard_normal(n),
        w=rng.uniform(0.5, 1.0, n), trim=np.ones(n), delta=rng.standard_normal(n), level=level,
        kernel=0.02 * rng.standard_normal(n), rescaling=Rescaling(level, float(level.mean()), 1.0),
    )


@pytest.mark.parametrize('injector', list(Injector))
@pytest.mark.parametrize('inject_at', ['representation', 'inputs'])
def test_corrected_gradients_match_finite_differences(injector, inject_at):
    rng = make_rng(5)
    n = 6
    stage = _stage(reg=RegSchedule(mode=RegMode.DOAR, clip_alpha=1e6), injector=injector, inject_at=inject_at)
    tspec = stage.target_spec(2)
    params = init_params(tspec, rng)
    x = rng.standard_normal((n, 2))
    ctx = _random_context(rng, n, injector)
    perturbation, draw = draw_perturbation(stage, ctx.level, tspec.layer_widths[tspec.injection_index], rng)

    result = batch_gradients(params, tspec, stage, ctx, x, perturbation, draw)
    assert result.applied

    def loss(p):
        return batch_gradients(p, tspec, stage, ctx, x, perturbation, draw).loss

    numeric = []
    arrays = params.arrays()
    for i, array in enumerate(arrays):
        for idx in np.ndindex(array.shape):
            shifted = []
            for sign in (1.0, -1.0):
                moved = [a.copy() for a in arrays]
                moved[i][idx] += sign * 1e-6
                shifted.append(loss(MlpParams.from_arrays(moved)))
            numeric.append((shifted[0] - shifted[1]) / 2e-6)
    analytic = np.concatenate([g.ravel() for g in result.grads.arrays()])
    assert relative_error(np.array(numeric), analytic) < 1e-6


def test_rejected_correction_leaves_plain_gradients():
    rng = make_rng(9)
    stage = _stage(reg=RegSchedule(mode=RegMode.DOAR, clip_alpha=0.0), injector=Injector.NOISE)
    tspec = stage.target_spec(2)
    params = init_params(tspec, rng)
    x = rng.standard_normal((5, 2))
    ctx = _random_context(rng, 5, Injector.NOISE)
    perturbation, draw = draw_perturbation(stage, ctx.level, 4, rng)
    clipped = batch_gradients(params, tspec, stage, ctx, x, perturbation, draw)
    plain = batch_gradients(params, tspec, replace(stage, reg=RegSchedule(mode=RegMode.OAR)), ctx, x,
                            perturbation, draw)
    assert not clipped.applied
    assert clipped.loss == plain.loss
    for a, b in zip(clipped.grads.arrays(), plain.grads.arrays()):
        np.testing.assert_array_equal(a, b)


@pytest.mark.parametrize('injector', list(Injector))
def test_gamma_zero_modes_are_identical(low_overlap, injector):
    ds, nuis = low_overlap
    base = 0.5 if injector == Injector.DROPOUT else 1.0
    fits = []
    for mode in RegMode:
        reg = RegSchedule(kind=RegKind.LOGARITHMIC, base=base, gamma=0.0, mode=mode)
        fits.append(fit_target(_stage(reg=reg, injector=injector, epochs=4), ds, nuis))
    for other in fits[1:]:
        for a, b in zip(fits[0].params.arrays(), other.params.arrays()):
            np.testing.assert_array_equal(a, b)


def test_fit_is_deterministic(low_overlap):
    ds, nuis = low_overlap
    stage = _stage(reg=RegSchedule(mode=RegMode.DOAR), seed=4)
    first = predict(fit_target(stage, ds, nuis), ds.x)
    second = predict(fit_target(stage, ds, nuis), ds.x)
    np.testing.assert_array_equal(first, second)


def test_final_weights_are_ema_replay(low_overlap):
    ds, nuis = low_overlap
    stage = _stage(ema_kappa=0.9)
    target = fit_target(stage, ds, nuis, keep_history=True)
    assert len(target.history) == 3 * int(np.ceil(ds.n / stage.batch_size))
    replayed = replay_ema(target.initial_params, target.history, 0.9)
    for a, b in zip(replayed.arrays(), target.params.arrays()):
        np.testing.assert_array_equal(a, b)


def test_doar_trace(low_overlap, tmp_path):
    ds, nuis = low_overlap
    target = fit_target(_stage(reg=RegSchedule(mode=RegMode.DOAR)), ds, nuis)
    assert len(target.trace) == 3
    assert all(0.0 <= row.clip_rate <= 1.0 and np.isfinite(row.loss) for row in target.trace)
    path = str(tmp_path / 'trace.csv')
    export_trace_csv(target, path)
    with open(path, 'r', encoding='utf-8', newline='') as file:
        rows = list(csv.DictReader(file))
    assert list(rows[0]) == TRACE_COLUMNS
    assert len(rows) == 3


def test_predict_checks_dimension(low_overlap):
    ds, nuis = low_overlap
    target = fit_target(_stage(epochs=1), ds, nuis)
    assert predict(target, ds.x).shape == (ds.n,)
    with pytest.raises(ShapeMismatchError):
        predict(target, np.ones((3, 2)))


def test_tiny_noise_recovers_least_squares():
    ds = heterogeneous_data()
    nuis = oracle_nuisance(ds, 0.05)
    stage = SecondStageSpec(reg=RegSchedule(base=1e-8, mode=RegMode.CR), injector=Injector.NOISE,
                            linear_target=True, epochs=400, lr=0.01, ema_kappa=0.95)
    target = fit_target(stage, ds, nuis)
    ctx = prepare_context(stage, ds, nuis)
    design = np.column_stack([ds.x[:, 0], np.ones(ds.n)])
    (beta, c), *_ = np.linalg.lstsq(design, ctx.phi, rcond=None)
    assert target.params.weights[0][0, 0] == pytest.approx(beta, abs=0.1)
    assert target.params.biases[0][0] == pytest.approx(c, abs=0.1)


def test_heavy_noise_collapses_to_weighted_mean():
    ds = heterogeneous_data(seed=1)
    nuis = oracle_nuisance(ds, 0.05)
    stage = SecondStageSpec(reg=RegSchedule(base=1e4, mode=RegMode.CR), injector=Injector.NOISE,
                            linear_target=True, epochs=300, lr=0.01, ema_kappa=0.99)
    target = fit_target(stage, ds, nuis)
    ctx = prepare_context(stage, ds, nuis)
    c_star = intercept_c_star(np.ones(ds.n), ctx.phi)
    np.testing.assert_allclose(predict(target, ds.x), c_star, atol=0.2)


def test_explicit_forms_without_regularization():
    rng = make_rng(0)
    x = rng.standard_normal((5, 2))
    phi, rho, trim = rng.standard_normal(5), np.ones(5), np.ones(5)
    beta = np.array([0.5, -1.0])
    plain = oar_empirical_loss(phi, rho, trim, x @ beta + 0.3)
    assert explicit_noise_loss(phi, rho, trim, x, beta, 0.3, np.zeros(5)) == pytest.approx(plain)
    assert explicit_dropout_loss(phi, rho, trim, x, beta, 0.3, np.zeros(5)) == pytest.approx(plain)


def test_noise_explicit_form_monte_carlo():
    result = check_noise_explicit_form(instances=3, draws=20_000, seed=11, z=4.0)
    assert result.passed, result.detail


def test_dropout_explicit_form_monte_carlo():
    result = check_dropout_explicit_form(instances=3, draws=20_000, seed=12, z=4.0)
    assert result.passed, result.detail


def test_r_learner_weights(low_overlap):
    ds, nuis = low_overlap
    ctx = prepare_context(_stage(learner=LearnerKind.R), ds, nuis)
    np.testing.assert_allclose(ctx.weight, (ds.a - nuis.pi_hat) ** 2)
    np.testing.assert_allclose(ctx.w, nuis.nu_hat)
