import csv

import numpy as np
import pytest

from dataset import Dataset, SyntheticConfig, generate_synthetic, make_rng
from errors import CoverageWarning, DegenerateOverlapWarning, DomainError, ShapeMismatchError
from neuralnet import init_params
from nuisance import (
    NUISANCE_COLUMNS, OUTCOME_GRID, OUTCOME_STREAM, PROPENSITY_GRID, NuisanceEstimates, TrainingConfig,
    export_nuisance_csv, fit_nuisance, fit_outcomes, fit_propensity, fold_indices, load_models,
    oracle_nuisance, predict_nuisance, sample_candidates, save_models, select_training_config,
)

QUICK = TrainingConfig(epochs=5)


@pytest.fixture
def synthetic():
    return generate_synthetic(SyntheticConfig(300, 2.0, 1))


def test_network_widths():
    cfg = TrainingConfig(width_factor=2, representation_factor=3, head_factor=2)
    assert cfg.hidden_width(3) == 6
    assert cfg.representation_width(1) == 3
    assert cfg.target_units(1) == (2, 3, 6)
    assert TrainingConfig(width_factor=1.5).hidden_width(1) == 2
    assert TrainingConfig(width_factor=0.1).hidden_width(1) == 1


def test_outcome_network_layout(synthetic):
    cfg = TrainingConfig(epochs=1, width_factor=3, representation_factor=2, head_factor=4)
    model = fit_outcomes(synthetic, cfg, seed=0)
    assert model.representation_spec.layer_widths == (1, 3, 2)
    assert model.head_spec.layer_widths == (2, 8, 1)


def test_trimming_uses_raw_propensity():
    nuis = NuisanceEstimates.from_arrays(np.zeros(3), np.ones(3), np.array([0.01, 0.5, 0.99]), 0.05)
    np.testing.assert_array_equal(nuis.trim, [0.0, 1.0, 0.0])
    np.testing.assert_allclose(nuis.pi_hat, [0.05, 0.5, 0.95])
    np.testing.assert_allclose(nuis.nu_hat, [0.0475, 0.25, 0.0475])
    np.testing.assert_allclose(nuis.mu_hat, nuis.pi_hat)


def test_estimates_validation():
    with pytest.raises(DomainError):
        NuisanceEstimates.from_arrays(np.zeros(2), np.zeros(2), np.full(2, 0.5), 0.5)
    with pytest.raises(ShapeMismatchError):
        NuisanceEstimates.from_arrays(np.zeros(2), np.zeros(3), np.full(2, 0.5), 0.05)


def test_oracle_nuisance(synthetic):
    nuis = oracle_nuisance(synthetic, 0.05)
    np.testing.assert_array_equal(nuis.pi_raw, synthetic.oracle_pi)
    np.testing.assert_array_equal(nuis.mu0_hat, synthetic.oracle_mu0)
    plain = Dataset(x=synthetic.x, a=synthetic.a, y=synthetic.y)
    with pytest.raises(DomainError):
        oracle_nuisance(plain, 0.05)


def test_propensity_beats_constant(synthetic):
    prop = fit_propensity(synthetic, TrainingConfig(epochs=60), seed=0)
    p = np.clip(prop.predict(synthetic.x), 1e-12, 1 - 1e-12)
    rate = synthetic.a.mean()
    fitted = -np.mean(synthetic.a * np.log(p) + (1 - synthetic.a) * np.log(1 - p))
    constant = -np.mean(synthetic.a * np.log(rate) + (1 - synthetic.a) * np.log(1 - rate))
    assert fitted < constant
    assert np.all((p > 0) & (p < 1))


def test_constant_treatment_warns(synthetic):
    treated = Dataset(x=synthetic.x, a=np.ones(synthetic.n), y=synthetic.y)
    with pytest.warns(DegenerateOverlapWarning):
        fit_propensity(treated, TrainingConfig(epochs=1), seed=0)


def test_empty_arm_keeps_head(synthetic):
    treated = Dataset(x=synthetic.x, a=np.ones(synthetic.n), y=synthetic.y)
    cfg = TrainingConfig(epochs=2)
    with pytest.warns(CoverageWarning):
        model = fit_outcomes(treated, cfg, seed=0)
    rng = make_rng(0, OUTCOME_STREAM)
    init_params(model.representation_spec, rng)
    untouched = init_params(model.head_spec, rng)
    trained = init_params(model.head_spec, rng)
    for fitted, initial in zip(model.heads[0].arrays(), untouched.arrays()):
        np.testing.assert_array_equal(fitted, initial)
    assert any(not np.array_equal(f, i) for f, i in zip(model.heads[1].arrays(), trained.arrays()))
    mu0, mu1 = model.predict(treated.x)
    assert mu0.shape == mu1.shape == (synthetic.n,)


def test_balanced_design_gives_flat_propensity():
    ds = generate_synthetic(SyntheticConfig(2000, 0.0, 5))
    prop = fit_propensity(ds, TrainingConfig(epochs=60), seed=0)
    assert np.mean(np.abs(prop.predict(ds.x) - 0.5)) < 0.05


def test_fit_is_deterministic(synthetic):
    first = fit_nuisance(synthetic, QUICK, seed=3, trim_lo=0.05).estimates
    second = fit_nuisance(synthetic, QUICK, seed=3, trim_lo=0.05).estimates
    np.testing.assert_array_equal(first.pi_raw, second.pi_raw)
    np.testing.assert_array_equal(first.mu1_hat, second.mu1_hat)


def test_fold_indices_partition():
    folds = fold_indices(11, 3, seed=0)
    assert len(folds) == 3
    np.testing.assert_array_equal(np.sort(np.concatenate(folds)), np.arange(11))
    with pytest.raises(DomainError):
        fold_indices(3, 5, seed=0)


def test_cross_fitting(synthetic):
    fit = fit_nuisance(synthetic, QUICK, seed=0, trim_lo=0.05, n_folds=3)
    assert len(fit.propensity_models) == 3
    assert fit.estimates.n == synthetic.n
    assert np.all(np.isfinite(fit.estimates.mu0_hat))


def test_sample_candidates():
    grid = {'lr': (0.1, 0.2, 0.3), 'batch_size': (8, 16)}
    every = sample_candidates(grid, 50, make_rng(0))
    assert len(every) == 6
    some = sample_candidates(grid, 4, make_rng(0))
    assert len(some) == 4
    assert len({tuple(sorted(c.items())) for c in some}) == 4
    assert some == sample_candidates(grid, 4, make_rng(0))


def test_select_training_config(synthetic):
    prop_grid = {'width_factor': (1.0, 2.0)}
    outcome_grid = {'head_factor': (1.0, 2.0), 'weight_decay': (0.0,)}
    tuned = select_training_config(synthetic, QUICK, n_folds=2, seed=0, n_samples=5,
                                   propensity_grid=prop_grid, outcome_grid=outcome_grid)
    assert len(tuned.scores) == 4
    by_network = {}
    for s in tuned.scores:
        by_network.setdefault(s['network'], []).append(s)
    best_prop = min(by_network['propensity'], key=lambda s: s['cv_loss'])
    best_outcome = min(by_network['outcome'], key=lambda s: s['cv_loss'])
    assert tuned.propensity.width_factor == best_prop['width_factor']
    assert tuned.outcome.head_factor == best_outcome['head_factor']
    assert tuned.outcome.width_factor == QUICK.width_factor
    with pytest.raises(DomainError):
        select_training_config(synthetic, QUICK, n_folds=2, seed=0, n_samples=0)


def test_default_search_ranges():
    assert PROPENSITY_GRID['width_factor'] == (2.0, 3.0, 4.0)
    assert PROPENSITY_GRID['weight_decay'] == (0.0, 0.001, 0.01, 0.1)
    assert set(OUTCOME_GRID) == set(PROPENSITY_GRID) | {'representation_factor', 'head_factor'}


def test_models_round_trip(tmp_path, synthetic):
    fit = fit_nuisance(synthetic, QUICK, seed=0, trim_lo=0.05)
    stem = str(tmp_path / 'stage1')
    save_models(fit.propensity_models[0], fit.outcome_models[0], stem)
    prop, outcome = load_models(stem)
    again = predict_nuisance(prop, outcome, synthetic, 0.05)
    np.testing.assert_array_equal(again.pi_raw, fit.estimates.pi_raw)
    np.testing.assert_array_equal(again.mu0_hat, fit.estimates.mu0_hat)


def test_predict_checks_dimension(synthetic):
    fit = fit_nuisance(synthetic, QUICK, seed=0, trim_lo=0.05)
    wide = Dataset(x=np.ones((4, 2)), a=np.zeros(4), y=np.zeros(4))
    with pytest.raises(ShapeMismatchError):
        predict_nuisance(fit.propensity_models[0], fit.outcome_models[0], wide, 0.05)


def test_export_csv(tmp_path):
    nuis = NuisanceEstimates.from_arrays(np.zeros(3), np.ones(3), np.array([0.01, 0.5, 0.7]), 0.05)
    path = str(tmp_path / 'nuisance.csv')
    export_nuisance_csv(nuis, path)
    with open(path, 'r', encoding='utf-8', newline='') as file:
        rows = list(csv.DictReader(file))
    assert list(rows[0]) == NUISANCE_COLUMNS
    assert [float(r['trim']) for r in rows] == [0.0, 1.0, 1.0]
