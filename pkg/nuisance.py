"""
Stage 1: propensity network and two-headed outcome network.
"""

import csv
import itertools
import logging
import os
import warnings
from dataclasses import dataclass, replace
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from scipy.special import expit

from dataset import Dataset, make_rng
from errors import CoverageWarning, DegenerateOverlapWarning, DomainError, ShapeMismatchError
from neuralnet import (
    MlpParams, MlpSpec, adamw_step, backward, forward, init_optimizer, init_params, minibatches,
    load_params, save_params,
)

logger = logging.getLogger(__name__)

# Stream identifiers mixed into the seed so the two fits draw independently
PROPENSITY_STREAM = 101
OUTCOME_STREAM = 202
FOLD_STREAM = 303
TUNE_STREAM = 505

NUISANCE_COLUMNS = ['mu0_hat', 'mu1_hat', 'pi_raw', 'pi_hat', 'nu_hat', 'mu_hat', 'trim']

# Random-search ranges for stage-1 tuning; each network is tuned on its own factual loss
PROPENSITY_GRID = {
    'lr': (0.001, 0.005, 0.01),
    'batch_size': (32, 64, 128),
    'weight_decay': (0.0, 0.001, 0.01, 0.1),
    'width_factor': (2.0, 3.0, 4.0),
}
OUTCOME_GRID = {
    **PROPENSITY_GRID,
    'representation_factor': (2.0, 3.0, 4.0),
    'head_factor': (2.0, 3.0, 4.0),
}
TUNE_SAMPLES = 50


def _units(factor: float, base: int) -> int:
    return max(1, int(round(factor * base)))


@dataclass(frozen=True)
class TrainingConfig:
    hidden_layers: int = 1
    # hidden units per covariate
    width_factor: float = 2.0
    # representation size per covariate
    representation_factor: float = 2.0
    # outcome-head hidden units per representation unit
    head_factor: float = 2.0
    lr: float = 0.005
    batch_size: int = 64
    epochs: int = 200
    weight_decay: float = 0.01

    def hidden_width(self, d: int) -> int:
        return _units(self.width_factor, d)

    def representation_width(self, d: int) -> int:
        return _units(self.representation_factor, d)

    def head_width(self, d: int) -> int:
        return _units(self.head_factor, self.representation_width(d))

    def target_units(self, d: int) -> Tuple[int, int, int]:
        """Hidden, representation and head widths of the outcome network"""
        return self.hidden_width(d), self.representation_width(d), self.head_width(d)


@dataclass
class PropensityModel:
    spec: MlpSpec
    params: MlpParams

    def predict(self, x: np.ndarray) -> np.ndarray:
        """P(A=1 | x); the network itself outputs logits"""
        logits, _ = forward(self.params, self.spec, x)
        return expit(logits[:, 0])


@dataclass
class OutcomeModel:
    representation_spec: MlpSpec
    representation: MlpParams
    head_spec: MlpSpec
    heads: List[MlpParams]

    def predict(self, x: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        phi, _ = forward(self.representation, self.representation_spec, x)
        mu0, _ = forward(self.heads[0], self.head_spec, phi)
        mu1, _ = forward(self.heads[1], self.head_spec, phi)
        return mu0[:, 0], mu1[:, 0]


@dataclass(frozen=True)
class NuisanceEstimates:
    mu0_hat: np.ndarray
    mu1_hat: np.ndarray
    pi_raw: np.ndarray
    pi_hat: np.ndarray
    trim: np.ndarray
    trim_lo: float = 0.05

    @classmethod
    def from_arrays(cls, mu0_hat, mu1_hat, pi_raw, trim_lo: float) -> 'NuisanceEstimates':
        """Indicator from the raw propensity, then clamp"""
        if not 0.0 < trim_lo < 0.5:
            raise DomainError(f"trim_lo must lie in (0, 0.5), got {trim_lo}")
        mu0_hat = np.asarray(mu0_hat, dtype=float)
        mu1_hat = np.asarray(mu1_hat, dtype=float)
        pi_raw = np.asarray(pi_raw, dtype=float)
        if not mu0_hat.shape == mu1_hat.shape == pi_raw.shape:
            raise ShapeMismatchError("nuisance columns differ in length")
        trim = ((pi_raw >= trim_lo) & (pi_raw <= 1.0 - trim_lo)).astype(float)
        pi_hat = np.clip(pi_raw, trim_lo, 1.0 - trim_lo)
        return cls(mu0_hat, mu1_hat, pi_raw, pi_hat, trim, trim_lo)

    @property
    def n(self) -> int:
        return self.pi_hat.shape[0]

    @property
    def nu_hat(self) -> np.ndarray:
        return self.pi_hat * (1.0 - self.pi_hat)

    @property
    def mu_hat(self) -> np.ndarray:
        return (1.0 - self.pi_hat) * self.mu0_hat + self.pi_hat * self.mu1_hat

    # Row-style accessors used by the pseudo-outcomes
    @property
    def mu0(self) -> np.ndarray:
        return self.mu0_hat

    @property
    def mu1(self) -> np.ndarray:
        return self.mu1_hat

    @property
    def pi(self) -> np.ndarray:
        return self.pi_hat

    def subset(self, index: np.ndarray) -> 'NuisanceEstimates':
        return NuisanceEstimates(self.mu0_hat[index], self.mu1_hat[index], self.pi_raw[index],
                                 self.pi_hat[index], self.trim[index], self.trim_lo)


@dataclass
class NuisanceFit:
    estimates: NuisanceEstimates
    propensity_models: List[PropensityModel]
    outcome_models: List[OutcomeModel]


def fit_propensity(train: Dataset, cfg: TrainingConfig, seed: int) -> PropensityModel:
    """Logit network trained with binary cross-entropy"""
    if np.all(train.a == train.a[0]):
        warnings.warn(
            f"treatment is constant ({int(train.a[0])}) in the training data, overlap is degenerate",
            DegenerateOverlapWarning,
        )
    width = cfg.hidden_width(train.d)
    spec = MlpSpec((train.d,) + (width,) * cfg.hidden_layers + (1,))
    rng = make_rng(seed, PROPENSITY_STREAM)
    params = init_params(spec, rng)
    opt = init_optimizer(params, cfg.lr, cfg.weight_decay)

    for epoch in range(cfg.epochs):
        total = 0.0
        for index in minibatches(train.n, cfg.batch_size, rng):
            logits, cache = forward(params, spec, train.x[index])
            a = train.a[index][:, None]
            p = expit(logits)
            total += float(np.sum(np.logaddexp(0.0, logits) - a * logits))
            grads = backward(cache, (p - a) / len(index))
            params, opt = adamw_step(params, grads.params, opt)
        logger.debug("propensity epoch %d: bce %.6f", epoch, total / train.n)
    return PropensityModel(spec, params)


def fit_outcomes(train: Dataset, cfg: TrainingConfig, seed: int) -> OutcomeModel:
    """Shared representation with one head per arm, factual squared error"""
    hidden, rep_width, head_width = cfg.target_units(train.d)
    rep_spec = MlpSpec((train.d,) + (hidden,) * cfg.hidden_layers + (rep_width,), output='elu')
    head_spec = MlpSpec((rep_width, head_width, 1))
    rng = make_rng(seed, OUTCOME_STREAM)
    representation = init_params(rep_spec, rng)
    heads = [init_params(head_spec, rng), init_params(head_spec, rng)]

    arm_present = [bool(np.any(train.a == arm)) for arm in (0, 1)]
    for arm, present in enumerate(arm_present):
        if not present:
            warnings.warn(f"no samples with a={arm}, head {arm} keeps its initialization",
                          CoverageWarning)

    rep_opt = init_optimizer(representation, cfg.lr, cfg.weight_decay)
    head_opts = [init_optimizer(h, cfg.lr, cfg.weight_decay) for h in heads]
    for epoch in range(cfg.epochs):
        total = 0.0
        for index in minibatches(train.n, cfg.batch_size, rng):
            phi, rep_cache = forward(representation, rep_spec, train.x[index])
            a, y = train.a[index], train.y[index]
            grad_phi = np.zeros_like(phi)
            head_grads = [heads[0].zeros_like(), heads[1].zeros_like()]
            for arm in (0, 1):
                rows = a == arm
                if not np.any(rows):
                    continue
                out, head_cache = forward(heads[arm], head_spec, phi[rows])
                residual = out[:, 0] - y[rows]
                total += float(np.sum(residual ** 2))
                grads = backward(head_cache, (2.0 * residual / len(index))[:, None])
                head_grads[arm] = grads.params
                grad_phi[rows] = grads.input
            rep_grads = backward(rep_cache, grad_phi)
            representation, rep_opt = adamw_step(representation, rep_grads.params, rep_opt)
            for arm in (0, 1):
                if arm_present[arm]:
                    heads[arm], head_opts[arm] = adamw_step(heads[arm], head_grads[arm], head_opts[arm])
        logger.debug("outcome epoch %d: mse %.6f", epoch, total / train.n)
    return OutcomeModel(rep_spec, representation, head_spec, heads)


def predict_nuisance(prop: PropensityModel, outcome: OutcomeModel, ds: Dataset,
                     trim_lo: float) -> NuisanceEstimates:
    if ds.d != prop.spec.layer_widths[0] or ds.d != outcome.representation_spec.layer_widths[0]:
        raise ShapeMismatchError(f"models expect {prop.spec.layer_widths[0]} covariates, dataset has {ds.d}")
    pi_raw = prop.predict(ds.x)
    mu0, mu1 = outcome.predict(ds.x)
    return NuisanceEstimates.from_arrays(mu0, mu1, pi_raw, trim_lo)


def oracle_nuisance(ds: Dataset, trim_lo: float) -> NuisanceEstimates:
    """Bypass stage 1 with the dataset's oracle columns"""
    if ds.oracle_pi is None or ds.oracle_mu0 is None or ds.oracle_mu1 is None:
        raise DomainError("oracle nuisances need oracle_pi, oracle_mu0 and oracle_mu1 columns")
    return NuisanceEstimates.from_arrays(ds.oracle_mu0, ds.oracle_mu1, ds.oracle_pi, trim_lo)


def fold_indices(n: int, n_folds: int, seed: int) -> List[np.ndarray]:
    if not 2 <= n_folds <= n:
        raise DomainError(f"cannot split {n} rows into {n_folds} folds")
    order = make_rng(seed, FOLD_STREAM).permutation(n)
    return [np.sort(fold) for fold in np.array_split(order, n_folds)]


def fit_nuisance(train: Dataset, cfg: TrainingConfig, seed: int, trim_lo: float,
                 n_folds: int = 1, propensity_cfg: Optional[TrainingConfig] = None) -> NuisanceFit:
    """Same-sample fit, or out-of-fold predictions when n_folds > 1"""
    prop_cfg = propensity_cfg or cfg
    if n_folds <= 1:
        prop = fit_propensity(train, prop_cfg, seed)
        outcome = fit_outcomes(train, cfg, seed)
        estimates = predict_nuisance(prop, outcome, train, trim_lo)
        logger.info("stage 1 fitted on %d rows", train.n)
        return NuisanceFit(estimates, [prop], [outcome])

    mu0 = np.empty(train.n)
    mu1 = np.empty(train.n)
    pi_raw = np.empty(train.n)
    props, outcomes = [], []
    for fold, held_out in enumerate(fold_indices(train.n, n_folds, seed)):
        kept = np.setdiff1d(np.arange(train.n), held_out)
        part = train.subset(kept)
        prop = fit_propensity(part, prop_cfg, seed + fold)
        outcome = fit_outcomes(part, cfg, seed + fold)
        pi_raw[held_out] = prop.predict(train.x[held_out])
        mu0[held_out], mu1[held_out] = outcome.predict(train.x[held_out])
        props.append(prop)
        outcomes.append(outcome)
    logger.info("stage 1 cross-fitted over %d folds", n_folds)
    return NuisanceFit(NuisanceEstimates.from_arrays(mu0, mu1, pi_raw, trim_lo), props, outcomes)


def propensity_loss(prop: PropensityModel, ds: Dataset) -> float:
    """Binary cross-entropy of the treatment on ds"""
    p = np.clip(prop.predict(ds.x), 1e-12, 1.0 - 1e-12)
    return float(-np.mean(ds.a * np.log(p) + (1.0 - ds.a) * np.log(1.0 - p)))


def outcome_loss(outcome: OutcomeModel, ds: Dataset) -> float:
    """Factual squared error on ds"""
    mu0, mu1 = outcome.predict(ds.x)
    return float(np.mean((np.where(ds.a == 1, mu1, mu0) - ds.y) ** 2))


def sample_candidates(grid: Dict[str, Sequence], n_samples: int,
                      rng: np.random.Generator) -> List[Dict]:
    """Up to n_samples distinct grid points, drawn without replacement"""
    keys = sorted(grid)
    combos = list(itertools.product(*(grid[k] for k in keys)))
    if n_samples < len(combos):
        picked = np.sort(rng.choice(len(combos), size=n_samples, replace=False))
        combos = [combos[i] for i in picked]
    return [dict(zip(keys, values)) for values in combos]


@dataclass
class TuningResult:
    propensity: TrainingConfig
    outcome: TrainingConfig
    scores: List[Dict]


def _held_out_propensity(part: Dataset, cfg: TrainingConfig, seed: int, held_out: Dataset) -> float:
    return propensity_loss(fit_propensity(part, cfg, seed), held_out)


def _held_out_outcome(part: Dataset, cfg: TrainingConfig, seed: int, held_out: Dataset) -> float:
    return outcome_loss(fit_outcomes(part, cfg, seed), held_out)


def select_training_config(train: Dataset, base: TrainingConfig, n_folds: int, seed: int,
                           n_samples: int = TUNE_SAMPLES,
                           propensity_grid: Dict[str, Sequence] = PROPENSITY_GRID,
                           outcome_grid: Dict[str, Sequence] = OUTCOME_GRID) -> TuningResult:
    """
    K-fold random search, run separately for each network.

    The propensity network is scored by held-out cross-entropy and the
    outcome network by held-out factual squared error.
    """
    if n_samples < 1:
        raise DomainError(f"n_samples must be at least 1, got {n_samples}")
    folds = fold_indices(train.n, n_folds, seed)
    rng = make_rng(seed, TUNE_STREAM)
    scores = []
    best = {}
    for network, grid, loss_fn in (('propensity', propensity_grid, _held_out_propensity),
                                   ('outcome', outcome_grid, _held_out_outcome)):
        best_cfg, best_score = base, np.inf
        for values in sample_candidates(grid, n_samples, rng):
            cfg = replace(base, **values)
            losses = []
            for fold, held_out in enumerate(folds):
                kept = np.setdiff1d(np.arange(train.n), held_out)
                losses.append(loss_fn(train.subset(kept), cfg, seed + fold, train.subset(held_out)))
            score = float(np.mean(losses))
            scores.append({'network': network, **values, 'cv_loss': score})
            logger.info("stage 1 %s candidate %s: cv loss %.6f", network, values, score)
            if score < best_score:
                best_cfg, best_score = cfg, score
        best[network] = best_cfg
    return TuningResult(best['propensity'], best['outcome'], scores)


def export_nuisance_csv(nuis: NuisanceEstimates, path: str) -> None:
    directory = os.path.dirname(path)
    if directory:
        os.makedirs(directory, exist_ok=True)
    columns = [nuis.mu0_hat, nuis.mu1_hat, nuis.pi_raw, nuis.pi_hat, nuis.nu_hat, nuis.mu_hat, nuis.trim]
    with open(path, 'w', encoding='utf-8', newline='') as file:
        writer = csv.writer(file)
        writer.writerow(NUISANCE_COLUMNS)
        for i in range(nuis.n):
            writer.writerow([format(c[i], '.17g') for c in columns])


def save_models(prop: PropensityModel, outcome: OutcomeModel, stem: str) -> None:
    save_params(prop.params, prop.spec, stem + '_propensity')
    save_params(outcome.representation, outcome.representation_spec, stem + '_representation')
    save_params(outcome.heads[0], outcome.head_spec, stem + '_head0')
    save_params(outcome.heads[1], outcome.head_spec, stem + '_head1')


def load_models(stem: str) -> Tuple[PropensityModel, OutcomeModel]:
    prop_params, prop_spec = load_params(stem + '_propensity')
    rep_params, rep_spec = load_params(stem + '_representation')
    head0, head_spec = load_params(stem + '_head0')
    head1, _ = load_params(stem + '_head1')
    return PropensityModel(prop_spec, prop_params), OutcomeModel(rep_spec, rep_params, head_spec, [head0, head1])
