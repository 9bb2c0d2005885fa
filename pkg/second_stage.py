"""
Stage 2: parametric CATE target trained on pseudo-outcomes.

Penalties are implicit. Each minibatch row is perturbed at the injection
interface with Gaussian noise of variance lambda~ or with a scaled Bernoulli
mask of drop rate p~, where lambda~/p~ are the rescaled overlap-adaptive
levels. In dOAR mode a one-step correction C is added to the loss whenever
|C| <= clip_alpha and |C| <= the batch loss.
"""

import csv
import logging
import os
from dataclasses import dataclass, field, replace
from enum import Enum
from typing import List, Optional, Tuple

import numpy as np

from dataset import Dataset, make_rng
from errors import DomainError, ShapeMismatchError
from learners import LearnerKind, pseudo_outcome, weight_rho, weight_w
from neuralnet import (
    ADDITIVE, MULTIPLICATIVE, MlpParams, MlpSpec, Perturbation, adamw_step, backward, ema_update,
    forward, init_ema, init_optimizer, init_params, minibatches, tangent_backward, tangent_forward,
)
from nuisance import NuisanceEstimates
from regfun import (
    RegMode, RegSchedule, Rescaling, dropout_p, lambda_fn, lambda_from_p, rescale_lambda, rescale_p,
    rescaled_score_lambda, rescaled_score_p,
)

logger = logging.getLogger(__name__)

TARGET_STREAM = 404
TRACE_COLUMNS = ['epoch', 'loss', 'correction', 'clip_rate']


class Injector(str, Enum):
    NOISE = 'noise'
    DROPOUT = 'dropout'


@dataclass(frozen=True)
class SecondStageSpec:
    learner: LearnerKind = LearnerKind.DR
    reg: RegSchedule = field(default_factory=RegSchedule)
    injector: Injector = Injector.DROPOUT
    hidden_width: Optional[int] = None
    # hidden, representation and effect-block widths; set from the stage-1 outcome network
    hidden_units: Optional[Tuple[int, int, int]] = None
    linear_target: bool = False
    epochs: int = 200
    batch_size: int = 64
    lr: float = 0.005
    weight_decay: float = 0.0
    ema_kappa: float = 0.995
    seed: int = 0
    # 'sqrt': noise sd is sqrt(lambda~); 'linear': noise sd is lambda~
    noise_scale: str = 'sqrt'
    # 'indicator': trimmed-out rows keep weight rho with target 0; 'drop': weight 0
    trimming: str = 'indicator'
    inject_at: str = 'representation'

    def validate(self, injected: bool = True) -> 'SecondStageSpec':
        """injected=False for targets that never perturb, such as kernel ridge"""
        self.reg.validate(dropout=injected and self.injector == Injector.DROPOUT)
        if self.noise_scale not in ('sqrt', 'linear'):
            raise DomainError(f"noise_scale must be 'sqrt' or 'linear', got '{self.noise_scale}'")
        if self.trimming not in ('indicator', 'drop'):
            raise DomainError(f"trimming must be 'indicator' or 'drop', got '{self.trimming}'")
        if self.inject_at not in ('representation', 'inputs'):
            raise DomainError(f"inject_at must be 'representation' or 'inputs', got '{self.inject_at}'")
        if self.epochs < 0 or self.batch_size < 1 or self.lr <= 0:
            raise DomainError("epochs, batch_size and lr must be positive")
        return self

    def target_spec(self, d: int) -> MlpSpec:
        """Representation block then effect block, perturbed at the representation"""
        if self.linear_target:
            return MlpSpec((d, 1), injection_index=0)
        if self.hidden_width:
            units = (self.hidden_width,) * 3
        else:
            units = self.hidden_units or (2 * d, 2 * d, 4 * d)
        index = 2 if self.inject_at == 'representation' else 0
        return MlpSpec((d,) + tuple(units) + (1,), injection_index=index)

    def with_units(self, units: Tuple[int, int, int]) -> 'SecondStageSpec':
        """Adopt stage-1 outcome-network widths unless widths are already fixed"""
        if self.hidden_units is not None or self.hidden_width:
            return self
        return replace(self, hidden_units=tuple(int(u) for u in units))


@dataclass
class RegContext:
    """Per-row training quantities, fixed for the whole fit"""
    phi: np.ndarray
    weight: np.ndarray
    target: np.ndarray
    w: np.ndarray
    trim: np.ndarray
    delta: np.ndarray
    level: np.ndarray
    kernel: np.ndarray
    rescaling: Rescaling

    def rows(self, index: np.ndarray) -> 'RegContext':
        return RegContext(self.phi[index], self.weight[index], self.target[index], self.w[index],
                          self.trim[index], self.delta[index], self.level[index], self.kernel[index],
                          self.rescaling)


@dataclass
class TraceRow:
    epoch: int
    loss: float
    correction: float
    clip_rate: float


@dataclass
class TrainedTarget:
    spec: MlpSpec
    params: MlpParams
    stage: SecondStageSpec
    trace: List[TraceRow] = field(default_factory=list)
    initial_params: Optional[MlpParams] = None
    history: Optional[List[MlpParams]] = None


@dataclass
class BatchResult:
    grads: MlpParams
    loss: float
    correction: float
    applied: bool


def prepare_context(stage: SecondStageSpec, train: Dataset, nuis: NuisanceEstimates) -> RegContext:
    """Pseudo-outcomes, weights, rescaled levels and score kernels for every row"""
    if nuis.n != train.n:
        raise ShapeMismatchError(f"nuisances cover {nuis.n} rows, training set has {train.n}")
    reg = stage.reg
    a, pi = train.a, nuis.pi_hat
    phi = np.asarray(pseudo_outcome(stage.learner, a, train.y, nuis), dtype=float)
    rho = np.asarray(weight_rho(stage.learner, a, pi), dtype=float)
    w = np.asarray(weight_w(stage.learner, pi), dtype=float)
    trim = nuis.trim
    gamma = reg.effective_gamma
    debias = reg.mode == RegMode.DOAR
    kernel = np.zeros(train.n)

    if stage.injector == Injector.NOISE:
        rescaling = rescale_lambda(lambda_fn(reg.kind, nuis.nu_hat), trim, reg.base, gamma)
        if debias and rescaling.m_hat > 0:
            kernel = np.asarray(rescaled_score_lambda(reg.kind, a, pi, rescaling.m_hat, reg.base, gamma))
    else:
        rescaling = rescale_p(dropout_p(reg.kind, nuis.nu_hat), trim, reg.base, gamma)
        if debias and not rescaling.degenerate:
            kernel = np.asarray(rescaled_score_p(reg.kind, a, pi, rescaling.m_hat, reg.base, gamma,
                                                 branch=rescaling.branch))

    weight = rho * trim if stage.trimming == 'drop' else rho
    return RegContext(
        phi=phi, weight=weight, target=trim * phi, w=w, trim=trim,
        delta=nuis.mu1_hat - nuis.mu0_hat, level=rescaling.values, kernel=kernel,
        rescaling=rescaling,
    )


def oar_empirical_loss(phi, rho, trim, g_perturbed) -> float:
    """mean of rho * (I * phi - g)^2 over the batch"""
    phi, rho, trim, g = (np.asarray(v, dtype=float) for v in (phi, rho, trim, g_perturbed))
    return float(np.mean(rho * (trim * phi - g) ** 2))


def noise_scale_factor(level: np.ndarray, noise_scale: str = 'sqrt') -> np.ndarray:
    """d(sd)/d(lambda~): 1/(2 sqrt(lambda~)) for the sd parametrization, zero where lambda~ = 0"""
    level = np.asarray(level, dtype=float)
    if noise_scale == 'linear':
        return np.ones_like(level)
    safe = np.where(level > 0, level, 1.0)
    return np.where(level > 0, 0.5 / np.sqrt(safe), 0.0)


def noise_sd(level: np.ndarray, noise_scale: str = 'sqrt') -> np.ndarray:
    level = np.asarray(level, dtype=float)
    return level if noise_scale == 'linear' else np.sqrt(level)


def dropout_score(xi: np.ndarray, p: np.ndarray) -> np.ndarray:
    """Log-likelihood derivative in p of a scaled Bernoulli mask, summed over coordinates"""
    xi = np.atleast_2d(np.asarray(xi, dtype=float))
    p = np.asarray(p, dtype=float)
    safe = np.where(p > 0, p, 1.0)
    score = np.sum(1.0 - xi, axis=1) / safe
    return np.where(p > 0, score, 0.0)


def bias_correction_noise(w, delta, g_perturbed, directional, kernel):
    """-2 w (delta - g(x + xi)) D k~ with D = dg/dlambda~ along the drawn noise"""
    w, delta, g, d, k = (np.asarray(v, dtype=float) for v in (w, delta, g_perturbed, directional, kernel))
    return -2.0 * w * (delta - g) * d * k


def bias_correction_dropout(w, delta, g_perturbed, xi, p, directional, kernel):
    """Likelihood-score term plus pathwise term; zero where p~ = 0"""
    w, delta, g, d, k, p = (np.asarray(v, dtype=float)
                            for v in (w, delta, g_perturbed, directional, kernel, p))
    gap = delta - g
    value = w * gap ** 2 * dropout_score(xi, p) * k - 2.0 * w * gap * d * k
    return np.where(p > 0, value, 0.0)


def draw_perturbation(stage: SecondStageSpec, level: np.ndarray, width: int,
                      rng: np.random.Generator) -> Tuple[Perturbation, np.ndarray]:
    """Perturbation for a batch plus the raw draw (noise eps or keep mask)"""
    n = level.shape[0]
    if stage.injector == Injector.NOISE:
        eps = rng.standard_normal((n, width))
        return Perturbation(ADDITIVE, noise_sd(level, stage.noise_scale)[:, None] * eps), eps
    keep = (rng.random((n, width)) >= level[:, None]).astype(float)
    return Perturbation(MULTIPLICATIVE, keep / (1.0 - level)[:, None]), keep


def batch_gradients(params: MlpParams, tspec: MlpSpec, stage: SecondStageSpec, ctx: RegContext,
                    x: np.ndarray, perturbation: Perturbation, draw: np.ndarray) -> BatchResult:
    """Loss, optional clipped correction, and exact gradients for one minibatch"""
    out, cache = forward(params, tspec, x, perturbation)
    g = out[:, 0]
    n = g.shape[0]
    residual = ctx.target - g
    loss = float(np.mean(ctx.weight * residual ** 2))
    d_out = -2.0 * ctx.weight * residual / n

    if stage.reg.mode != RegMode.DOAR or not np.any(ctx.kernel != 0):
        grads = backward(cache, d_out[:, None])
        return BatchResult(grads.params, loss, 0.0, False)

    if stage.injector == Injector.NOISE:
        scale = noise_scale_factor(ctx.level, stage.noise_scale)
        tangent = draw * scale[:, None]
        active = np.ones(n)
        score = np.zeros(n)
    else:
        p = ctx.level
        tangent = cache.interface_pre * perturbation.xi / (1.0 - p)[:, None]
        active = (p > 0).astype(float)
        score = dropout_score(perturbation.xi, p)
    directional, tcache = tangent_forward(cache, tangent)
    directional = directional[:, 0]

    if stage.injector == Injector.NOISE:
        rows = bias_correction_noise(ctx.w, ctx.delta, g, directional, ctx.kernel)
    else:
        rows = bias_correction_dropout(ctx.w, ctx.delta, g, perturbation.xi, ctx.level,
                                       directional, ctx.kernel)
    correction = float(np.mean(ctx.trim * rows))
    applied = abs(correction) <= stage.reg.clip_alpha and abs(correction) <= loss
    if not applied:
        grads = backward(cache, d_out[:, None])
        return BatchResult(grads.params, loss, correction, False)

    gap = ctx.delta - g
    coef = ctx.trim * active * ctx.w * ctx.kernel / n
    d_out = d_out + coef * (2.0 * directional - 2.0 * gap * score)
    d_directional = -2.0 * coef * gap
    t_grads, post_grad, tangent_grad = tangent_backward(tcache, d_directional[:, None])
    pre_grad = None
    if stage.injector == Injector.DROPOUT:
        pre_grad = tangent_grad * perturbation.xi / (1.0 - ctx.level)[:, None]
    grads = backward(cache, d_out[:, None], post_injection_grad=post_grad, pre_injection_grad=pre_grad)
    return BatchResult(grads.params.add(t_grads), loss + correction, correction, True)


def fit_target(stage: SecondStageSpec, train: Dataset, nuis: NuisanceEstimates,
               keep_history: bool = False) -> TrainedTarget:
    """Minibatch AdamW on the OAR loss; the returned weights are the EMA shadow"""
    stage.validate()
    ctx = prepare_context(stage, train, nuis)
    tspec = stage.target_spec(train.d)
    width = tspec.layer_widths[tspec.injection_index]
    rng = make_rng(stage.seed, TARGET_STREAM)
    params = init_params(tspec, rng)
    initial = params.copy()
    opt = init_optimizer(params, stage.lr, stage.weight_decay)
    ema = init_ema(params, stage.ema_kappa)
    history = [] if keep_history else None
    trace = []

    for epoch in range(stage.epochs):
        losses, corrections, clipped, batches = [], [], 0, 0
        for index in minibatches(train.n, stage.batch_size, rng):
            rows = ctx.rows(index)
            perturbation, draw = draw_perturbation(stage, rows.level, width, rng)
            result = batch_gradients(params, tspec, stage, rows, train.x[index], perturbation, draw)
            params, opt = adamw_step(params, result.grads, opt)
            ema = ema_update(ema, params)
            if history is not None:
                history.append(params.copy())
            losses.append(result.loss)
            corrections.append(abs(result.correction))
            if stage.reg.mode == RegMode.DOAR:
                batches += 1
                clipped += 0 if result.applied else 1
        row = TraceRow(epoch, float(np.mean(losses)), float(np.mean(corrections)),
                       clipped / batches if batches else 0.0)
        trace.append(row)
        logger.debug("target epoch %d: loss %.6f correction %.6f clip %.3f",
                     epoch, row.loss, row.correction, row.clip_rate)

    return TrainedTarget(tspec, ema.shadow, stage, trace, initial, history)


def predict(target: TrainedTarget, x: np.ndarray) -> np.ndarray:
    """CATE estimates from the EMA weights, no perturbation"""
    x = np.asarray(x, dtype=float)
    if x.ndim != 2 or x.shape[1] != target.spec.layer_widths[0]:
        raise ShapeMismatchError(f"expected {target.spec.layer_widths[0]} covariates, got shape {x.shape}")
    out, _ = forward(target.params, target.spec, x)
    return out[:, 0]


def replay_ema(initial: MlpParams, history: List[MlpParams], kappa: float) -> MlpParams:
    """EMA recurrence applied to a recorded parameter trace"""
    ema = init_ema(initial, kappa)
    for params in history:
        ema = ema_update(ema, params)
    return ema.shadow


def explicit_noise_loss(phi, rho, trim, x, beta, c, level) -> float:
    """Closed-form expected noise-injected loss of a linear target"""
    phi, rho, trim, level = (np.asarray(v, dtype=float) for v in (phi, rho, trim, level))
    x = np.atleast_2d(np.asarray(x, dtype=float))
    beta = np.asarray(beta, dtype=float).ravel()
    fitted = x @ beta + c
    return float(np.mean(rho * (trim * phi - fitted) ** 2) + beta @ beta * np.mean(rho * level))


def explicit_dropout_loss(phi, rho, trim, x, beta, c, p) -> float:
    """Closed-form expected dropout loss of a linear target, dropout applied to inputs"""
    phi, rho, trim = (np.asarray(v, dtype=float) for v in (phi, rho, trim))
    x = np.atleast_2d(np.asarray(x, dtype=float))
    beta = np.asarray(beta, dtype=float).ravel()
    level = np.asarray(lambda_from_p(p), dtype=float)
    fitted = x @ beta + c
    quadratic = np.sum(beta ** 2 * np.mean((rho * level)[:, None] * x ** 2, axis=0))
    return float(np.mean(rho * (trim * phi - fitted) ** 2) + quadratic)


def export_trace_csv(target: TrainedTarget, path: str) -> None:
    directory = os.path.dirname(path)
    if directory:
        os.makedirs(directory, exist_ok=True)
    with open(path, 'w', encoding='utf-8', newline='') as file:
        writer = csv.DictWriter(file, fieldnames=TRACE_COLUMNS)
        writer.writeheader()
        for row in target.trace:
            writer.writerow({'epoch': row.epoch, 'loss': format(row.loss, '.17g'),
                             'correction': format(row.correction, '.17g'),
                             'clip_rate': format(row.clip_rate, '.17g')})
