"""
Numerical identity suites behind the `check` command.

Each suite returns a CheckResult; the test modules call the same functions
at smaller sizes.
"""

import logging
from dataclasses import dataclass
from typing import Callable, List, Optional, Tuple

import numpy as np

from dataset import SyntheticConfig, generate_synthetic, make_rng
from krr import KernelConfig, pushthrough_check
from learners import LearnerKind, pseudo_outcome, weight_rho
from neuralnet import (
    ADDITIVE, MULTIPLICATIVE, MlpParams, MlpSpec, Perturbation, backward, forward, init_params,
    tangent_backward, tangent_forward,
)
from nuisance import NuisanceEstimates
from regfun import (
    RegKind, dropout_p, lambda_fn, overlap, rescaled_score_lambda, rescaled_score_p,
    score_kernel_lambda, score_kernel_p,
)
from second_stage import explicit_dropout_loss, explicit_noise_loss

logger = logging.getLogger(__name__)

FD_STEP = 1e-5
# Mixture weights move the perturbed atom by t / mass, so a smaller step
MIXTURE_STEP = 1e-6


@dataclass
class CheckResult:
    name: str
    passed: bool
    detail: str


def relative_error(numeric, analytic) -> float:
    """|num - ana| / (|num| + |ana|) in the Euclidean norm"""
    numeric = np.ravel(np.asarray(numeric, dtype=float))
    analytic = np.ravel(np.asarray(analytic, dtype=float))
    scale = np.linalg.norm(numeric) + np.linalg.norm(analytic)
    if scale == 0.0:
        return 0.0
    return float(np.linalg.norm(numeric - analytic) / scale)


def central_difference(f: Callable[[float], float], step: float = FD_STEP) -> float:
    return (f(step) - f(-step)) / (2.0 * step)


def _kernels():
    for kind in RegKind:
        yield f"lambda_{kind.value}", kind, score_kernel_lambda, lambda_fn
        yield f"p_{kind.value}", kind, score_kernel_p, dropout_p


def check_kernel_mean_zero(n: int = 1000, seed: int = 0, tol: float = 1e-12) -> CheckResult:
    """E over A ~ Bern(pi) of every score kernel vanishes"""
    pi = make_rng(seed).uniform(0.05, 0.95, size=n)
    worst = 0.0
    for _, kind, kernel, _ in _kernels():
        treated = pi * np.asarray(kernel(kind, 1, pi))
        control = (1.0 - pi) * np.asarray(kernel(kind, 0, pi))
        scale = np.maximum(1.0, np.abs(treated) + np.abs(control))
        worst = max(worst, float(np.max(np.abs(treated + control) / scale)))
    return CheckResult('kernel mean zero', worst <= tol, f"max scaled mean {worst:.2e}")


def check_kernel_finite_difference(n: int = 200, seed: int = 0, tol: float = 1e-6) -> CheckResult:
    """Kernels equal d/dt of the level along pi_t = pi + t(a - pi)"""
    rng = make_rng(seed)
    pi_values = np.concatenate([rng.uniform(0.05, 0.45, n // 2), rng.uniform(0.55, 0.95, n - n // 2)])
    a_values = rng.integers(0, 2, size=n)
    worst = 0.0
    for _, kind, kernel, level in _kernels():
        for a, pi in zip(a_values, pi_values):
            numeric = central_difference(lambda t: level(kind, overlap(pi + t * (a - pi))))
            analytic = kernel(kind, a, pi)
            worst = max(worst, abs(numeric - analytic) / max(abs(analytic), 1e-8))
    return CheckResult('kernel finite differences', worst <= tol, f"max relative error {worst:.2e}")


def _discrete_law(rng: np.random.Generator, atoms: int) -> Tuple[np.ndarray, np.ndarray]:
    mass = rng.uniform(0.5, 1.5, size=atoms)
    mass = mass / mass.sum()
    pi = rng.uniform(0.1, 0.9, size=atoms)
    return mass, pi


def _perturbed(mass, pi, atom: int, a: int, t: float) -> Tuple[np.ndarray, np.ndarray]:
    """Mixture (1 - t) P + t delta_(x_atom, a)"""
    point = np.zeros_like(mass)
    point[atom] = 1.0
    new_mass = (1.0 - t) * mass + t * point
    new_pi = ((1.0 - t) * mass * pi + t * a * point) / new_mass
    return new_mass, new_pi


def check_rescaled_finite_difference(instances: int = 20, seed: int = 0, tol: float = 1e-6) -> CheckResult:
    """Rescaled scores equal the Gateaux derivative of the rescaled level on a discrete law"""
    rng = make_rng(seed)
    worst = 0.0
    for _ in range(instances):
        mass, pi = _discrete_law(rng, 4)
        kind = list(RegKind)[rng.integers(0, 3)]
        atom, a = int(rng.integers(0, 4)), int(rng.integers(0, 2))
        base, gamma = rng.uniform(0.2, 2.0), rng.uniform(0.1, 1.0)

        def rescaled_lambda(t):
            m, p = _perturbed(mass, pi, atom, a, t)
            raw = np.asarray(lambda_fn(kind, overlap(p)))
            m_hat = float(m @ raw)
            return base + gamma * base / m_hat * (raw[atom] - m_hat)

        raw = np.asarray(lambda_fn(kind, overlap(pi)))
        analytic = rescaled_score_lambda(kind, a, pi[atom], float(mass @ raw), base, gamma,
                                         atom_mass=mass[atom])
        numeric = central_difference(rescaled_lambda, MIXTURE_STEP)
        worst = max(worst, abs(numeric - analytic) / max(abs(analytic), 1e-8))

        base_p = rng.uniform(0.1, 0.9)

        def rescaled_p(t):
            m, p = _perturbed(mass, pi, atom, a, t)
            raw_p = np.asarray(dropout_p(kind, overlap(p)))
            m_hat = float(m @ raw_p)
            slope = min(base_p / m_hat, (1.0 - base_p) / (1.0 - m_hat))
            return base_p + gamma * slope * (raw_p[atom] - m_hat)

        raw_p = np.asarray(dropout_p(kind, overlap(pi)))
        m_hat = float(mass @ raw_p)
        lower, upper = base_p / m_hat, (1.0 - base_p) / (1.0 - m_hat)
        if abs(lower - upper) < 1e-3:
            continue
        analytic = rescaled_score_p(kind, a, pi[atom], m_hat, base_p, gamma, atom_mass=mass[atom])
        numeric = central_difference(rescaled_p, MIXTURE_STEP)
        worst = max(worst, abs(numeric - analytic) / max(abs(analytic), 1e-8))
    return CheckResult('rescaled finite differences', worst <= tol, f"max relative error {worst:.2e}")


def check_rescaled_vanish(n: int = 200, seed: int = 0) -> CheckResult:
    """gamma = 0 gives identically zero rescaled scores"""
    rng = make_rng(seed)
    pi = rng.uniform(0.05, 0.95, size=n)
    a = rng.integers(0, 2, size=n)
    largest = 0.0
    for kind in RegKind:
        largest = max(largest, float(np.max(np.abs(rescaled_score_lambda(kind, a, pi, 1.3, 0.7, 0.0)))))
        largest = max(largest, float(np.max(np.abs(rescaled_score_p(kind, a, pi, 0.4, 0.3, 0.0)))))
    return CheckResult('rescaled scores at gamma 0', largest == 0.0, f"max |score| {largest:.2e}")


def _linear_instance(rng: np.random.Generator, n: int, d: int):
    x = rng.standard_normal((n, d))
    phi = rng.standard_normal(n) * 2.0
    rho = rng.uniform(0.2, 1.5, size=n)
    trim = (rng.random(n) < 0.9).astype(float)
    beta = rng.standard_normal(d)
    c = float(rng.standard_normal())
    return x, phi, rho, trim, beta, c


def _monte_carlo(loss_of_chunk: Callable[[int], np.ndarray], draws: int, chunk: int = 5000) -> Tuple[float, float]:
    losses = []
    remaining = draws
    while remaining > 0:
        size = min(chunk, remaining)
        losses.append(loss_of_chunk(size))
        remaining -= size
    losses = np.concatenate(losses)
    return float(losses.mean()), float(losses.std(ddof=1) / np.sqrt(losses.size))


def check_noise_explicit_form(instances: int = 10, draws: int = 100_000, seed: int = 0,
                              n: int = 20, d: int = 3, z: float = 3.0) -> CheckResult:
    """Monte Carlo noise-injected loss of a linear target against its closed form"""
    rng = make_rng(seed)
    failures, worst = 0, 0.0
    for _ in range(instances):
        x, phi, rho, trim, beta, c = _linear_instance(rng, n, d)
        level = rng.uniform(0.0, 2.0, size=n)
        sd = np.sqrt(level)

        def chunk_losses(size):
            xi = rng.standard_normal((size, n, d)) * sd[None, :, None]
            fitted = (x[None] + xi) @ beta + c
            return np.mean(rho * (trim * phi - fitted) ** 2, axis=1)

        mean, se = _monte_carlo(chunk_losses, draws)
        gap = abs(mean - explicit_noise_loss(phi, rho, trim, x, beta, c, level)) / se
        worst = max(worst, gap)
        failures += gap > z
    return CheckResult('noise explicit form', failures == 0, f"max deviation {worst:.2f} standard errors")


def check_dropout_explicit_form(instances: int = 10, draws: int = 100_000, seed: int = 1,
                                n: int = 20, d: int = 3, z: float = 3.0) -> CheckResult:
    """Monte Carlo input-dropout loss of a linear target against its closed form"""
    rng = make_rng(seed)
    failures, worst = 0, 0.0
    for _ in range(instances):
        x, phi, rho, trim, beta, c = _linear_instance(rng, n, d)
        p = rng.uniform(0.0, 0.7, size=n)

        def chunk_losses(size):
            keep = rng.random((size, n, d)) >= p[None, :, None]
            xi = keep / (1.0 - p)[None, :, None]
            fitted = (x[None] * xi) @ beta + c
            return np.mean(rho * (trim * phi - fitted) ** 2, axis=1)

        mean, se = _monte_carlo(chunk_losses, draws)
        gap = abs(mean - explicit_dropout_loss(phi, rho, trim, x, beta, c, p)) / se
        worst = max(worst, gap)
        failures += gap > z
    return CheckResult('dropout explicit form', failures == 0, f"max deviation {worst:.2f} standard errors")


def check_pushthrough(n: int = 50, queries: int = 100, seed: int = 0, bandwidth: float = 0.5) -> CheckResult:
    """Overlap-weighted and inverse-overlap-penalized solutions coincide under oracle nuisances"""
    ds = generate_synthetic(SyntheticConfig(n, 2.0, seed))
    x, pi = ds.x, np.clip(ds.oracle_pi, 1e-3, 1.0 - 1e-3)
    tau = np.sin(3.0 * x[:, 0])
    grid = np.linspace(x.min(), x.max(), queries)[:, None]
    kernel = KernelConfig('rbf', bandwidth)
    oracle_gap = pushthrough_check(x, pi, tau, kernel, grid)

    nuis = NuisanceEstimates.from_arrays(ds.oracle_mu0, ds.oracle_mu1 + tau, pi, 0.05)
    y = ds.y + ds.a * tau
    phi = np.asarray(pseudo_outcome(LearnerKind.DR, ds.a, y, nuis))
    rho = np.asarray(weight_rho(LearnerKind.DR, ds.a, nuis.pi_hat))
    plugin_gap = pushthrough_check(x, pi, tau, kernel, grid, phi=phi, rho=rho)
    passed = oracle_gap < 1e-8 and plugin_gap > 1e-3
    return CheckResult('push-through identity', passed,
                       f"oracle deviation {oracle_gap:.2e}, plug-in deviation {plugin_gap:.2e}")


def _random_spec(rng: np.random.Generator) -> MlpSpec:
    layers = int(rng.integers(1, 4))
    widths = tuple(int(w) for w in rng.integers(1, 5, size=layers + 1))
    return MlpSpec(widths, output='identity', injection_index=int(rng.integers(0, layers)))


def _loss(params: MlpParams, spec: MlpSpec, x, perturbation, weights) -> float:
    out, _ = forward(params, spec, x, perturbation)
    return float(np.sum(weights * out))


def _param_fd(params: MlpParams, f: Callable[[MlpParams], float]) -> List[np.ndarray]:
    grads = []
    arrays = params.arrays()
    for i, array in enumerate(arrays):
        g = np.zeros_like(array)
        for idx in np.ndindex(array.shape):
            values = []
            for sign in (1.0, -1.0):
                shifted = [a.copy() for a in arrays]
                shifted[i][idx] += sign * FD_STEP
                values.append(f(MlpParams.from_arrays(shifted)))
            g[idx] = (values[0] - values[1]) / (2.0 * FD_STEP)
        grads.append(g)
    return grads


def _array_fd(array: np.ndarray, f: Callable[[np.ndarray], float]) -> np.ndarray:
    g = np.zeros_like(array)
    for idx in np.ndindex(array.shape):
        plus, minus = array.copy(), array.copy()
        plus[idx] += FD_STEP
        minus[idx] -= FD_STEP
        g[idx] = (f(plus) - f(minus)) / (2.0 * FD_STEP)
    return g


def gradient_errors(spec: MlpSpec, rng: np.random.Generator, batch: int = 5) -> dict:
    """Relative errors of every analytic gradient against central differences"""
    params = init_params(spec, rng)
    x = rng.standard_normal((batch, spec.layer_widths[0]))
    width = spec.layer_widths[spec.injection_index]
    kind = ADDITIVE if rng.random() < 0.5 else MULTIPLICATIVE
    xi = rng.standard_normal((batch, width)) if kind == ADDITIVE else rng.uniform(0.5, 1.5, (batch, width))
    weights = rng.standard_normal((batch, spec.layer_widths[-1]))
    perturbation = Perturbation(kind, xi)

    _, cache = forward(params, spec, x, perturbation)
    grads = backward(cache, weights)
    errors = {
        'params': relative_error(np.concatenate([g.ravel() for g in _param_fd(
            params, lambda p: _loss(p, spec, x, perturbation, weights))]),
            np.concatenate([g.ravel() for g in grads.params.arrays()])),
        'input': relative_error(_array_fd(x, lambda v: _loss(params, spec, v, perturbation, weights)),
                                grads.input),
        'injected': relative_error(
            _array_fd(xi, lambda v: _loss(params, spec, x, Perturbation(kind, v), weights)), grads.injected),
    }

    tangent = rng.standard_normal((batch, width))

    def directional(p: MlpParams, t: np.ndarray = tangent) -> float:
        _, c = forward(p, spec, x, perturbation)
        out, _ = tangent_forward(c, t)
        return float(np.sum(weights * out))

    _, cache = forward(params, spec, x, perturbation)
    _, tcache = tangent_forward(cache, tangent)
    t_params, t_post, t_tangent = tangent_backward(tcache, weights)
    # Layers below the injection reach D only through the post-injection activations
    below = backward(cache, np.zeros_like(weights), post_injection_grad=t_post)
    errors['tangent_params'] = relative_error(
        np.concatenate([g.ravel() for g in _param_fd(params, directional)]),
        np.concatenate([g.ravel() for g in t_params.add(below.params).arrays()]))
    errors['tangent'] = relative_error(_array_fd(tangent, lambda t: directional(params, t)), t_tangent)
    return errors


def check_gradients(architectures: int = 20, seed: int = 0, tol: float = 1e-5) -> CheckResult:
    rng = make_rng(seed)
    worst = {}
    for _ in range(architectures):
        for key, value in gradient_errors(_random_spec(rng), rng).items():
            worst[key] = max(worst.get(key, 0.0), value)
    passed = all(v < tol for v in worst.values())
    detail = ", ".join(f"{k} {v:.1e}" for k, v in worst.items())
    return CheckResult('gradient checks', passed, detail)


def log_divergence_gap(mass: np.ndarray, pi: np.ndarray) -> float:
    """E[lambda_log(nu(X))] minus -log(4 pi0 pi1) + KL(P_X || P_X|A=0) + KL(P_X || P_X|A=1)"""
    pi1 = float(mass @ pi)
    pi0 = 1.0 - pi1
    expected = float(mass @ np.asarray(lambda_fn(RegKind.LOGARITHMIC, overlap(pi))))
    cond1 = mass * pi / pi1
    cond0 = mass * (1.0 - pi) / pi0
    kl0 = float(np.sum(mass * np.log(mass / cond0)))
    kl1 = float(np.sum(mass * np.log(mass / cond1)))
    return expected - (-np.log(4.0 * pi0 * pi1) + kl0 + kl1)


def check_log_divergence(instances: int = 50, seed: int = 0, tol: float = 1e-10) -> CheckResult:
    rng = make_rng(seed)
    worst = 0.0
    for _ in range(instances):
        mass, pi = _discrete_law(rng, int(rng.integers(2, 8)))
        worst = max(worst, abs(log_divergence_gap(mass, pi)))
    return CheckResult('log divergence equality', worst <= tol, f"max gap {worst:.2e}")


def run_all_checks(seed: int = 0, draws: Optional[int] = None) -> List[CheckResult]:
    """Every suite at full size; draws overrides the Monte Carlo sample count"""
    mc = {} if draws is None else {'draws': draws}
    suites = [
        lambda: check_kernel_mean_zero(seed=seed),
        lambda: check_kernel_finite_difference(seed=seed),
        lambda: check_rescaled_finite_difference(seed=seed),
        lambda: check_rescaled_vanish(seed=seed),
        lambda: check_noise_explicit_form(seed=seed, **mc),
        lambda: check_dropout_explicit_form(seed=seed + 1, **mc),
        lambda: check_pushthrough(seed=seed),
        lambda: check_gradients(seed=seed),
        lambda: check_log_divergence(seed=seed),
    ]
    results = []
    for suite in suites:
        result = suite()
        logger.info("%s: %s (%s)", result.name, 'pass' if result.passed else 'FAIL', result.detail)
        results.append(result)
    return results
