"""
Kernel ridge regression with an overlap-adaptive RKHS penalty.

The fitted function is g(x) = K_xX alpha + c with alpha solving
(R K + n Lambda) alpha = R (phi - c), R = diag(rho), Lambda = diag(lambda~).
"""

import csv
import json
import logging
import os
import warnings
from dataclasses import dataclass
from typing import Optional, Tuple

import numpy as np
from scipy.linalg import LinAlgError, cho_factor, cho_solve, solve
from scipy.spatial.distance import cdist

from dataset import Dataset
from errors import DomainError, KernelChoiceWarning, NumericalDegeneracyError, ShapeMismatchError
from learners import LearnerKind, intercept_c_star, pseudo_outcome, weight_rho
from nuisance import NuisanceEstimates
from regfun import RegKind, RegSchedule, lambda_fn, overlap, rescale_lambda

logger = logging.getLogger(__name__)

JITTER = 1e-10


@dataclass(frozen=True)
class KernelConfig:
    kind: str = 'rbf'
    bandwidth: float = 0.1

    def __post_init__(self):
        if self.kind != 'rbf':
            raise DomainError(f"unsupported kernel '{self.kind}'")
        if not self.bandwidth > 0:
            raise DomainError(f"bandwidth must be positive, got {self.bandwidth}")


@dataclass
class KrrModel:
    x_train: np.ndarray
    dual: np.ndarray
    intercept: float
    kernel: KernelConfig
    # Kept for the objective and stationarity diagnostics
    centered: Optional[np.ndarray] = None
    rho: Optional[np.ndarray] = None
    level: Optional[np.ndarray] = None


def rbf_kernel(x, x2, h: float):
    """exp(-|x - x'|^2 / (2 h^2)); vectors give a float, matrices a Gram matrix"""
    x = np.asarray(x, dtype=float)
    x2 = np.asarray(x2, dtype=float)
    if x.ndim <= 1 and x2.ndim <= 1:
        if x.shape != x2.shape:
            raise ShapeMismatchError(f"kernel arguments differ in dimension: {x.shape} vs {x2.shape}")
        return float(np.exp(-np.sum((x - x2) ** 2) / (2.0 * h ** 2)))
    x, x2 = np.atleast_2d(x), np.atleast_2d(x2)
    if x.shape[1] != x2.shape[1]:
        raise ShapeMismatchError(f"kernel arguments differ in dimension: {x.shape[1]} vs {x2.shape[1]}")
    return np.exp(-cdist(x, x2, 'sqeuclidean') / (2.0 * h ** 2))


def _cholesky_solve(matrix: np.ndarray, rhs: np.ndarray) -> np.ndarray:
    """Symmetric positive definite solve, one retry with jitter on the diagonal"""
    try:
        return cho_solve(cho_factor(matrix), rhs)
    except LinAlgError:
        logger.warning("cholesky failed, retrying with jitter %g", JITTER)
    try:
        return cho_solve(cho_factor(matrix + JITTER * np.eye(matrix.shape[0])), rhs)
    except LinAlgError as e:
        raise NumericalDegeneracyError(f"kernel system is singular: {e}")


def solve_dual(gram: np.ndarray, rho: np.ndarray, level: np.ndarray, centered: np.ndarray) -> np.ndarray:
    """alpha with (R K + n Lambda) alpha = R centered"""
    n = gram.shape[0]
    if not np.any(rho > 0):
        raise NumericalDegeneracyError("all weights rho are zero, kernel system is singular")
    if np.all(rho > 0):
        # Dividing by R leaves K + n R^-1 Lambda, which is symmetric
        return _cholesky_solve(gram + n * np.diag(level / rho), centered)
    try:
        return solve(rho[:, None] * gram + n * np.diag(level), rho * centered)
    except LinAlgError as e:
        raise NumericalDegeneracyError(f"kernel system is singular: {e}")


def fit_krr_oar(train: Dataset, nuis: NuisanceEstimates, learner: LearnerKind, reg: RegSchedule,
                kernel: KernelConfig) -> KrrModel:
    """Weighted KRR on centered pseudo-outcomes with rescaled adaptive ridge"""
    reg.validate()
    if RegKind(reg.kind) == RegKind.SQUARED_MULTIPLICATIVE:
        warnings.warn("squared-multiplicative regularization is meant for implicit penalties",
                      KernelChoiceWarning)
    phi = np.asarray(pseudo_outcome(learner, train.a, train.y, nuis), dtype=float)
    rho = np.asarray(weight_rho(learner, train.a, nuis.pi_hat), dtype=float)
    intercept = intercept_c_star(rho, phi)
    centered = phi - intercept
    level = rescale_lambda(lambda_fn(reg.kind, nuis.nu_hat), nuis.trim, reg.base, reg.effective_gamma).values
    gram = rbf_kernel(train.x, train.x, kernel.bandwidth)
    dual = solve_dual(gram, rho, level, centered)
    logger.info("krr fitted on %d rows, intercept %.6f", train.n, intercept)
    return KrrModel(train.x.copy(), dual, intercept, kernel, centered, rho, level)


def predict_krr(model: KrrModel, x: np.ndarray) -> np.ndarray:
    x = np.atleast_2d(np.asarray(x, dtype=float))
    if x.shape[1] != model.x_train.shape[1]:
        raise ShapeMismatchError(f"expected {model.x_train.shape[1]} covariates, got {x.shape[1]}")
    return rbf_kernel(x, model.x_train, model.kernel.bandwidth) @ model.dual + model.intercept


def krr_dual_objective(model: KrrModel, dual: Optional[np.ndarray] = None) -> float:
    """
    Strictly convex quadratic minimized by the fitted dual when every rho > 0:
    0.5 a'Ka + 0.5 n a' diag(lambda~/rho) a - a' centered.
    """
    if model.rho is None or not np.all(model.rho > 0):
        raise DomainError("the dual objective needs strictly positive rho")
    a = model.dual if dual is None else np.asarray(dual, dtype=float)
    gram = rbf_kernel(model.x_train, model.x_train, model.kernel.bandwidth)
    n = a.shape[0]
    return float(0.5 * a @ gram @ a + 0.5 * n * a @ (model.level / model.rho * a) - a @ model.centered)


def krr_stationarity(model: KrrModel, directions: np.ndarray) -> np.ndarray:
    """
    Directional derivatives of mean rho (centered - g)^2 + <g, Lambda g> along
    g + K delta for each row delta of directions.
    """
    gram = rbf_kernel(model.x_train, model.x_train, model.kernel.bandwidth)
    n = model.dual.shape[0]
    residual = model.centered - gram @ model.dual
    gradient = gram @ (-2.0 / n * model.rho * residual + 2.0 * model.level * model.dual)
    return np.atleast_2d(directions) @ gradient


def pushthrough_check(x: np.ndarray, pi: np.ndarray, tau: np.ndarray, kernel: KernelConfig,
                      queries: np.ndarray, phi: Optional[np.ndarray] = None,
                      rho: Optional[np.ndarray] = None) -> float:
    """
    Max |K_qX (W K + n I)^-1 W T - K_qX (K + n Lambda)^-1 T| with W = diag(nu),
    Lambda = diag(1/nu). With phi and rho given, the left side uses the plug-ins.
    """
    x = np.atleast_2d(np.asarray(x, dtype=float))
    nu = overlap(pi)
    n = x.shape[0]
    gram = rbf_kernel(x, x, kernel.bandwidth)
    cross = rbf_kernel(np.atleast_2d(queries), x, kernel.bandwidth)
    weights = nu if rho is None else np.asarray(rho, dtype=float)
    response = np.asarray(tau, dtype=float) if phi is None else np.asarray(phi, dtype=float)
    try:
        lhs = cross @ solve(weights[:, None] * gram + n * np.eye(n), weights * response)
        rhs = cross @ solve(gram + n * np.diag(1.0 / nu), response)
    except LinAlgError as e:
        raise NumericalDegeneracyError(f"push-through system is singular: {e}")
    return float(np.max(np.abs(lhs - rhs)))


def save_krr(model: KrrModel, stem: str) -> Tuple[str, str]:
    """Training inputs and dual coefficients as CSV, the rest as a JSON manifest"""
    directory = os.path.dirname(stem)
    if directory:
        os.makedirs(directory, exist_ok=True)
    d = model.x_train.shape[1]
    csv_path, json_path = stem + '.csv', stem + '.json'
    with open(csv_path, 'w', encoding='utf-8', newline='') as file:
        writer = csv.writer(file)
        writer.writerow([f"x{j}" for j in range(d)] + ['dual'])
        for row, coef in zip(model.x_train, model.dual):
            writer.writerow([format(v, '.17g') for v in row] + [format(coef, '.17g')])
    with open(json_path, 'w', encoding='utf-8') as file:
        json.dump({'intercept': model.intercept, 'kernel': model.kernel.kind,
                   'bandwidth': model.kernel.bandwidth, 'dimension': d}, file, indent=2)
    return csv_path, json_path


def load_krr(stem: str) -> KrrModel:
    with open(stem + '.json', 'r', encoding='utf-8') as file:
        manifest = json.load(file)
    rows = []
    with open(stem + '.csv', 'r', encoding='utf-8', newline='') as file:
        reader = csv.reader(file)
        next(reader)
        for row in reader:
            rows.append([float(v) for v in row])
    table = np.array(rows, dtype=float).reshape(-1, manifest['dimension'] + 1)
    return KrrModel(table[:, :-1], table[:, -1], float(manifest['intercept']),
                    KernelConfig(manifest['kernel'], float(manifest['bandwidth'])))
