"""Weights, debiased weights and pseudo-outcomes of the orthogonal meta-learners."""

from dataclasses import dataclass
from enum import Enum

import numpy as np

from errors import DomainError, NumericalDegeneracyError

# Smallest |a - pi| the R-learner divides by
R_LEARNER_FLOOR = 1e-12


class LearnerKind(str, Enum):
    DR = 'DR'
    R = 'R'
    IVW = 'IVW'


@dataclass(frozen=True)
class NuisanceRow:
    mu0: float
    mu1: float
    pi: float

    @property
    def mu(self) -> float:
        return (1.0 - self.pi) * self.mu0 + self.pi * self.mu1

    @property
    def nu(self) -> float:
        return self.pi * (1.0 - self.pi)


def _as_pi(pi) -> np.ndarray:
    pi = np.asarray(pi, dtype=float)
    if np.any(pi <= 0) or np.any(pi >= 1):
        raise DomainError("propensity must lie strictly inside (0, 1)")
    return pi


def _out(value):
    return float(value) if np.ndim(value) == 0 else value


def weight_w(kind: LearnerKind, pi):
    """Target-risk weight w(pi)"""
    pi = _as_pi(pi)
    if LearnerKind(kind) == LearnerKind.DR:
        return _out(np.ones_like(pi))
    return _out(pi * (1.0 - pi))


def weight_w_derivative(kind: LearnerKind, pi):
    """w'(pi)"""
    pi = _as_pi(pi)
    if LearnerKind(kind) == LearnerKind.DR:
        return _out(np.zeros_like(pi))
    return _out(1.0 - 2.0 * pi)


def weight_rho(kind: LearnerKind, a, pi):
    """Debiased weight rho = (a - pi) w'(pi) + w(pi)"""
    pi = _as_pi(pi)
    a = np.asarray(a, dtype=float)
    if LearnerKind(kind) == LearnerKind.DR:
        return _out(np.ones(np.broadcast(a, pi).shape))
    return _out((a - pi) ** 2)


def _dr_pseudo_outcome(a, y, mu0, mu1, pi):
    nu = pi * (1.0 - pi)
    mu_a = np.where(a == 1, mu1, mu0)
    return (a - pi) * (y - mu_a) / nu + mu1 - mu0


def pseudo_outcome(kind: LearnerKind, a, y, row):
    """
    Pseudo-outcome phi with E[phi | X] = tau under the true nuisances.

    row is anything exposing mu0, mu1 and pi (a NuisanceRow or per-row arrays).
    """
    kind = LearnerKind(kind)
    a = np.asarray(a, dtype=float)
    y = np.asarray(y, dtype=float)
    mu0 = np.asarray(row.mu0, dtype=float)
    mu1 = np.asarray(row.mu1, dtype=float)
    pi = _as_pi(row.pi)
    if kind == LearnerKind.R:
        residual = a - pi
        if np.any(np.abs(residual) < R_LEARNER_FLOOR):
            raise NumericalDegeneracyError("R-learner pseudo-outcome divides by a - pi = 0")
        mu = (1.0 - pi) * mu0 + pi * mu1
        return _out((y - mu) / residual)
    # IVW shares the DR pseudo-outcome
    return _out(_dr_pseudo_outcome(a, y, mu0, mu1, pi))


def intercept_c_star(rho, phi) -> float:
    """rho-weighted mean of the pseudo-outcomes"""
    rho = np.asarray(rho, dtype=float)
    phi = np.asarray(phi, dtype=float)
    if rho.shape != phi.shape:
        raise DomainError("rho and phi differ in length")
    total = float(np.sum(rho))
    if total == 0.0:
        raise NumericalDegeneracyError("sum of rho is zero, intercept undefined")
    return float(np.sum(rho * phi) / total)
