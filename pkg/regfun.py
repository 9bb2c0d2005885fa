"""
Overlap-adaptive regularization functions.

lambda_fn and dropout_p map the overlap weight nu = pi(1 - pi) to a penalty
level. The score kernels are the pathwise derivatives of those levels along
the submodel pi_t = pi + t(a - pi), evaluated at a sample's own covariate.
"""

import logging
import warnings
from dataclasses import dataclass
from enum import Enum
from typing import Optional

import numpy as np

from errors import DomainError, DegenerateRescalingWarning

logger = logging.getLogger(__name__)

# Rounding slack when nu is computed as pi * (1 - pi)
NU_TOLERANCE = 1e-15
NU_MAX = 0.25


class RegKind(str, Enum):
    MULTIPLICATIVE = 'm'
    LOGARITHMIC = 'log'
    SQUARED_MULTIPLICATIVE = 'm2'


class RegMode(str, Enum):
    CR = 'CR'
    OAR = 'OAR'
    DOAR = 'dOAR'


@dataclass(frozen=True)
class RegSchedule:
    kind: RegKind = RegKind.MULTIPLICATIVE
    base: float = 0.5
    gamma: float = 1.0
    mode: RegMode = RegMode.OAR
    trim_lo: float = 0.05
    clip_alpha: float = 1.0

    def validate(self, dropout: bool = False) -> 'RegSchedule':
        """Check field ranges; dropout schedules need base < 1"""
        if not self.base > 0:
            raise DomainError(f"base level must be positive, got {self.base}")
        if dropout and not self.base < 1:
            raise DomainError(f"dropout base must be below 1, got {self.base}")
        if not 0.0 <= self.gamma <= 1.0:
            raise DomainError(f"gamma must lie in [0, 1], got {self.gamma}")
        if not 0.0 < self.trim_lo < 0.5:
            raise DomainError(f"trim_lo must lie in (0, 0.5), got {self.trim_lo}")
        if self.clip_alpha < 0:
            raise DomainError(f"clip_alpha must be nonnegative, got {self.clip_alpha}")
        return self

    @property
    def effective_gamma(self) -> float:
        """Constant regularization ignores gamma"""
        return 0.0 if self.mode == RegMode.CR else self.gamma


@dataclass(frozen=True)
class Rescaling:
    values: np.ndarray
    m_hat: float
    slope: float
    # 'lower' uses base/m_hat, 'upper' uses (1 - base)/(1 - m_hat)
    branch: Optional[str] = None
    degenerate: bool = False


def overlap(pi):
    """nu = pi(1 - pi)"""
    pi = np.asarray(pi, dtype=float)
    return pi * (1.0 - pi)


def _check_nu(nu) -> np.ndarray:
    nu = np.asarray(nu, dtype=float)
    if np.any(~np.isfinite(nu)) or np.any(nu <= 0) or np.any(nu > NU_MAX + NU_TOLERANCE):
        raise DomainError("overlap weight nu must lie in (0, 1/4]")
    return np.minimum(nu, NU_MAX)


def _check_pi(pi) -> np.ndarray:
    pi = np.asarray(pi, dtype=float)
    if np.any(~np.isfinite(pi)) or np.any(pi <= 0) or np.any(pi >= 1):
        raise DomainError("propensity must lie strictly inside (0, 1)")
    return pi


def _scalar_or_array(value):
    return float(value) if np.ndim(value) == 0 else value


def lambda_fn(kind: RegKind, nu):
    """Regularization level lambda(nu); zero at perfect overlap"""
    kind = RegKind(kind)
    nu = _check_nu(nu)
    if kind == RegKind.MULTIPLICATIVE:
        lam = 1.0 / (4.0 * nu) - 1.0
    elif kind == RegKind.LOGARITHMIC:
        lam = -np.log(4.0 * nu)
    else:
        lam = 1.0 / (16.0 * nu ** 2) - 1.0
    return _scalar_or_array(np.maximum(lam, 0.0))


def dropout_p(kind: RegKind, nu):
    """Dropout probability lambda/(lambda + 1) in closed form"""
    kind = RegKind(kind)
    nu = _check_nu(nu)
    if kind == RegKind.MULTIPLICATIVE:
        p = 1.0 - 4.0 * nu
    elif kind == RegKind.LOGARITHMIC:
        p = 1.0 - 1.0 / (1.0 - np.log(4.0 * nu))
    else:
        p = 1.0 - 16.0 * nu ** 2
    return _scalar_or_array(np.maximum(p, 0.0))


def lambda_from_p(p):
    """Noise-equivalent level p/(1 - p) of a dropout probability"""
    p = np.asarray(p, dtype=float)
    if np.any(p < 0) or np.any(p >= 1):
        raise DomainError("dropout probability must lie in [0, 1)")
    return _scalar_or_array(p / (1.0 - p))


def _trimmed_mean(raw: np.ndarray, trim: np.ndarray) -> float:
    if raw.shape != trim.shape:
        raise DomainError("raw levels and trimming indicator differ in length")
    if not np.any(trim == 1):
        raise DomainError("every row is trimmed out, cannot rescale")
    return float(np.mean(raw[trim == 1]))


def rescale_lambda(raw, trim, base_lambda: float, gamma: float) -> Rescaling:
    """Affine rescaling so trimmed-in rows average to base_lambda"""
    raw = np.asarray(raw, dtype=float)
    trim = np.asarray(trim, dtype=float)
    m_hat = _trimmed_mean(raw, trim)
    if m_hat == 0.0:
        # Estimated perfect overlap everywhere: nothing to adapt to
        return Rescaling(np.full(raw.shape, float(base_lambda)), m_hat, 0.0)
    slope = base_lambda / m_hat
    values = base_lambda + gamma * trim * slope * (raw - m_hat)
    return Rescaling(values, m_hat, slope, 'lower')


def rescale_p(raw_p, trim, base_p: float, gamma: float) -> Rescaling:
    """Affine rescaling of dropout probabilities with the min-slope rule"""
    raw_p = np.asarray(raw_p, dtype=float)
    trim = np.asarray(trim, dtype=float)
    m_hat = _trimmed_mean(raw_p, trim)
    if m_hat <= 0.0 or m_hat >= 1.0:
        warnings.warn(
            f"mean dropout probability {m_hat} is degenerate, using constant {base_p}",
            DegenerateRescalingWarning,
        )
        return Rescaling(np.full(raw_p.shape, float(base_p)), m_hat, 0.0, None, True)
    lower = base_p / m_hat
    upper = (1.0 - base_p) / (1.0 - m_hat)
    if lower <= upper:
        slope, branch = lower, 'lower'
    else:
        slope, branch = upper, 'upper'
    values = base_p + gamma * trim * slope * (raw_p - m_hat)
    return Rescaling(np.clip(values, 0.0, np.nextafter(1.0, 0.0)), m_hat, slope, branch)


def _direction(a, pi) -> np.ndarray:
    # (a - pi)(2 pi - 1) = -IF(nu)
    a = np.asarray(a, dtype=float)
    return (a - pi) * (2.0 * pi - 1.0)


def score_kernel_lambda(kind: RegKind, a, pi):
    """Pathwise derivative of lambda(nu(pi_t)) at t = 0"""
    kind = RegKind(kind)
    pi = _check_pi(pi)
    nu = overlap(pi)
    direction = _direction(a, pi)
    if kind == RegKind.MULTIPLICATIVE:
        k = direction / (4.0 * nu ** 2)
    elif kind == RegKind.LOGARITHMIC:
        k = direction / nu
    else:
        k = direction / (8.0 * nu ** 3)
    return _scalar_or_array(k)


def score_kernel_p(kind: RegKind, a, pi):
    """Pathwise derivative of p(nu(pi_t)) at t = 0"""
    kind = RegKind(kind)
    pi = _check_pi(pi)
    nu = overlap(pi)
    direction = _direction(a, pi)
    if kind == RegKind.MULTIPLICATIVE:
        k = 4.0 * direction
    elif kind == RegKind.LOGARITHMIC:
        k = direction / (nu * (1.0 - np.log(4.0 * nu)) ** 2)
    else:
        k = 32.0 * nu * direction
    return _scalar_or_array(k)


def rescaled_score_lambda(kind: RegKind, a, pi, m_hat: float, base_lambda: float,
                          gamma: float, atom_mass: float = 1.0):
    """
    Influence of the rescaled level at the sample's own covariate.

    atom_mass < 1 gives the exact derivative for a point mass on an atom of a
    discrete covariate law; the default is the smoothed kernel.
    """
    if not m_hat > 0:
        raise DomainError(f"m_hat must be positive, got {m_hat}")
    pi = _check_pi(pi)
    k = np.asarray(score_kernel_lambda(kind, a, pi))
    lam = np.asarray(lambda_fn(kind, overlap(pi)))
    if_mean = k + lam - m_hat
    score = gamma * base_lambda * (k / (atom_mass * m_hat) - lam * if_mean / m_hat ** 2)
    return _scalar_or_array(score)


def rescaled_score_p(kind: RegKind, a, pi, m_hat: float, base_p: float,
                     gamma: float, branch: Optional[str] = None, atom_mass: float = 1.0):
    """Influence of the rescaled dropout probability, on the active slope branch"""
    if not 0.0 < m_hat < 1.0:
        raise DomainError(f"m_hat must lie in (0, 1), got {m_hat}")
    if branch is None:
        branch = 'lower' if base_p / m_hat <= (1.0 - base_p) / (1.0 - m_hat) else 'upper'
    pi = _check_pi(pi)
    k = np.asarray(score_kernel_p(kind, a, pi))
    p = np.asarray(dropout_p(kind, overlap(pi)))
    if_mean = k + p - m_hat
    if branch == 'lower':
        score = gamma * base_p * (k / (atom_mass * m_hat) - p * if_mean / m_hat ** 2)
    elif branch == 'upper':
        score = gamma * (1.0 - base_p) * (
            k / (atom_mass * (1.0 - m_hat)) - (1.0 - p) * if_mean / (1.0 - m_hat) ** 2
        )
    else:
        raise DomainError(f"unknown slope branch '{branch}'")
    return _scalar_or_array(score)
