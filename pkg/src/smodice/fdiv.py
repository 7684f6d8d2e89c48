"""f-divergences used for occupancy regularization and their convex conjugates.

Two generators are registered, both over density ratios x >= 0:

* chi-squared, ``f(x) = (x - 1)^2 / 2``. On x >= 0 its conjugate is
  ``f*(y) = max(0, y + 1)^2 / 2 - 1/2`` with ``f*'(y) = max(0, y + 1)``.
* KL, ``f(x) = x log x`` with ``f*(y) = f*'(y) = exp(y - 1)``.

``chi2-quadratic`` lets the chi-squared ratio range over all reals. Its
conjugate is the plain quadratic ``(y + 1)^2 / 2 - 1/2``, which is what the
normal-equation solution minimizes; weights are still floored at zero
afterwards.

For KL the dual objective never uses the pointwise conjugate. Restricted to
the simplex the conjugate of the divergence is a log-sum-exp, see
:func:`conjugate_kl_expectation`.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass
from typing import Callable

import numpy as np
from scipy.special import logsumexp, xlogy


class DivergenceKind(enum.Enum):
    CHI_SQUARED = "chi2"
    KL = "kl"


class SupportMismatchError(ValueError):
    """p puts mass where q has none."""


@dataclass(frozen=True)
class FDivergenceSpec:
    kind: DivergenceKind
    f: Callable[[np.ndarray], np.ndarray]
    f_conj: Callable[[np.ndarray], np.ndarray]
    f_conj_deriv: Callable[[np.ndarray], np.ndarray]
    name: str = ""

    def __post_init__(self):
        if not self.name:
            object.__setattr__(self, "name", self.kind.value)


def _chi2_f(x):
    return 0.5 * (np.asarray(x, dtype=float) - 1.0) ** 2


def _chi2_conj(y):
    return 0.5 * np.maximum(0.0, np.asarray(y, dtype=float) + 1.0) ** 2 - 0.5


def _chi2_conj_deriv(y):
    return np.maximum(0.0, np.asarray(y, dtype=float) + 1.0)


def _chi2q_conj(y):
    return 0.5 * (np.asarray(y, dtype=float) + 1.0) ** 2 - 0.5


def _chi2q_conj_deriv(y):
    return np.asarray(y, dtype=float) + 1.0


def _kl_f(x):
    x = np.asarray(x, dtype=float)
    return xlogy(x, x)


def _kl_conj(y):
    return np.exp(np.asarray(y, dtype=float) - 1.0)


CHI2 = FDivergenceSpec(DivergenceKind.CHI_SQUARED, _chi2_f, _chi2_conj, _chi2_conj_deriv)
CHI2_QUADRATIC = FDivergenceSpec(
    DivergenceKind.CHI_SQUARED, _chi2_f, _chi2q_conj, _chi2q_conj_deriv, name="chi2-quadratic"
)
KL = FDivergenceSpec(DivergenceKind.KL, _kl_f, _kl_conj, _kl_conj)

_REGISTRY = {spec.name: spec for spec in (CHI2, CHI2_QUADRATIC, KL)}


def get_divergence(name: str | DivergenceKind | FDivergenceSpec) -> FDivergenceSpec:
    if isinstance(name, FDivergenceSpec):
        return name
    if isinstance(name, DivergenceKind):
        name = name.value
    key = str(name).lower().replace("-", "").replace("_", "")
    aliases = {
        "chi2": "chi2",
        "chisquared": "chi2",
        "chi2quadratic": "chi2-quadratic",
        "kl": "kl",
    }
    if key not in aliases:
        raise ValueError(f"unknown divergence {name!r}; expected one of {sorted(_REGISTRY)}")
    return _REGISTRY[aliases[key]]


def divergence(spec: FDivergenceSpec, p, q) -> float:
    """D_f(p || q) = sum_x q(x) f(p(x) / q(x)) over a finite domain.

    Elements with q(x) = 0 must also have p(x) = 0; they contribute nothing.
    """
    p = np.asarray(p, dtype=float).ravel()
    q = np.asarray(q, dtype=float).ravel()
    if p.shape != q.shape:
        raise ValueError(f"p and q differ in shape: {p.shape} vs {q.shape}")
    off = np.flatnonzero((q <= 0) & (p > 0))
    if off.size:
        i = int(off[0])
        raise SupportMismatchError(
            f"p({i}) = {p[i]:.6g} but q({i}) = 0; p must be absolutely continuous w.r.t. q"
        )
    mask = q > 0
    ratio = p[mask] / q[mask]
    return float(np.sum(q[mask] * spec.f(ratio)))


def conjugate_chi2(y):
    """Return ((y + 1)^2 / 2, y + 1), the chi-squared dual integrand as it
    enters the normal equations.

    This is the unconstrained conjugate plus 1/2; the constant never moves
    the minimizer. ``CHI2.f_conj`` is the exact conjugate on ratios >= 0.
    """
    y = np.asarray(y, dtype=float)
    return 0.5 * (y + 1.0) ** 2, y + 1.0


def conjugate_kl_expectation(values, weights) -> float:
    """log E_{i ~ weights}[exp(values_i)], shifted by the max for stability."""
    values = np.asarray(values, dtype=float)
    weights = np.asarray(weights, dtype=float)
    return float(logsumexp(values, b=weights))


def primal_weights(spec: FDivergenceSpec, advantages, d_O) -> np.ndarray:
    """Importance weights d*/d^O recovered from dual advantages.

    chi2: max(0, adv + 1), negative ratios floored at zero.
    KL: exp(adv) / E_{d^O}[exp(adv)], so that sum d^O * xi = 1.
    """
    adv = np.asarray(advantages, dtype=float)
    d_O = np.asarray(d_O, dtype=float)
    if spec.kind is DivergenceKind.CHI_SQUARED:
        return np.maximum(0.0, adv + 1.0)
    log_norm = logsumexp(adv, b=d_O)
    return np.exp(adv - log_norm)


def dual_conjugate_term(spec: FDivergenceSpec, advantages, d_O) -> float:
    """E_{d^O}[f*(adv)] for chi2, log E_{d^O}[exp(adv)] for KL."""
    adv = np.asarray(advantages, dtype=float)
    d_O = np.asarray(d_O, dtype=float)
    if spec.kind is DivergenceKind.CHI_SQUARED:
        return float(np.sum(d_O * spec.f_conj(adv)))
    return conjugate_kl_expectation(adv, d_O)


def dual_conjugate_grad(spec: FDivergenceSpec, advantages, d_O) -> np.ndarray:
    """Gradient of :func:`dual_conjugate_term` with respect to the advantages."""
    adv = np.asarray(advantages, dtype=float)
    d_O = np.asarray(d_O, dtype=float)
    if spec.kind is DivergenceKind.CHI_SQUARED:
        return d_O * spec.f_conj_deriv(adv)
    return d_O * primal_weights(spec, adv, d_O)
