"""State rewards R(s) = log(d^E(s) / d^O(s)).

Two routes: smoothed empirical ratios, or the logit of a per-state logistic
classifier trained to separate expert states (label 1) from offline states
(label 0). At the classifier optimum c(s) = d^E / (d^E + d^O), so its logit
is the same log-ratio.
"""

from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass

import numpy as np
from scipy.special import expit, log_expit

from smodice.datasets import ExpertObservations

log = logging.getLogger(__name__)

DEFAULT_CLIP = (-10.0, 10.0)


class TrainingDivergedError(RuntimeError):
    def __init__(self, step: int, loss: float):
        super().__init__(f"classifier loss became {loss} at step {step}")
        self.step = step


class CoverageWarning(UserWarning):
    """Expert mass on states the offline data never visits."""


@dataclass(frozen=True)
class RewardVector:
    r: np.ndarray
    clip_bounds: tuple = DEFAULT_CLIP

    def __post_init__(self):
        r = np.array(self.r, dtype=float)
        lo, hi = self.clip_bounds
        if not np.all(np.isfinite(r)):
            raise ValueError("reward has non-finite entries")
        if r.min(initial=lo) < lo or r.max(initial=hi) > hi:
            raise ValueError("reward entries outside clip bounds")
        r.flags.writeable = False
        object.__setattr__(self, "r", r)
        object.__setattr__(self, "clip_bounds", (float(lo), float(hi)))


def reward_from_counts(d_E, d_O, epsilon: float = 1e-6, clip_bounds=DEFAULT_CLIP) -> RewardVector:
    """r(s) = log((d_E + eps) / (d_O + eps)), clipped."""
    d_E = np.asarray(d_E, dtype=float)
    d_O = np.asarray(d_O, dtype=float)
    uncovered = np.flatnonzero((d_E > 0) & (d_O <= 0))
    if uncovered.size:
        warnings.warn(
            f"expert states {uncovered.tolist()} have no offline coverage",
            CoverageWarning,
            stacklevel=2,
        )
    with np.errstate(divide="ignore"):
        r = np.log(d_E + epsilon) - np.log(d_O + epsilon)
    return RewardVector(np.clip(r, *clip_bounds), clip_bounds)


def train_classifier(
    expert_states: ExpertObservations,
    offline_states,
    num_states: int,
    steps: int = 20000,
    lr: float = 2.0,
    clip_bounds=DEFAULT_CLIP,
    expert_weights=None,
    offline_weights=None,
) -> RewardVector:
    """Fit one logit per state by full-batch gradient descent on the
    expert-vs-offline cross-entropy and return the clipped logits.

    The loss averages over each sample set separately, so with one-hot
    features it decouples into per-state terms
    -p_E(s) log c(s) - p_O(s) log(1 - c(s)).
    Optional per-sample weights (e.g. gamma^t for trajectory samples) turn
    the averages into weighted ones.
    """
    expert = np.asarray(getattr(expert_states, "states", expert_states), dtype=np.int64)
    offline = np.asarray(offline_states, dtype=np.int64).ravel()
    if expert.size == 0 or offline.size == 0:
        raise ValueError("expert and offline state sets must be non-empty")
    if expert.max() >= num_states or offline.max() >= num_states:
        raise ValueError(f"state index out of range for {num_states} states")
    p_E = np.bincount(expert, weights=expert_weights, minlength=num_states)
    p_O = np.bincount(offline, weights=offline_weights, minlength=num_states)
    p_E, p_O = p_E / p_E.sum(), p_O / p_O.sum()
    lo, hi = clip_bounds
    theta = np.zeros(num_states)
    for step in range(steps):
        c = expit(theta)
        grad = (p_E + p_O) * c - p_E
        theta = np.clip(theta - lr * grad, lo, hi)
        if step % 1000 == 0 or step == steps - 1:
            loss = -np.sum(p_E * log_expit(theta) + p_O * log_expit(-theta))
            if not np.isfinite(loss):
                raise TrainingDivergedError(step, float(loss))
    log.debug("classifier trained for %d steps", steps)
    return RewardVector(theta, clip_bounds)
