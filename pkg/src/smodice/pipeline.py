"""End-to-end offline imitation: data -> reward -> dual values -> policy."""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from smodice import fdiv
from smodice.datasets import (
    ExpertObservations,
    TrajectoryDataset,
    estimate_behavior_policy,
    estimate_mdp,
    estimate_occupancy,
)
from smodice.discriminator import RewardVector, reward_from_counts, train_classifier
from smodice.mdp import OccupancyMeasure, TabularMdp, TabularPolicy, compute_occupancy
from smodice.solver import SmodiceSolution, solve_closed_form_chi2, solve_iterative

log = logging.getLogger(__name__)

METHODS = ("closed-form", "iterative")
REWARDS = ("counts", "classifier")
OCCUPANCIES = ("model", "empirical")


@dataclass(frozen=True)
class PipelineResult:
    solution: SmodiceSolution
    reward: RewardVector
    mdp_hat: TabularMdp
    d_O: OccupancyMeasure
    d_E: np.ndarray
    behavior: TabularPolicy

    def dump_stages(self, directory) -> list:
        """Write every intermediate artifact as JSON; return the paths."""
        out = Path(directory)
        out.mkdir(parents=True, exist_ok=True)
        docs = {
            "mdp_hat.json": self.mdp_hat.to_dict(),
            "d_O.json": {"d": self.d_O.d.tolist(), "flow_residual": self.d_O.flow_residual},
            "d_E.json": {"d": self.d_E.tolist()},
            "behavior.json": {"probs": self.behavior.probs.tolist()},
            "reward.json": {"r": self.reward.r.tolist(), "clip_bounds": list(self.reward.clip_bounds)},
            "v_star.json": {"v": np.asarray(self.solution.v_star).tolist()},
        }
        paths = []
        for name, doc in docs.items():
            path = out / name
            path.write_text(json.dumps(doc, indent=2))
            paths.append(path)
        return paths


def offline_occupancy(
    data: TrajectoryDataset, num_states: int, num_actions: int, gamma: float, mode: str = "model"
):
    """Return (mdp_hat, behavior_hat, d_O).

    ``model`` takes d_O as the exact occupancy of the estimated behavior
    policy in the estimated MDP, so it satisfies the flow constraints of the
    MDP the solver sees. ``empirical`` uses discount-weighted visit counts.
    """
    if mode not in OCCUPANCIES:
        raise ValueError(f"unknown occupancy mode {mode!r}; expected one of {OCCUPANCIES}")
    data.check_bounds(num_states, num_actions)
    mdp_hat = estimate_mdp(data, num_states, num_actions, gamma)
    behavior = estimate_behavior_policy(data, num_states, num_actions)
    if mode == "model":
        d_O = compute_occupancy(mdp_hat, behavior)
    else:
        d_O = estimate_occupancy(data, gamma, num_states, num_actions, mdp=mdp_hat)
    return mdp_hat, behavior, d_O


def run_pipeline(
    data: TrajectoryDataset,
    d_E,
    num_states: int,
    num_actions: int,
    gamma: float,
    divergence="chi2",
    method: str = "closed-form",
    reward_mode: str = "counts",
    expert_states: ExpertObservations | None = None,
    expert_data: TrajectoryDataset | None = None,
    occupancy: str = "model",
    steps: int = 20000,
    lr: float | None = None,
    seed: int = 0,
    classifier_steps: int = 20000,
) -> PipelineResult:
    """Estimate the MDP and d_O, build the reward, solve, extract the policy.

    ``reward_mode="classifier"`` needs ``expert_states`` (or
    ``expert_data``); it is trained against the offline states of ``data``.
    Trajectory samples are weighted by gamma^t so both sides follow
    discounted occupancies.
    """
    spec = fdiv.get_divergence(divergence)
    if method not in METHODS:
        raise ValueError(f"unknown method {method!r}; expected one of {METHODS}")
    if method == "closed-form" and spec.kind is not fdiv.DivergenceKind.CHI_SQUARED:
        raise ValueError("the closed-form solver only supports chi-squared")
    if reward_mode not in REWARDS:
        raise ValueError(f"unknown reward mode {reward_mode!r}; expected one of {REWARDS}")
    d_E = np.asarray(d_E, dtype=float)
    if d_E.shape != (num_states,):
        raise ValueError(f"d_E has shape {d_E.shape}, expected ({num_states},)")

    mdp_hat, behavior, d_O = offline_occupancy(data, num_states, num_actions, gamma, occupancy)
    if reward_mode == "counts":
        reward = reward_from_counts(d_E, d_O.state_marginal)
    else:
        if expert_data is not None:
            expert, expert_w = expert_data.states, gamma ** expert_data.timesteps()
        elif expert_states is not None:
            expert, expert_w = expert_states.states, None
        else:
            raise ValueError("classifier rewards need expert state samples")
        reward = train_classifier(
            expert,
            data.states,
            num_states,
            steps=classifier_steps,
            expert_weights=expert_w,
            offline_weights=gamma ** data.timesteps(),
        )
    log.info("reward range [%.3f, %.3f]", reward.r.min(), reward.r.max())

    if method == "closed-form":
        solution = solve_closed_form_chi2(mdp_hat, d_O, reward, refine=spec is not fdiv.CHI2_QUADRATIC)
    else:
        solution = solve_iterative(mdp_hat, d_O, reward, spec, steps=steps, lr=lr, seed=seed)
    return PipelineResult(solution, reward, mdp_hat, d_O, d_E, behavior)
