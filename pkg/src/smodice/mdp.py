"""Finite discounted MDPs, stochastic policies and exact occupancy measures."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

_STOCH_TOL = 1e-12


class MdpValidationError(ValueError):
    """Raised when an MDP or policy violates its probability invariants."""


class OccupancySolveError(RuntimeError):
    """The flow system could not be solved to the required accuracy."""


def _check_rows(probs: np.ndarray, what: str, tol: float = _STOCH_TOL) -> None:
    if not np.all(np.isfinite(probs)):
        raise MdpValidationError(f"{what} contains non-finite entries")
    if probs.min(initial=0.0) < 0.0 or probs.max(initial=0.0) > 1.0 + tol:
        raise MdpValidationError(f"{what} has entries outside [0, 1]")
    sums = np.atleast_1d(probs.sum(axis=-1))
    bad = np.argwhere(np.abs(sums - 1.0) > tol)
    if bad.size:
        idx = tuple(int(i) for i in bad[0])
        where = f"{what} row {idx}" if probs.ndim > 1 else what
        raise MdpValidationError(f"{where} sums to {float(sums[idx]):.15g}, expected 1")


@dataclass(frozen=True)
class TabularMdp:
    """Finite MDP with transition tensor ``transition[s, a, s']``.

    There is no reward: the imitation objective builds its own.
    """

    transition: np.ndarray
    initial_dist: np.ndarray
    discount: float

    def __post_init__(self):
        transition = np.array(self.transition, dtype=float)
        initial = np.array(self.initial_dist, dtype=float)
        if transition.ndim != 3 or transition.shape[0] != transition.shape[2]:
            raise MdpValidationError(
                f"transition must have shape (S, A, S), got {transition.shape}"
            )
        if transition.shape[0] < 1 or transition.shape[1] < 1:
            raise MdpValidationError("need at least one state and one action")
        if initial.shape != (transition.shape[0],):
            raise MdpValidationError(
                f"initial_dist has shape {initial.shape}, expected ({transition.shape[0]},)"
            )
        if not 0.0 < float(self.discount) < 1.0:
            raise MdpValidationError(
                f"discount must lie strictly inside (0, 1), got {self.discount}"
            )
        _check_rows(transition, "transition")
        _check_rows(initial, "initial_dist")
        transition.flags.writeable = False
        initial.flags.writeable = False
        object.__setattr__(self, "transition", transition)
        object.__setattr__(self, "initial_dist", initial)
        object.__setattr__(self, "discount", float(self.discount))

    @property
    def num_states(self) -> int:
        return self.transition.shape[0]

    @property
    def num_actions(self) -> int:
        return self.transition.shape[1]

    @property
    def gamma(self) -> float:
        return self.discount

    def expected_next(self, values: np.ndarray) -> np.ndarray:
        """(TV)(s, a) = sum_s' T(s'|s,a) V(s')."""
        return self.transition @ values

    def pushforward(self, d_sa: np.ndarray) -> np.ndarray:
        """Adjoint of ``expected_next``: sum_{s,a} T(s'|s,a) d(s,a)."""
        return np.einsum("ijk,ij->k", self.transition, d_sa)

    def to_dict(self) -> dict:
        return {
            "num_states": self.num_states,
            "num_actions": self.num_actions,
            "gamma": self.discount,
            "initial_dist": self.initial_dist.tolist(),
            "transition": self.transition.tolist(),
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "TabularMdp":
        try:
            mdp = cls(
                transition=np.asarray(doc["transition"], dtype=float),
                initial_dist=np.asarray(doc["initial_dist"], dtype=float),
                discount=float(doc["gamma"]),
            )
        except KeyError as exc:
            raise MdpValidationError(f"MDP document is missing field {exc}") from None
        if (doc.get("num_states", mdp.num_states), doc.get("num_actions", mdp.num_actions)) != (
            mdp.num_states,
            mdp.num_actions,
        ):
            raise MdpValidationError("declared num_states/num_actions disagree with transition")
        return mdp

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict()))

    @classmethod
    def load(cls, path) -> "TabularMdp":
        return cls.from_dict(json.loads(Path(path).read_text()))


@dataclass(frozen=True)
class TabularPolicy:
    """Stochastic policy ``probs[s, a] = pi(a|s)``."""

    probs: np.ndarray

    def __post_init__(self):
        probs = np.array(self.probs, dtype=float)
        if probs.ndim != 2:
            raise MdpValidationError(f"policy must be (S, A), got shape {probs.shape}")
        _check_rows(probs, "policy")
        probs.flags.writeable = False
        object.__setattr__(self, "probs", probs)

    @property
    def num_states(self) -> int:
        return self.probs.shape[0]

    @property
    def num_actions(self) -> int:
        return self.probs.shape[1]

    @classmethod
    def uniform(cls, num_states: int, num_actions: int) -> "TabularPolicy":
        return cls(np.full((num_states, num_actions), 1.0 / num_actions))

    @classmethod
    def deterministic(cls, actions, num_actions: int) -> "TabularPolicy":
        actions = np.asarray(actions, dtype=int)
        probs = np.zeros((actions.size, num_actions))
        probs[np.arange(actions.size), actions] = 1.0
        return cls(probs)

    def greedy_actions(self) -> np.ndarray:
        return np.argmax(self.probs, axis=1)


@dataclass(frozen=True)
class OccupancyMeasure:
    """Normalized state-action visitation ``d[s, a]``.

    ``flow_residual`` is the max-norm violation of the Bellman flow
    constraint for the MDP the measure was computed or estimated against.
    """

    d: np.ndarray
    flow_residual: float = field(default=0.0)

    def __post_init__(self):
        d = np.array(self.d, dtype=float)
        if d.ndim != 2:
            raise ValueError(f"occupancy must be (S, A), got shape {d.shape}")
        if d.min(initial=0.0) < -1e-12:
            raise ValueError(f"occupancy has negative entry {d.min():.3g}")
        d = np.clip(d, 0.0, None)
        total = d.sum()
        if abs(total - 1.0) > 1e-9:
            raise ValueError(f"occupancy sums to {total:.12g}, expected 1")
        d.flags.writeable = False
        object.__setattr__(self, "d", d)
        object.__setattr__(self, "flow_residual", float(self.flow_residual))

    @property
    def vector(self) -> np.ndarray:
        return self.d.ravel()

    @property
    def state_marginal(self) -> np.ndarray:
        return self.d.sum(axis=1)


def flow_residual(mdp: TabularMdp, d_sa: np.ndarray) -> float:
    """Max-norm of  sum_a d(s,a) - (1-g) mu0(s) - g sum T(s|s~,a~) d(s~,a~)."""
    gamma = mdp.discount
    resid = d_sa.sum(axis=1) - (1 - gamma) * mdp.initial_dist - gamma * mdp.pushforward(d_sa)
    return float(np.abs(resid).max())


def compute_occupancy(mdp: TabularMdp, policy: TabularPolicy) -> OccupancyMeasure:
    """Exact discounted occupancy of ``policy`` by a dense |S||A| linear solve.

    Solves d = (1-g) mu0 * pi + g * P_pi^T d with
    P_pi[(s,a), (s',a')] = T(s'|s,a) pi(a'|s').
    """
    S, A = mdp.num_states, mdp.num_actions
    if policy.probs.shape != (S, A):
        raise MdpValidationError(
            f"policy shape {policy.probs.shape} does not match MDP ({S}, {A})"
        )
    gamma = mdp.discount
    pi = policy.probs
    p_pi = (mdp.transition[:, :, :, None] * pi[None, None, :, :]).reshape(S * A, S * A)
    rhs = (1 - gamma) * (mdp.initial_dist[:, None] * pi).ravel()
    d = np.linalg.solve(np.eye(S * A) - gamma * p_pi.T, rhs).reshape(S, A)
    d = np.clip(d, 0.0, None)
    d /= d.sum()
    resid = flow_residual(mdp, d)
    if resid > 1e-6:
        raise OccupancySolveError(f"occupancy solve left flow residual {resid:.3g}")
    return OccupancyMeasure(d, resid)


def state_occupancy(mdp: TabularMdp, policy: TabularPolicy) -> np.ndarray:
    return compute_occupancy(mdp, policy).state_marginal


def marginalize_states(occ: OccupancyMeasure) -> np.ndarray:
    return occ.d.sum(axis=1)


def policy_from_occupancy(occ: OccupancyMeasure, unvisited: str = "uniform") -> TabularPolicy:
    """Recover pi(a|s) = d(s,a) / d(s).

    States with zero mass get a uniform row, or action 0 when
    ``unvisited="first"``.
    """
    d = occ.d
    mass = d.sum(axis=1, keepdims=True)
    fallback = np.zeros_like(d)
    if unvisited == "uniform":
        fallback[:] = 1.0 / d.shape[1]
    elif unvisited == "first":
        fallback[:, 0] = 1.0
    else:
        raise ValueError(f"unknown unvisited-state mode {unvisited!r}")
    with np.errstate(invalid="ignore", divide="ignore"):
        probs = np.where(mass > 0, d / np.where(mass > 0, mass, 1.0), fallback)
    return TabularPolicy(probs / probs.sum(axis=1, keepdims=True))


def random_mdp(
    num_states: int,
    num_actions: int,
    gamma: float,
    rng: np.random.Generator,
    concentration: float = 1.0,
) -> TabularMdp:
    """Dense random MDP with Dirichlet transition rows and initial distribution."""
    transition = rng.dirichlet(np.full(num_states, concentration), size=(num_states, num_actions))
    initial = rng.dirichlet(np.ones(num_states))
    return TabularMdp(transition, initial, gamma)


def random_policy(num_states: int, num_actions: int, rng: np.random.Generator) -> TabularPolicy:
    return TabularPolicy(rng.dirichlet(np.ones(num_actions), size=num_states))
