"""Logged trajectories and the empirical quantities estimated from them.

Episodes are stored flat: ``states``, ``actions`` and ``next_states`` are
concatenated over episodes and ``episode_starts`` holds the offset of each
episode. Rollouts are vectorized across episodes.
"""

from __future__ import annotations

import enum
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from smodice.mdp import OccupancyMeasure, TabularMdp, TabularPolicy, flow_residual


class DatasetFormatError(ValueError):
    pass


def default_horizon(gamma: float, tail: float = 1e-4) -> int:
    """Smallest H with gamma^H < tail."""
    return int(math.ceil(math.log(tail) / math.log(gamma)))


@dataclass(frozen=True)
class TrajectoryDataset:
    states: np.ndarray
    actions: np.ndarray
    next_states: np.ndarray
    episode_starts: np.ndarray
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        arrays = [np.asarray(a, dtype=np.int64) for a in (self.states, self.actions, self.next_states)]
        if len({a.shape for a in arrays}) != 1 or arrays[0].ndim != 1:
            raise DatasetFormatError("states, actions and next_states must be equal-length 1-D arrays")
        starts = np.asarray(self.episode_starts, dtype=np.int64)
        n = arrays[0].size
        if starts.size == 0 or starts[0] != 0 or np.any(np.diff(starts) <= 0) or starts[-1] >= n:
            raise DatasetFormatError("episodes must be non-empty and episode_starts increasing from 0")
        for name, a in zip(("states", "actions", "next_states"), arrays):
            if a.min() < 0:
                raise DatasetFormatError(f"negative index in {name}")
        for a in (*arrays, starts):
            a.flags.writeable = False
        object.__setattr__(self, "states", arrays[0])
        object.__setattr__(self, "actions", arrays[1])
        object.__setattr__(self, "next_states", arrays[2])
        object.__setattr__(self, "episode_starts", starts)
        object.__setattr__(self, "metadata", dict(self.metadata))
        S, A = self.metadata.get("num_states"), self.metadata.get("num_actions")
        if S is not None:
            self.check_bounds(int(S), int(A) if A is not None else None)

    @classmethod
    def from_episodes(cls, episodes, metadata=None) -> "TrajectoryDataset":
        """Build from an iterable of (states, actions, next_states) triples."""
        s, a, ns, starts = [], [], [], []
        offset = 0
        for ep in episodes:
            es, ea, ens = (np.asarray(x, dtype=np.int64) for x in ep)
            starts.append(offset)
            offset += es.size
            s.append(es), a.append(ea), ns.append(ens)
        if not starts:
            raise DatasetFormatError("dataset has no episodes")
        return cls(np.concatenate(s), np.concatenate(a), np.concatenate(ns), np.array(starts), metadata or {})

    def check_bounds(self, num_states: int, num_actions: int | None = None) -> None:
        if max(self.states.max(), self.next_states.max()) >= num_states:
            raise DatasetFormatError(f"state index out of range for {num_states} states")
        if num_actions is not None and self.actions.max() >= num_actions:
            raise DatasetFormatError(f"action index out of range for {num_actions} actions")

    @property
    def num_episodes(self) -> int:
        return self.episode_starts.size

    @property
    def num_transitions(self) -> int:
        return self.states.size

    @property
    def episode_ends(self) -> np.ndarray:
        return np.append(self.episode_starts[1:], self.num_transitions)

    def timesteps(self) -> np.ndarray:
        """Within-episode time index of every transition."""
        lengths = self.episode_ends - self.episode_starts
        return np.arange(self.num_transitions) - np.repeat(self.episode_starts, lengths)

    def episodes(self):
        for lo, hi in zip(self.episode_starts, self.episode_ends):
            yield self.states[lo:hi], self.actions[lo:hi], self.next_states[lo:hi]

    def initial_states(self) -> np.ndarray:
        return self.states[self.episode_starts]

    def save(self, path) -> None:
        """JSON Lines, one episode per line, metadata in ``<path>.meta.json``."""
        path = Path(path)
        with path.open("w") as fh:
            for s, a, ns in self.episodes():
                fh.write(json.dumps({"states": s.tolist(), "actions": a.tolist(), "next_states": ns.tolist()}))
                fh.write("\n")
        meta = dict(self.metadata, num_episodes=self.num_episodes, num_transitions=self.num_transitions)
        metadata_path(path).write_text(json.dumps(meta, indent=2, sort_keys=True))

    @classmethod
    def load(cls, path) -> "TrajectoryDataset":
        path = Path(path)
        mpath = metadata_path(path)
        metadata = json.loads(mpath.read_text()) if mpath.exists() else {}
        S, A = metadata.get("num_states"), metadata.get("num_actions")
        episodes = []
        with path.open() as fh:
            for lineno, line in enumerate(fh, start=1):
                if not line.strip():
                    continue
                try:
                    doc = json.loads(line)
                    ep = tuple(np.asarray(doc[k], dtype=np.int64) for k in ("states", "actions", "next_states"))
                except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
                    raise DatasetFormatError(f"{path}:{lineno}: malformed episode ({exc})") from None
                if ep[0].size == 0 or len({x.size for x in ep}) != 1:
                    raise DatasetFormatError(f"{path}:{lineno}: episode empty or ragged")
                if min(x.min() for x in ep) < 0:
                    raise DatasetFormatError(f"{path}:{lineno}: negative index")
                if S is not None and max(ep[0].max(), ep[2].max()) >= S:
                    raise DatasetFormatError(f"{path}:{lineno}: state index out of range for {S} states")
                if A is not None and ep[1].max() >= A:
                    raise DatasetFormatError(f"{path}:{lineno}: action index out of range for {A} actions")
                episodes.append(ep)
        for key in ("num_episodes", "num_transitions"):
            metadata.pop(key, None)
        return cls.from_episodes(episodes, metadata)


def metadata_path(path) -> Path:
    path = Path(path)
    return path.with_name(path.name + ".meta.json")


class ObservationKind(enum.Enum):
    FULL_TRAJECTORIES = "trajectories"
    SUCCESS_EXAMPLES = "examples"


@dataclass(frozen=True)
class ExpertObservations:
    """State-only expert supervision; no actions."""

    states: np.ndarray
    kind: ObservationKind = ObservationKind.SUCCESS_EXAMPLES

    def __post_init__(self):
        states = np.asarray(self.states, dtype=np.int64).ravel()
        if states.size == 0:
            raise DatasetFormatError("expert observations are empty")
        if states.min() < 0:
            raise DatasetFormatError("negative state index in expert observations")
        object.__setattr__(self, "states", states)
        object.__setattr__(self, "kind", ObservationKind(self.kind))

    def save(self, path) -> None:
        Path(path).write_text(json.dumps({"kind": self.kind.value, "states": self.states.tolist()}))

    @classmethod
    def load(cls, path) -> "ExpertObservations":
        try:
            doc = json.loads(Path(path).read_text())
            return cls(doc["states"], ObservationKind(doc.get("kind", "examples")))
        except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
            if isinstance(exc, DatasetFormatError):
                raise
            raise DatasetFormatError(f"{path}: invalid expert observations ({exc})") from None


def _sample_rows(cdf: np.ndarray, u: np.ndarray) -> np.ndarray:
    # inverse-CDF draw per row; clamp guards against cdf[-1] rounding below u
    idx = (cdf < u[:, None]).sum(axis=1)
    return np.minimum(idx, cdf.shape[1] - 1)


def collect(
    env_mdp: TabularMdp,
    behavior: TabularPolicy,
    num_episodes: int,
    horizon: int | None = None,
    seed: int = 0,
    metadata: dict | None = None,
) -> TrajectoryDataset:
    """Roll out ``behavior`` from mu0 for ``num_episodes`` fixed-length episodes.

    Deterministic given ``seed``. The horizon defaults to the smallest H with
    gamma^H < 1e-4.
    """
    if num_episodes < 1:
        raise ValueError("num_episodes must be >= 1")
    if horizon is None:
        horizon = default_horizon(env_mdp.discount)
    if horizon < 1:
        raise ValueError("horizon must be >= 1")
    rng = np.random.default_rng(seed)
    init_cdf = np.cumsum(env_mdp.initial_dist)
    pi_cdf = np.cumsum(behavior.probs, axis=1)
    t_cdf = np.cumsum(env_mdp.transition, axis=2)
    S = env_mdp.num_states

    states = np.empty((num_episodes, horizon), dtype=np.int64)
    actions = np.empty_like(states)
    next_states = np.empty_like(states)
    s = np.minimum(np.searchsorted(init_cdf, rng.random(num_episodes), side="right"), S - 1)
    for t in range(horizon):
        a = _sample_rows(pi_cdf[s], rng.random(num_episodes))
        ns = _sample_rows(t_cdf[s, a], rng.random(num_episodes))
        states[:, t], actions[:, t], next_states[:, t] = s, a, ns
        s = ns
    meta = {
        "num_states": S,
        "num_actions": env_mdp.num_actions,
        "gamma": env_mdp.discount,
        "horizon": horizon,
        "seed": seed,
    }
    meta.update(metadata or {})
    return TrajectoryDataset(
        states.ravel(), actions.ravel(), next_states.ravel(),
        np.arange(num_episodes) * horizon, meta,
    )


def transition_counts(data: TrajectoryDataset, num_states: int, num_actions: int) -> np.ndarray:
    flat = (data.states * num_actions + data.actions) * num_states + data.next_states
    counts = np.bincount(flat, minlength=num_states * num_actions * num_states)
    return counts.reshape(num_states, num_actions, num_states).astype(float)


def mle_transitions(counts: np.ndarray) -> np.ndarray:
    """n(s,a,s') / n(s,a); unvisited (s,a) rows become self-loops."""
    S, A, _ = counts.shape
    n_sa = counts.sum(axis=2, keepdims=True)
    transition = np.divide(counts, n_sa, out=np.zeros_like(counts), where=n_sa > 0)
    unvisited = n_sa[..., 0] == 0
    s_idx, a_idx = np.nonzero(unvisited)
    transition[s_idx, a_idx, s_idx] = 1.0
    # exact row normalization so the MDP invariant (1e-12) holds
    return transition / transition.sum(axis=2, keepdims=True)


def estimate_mdp(data: TrajectoryDataset, num_states: int, num_actions: int, gamma: float) -> TabularMdp:
    """Maximum-likelihood MDP; mu0 from the episode-initial states."""
    data.check_bounds(num_states, num_actions)
    transition = mle_transitions(transition_counts(data, num_states, num_actions))
    initial = np.bincount(data.initial_states(), minlength=num_states).astype(float)
    return TabularMdp(transition, initial / initial.sum(), gamma)


def estimate_behavior_policy(data: TrajectoryDataset, num_states: int, num_actions: int) -> TabularPolicy:
    """Action frequencies per state; uniform where a state was never visited."""
    counts = np.bincount(data.states * num_actions + data.actions, minlength=num_states * num_actions)
    counts = counts.reshape(num_states, num_actions).astype(float)
    n_s = counts.sum(axis=1, keepdims=True)
    probs = np.where(n_s > 0, counts / np.where(n_s > 0, n_s, 1.0), 1.0 / num_actions)
    return TabularPolicy(probs / probs.sum(axis=1, keepdims=True))


def estimate_occupancy(
    data: TrajectoryDataset,
    gamma: float,
    num_states: int,
    num_actions: int,
    discounted: bool = True,
    mdp: TabularMdp | None = None,
) -> OccupancyMeasure:
    """Normalized (discount-weighted) visitation counts of (s, a).

    The flow residual is measured against ``mdp`` if given, else against the
    MLE MDP of the same data. It is reported, never enforced.
    """
    data.check_bounds(num_states, num_actions)
    weights = gamma ** data.timesteps() if discounted else np.ones(data.num_transitions)
    d = np.bincount(data.states * num_actions + data.actions, weights=weights, minlength=num_states * num_actions)
    d = d.reshape(num_states, num_actions)
    d /= d.sum()
    if mdp is None:
        mdp = estimate_mdp(data, num_states, num_actions, gamma)
    return OccupancyMeasure(d, flow_residual(mdp, d))


def expert_state_distribution(
    obs: ExpertObservations,
    num_states: int,
    trajectories: TrajectoryDataset | None = None,
    gamma: float | None = None,
    weighting: str = "discounted",
) -> np.ndarray:
    """Empirical expert state distribution.

    Success examples give plain frequencies. Full trajectories are
    discount-weighted by time step when ``trajectories`` and ``gamma`` are
    supplied and ``weighting="discounted"``; otherwise every observed state
    counts once.
    """
    if obs.states.max() >= num_states:
        raise DatasetFormatError(f"expert state index out of range for {num_states} states")
    use_discount = (
        obs.kind is ObservationKind.FULL_TRAJECTORIES
        and trajectories is not None
        and weighting == "discounted"
    )
    if use_discount:
        if gamma is None:
            gamma = float(trajectories.metadata["gamma"])
        d = np.bincount(trajectories.states, weights=gamma ** trajectories.timesteps(), minlength=num_states)
    elif weighting in ("discounted", "uniform"):
        d = np.bincount(obs.states, minlength=num_states).astype(float)
    else:
        raise ValueError(f"unknown weighting {weighting!r}")
    return d / d.sum()


def observations_from_dataset(data: TrajectoryDataset) -> ExpertObservations:
    return ExpertObservations(data.states, ObservationKind.FULL_TRAJECTORIES)
