"""Oracles and experiment drivers.

* exhaustive search over deterministic policies for the best state-KL,
* the finite-sample convergence study of the closed-form chi2 values,
* occupancy-matching bound terms,
* closed-form vs iterative consistency reports,
* text and SVG renderings of grid policies.
"""

from __future__ import annotations

import json
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from html import escape

import numpy as np
from scipy.special import xlogy

from smodice import fdiv
from smodice.envs import ACTION_NAMES, GridSpec
from smodice.mdp import OccupancyMeasure, TabularMdp, TabularPolicy, compute_occupancy
from smodice.solver import (
    KL_EVAL_EPS,
    SmodiceSolution,
    solve_closed_form_chi2,
    solve_iterative,
    state_kl,
)

MAX_POLICIES = 10**6
_BATCH = 8192


class InstanceTooLargeError(ValueError):
    def __init__(self, count: int, limit: int = MAX_POLICIES):
        super().__init__(f"{count} deterministic policies exceed the enumeration limit {limit}")
        self.count = count


@dataclass(frozen=True)
class BruteForceResult:
    policy: TabularPolicy
    value: float
    num_policies: int
    num_optimal: int  # policies within tie_tol of the optimum

    def to_dict(self) -> dict:
        return {
            "actions": self.policy.greedy_actions().tolist(),
            "value": self.value,
            "num_policies": self.num_policies,
            "num_optimal": self.num_optimal,
        }


def _decode(indices: np.ndarray, num_states: int, num_actions: int) -> np.ndarray:
    """Policy number k -> action per state, state 0 most significant."""
    digits = np.empty((indices.size, num_states), dtype=np.int64)
    rest = indices.copy()
    for s in range(num_states - 1, -1, -1):
        digits[:, s] = rest % num_actions
        rest //= num_actions
    return digits


def _batch_state_kl(mdp: TabularMdp, d_E: np.ndarray, actions: np.ndarray, epsilon: float) -> np.ndarray:
    S = mdp.num_states
    gamma = mdp.discount
    P = mdp.transition[np.arange(S)[None, :], actions]  # (b, S, S')
    lhs = np.eye(S)[None] - gamma * np.swapaxes(P, 1, 2)
    rhs = np.broadcast_to(((1 - gamma) * mdp.initial_dist)[None, :, None], (len(actions), S, 1))
    d = np.linalg.solve(lhs, rhs)[..., 0]
    p = d + epsilon
    q = d_E[None] + epsilon
    return np.sum(p * (np.log(p) - np.log(q)), axis=1)


def brute_force_search(
    mdp: TabularMdp,
    d_E,
    epsilon: float = KL_EVAL_EPS,
    limit: int = MAX_POLICIES,
    workers: int = 1,
    tie_tol: float = 1e-9,
) -> BruteForceResult:
    """Enumerate every deterministic policy and keep the smallest state-KL.

    Chunks may run on a thread pool; values are gathered in enumeration
    order, so the result never depends on scheduling. Ties go to the first
    policy in enumeration order.
    """
    S, A = mdp.num_states, mdp.num_actions
    count = A**S
    if count > limit:
        raise InstanceTooLargeError(count, limit)
    d_E = np.asarray(d_E, dtype=float)
    starts = range(0, count, _BATCH)

    def chunk(lo: int) -> np.ndarray:
        idx = np.arange(lo, min(lo + _BATCH, count), dtype=np.int64)
        return _batch_state_kl(mdp, d_E, _decode(idx, S, A), epsilon)

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            values = np.concatenate(list(pool.map(chunk, starts)))
    else:
        values = np.concatenate([chunk(lo) for lo in starts])
    best = int(np.argmin(values))
    num_optimal = int(np.sum(values <= values[best] + tie_tol))
    policy = TabularPolicy.deterministic(_decode(np.array([best]), S, A)[0], A)
    # report the value exactly as evaluate_solution would compute it
    value = state_kl(compute_occupancy(mdp, policy).state_marginal, d_E, epsilon)
    return BruteForceResult(policy, value, count, num_optimal)


def brute_force_best_policy(mdp: TabularMdp, d_E, epsilon: float = KL_EVAL_EPS, workers: int = 1):
    """Return (policy, value) minimizing the smoothed state-KL to d_E over
    all deterministic policies."""
    res = brute_force_search(mdp, d_E, epsilon, workers=workers)
    return res.policy, res.value


# --- occupancy matching bound ----------------------------------------------


def _kl_exact(p, q) -> float:
    p = np.asarray(p, dtype=float).ravel()
    q = np.asarray(q, dtype=float).ravel()
    if np.any((p > 0) & (q <= 0)):
        return math.inf
    mask = p > 0
    return float(np.sum(xlogy(p[mask], p[mask]) - xlogy(p[mask], q[mask])))


def matching_bound(d_pi_sa, d_E_s, d_O_sa) -> tuple[float, float]:
    """Return (KL(d_pi(s) || d_E(s)), E_{d_pi}[log d_O(s)/d_E(s)] + KL(d_pi(s,a) || d_O(s,a))).

    The first never exceeds the second whenever d_E and d_O cover d_pi.
    """
    d_pi_sa = np.asarray(d_pi_sa, dtype=float)
    d_O_sa = np.asarray(d_O_sa, dtype=float)
    d_E_s = np.asarray(d_E_s, dtype=float)
    d_pi_s = d_pi_sa.sum(axis=1)
    d_O_s = d_O_sa.sum(axis=1)
    mask = d_pi_s > 0
    log_ratio = np.log(d_O_s[mask]) - np.log(d_E_s[mask])
    rhs = float(d_pi_s[mask] @ log_ratio) + _kl_exact(d_pi_sa, d_O_sa)
    return _kl_exact(d_pi_s, d_E_s), rhs


def state_vs_pair_kl(d_pi_sa, d_E_sa) -> tuple[float, float]:
    """Return (KL over states, KL over state-action pairs); marginalizing
    never increases the divergence."""
    d_pi_sa = np.asarray(d_pi_sa, dtype=float)
    d_E_sa = np.asarray(d_E_sa, dtype=float)
    return _kl_exact(d_pi_sa.sum(axis=1), d_E_sa.sum(axis=1)), _kl_exact(d_pi_sa, d_E_sa)


# --- finite-sample study ---------------------------------------------------


@dataclass
class StudyReport:
    sample_sizes: list
    errors: np.ndarray  # (len(sample_sizes), seeds)
    medians: np.ndarray
    slope: float
    intercept: float
    ratios: list  # median(n_{i+1}) / median(n_i)
    inverse_norm: np.ndarray  # ||(A^T D A)^-1||_inf per instance
    assumption_bound: np.ndarray  # 1 / ((1 - gamma)^2 D_min) per instance
    true_inverse_norm: float
    true_assumption_bound: float
    extra: dict = field(default_factory=dict)

    @property
    def assumption_held(self) -> np.ndarray:
        return self.inverse_norm <= self.assumption_bound

    def to_dict(self) -> dict:
        return {
            "sample_sizes": list(self.sample_sizes),
            "errors": self.errors.tolist(),
            "median_errors": self.medians.tolist(),
            "slope": self.slope,
            "intercept": self.intercept,
            "median_ratios": self.ratios,
            "assumption_held_fraction": float(self.assumption_held.mean()),
            "true_inverse_norm": self.true_inverse_norm,
            "true_assumption_bound": self.true_assumption_bound,
            "true_assumption_held": bool(self.true_inverse_norm <= self.true_assumption_bound),
            **self.extra,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)

    def table(self) -> str:
        lines = [f"{'n':>10}  {'median |V*-V^|':>16}  {'ratio':>7}  {'assump.':>7}"]
        held = self.assumption_held.mean(axis=1)
        for i, n in enumerate(self.sample_sizes):
            ratio = f"{self.ratios[i - 1]:7.3f}" if i else " " * 7
            lines.append(f"{n:>10d}  {self.medians[i]:16.6g}  {ratio}  {held[i]:7.0%}")
        lines.append(f"log-log slope: {self.slope:.4f}")
        return "\n".join(lines)


def _inverse_norm(mdp: TabularMdp, d: np.ndarray) -> tuple[float, float]:
    T = mdp.transition.reshape(-1, mdp.num_states)
    B = np.repeat(np.eye(mdp.num_states), mdp.num_actions, axis=0)
    Am = mdp.discount * T - B
    H = Am.T @ (d[:, None] * Am)
    norm = float(np.abs(np.linalg.pinv(H)).sum(axis=1).max())
    positive = d[d > 0]
    bound = 1.0 / ((1 - mdp.discount) ** 2 * positive.min()) if positive.size else math.inf
    return norm, bound


def _sample_instance(mdp_true, d_O_flat, reward, n, rng):
    S, A = mdp_true.num_states, mdp_true.num_actions
    sa = rng.choice(S * A, size=n, p=d_O_flat)
    cdf = np.cumsum(mdp_true.transition.reshape(S * A, S), axis=1)
    u = rng.random(n)
    nxt = np.minimum((cdf[sa] < u[:, None]).sum(axis=1), S - 1)
    counts = np.zeros((S * A, S))
    np.add.at(counts, (sa, nxt), 1.0)
    n_sa = counts.sum(axis=1, keepdims=True)
    T_hat = np.where(n_sa > 0, counts / np.where(n_sa > 0, n_sa, 1.0), 0.0)
    unvisited = np.flatnonzero(n_sa[:, 0] == 0)
    T_hat[unvisited, unvisited // A] = 1.0
    mdp_hat = TabularMdp(T_hat.reshape(S, A, S), mdp_true.initial_dist, mdp_true.discount)
    d_hat = OccupancyMeasure((n_sa[:, 0] / n).reshape(S, A))
    sol = solve_closed_form_chi2(mdp_hat, d_hat, reward, refine=False)
    return sol.v_star, mdp_hat, d_hat.vector


def finite_sample_study(
    mdp_true: TabularMdp,
    behavior: TabularPolicy,
    d_E,
    sample_sizes,
    seeds_per_size: int,
    seed: int = 0,
    workers: int = 1,
    reward=None,
) -> StudyReport:
    """Error of closed-form chi2 values estimated from n sampled transitions.

    Each instance draws n i.i.d. pairs (s, a) ~ d^O and s' ~ T(.|s, a), builds
    T^ and d^O^ from counts, and solves the normal equations. The reference
    V* uses the true MDP and the exact behavior occupancy. The reward is held
    fixed at log(d_E / d^O) from the exact occupancy unless given, so the
    measured error is due to T^ and d^O^ alone.
    """
    from smodice.discriminator import reward_from_counts

    sizes = [int(n) for n in sample_sizes]
    if any(b <= a for a, b in zip(sizes, sizes[1:])):
        raise ValueError("sample_sizes must be strictly increasing")
    if seeds_per_size < 1:
        raise ValueError("seeds_per_size must be >= 1")
    d_O = compute_occupancy(mdp_true, behavior)
    if reward is None:
        reward = reward_from_counts(d_E, d_O.state_marginal)
    v_true = solve_closed_form_chi2(mdp_true, d_O, reward, refine=False).v_star
    d_flat = d_O.vector / d_O.vector.sum()

    def run(job):
        i, k = job
        rng = np.random.default_rng([seed, sizes[i], k])
        v_hat, mdp_hat, d_hat = _sample_instance(mdp_true, d_flat, reward, sizes[i], rng)
        norm, bound = _inverse_norm(mdp_hat, d_hat)
        return float(np.abs(v_hat - v_true).max()), norm, bound

    jobs = [(i, k) for i in range(len(sizes)) for k in range(seeds_per_size)]
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(run, jobs))
    else:
        results = [run(j) for j in jobs]
    shape = (len(sizes), seeds_per_size)
    errors = np.array([r[0] for r in results]).reshape(shape)
    norms = np.array([r[1] for r in results]).reshape(shape)
    bounds = np.array([r[2] for r in results]).reshape(shape)
    medians = np.median(errors, axis=1)
    if len(sizes) >= 2:
        slope, intercept = np.polyfit(np.log(sizes), np.log(medians), 1)
    else:
        slope, intercept = float("nan"), float("nan")
    true_norm, true_bound = _inverse_norm(mdp_true, d_O.vector)
    return StudyReport(
        sample_sizes=sizes,
        errors=errors,
        medians=medians,
        slope=float(slope),
        intercept=float(intercept),
        ratios=[float(b / a) for a, b in zip(medians, medians[1:])],
        inverse_norm=norms,
        assumption_bound=bounds,
        true_inverse_norm=true_norm,
        true_assumption_bound=true_bound,
        extra={"seeds_per_size": seeds_per_size, "seed": seed},
    )


# --- solver consistency ----------------------------------------------------


def solver_consistency(
    mdp: TabularMdp,
    d_O: OccupancyMeasure,
    reward,
    spec=fdiv.CHI2_QUADRATIC,
    **iterative_kwargs,
) -> dict:
    """Compare the closed form with the iterative solver on one problem.

    ``spec`` picks the objective: ``chi2-quadratic`` pairs with the plain
    normal-equation solution, ``chi2`` with the refined one.
    """
    spec = fdiv.get_divergence(spec)
    if spec.kind is not fdiv.DivergenceKind.CHI_SQUARED:
        raise ValueError("the closed form exists only for chi-squared")
    closed = solve_closed_form_chi2(mdp, d_O, reward, refine=spec is fdiv.CHI2)
    iterative = solve_iterative(mdp, d_O, reward, spec, **iterative_kwargs)
    supported = d_O.state_marginal > 0
    same_argmax = (
        closed.policy.greedy_actions()[supported] == iterative.policy.greedy_actions()[supported]
    )
    return {
        "divergence": spec.name,
        "v_max_abs_diff": float(np.abs(closed.v_star - iterative.v_star).max()),
        "objective_diff": float(iterative.objective_value - closed.objective_value),
        "policy_max_abs_diff": float(np.abs(closed.policy.probs - iterative.policy.probs).max()),
        "argmax_agreement": float(same_argmax.mean()) if same_argmax.size else 1.0,
        "iterative_steps": iterative.diagnostics.get("steps"),
        "iterative_grad_norm": iterative.diagnostics.get("grad_norm"),
    }


# --- rendering -------------------------------------------------------------

GLYPHS = {
    "up": "↑",
    "right": "→",
    "down": "↓",
    "left": "←",
    "up-right": "↗",
    "down-right": "↘",
    "down-left": "↙",
    "up-left": "↖",
}
TIE_GLYPH = "+"
GOAL_GLYPH = "*"
WALL_GLYPH = "#"
_SHADES = " ░▒▓█"


def _cell_actions(spec: GridSpec, policy: TabularPolicy, tol: float = 1e-9):
    """Map each state to its glyph: the argmax direction, or the tie glyph
    when several actions share the top probability."""
    out = []
    for row in np.asarray(policy.probs):
        top = row.max()
        best = np.flatnonzero(row >= top - tol)
        out.append(TIE_GLYPH if best.size > 1 else GLYPHS[ACTION_NAMES[int(best[0])]])
    return out


def _state_mass(policy_states: int, occupancy) -> np.ndarray | None:
    if occupancy is None:
        return None
    if isinstance(occupancy, OccupancyMeasure):
        mass = occupancy.state_marginal
    else:
        mass = np.asarray(occupancy, dtype=float)
        if mass.ndim == 2:
            mass = mass.sum(axis=1)
    if mass.shape != (policy_states,):
        raise ValueError("occupancy does not match the grid's state count")
    return mass


def render_policy_grid(spec: GridSpec, policy: TabularPolicy, occupancy=None) -> str:
    """Text grid, one cell per column pair: the action glyph and, when an
    occupancy is given, a shade proportional to its state mass."""
    index = spec.state_index()
    if policy.num_states != len(index):
        raise ValueError(f"policy has {policy.num_states} states, grid has {len(index)}")
    glyphs = _cell_actions(spec, policy)
    mass = _state_mass(len(index), occupancy)
    peak = mass.max() if mass is not None and mass.max() > 0 else 1.0
    lines = []
    for r in range(spec.height):
        cells = []
        for c in range(spec.width):
            cell = (r, c)
            if cell not in index:
                g, shade = WALL_GLYPH, WALL_GLYPH
            else:
                s = index[cell]
                g = GOAL_GLYPH if spec.goal == cell else glyphs[s]
                shade = ""
                if mass is not None:
                    level = int(round(mass[s] / peak * (len(_SHADES) - 1)))
                    shade = _SHADES[level]
            cells.append(g + shade if mass is not None else g)
        lines.append(" ".join(cells).rstrip())
    return "\n".join(lines) + "\n"


_ARROW = {
    "up": (0, -1),
    "right": (1, 0),
    "down": (0, 1),
    "left": (-1, 0),
    "up-right": (1, -1),
    "down-right": (1, 1),
    "down-left": (-1, 1),
    "up-left": (-1, -1),
}


def render_policy_svg(spec: GridSpec, policy: TabularPolicy, occupancy=None, cell: int = 40) -> str:
    index = spec.state_index()
    if policy.num_states != len(index):
        raise ValueError(f"policy has {policy.num_states} states, grid has {len(index)}")
    mass = _state_mass(len(index), occupancy)
    peak = mass.max() if mass is not None and mass.max() > 0 else 1.0
    w, h = spec.width * cell, spec.height * cell
    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}">',
        '<defs><marker id="head" markerWidth="6" markerHeight="6" refX="5" refY="3" orient="auto">'
        '<path d="M0,0 L6,3 L0,6 z" fill="#1f4e9c"/></marker></defs>',
    ]
    for r in range(spec.height):
        for c in range(spec.width):
            x, y = c * cell, r * cell
            if (r, c) not in index:
                parts.append(f'<rect x="{x}" y="{y}" width="{cell}" height="{cell}" fill="#333"/>')
                continue
            s = index[(r, c)]
            alpha = 0.0 if mass is None else float(mass[s] / peak)
            parts.append(
                f'<rect x="{x}" y="{y}" width="{cell}" height="{cell}" fill="#e07b39" '
                f'fill-opacity="{alpha:.3f}" stroke="#999"/>'
            )
            cx, cy = x + cell / 2, y + cell / 2
            if spec.goal == (r, c):
                parts.append(
                    f'<text x="{cx}" y="{cy + 5}" text-anchor="middle" font-size="16">{escape(GOAL_GLYPH)}</text>'
                )
                continue
            row = np.asarray(policy.probs[s])
            best = np.flatnonzero(row >= row.max() - 1e-9)
            if best.size > 1:
                parts.append(f'<circle cx="{cx}" cy="{cy}" r="3" fill="#1f4e9c"/>')
                continue
            dx, dy = _ARROW[ACTION_NAMES[int(best[0])]]
            k = cell * 0.3
            parts.append(
                f'<line x1="{cx - dx * k:.1f}" y1="{cy - dy * k:.1f}" x2="{cx + dx * k:.1f}" '
                f'y2="{cy + dy * k:.1f}" stroke="#1f4e9c" stroke-width="2" marker-end="url(#head)"/>'
            )
    parts.append("</svg>")
    return "\n".join(parts) + "\n"


def solution_report(solution: SmodiceSolution, metrics: dict) -> str:
    """Human-readable summary of a solve plus its evaluation metrics."""
    lines = [
        f"objective            {solution.objective_value:.6g}",
        f"divergence estimate  {solution.divergence_estimate:.6g}",
    ]
    for key, value in sorted(metrics.items()):
        if isinstance(value, float):
            lines.append(f"{key:<20} {value:.6g}")
    for key, value in sorted(solution.diagnostics.items()):
        if isinstance(value, (int, float)) and key not in metrics:
            lines.append(f"diag.{key:<15} {value:.6g}" if isinstance(value, float) else f"diag.{key:<15} {value}")
    return "\n".join(lines)
