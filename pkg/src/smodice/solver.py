"""Dual value solvers, importance weights and weighted behavior cloning.

Notation for tabular operators, all over flattened (s, a) rows:

* ``T``  (|S||A| x |S|):  (TV)(s, a) = sum_s' T(s'|s,a) V(s')
* ``B``  (|S||A| x |S|):  (BV)(s, a) = V(s)
* ``A = gamma T - B``, so the advantage of V is  e_V = BR + A V.

The dual objective minimized over V is

    J(V) = (1 - gamma) mu0 . V + E_{d^O}[f*(e_V)]        (chi2, chi2-quadratic)
    J(V) = (1 - gamma) mu0 . V + log E_{d^O}[exp(e_V)]   (KL)

and the optimal occupancy ratios are xi = f*'(e_V*).
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from smodice import fdiv
from smodice.datasets import ExpertObservations, ObservationKind, expert_state_distribution
from smodice.discriminator import RewardVector
from smodice.fdiv import DivergenceKind, FDivergenceSpec
from smodice.mdp import (
    OccupancyMeasure,
    TabularMdp,
    TabularPolicy,
    compute_occupancy,
    flow_residual,
)

log = logging.getLogger(__name__)

PINV_RCOND = 1e-10
KL_EVAL_EPS = 1e-8


class SolverDivergedError(RuntimeError):
    def __init__(self, step: int, lr: float, value: float):
        super().__init__(
            f"dual objective became {value} at step {step} with lr={lr}; try a smaller lr"
        )
        self.step = step
        self.lr = lr


@dataclass(frozen=True)
class SmodiceSolution:
    v_star: np.ndarray
    xi_star: np.ndarray
    policy: TabularPolicy
    objective_value: float
    divergence_estimate: float
    diagnostics: dict = field(default_factory=dict)

    def __post_init__(self):
        xi = np.asarray(self.xi_star, dtype=float)
        if xi.min(initial=0.0) < 0:
            raise ValueError("importance weights must be nonnegative")
        if not (np.all(np.isfinite(xi)) and np.all(np.isfinite(self.v_star))):
            raise ValueError("solution has non-finite entries")

    def to_dict(self) -> dict:
        return {
            "v_star": np.asarray(self.v_star).tolist(),
            "xi_star": np.asarray(self.xi_star).tolist(),
            "policy": self.policy.probs.tolist(),
            "objective_value": self.objective_value,
            "divergence_estimate": self.divergence_estimate,
            "diagnostics": self.diagnostics,
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "SmodiceSolution":
        return cls(
            np.asarray(doc["v_star"], dtype=float),
            np.asarray(doc["xi_star"], dtype=float),
            TabularPolicy(np.asarray(doc["policy"], dtype=float)),
            float(doc["objective_value"]),
            float(doc.get("divergence_estimate", float("nan"))),
            dict(doc.get("diagnostics", {})),
        )

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2))

    @classmethod
    def load(cls, path) -> "SmodiceSolution":
        return cls.from_dict(json.loads(Path(path).read_text()))


def operators(mdp: TabularMdp):
    """Return (T, B) as dense |S||A| x |S| matrices."""
    S, A = mdp.num_states, mdp.num_actions
    T = mdp.transition.reshape(S * A, S)
    B = np.repeat(np.eye(S), A, axis=0)
    return T, B


def advantages(mdp: TabularMdp, values, reward) -> np.ndarray:
    """e_V(s, a) = R(s) + gamma (TV)(s, a) - V(s), shape (S, A)."""
    values = np.asarray(values, dtype=float)
    reward = np.asarray(getattr(reward, "r", reward), dtype=float)
    return (reward - values)[:, None] + mdp.discount * mdp.expected_next(values)


def dual_objective(mdp: TabularMdp, d_O, reward, spec: FDivergenceSpec, values) -> float:
    d_O = np.asarray(getattr(d_O, "d", d_O), dtype=float)
    e = advantages(mdp, values, reward)
    linear = (1 - mdp.discount) * float(mdp.initial_dist @ values)
    return linear + fdiv.dual_conjugate_term(spec, e, d_O)


def dual_gradient(mdp: TabularMdp, d_O, reward, spec: FDivergenceSpec, values) -> np.ndarray:
    """(1 - gamma) mu0 + A^T g where g is the conjugate-term gradient in e."""
    d_O = np.asarray(getattr(d_O, "d", d_O), dtype=float)
    g = fdiv.dual_conjugate_grad(spec, advantages(mdp, values, reward), d_O)
    return (1 - mdp.discount) * mdp.initial_dist + mdp.discount * mdp.pushforward(g) - g.sum(axis=1)


def weighted_bc(xi, d_O) -> TabularPolicy:
    """Tabular maximizer of E_{d^O}[xi log pi(a|s)]: pi proportional to xi * d^O.

    States where the weighted mass vanishes get a uniform row.
    """
    d = np.asarray(getattr(d_O, "d", d_O), dtype=float)
    xi = np.asarray(xi, dtype=float).reshape(d.shape)
    if xi.min(initial=0.0) < 0:
        raise ValueError("importance weights must be nonnegative")
    w = xi * d
    mass = w.sum(axis=1, keepdims=True)
    probs = np.where(mass > 0, w / np.where(mass > 0, mass, 1.0), 1.0 / d.shape[1])
    return TabularPolicy(probs / probs.sum(axis=1, keepdims=True))


def _divergence_estimate(spec: FDivergenceSpec, xi, d) -> float:
    if spec.kind is DivergenceKind.CHI_SQUARED:
        return float(np.sum(d * 0.5 * xi**2))
    return float(np.sum(d * spec.f(xi)))


def _finish(mdp, d_O, reward, spec, v, diagnostics) -> SmodiceSolution:
    d = d_O.d
    e = advantages(mdp, v, reward)
    xi = fdiv.primal_weights(spec, e, d)
    supported = d > 0
    raw = e + 1.0 if spec.kind is DivergenceKind.CHI_SQUARED else xi
    diagnostics = dict(diagnostics)
    diagnostics.update(
        weight_mass=float(np.sum(d * xi)),
        clamp_fraction=float(np.mean(raw[supported] < 0)) if supported.any() else 0.0,
        flow_residual=flow_residual(mdp, xi * d),
        min_v=float(v.min()),
    )
    return SmodiceSolution(
        v_star=v,
        xi_star=xi,
        policy=weighted_bc(xi, d),
        objective_value=dual_objective(mdp, d, reward, spec, v),
        divergence_estimate=_divergence_estimate(spec, xi, d),
        diagnostics=diagnostics,
    )


def _normal_equations(mdp: TabularMdp, d: np.ndarray, r: np.ndarray, active=None):
    """Return (A, H, y) for the chi2 normal equations H V = y restricted to
    the (s, a) rows in ``active`` (all rows when None)."""
    gamma = mdp.discount
    T, B = operators(mdp)
    A = gamma * T - B
    w = d if active is None else d * active
    H = A.T @ (w[:, None] * A)
    y = (gamma - 1) * mdp.initial_dist - A.T @ (w * (1.0 + B @ r))
    return A, H, y


def _refine_nonnegative(mdp, d, r, v, rcond, max_iter=200, tol=1e-12):
    """Semismooth Newton on the chi2 dual with ratios constrained to be >= 0.

    The objective is piecewise quadratic; each step solves the normal
    equations on the rows whose ratio is currently positive, damped by a
    Levenberg term and an Armijo backtracking search so it cannot cycle
    between active sets.
    """
    A, _, _ = _normal_equations(mdp, d, r)
    spec = fdiv.CHI2
    base = r.repeat(mdp.num_actions)
    lin = (1 - mdp.discount) * mdp.initial_dist

    def objective(x):
        return float(lin @ x + d @ spec.f_conj(base + A @ x))

    def gradient(x):
        return lin + A.T @ (d * spec.f_conj_deriv(base + A @ x))

    f = objective(v)
    damping = 0.0
    it = 0
    for it in range(1, max_iter + 1):
        g = gradient(v)
        if np.abs(g).max() < tol:
            break
        active = (base + A @ v + 1.0 > 0).astype(float)
        H = A.T @ ((d * active)[:, None] * A)
        if damping > 0:
            step = np.linalg.solve(H + damping * np.eye(len(v)), g)
        else:
            step = np.linalg.pinv(H, rcond=rcond) @ g
        slope = float(g @ step)
        if slope <= 0:
            # pinv dropped the descent direction; fall back to damped solve
            damping = max(damping * 10, 1e-8 * np.trace(H) / len(v) + 1e-14)
            continue
        t = 1.0
        while t > 1e-12:
            cand = v - t * step
            f_cand = objective(cand)
            if f_cand <= f - 1e-4 * t * slope:
                break
            t *= 0.5
        else:
            break
        v, f = cand, f_cand
        damping = 0.0 if t == 1.0 else max(damping, 1e-8 * np.trace(H) / len(v))
    return v, it


def solve_closed_form_chi2(
    mdp: TabularMdp,
    d_O: OccupancyMeasure,
    reward: RewardVector,
    rcond: float = PINV_RCOND,
    refine: bool = True,
) -> SmodiceSolution:
    """Chi2 dual minimizer via the normal equations.

    V0 = pinv(A^T D A) ((gamma - 1) mu0 - A^T D (1 + BR)),  A = gamma T - B,
    is the stationary point when ratios may go negative. With ``refine``
    (the default) V0 seeds a semismooth Newton solve of the dual with
    ratios floored at zero, which is the objective the clamped weights
    actually correspond to. ``refine=False`` returns V0 unchanged and
    scores it with the unconstrained quadratic conjugate.
    """
    d = d_O.vector
    r = np.asarray(getattr(reward, "r", reward), dtype=float)
    _, H, y = _normal_equations(mdp, d, r)
    sv = np.linalg.svd(H, compute_uv=False)
    rank = int(np.sum(sv > rcond * sv[0])) if sv[0] > 0 else 0
    v = np.linalg.pinv(H, rcond=rcond) @ y
    diagnostics = {"pinv_rank": rank, "num_states": mdp.num_states}
    if not refine:
        return _finish(mdp, d_O, r, fdiv.CHI2_QUADRATIC, v, diagnostics)
    e0 = advantages(mdp, v, r).ravel()
    diagnostics["unrefined_clamp_fraction"] = (
        float(np.mean(e0[d > 0] + 1 < 0)) if (d > 0).any() else 0.0
    )
    v, iters = _refine_nonnegative(mdp, d, r, v, rcond)
    diagnostics["refine_iterations"] = iters
    return _finish(mdp, d_O, r, fdiv.CHI2, v, diagnostics)


def solve_iterative(
    mdp_hat: TabularMdp,
    d_O: OccupancyMeasure,
    reward: RewardVector,
    spec: FDivergenceSpec = fdiv.CHI2,
    steps: int = 20000,
    lr: float | None = None,
    seed: int = 0,
    init: str = "zero",
    tol: float = 1e-10,
) -> SmodiceSolution:
    """Minimize the dual objective over tabular V with full-batch gradient steps.

    Uses Nesterov momentum, reset whenever the momentum direction points
    uphill (gradient restart).
    ``seed`` only matters for ``init="random"``. Stops early once the
    gradient max-norm drops below ``tol``.
    """
    spec = fdiv.get_divergence(spec)
    if steps < 1:
        raise ValueError("steps must be >= 1")
    if lr is None:
        lr = 0.1 if spec.kind is DivergenceKind.CHI_SQUARED else 0.01
    r = np.asarray(getattr(reward, "r", reward), dtype=float)
    d = d_O.d
    S = mdp_hat.num_states
    if init == "zero":
        v = np.zeros(S)
    elif init == "random":
        v = np.random.default_rng(seed).normal(scale=0.1, size=S)
    else:
        raise ValueError(f"unknown init {init!r}")

    def objective(x):
        with np.errstate(over="ignore", invalid="ignore"):
            return dual_objective(mdp_hat, d, r, spec, x)

    def gradient(x):
        with np.errstate(over="ignore", invalid="ignore"):
            return dual_gradient(mdp_hat, d, r, spec, x)

    y = v.copy()
    momentum = 1.0
    restarts = 0
    step = 0
    grad_norm = float("inf")
    for step in range(1, steps + 1):
        g = gradient(y)
        v_new = y - lr * g
        f_new = objective(v_new)
        if not np.isfinite(f_new):
            raise SolverDivergedError(step, lr, f_new)
        grad_norm = float(np.abs(g).max())
        if grad_norm < tol:
            v = v_new
            break
        if g @ (v_new - v) > 0:
            # gradient restart: momentum points uphill, drop it
            restarts += 1
            momentum = 1.0
            y = v_new.copy()
        else:
            momentum_next = 0.5 * (1 + np.sqrt(1 + 4 * momentum**2))
            y = v_new + ((momentum - 1) / momentum_next) * (v_new - v)
            momentum = momentum_next
        v = v_new
    log.debug("iterative solve: %d steps, %d restarts, |grad|=%.3g", step, restarts, grad_norm)
    diagnostics = {
        "steps": step,
        "restarts": restarts,
        "grad_norm": float(np.abs(gradient(v)).max()),
        "lr": lr,
    }
    return _finish(mdp_hat, d_O, r, spec, v, diagnostics)


def reduce_examples_to_matching(examples: ExpertObservations, num_states: int | None = None) -> np.ndarray:
    """Empirical success-example distribution, used verbatim as d^E."""
    if examples.kind is not ObservationKind.SUCCESS_EXAMPLES:
        raise ValueError("reduction needs success examples, not full trajectories")
    if num_states is None:
        num_states = int(examples.states.max()) + 1
    return expert_state_distribution(examples, num_states)


def state_kl(p, q, epsilon: float = KL_EVAL_EPS) -> float:
    """KL(p || q) with epsilon added to both arguments (no renormalization).

    With equal totals the smoothed sum stays nonnegative.
    """
    p = np.asarray(p, dtype=float) + epsilon
    q = np.asarray(q, dtype=float) + epsilon
    return float(np.sum(p * (np.log(p) - np.log(q))))


def evaluate_solution(
    mdp_true: TabularMdp,
    solution: SmodiceSolution | TabularPolicy,
    d_E,
    success_states=None,
    epsilon: float = KL_EVAL_EPS,
    d_O: OccupancyMeasure | None = None,
) -> dict:
    """Roll the learned policy's exact occupancy out in the true MDP and score it."""
    policy = solution.policy if isinstance(solution, SmodiceSolution) else solution
    occ = compute_occupancy(mdp_true, policy)
    d_s = occ.state_marginal
    metrics = {
        "state_kl_to_expert": state_kl(d_s, d_E, epsilon),
        "state_occupancy": d_s.tolist(),
    }
    if success_states is not None:
        idx = list(success_states)
        metrics["success_state_mass"] = float(d_s[idx].sum())
        others = np.delete(d_s, idx)
        metrics["max_other_state_mass"] = float(others.max()) if others.size else 0.0
    if isinstance(solution, SmodiceSolution):
        metrics["weight_mass"] = solution.diagnostics.get("weight_mass", float("nan"))
        if d_O is not None:
            d_star = np.asarray(solution.xi_star).reshape(d_O.d.shape) * d_O.d
            metrics["weight_mass"] = float(d_star.sum())
            metrics["implied_flow_residual"] = flow_residual(mdp_true, d_star)
        else:
            metrics["implied_flow_residual"] = solution.diagnostics.get("flow_residual", float("nan"))
    return metrics
