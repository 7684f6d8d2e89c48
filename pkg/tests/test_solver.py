import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from smodice import datasets, envs, fdiv, solver
from smodice.datasets import ExpertObservations, ObservationKind
from smodice.discriminator import RewardVector, reward_from_counts
from smodice.fdiv import CHI2, CHI2_QUADRATIC, KL
from smodice.mdp import (
    OccupancyMeasure,
    TabularPolicy,
    compute_occupancy,
    policy_from_occupancy,
    random_mdp,
    random_policy,
)


def random_problem(seed, S=5, A=3, gamma=0.95, scale=2.0):
    rng = np.random.default_rng(seed)
    m = random_mdp(S, A, gamma, rng)
    pi = random_policy(S, A, rng)
    d_O = compute_occupancy(m, pi)
    return m, pi, d_O, RewardVector(rng.uniform(-scale, scale, S))


def test_zero_reward_fixed_point_closed_form():
    m, pi, d_O, _ = random_problem(0)
    sol = solver.solve_closed_form_chi2(m, d_O, np.zeros(m.num_states))
    assert np.abs(sol.xi_star - 1).max() <= 1e-6
    assert np.abs(sol.policy.probs - pi.probs).max() <= 1e-6


@pytest.mark.parametrize("spec", [CHI2, KL])
def test_zero_reward_fixed_point_iterative(spec):
    m, pi, d_O, _ = random_problem(1)
    sol = solver.solve_iterative(m, d_O, np.zeros(m.num_states), spec)
    assert np.abs(sol.xi_star - 1).max() <= 1e-3
    assert np.abs(sol.policy.probs - pi.probs).max() <= 1e-3
    assert sol.diagnostics["steps"] == 1


def test_closed_form_formula_without_refinement():
    m, _, d_O, R = random_problem(2)
    S, A, gamma = m.num_states, m.num_actions, m.discount
    T = m.transition.reshape(S * A, S)
    B = np.kron(np.eye(S), np.ones((A, 1)))
    Am = gamma * T - B
    D = np.diag(d_O.d.ravel())
    rhs = (gamma - 1) * m.initial_dist + (B - gamma * T).T @ D @ (1 + B @ R.r)
    expected = np.linalg.solve(Am.T @ D @ Am, rhs)
    sol = solver.solve_closed_form_chi2(m, d_O, R, refine=False)
    np.testing.assert_allclose(sol.v_star, expected, atol=1e-8)
    xi = np.maximum(0, (B @ R.r + Am @ expected + 1)).reshape(S, A)
    np.testing.assert_allclose(sol.xi_star, xi, atol=1e-8)
    assert sol.diagnostics["pinv_rank"] == S


@pytest.mark.parametrize("seed", range(5))
def test_closed_form_stationarity(seed):
    m, _, d_O, R = random_problem(seed, scale=5.0)
    raw = solver.solve_closed_form_chi2(m, d_O, R, refine=False)
    assert np.abs(solver.dual_gradient(m, d_O, R, CHI2_QUADRATIC, raw.v_star)).max() <= 1e-6
    refined = solver.solve_closed_form_chi2(m, d_O, R)
    assert np.abs(solver.dual_gradient(m, d_O, R, CHI2, refined.v_star)).max() <= 1e-6
    assert refined.objective_value <= solver.dual_objective(m, d_O, R, CHI2, raw.v_star) + 1e-12


def test_refinement_matters_when_weights_clamp(figure2a_data):
    exp, true, data = figure2a_data
    S, A = true.num_states, true.num_actions
    m_hat = datasets.estimate_mdp(data, S, A, true.discount)
    d_O = compute_occupancy(m_hat, datasets.estimate_behavior_policy(data, S, A))
    R = reward_from_counts(exp.expert_occupancy().state_marginal, d_O.state_marginal)
    refined = solver.solve_closed_form_chi2(m_hat, d_O, R)
    raw = solver.solve_closed_form_chi2(m_hat, d_O, R, refine=False)
    assert refined.diagnostics["unrefined_clamp_fraction"] > 0
    assert refined.diagnostics["weight_mass"] == pytest.approx(1.0, abs=1e-9)
    assert refined.diagnostics["flow_residual"] <= 1e-9
    assert raw.diagnostics["flow_residual"] > 1e-3


def test_rank_deficient_system_uses_pseudo_inverse():
    m, _, _, R = random_problem(3)
    d = np.zeros((5, 3))
    d[0, 0] = 1.0  # support on a single pair
    sol = solver.solve_closed_form_chi2(m, OccupancyMeasure(d), R)
    assert sol.diagnostics["pinv_rank"] < 5
    assert np.all(np.isfinite(sol.v_star))


@pytest.mark.parametrize("seed", range(4))
def test_iterative_matches_closed_form(seed):
    m, _, d_O, R = random_problem(10 + seed)
    for spec, refine in ((CHI2_QUADRATIC, False), (CHI2, True)):
        closed = solver.solve_closed_form_chi2(m, d_O, R, refine=refine)
        it = solver.solve_iterative(m, d_O, R, spec)
        assert np.abs(closed.v_star - it.v_star).max() <= 1e-3
        assert np.array_equal(closed.policy.greedy_actions(), it.policy.greedy_actions())


def test_iterative_seed_and_init():
    m, _, d_O, R = random_problem(4)
    a = solver.solve_iterative(m, d_O, R, CHI2, init="random", seed=3, steps=50)
    b = solver.solve_iterative(m, d_O, R, CHI2, init="random", seed=3, steps=50)
    c = solver.solve_iterative(m, d_O, R, CHI2, init="random", seed=4, steps=50)
    assert np.array_equal(a.v_star, b.v_star)
    assert not np.array_equal(a.v_star, c.v_star)
    with pytest.raises(ValueError):
        solver.solve_iterative(m, d_O, R, CHI2, init="ones")
    with pytest.raises(ValueError):
        solver.solve_iterative(m, d_O, R, CHI2, steps=0)


def test_iterative_divergence_error():
    m, _, d_O, R = random_problem(5)
    with pytest.raises(solver.SolverDivergedError, match=r"step \d+ with lr=1000000"):
        solver.solve_iterative(m, d_O, R, CHI2, lr=1e6, steps=1000)


def test_kl_on_example_task(figure2b_data):
    exp, true, data = figure2b_data
    S, A = true.num_states, true.num_actions
    m_hat = datasets.estimate_mdp(data, S, A, true.discount)
    d_O = compute_occupancy(m_hat, datasets.estimate_behavior_policy(data, S, A))
    d_E = solver.reduce_examples_to_matching(ExpertObservations(exp.success_states()), S)
    sol = solver.solve_iterative(m_hat, d_O, reward_from_counts(d_E, d_O.state_marginal), KL)
    metrics = solver.evaluate_solution(true, sol, d_E, exp.success_states())
    assert metrics["success_state_mass"] >= 0.85
    assert metrics["implied_flow_residual"] <= 0.05


@pytest.mark.parametrize("spec", [CHI2, CHI2_QUADRATIC, KL])
def test_objective_convexity(spec):
    rng = np.random.default_rng(6)
    m, _, d_O, R = random_problem(6)
    for _ in range(50):
        v1, v2 = rng.normal(scale=3, size=(2, m.num_states))
        lam = rng.random()
        mid = solver.dual_objective(m, d_O, R, spec, lam * v1 + (1 - lam) * v2)
        ends = lam * solver.dual_objective(m, d_O, R, spec, v1) + (1 - lam) * solver.dual_objective(m, d_O, R, spec, v2)
        assert mid <= ends + 1e-9


def test_weighted_bc_examples():
    d = OccupancyMeasure(np.array([[0.1, 0.3], [0.4, 0.2]]))
    np.testing.assert_allclose(solver.weighted_bc(np.ones((2, 2)), d).probs, policy_from_occupancy(d).probs)
    xi = np.zeros((2, 2))
    xi[0, 1] = 1
    pi = solver.weighted_bc(xi, d)
    assert pi.probs[0].tolist() == [0, 1]
    np.testing.assert_allclose(pi.probs[1], [0.5, 0.5])
    with pytest.raises(ValueError):
        solver.weighted_bc(-np.ones((2, 2)), d)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_weighted_bc_maximizes_weighted_likelihood(seed):
    rng = np.random.default_rng(seed)
    d = OccupancyMeasure(rng.dirichlet(np.ones(6)).reshape(3, 2))
    xi = rng.exponential(size=(3, 2))
    pi = solver.weighted_bc(xi, d)
    grid = np.linspace(1e-4, 1 - 1e-4, 9999)
    for s in range(3):
        w = xi[s] * d.d[s]
        ll = w[0] * np.log(grid) + w[1] * np.log(1 - grid)
        assert pi.probs[s, 0] == pytest.approx(grid[np.argmax(ll)], abs=2e-4)


def test_reduce_examples():
    one = ExpertObservations([2])
    np.testing.assert_array_equal(solver.reduce_examples_to_matching(one, 4), np.eye(4)[2])
    two = ExpertObservations([1, 3, 1, 3])
    np.testing.assert_allclose(solver.reduce_examples_to_matching(two, 5), [0, 0.5, 0, 0.5, 0])
    np.testing.assert_array_equal(
        solver.reduce_examples_to_matching(two, 5), datasets.expert_state_distribution(two, 5)
    )
    with pytest.raises(ValueError):
        solver.reduce_examples_to_matching(ExpertObservations([1], ObservationKind.FULL_TRAJECTORIES))


def test_evaluate_expert_against_itself():
    exp = envs.figure2a()
    d_E = exp.expert_occupancy().state_marginal
    metrics = solver.evaluate_solution(exp.expert_mdp(), exp.expert_policy(), d_E)
    assert metrics["state_kl_to_expert"] <= 1e-9


def test_uniform_policy_worse_than_solution(figure2b_data):
    exp, true, data = figure2b_data
    S, A = true.num_states, true.num_actions
    m_hat = datasets.estimate_mdp(data, S, A, true.discount)
    d_O = compute_occupancy(m_hat, datasets.estimate_behavior_policy(data, S, A))
    d_E = np.eye(S)[exp.success_states()[0]]
    sol = solver.solve_closed_form_chi2(m_hat, d_O, reward_from_counts(d_E, d_O.state_marginal))
    uniform = solver.evaluate_solution(true, TabularPolicy.uniform(S, A), d_E)["state_kl_to_expert"]
    solved = solver.evaluate_solution(true, sol, d_E, d_O=d_O)
    assert np.isfinite(uniform) and uniform > solved["state_kl_to_expert"]
    assert solved["implied_flow_residual"] <= 0.05


def test_state_kl_smoothing():
    assert solver.state_kl([1, 0], [1, 0]) == 0.0
    assert solver.state_kl([0.5, 0.5], [1, 0]) == pytest.approx(
        (0.5 + 1e-8) * np.log((0.5 + 1e-8) / (1 + 1e-8)) + (0.5 + 1e-8) * np.log((0.5 + 1e-8) / 1e-8),
        rel=1e-12,
    )


def test_solution_round_trip(tmp_path):
    m, _, d_O, R = random_problem(7)
    sol = solver.solve_closed_form_chi2(m, d_O, R)
    sol.save(tmp_path / "s.json")
    back = solver.SmodiceSolution.load(tmp_path / "s.json")
    np.testing.assert_array_equal(back.v_star, sol.v_star)
    np.testing.assert_array_equal(back.policy.probs, sol.policy.probs)
    assert back.diagnostics == sol.diagnostics


def test_solution_rejects_negative_weights():
    with pytest.raises(ValueError):
        solver.SmodiceSolution(np.zeros(1), -np.ones((1, 1)), TabularPolicy.uniform(1, 1), 0.0, 0.0)


def test_chi2_divergence_estimate_follows_half_square():
    m, _, d_O, R = random_problem(8)
    sol = solver.solve_closed_form_chi2(m, d_O, R)
    assert sol.divergence_estimate == pytest.approx(np.sum(d_O.d * 0.5 * sol.xi_star**2))
