import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from smodice.mdp import (
    MdpValidationError,
    OccupancyMeasure,
    TabularMdp,
    TabularPolicy,
    compute_occupancy,
    flow_residual,
    marginalize_states,
    policy_from_occupancy,
    random_mdp,
    random_policy,
)


def chain():
    T = np.zeros((2, 1, 2))
    T[0, 0, 1] = 1
    T[1, 0, 1] = 1
    return TabularMdp(T, [1.0, 0.0], 0.5)


def test_self_loop_single_state():
    m = TabularMdp(np.ones((1, 1, 1)), [1.0], 0.7)
    occ = compute_occupancy(m, TabularPolicy.uniform(1, 1))
    assert occ.d.tolist() == [[1.0]]


def test_two_state_chain_geometric_series():
    occ = compute_occupancy(chain(), TabularPolicy.uniform(2, 1))
    np.testing.assert_allclose(occ.d[:, 0], [0.5, 0.5], atol=1e-12)
    assert occ.flow_residual <= 1e-12


def test_matches_monte_carlo_rollouts(frozen):
    mc = frozen["monte_carlo_occupancy"]
    m = TabularMdp(np.array(mc["transition"]), np.array(mc["initial_dist"]), mc["gamma"])
    occ = compute_occupancy(m, TabularPolicy(np.array(mc["policy"])))
    assert np.abs(occ.d - np.array(mc["d_mc"])).max() <= 1e-2


@pytest.mark.parametrize("gamma", [0.0, 1.0, 1.5, -0.1])
def test_discount_outside_open_interval_rejected(gamma):
    with pytest.raises(MdpValidationError):
        TabularMdp(np.ones((1, 1, 1)), [1.0], gamma)


def test_rows_must_be_stochastic():
    T = np.full((2, 1, 2), 0.5)
    T[0, 0] = [0.5, 0.5 + 1e-9]
    with pytest.raises(MdpValidationError, match="transition"):
        TabularMdp(T, [0.5, 0.5], 0.9)
    with pytest.raises(MdpValidationError, match="initial"):
        TabularMdp(np.full((2, 1, 2), 0.5), [0.3, 0.6], 0.9)


def test_policy_rows_validated():
    with pytest.raises(ValueError):
        TabularPolicy(np.array([[0.5, 0.6]]))
    with pytest.raises(ValueError):
        TabularPolicy(np.array([[1.5, -0.5]]))


def test_json_round_trip(tmp_path):
    m = random_mdp(4, 2, 0.95, np.random.default_rng(0))
    path = tmp_path / "mdp.json"
    m.save(path)
    doc = json.loads(path.read_text())
    assert set(doc) == {"num_states", "num_actions", "gamma", "initial_dist", "transition"}
    back = TabularMdp.load(path)
    np.testing.assert_array_equal(back.transition, m.transition)
    assert back.discount == m.discount


def test_load_rejects_non_stochastic(tmp_path):
    m = random_mdp(3, 2, 0.9, np.random.default_rng(1))
    doc = m.to_dict()
    doc["transition"][0][0][0] += 0.1
    with pytest.raises(MdpValidationError):
        TabularMdp.from_dict(doc)


def test_marginalize_states():
    occ = OccupancyMeasure(np.full((2, 2), 0.25))
    np.testing.assert_allclose(marginalize_states(occ), [0.5, 0.5])
    d = np.zeros((5, 2))
    d[3, 1] = 1
    np.testing.assert_array_equal(marginalize_states(OccupancyMeasure(d)), np.eye(5)[3])


def test_marginalize_matches_summation():
    rng = np.random.default_rng(3)
    d = rng.dirichlet(np.ones(12)).reshape(4, 3)
    occ = OccupancyMeasure(d)
    assert np.array_equal(marginalize_states(occ), occ.d.sum(axis=1))


def test_policy_from_occupancy_fallbacks():
    d = np.zeros((3, 3))
    d[0, 2] = 1
    pi = policy_from_occupancy(OccupancyMeasure(d))
    assert pi.probs[0].tolist() == [0, 0, 1]
    np.testing.assert_allclose(pi.probs[1:], 1 / 3)
    first = policy_from_occupancy(OccupancyMeasure(d), unvisited="first")
    assert first.probs[2].tolist() == [1, 0, 0]
    uniform = policy_from_occupancy(OccupancyMeasure(np.full((2, 2), 0.25)))
    np.testing.assert_allclose(uniform.probs, 0.5)


def test_occupancy_rejects_unnormalized():
    with pytest.raises(ValueError):
        OccupancyMeasure(np.full((2, 2), 0.3))
    with pytest.raises(ValueError):
        OccupancyMeasure(np.array([[1.1, -0.1]]))


def test_tiny_negative_entries_clamped():
    occ = OccupancyMeasure(np.array([[1.0 + 1e-13, -1e-13]]))
    assert occ.d.min() == 0.0


mdp_params = st.tuples(
    st.integers(1, 6), st.integers(1, 4), st.floats(0.05, 0.995), st.integers(0, 2**31 - 1)
)


@settings(max_examples=40, deadline=None)
@given(mdp_params)
def test_flow_identity_and_round_trip(params):
    S, A, gamma, seed = params
    rng = np.random.default_rng(seed)
    m = random_mdp(S, A, gamma, rng, concentration=0.5)
    pi = random_policy(S, A, rng)
    occ = compute_occupancy(m, pi)
    assert abs(occ.d.sum() - 1) <= 1e-9
    assert occ.d.min() >= 0
    assert flow_residual(m, occ.d) <= 1e-8
    again = compute_occupancy(m, policy_from_occupancy(occ))
    assert np.abs(again.d - occ.d).max() <= 1e-8


@settings(max_examples=40, deadline=None)
@given(mdp_params)
def test_adjoint_identity(params):
    S, A, gamma, seed = params
    rng = np.random.default_rng(seed)
    m = random_mdp(S, A, gamma, rng)
    V = rng.normal(size=S)
    d = rng.random((S, A))
    lhs = V @ m.pushforward(d)
    rhs = np.sum(d * m.expected_next(V))
    assert abs(lhs - rhs) <= 1e-10
