"""Tabular MDP oracle and the TD learner built on the package's loss functions."""

import numpy as np
import pytest

from rl_cyclegan.tabular import (
    TabularMDP,
    fit_q_tabular_oracle,
    make_chain_mdp,
    make_grid_mdp,
    td_learn_tabular,
)


def test_chain_oracle_hand_values():
    # Terminating at the goal pays 1; the optimal plan from s0 in a length-3
    # chain is advance, advance, terminate: Q(s0, advance) = 0.9^2.
    q = fit_q_tabular_oracle(make_chain_mdp(3), gamma=0.9)
    assert q[2, 1] == pytest.approx(1.0, abs=1e-9)
    assert q[1, 0] == pytest.approx(0.9, abs=1e-9)
    assert q[0, 0] == pytest.approx(0.81, abs=1e-9)
    assert q[0, 1] == pytest.approx(0.0, abs=1e-9)


def test_oracle_myopic_limit():
    # As gamma -> 0 only the immediate reward survives.
    q = fit_q_tabular_oracle(make_chain_mdp(4), gamma=1e-12)
    expected = np.zeros_like(q)
    expected[3, 1] = 1.0
    np.testing.assert_allclose(q, expected, atol=1e-9)


def test_grid_oracle_distance_structure():
    # Q of moving toward the goal decays by one gamma factor per step of
    # Manhattan distance remaining after the move.
    q = fit_q_tabular_oracle(make_grid_mdp(4, goal=15), gamma=0.9)
    assert q[15, 2] == pytest.approx(1.0)
    assert q[14, 0] == pytest.approx(0.9)    # right into the corner
    assert q[11, 1] == pytest.approx(0.9)    # up into the corner
    assert q[0, 0] == pytest.approx(0.9 ** 6)
    # staying is never better than progressing
    assert (q[:, 3] <= q.max(axis=1) + 1e-12).all()


def test_td_matches_oracle_chain():
    mdp = make_chain_mdp(3)
    oracle = fit_q_tabular_oracle(mdp, gamma=0.9)
    learned = td_learn_tabular(mdp, gamma=0.9, sweeps=300)
    np.testing.assert_allclose(learned, oracle, atol=1e-3)


def test_td_matches_oracle_grid():
    mdp = make_grid_mdp(4, goal=15)
    oracle = fit_q_tabular_oracle(mdp, gamma=0.9)
    learned = td_learn_tabular(mdp, gamma=0.9, sweeps=600)
    np.testing.assert_allclose(learned, oracle, atol=1e-3)


def test_size_limit_enforced():
    with pytest.raises(ValueError):
        TabularMDP(num_states=17, num_actions=2, transitions=())
