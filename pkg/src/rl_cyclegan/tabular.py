"""Tiny enumerable MDPs and exact value iteration.

Independent oracle for the TD pipeline: the same clipped-target update rule
used on images must converge to the value-iteration solution here.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

from .losses import clipped_q_target, td_loss


@dataclass(frozen=True)
class TabularMDP:
    """Deterministic MDP: transitions[s][a] = (next_state, reward, terminal)."""

    num_states: int
    num_actions: int
    transitions: tuple  # tuple of tuples of (next_state, reward, terminal)

    def __post_init__(self):
        if self.num_states > 16 or self.num_actions > 4:
            raise ValueError("oracle MDPs are limited to 16 states and 4 actions")


def make_chain_mdp(length: int = 2) -> TabularMDP:
    """Chain with actions (advance, terminate); reward 1 for terminating at the end."""
    rows = []
    goal = length - 1
    for s in range(length):
        advance = (min(s + 1, goal), 0.0, False)
        terminate = (s, 1.0 if s == goal else 0.0, True)
        rows.append((advance, terminate))
    return TabularMDP(num_states=length, num_actions=2, transitions=tuple(rows))


def make_grid_mdp(side: int = 4, goal: int = 15) -> TabularMDP:
    """side x side grid; actions (right, up, grasp, stay); grasp at goal pays 1."""
    rows = []
    for s in range(side * side):
        x, y = s % side, s // side
        right = (s + 1 if x < side - 1 else s, 0.0, False)
        up = (s + side if y < side - 1 else s, 0.0, False)
        grasp = (s, 1.0 if s == goal else 0.0, True)
        stay = (s, 0.0, False)
        rows.append((right, up, grasp, stay))
    return TabularMDP(num_states=side * side, num_actions=4, transitions=tuple(rows))


def fit_q_tabular_oracle(mdp: TabularMDP, gamma: float = 0.9,
                         tol: float = 1e-10) -> np.ndarray:
    """Exact Q via value iteration."""
    q = np.zeros((mdp.num_states, mdp.num_actions))
    while True:
        v = q.max(axis=1)
        new_q = np.empty_like(q)
        for s in range(mdp.num_states):
            for a in range(mdp.num_actions):
                ns, r, terminal = mdp.transitions[s][a]
                new_q[s, a] = r if terminal else r + gamma * v[ns]
        if np.abs(new_q - q).max() < tol:
            return new_q
        q = new_q


def td_learn_tabular(mdp: TabularMDP, gamma: float = 0.9, sweeps: int = 400,
                     learning_rate: float = 0.5) -> np.ndarray:
    """TD learning through the image pipeline's target and loss functions.

    Two tabular heads trained against the clipped double-Q target; returns
    the head-1 table.
    """
    q1 = torch.zeros(mdp.num_states, mdp.num_actions, requires_grad=True)
    q2 = torch.zeros(mdp.num_states, mdp.num_actions, requires_grad=True)
    opt = torch.optim.SGD([q1, q2], lr=learning_rate)
    for _ in range(sweeps):
        loss = torch.tensor(0.0)
        for s in range(mdp.num_states):
            for a in range(mdp.num_actions):
                ns, r, terminal = mdp.transitions[s][a]
                with torch.no_grad():
                    best = int(torch.argmax(q1[ns]))
                target = clipped_q_target(r, terminal, q1[ns, best].detach(),
                                          q2[ns, best].detach(), gamma)
                loss = loss + td_loss(q1[s, a], target) + td_loss(q2[s, a], target)
        opt.zero_grad()
        loss.backward()
        opt.step()
    return q1.detach().numpy()
