"""Instance selection as an MDP, solved with a deep Q-network.

A state holds the features of the ``N_c`` candidates as columns.  Taking
action ``j`` selects candidate ``j`` and zeroes its column, so the state
keeps the same size for the whole episode.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import nn
from .adversarial import features
from .exceptions import DimensionError, ExhaustedError, InvalidActionError


@dataclass(frozen=True)
class SelectionState:
    features: np.ndarray
    selected_mask: np.ndarray

    @property
    def n_candidates(self):
        return self.features.shape[1]

    @property
    def legal_actions(self):
        return np.flatnonzero(~self.selected_mask)

    @property
    def exhausted(self):
        return bool(self.selected_mask.all())

    def flat(self):
        """Column-major flattening, the DQN input layout."""
        return self.features.reshape(-1, order="F")


@dataclass(frozen=True)
class Transition:
    state: SelectionState
    action: int
    reward: int
    next_state: SelectionState
    terminal: bool


@dataclass
class DQN:
    params: nn.ParamSet
    spec: nn.MlpSpec

    @property
    def n_actions(self):
        return self.spec.out_dim

    def copy(self):
        return DQN(self.params.copy(), self.spec)


def make_dqn(feature_dim, n_candidates, rng, hidden=(64, 32, 16), activation="relu"):
    """Four dense layers: ``d*N_c -> hidden... -> N_c``."""
    spec = nn.MlpSpec((feature_dim * n_candidates, *hidden, n_candidates), activation, "linear")
    return DQN(nn.init_params(spec, rng), spec)


def init_state(nets, candidate_x):
    """Initial state: the feature vector F(x) of each candidate as a column, nothing selected."""
    candidate_x = np.asarray(candidate_x, dtype=np.float64)
    if candidate_x.ndim != 2 or candidate_x.shape[1] == 0:
        raise ValueError("candidate set must be a nonempty (d_in, N_c) array")
    return SelectionState(features(nets, candidate_x), np.zeros(candidate_x.shape[1], dtype=bool))


def apply_action(state, action):
    """Select candidate ``action``: zero its column and mark it selected."""
    action = int(action)
    if not 0 <= action < state.n_candidates:
        raise InvalidActionError(f"action {action} out of range [0, {state.n_candidates})")
    if state.selected_mask[action]:
        raise InvalidActionError(f"candidate {action} was already selected")
    feats = state.features.copy()
    feats[:, action] = 0.0
    mask = state.selected_mask.copy()
    mask[action] = True
    return SelectionState(feats, mask)


def _stack(states):
    return np.stack([s.flat() for s in states], axis=1)


def q_values(dqn, state):
    """Q-values of every action (selected ones included, unmasked)."""
    if state.features.size != dqn.spec.in_dim:
        raise DimensionError(
            f"state has {state.features.size} entries, DQN expects {dqn.spec.in_dim}"
        )
    return nn.forward(dqn.params, dqn.spec, state.flat()[:, None])[0][:, 0]


def masked_argmax(q, mask):
    """Argmax over unmasked entries; ties go to the lowest index."""
    q = np.where(mask, -np.inf, q)
    return int(np.argmax(q))


def select_action(dqn, state, epsilon, rng):
    """Epsilon-greedy over legal actions.

    One uniform draw decides exploration on every call, so the generator
    advances identically regardless of ``epsilon``.
    """
    if not 0.0 <= epsilon <= 1.0:
        raise ValueError("epsilon must lie in [0, 1]")
    legal = state.legal_actions
    if legal.size == 0:
        raise ExhaustedError("every candidate is already selected")
    if rng.random() < epsilon:
        return int(legal[rng.integers(legal.size)])
    return masked_argmax(q_values(dqn, state), state.selected_mask)


class ReplayBuffer:
    """Fixed-capacity ring buffer of transitions with uniform sampling.

    Parameters
    ----------
    capacity : int
    seed : int or numpy.random.SeedSequence
        Seeds the sampling generator.
    """

    def __init__(self, capacity, seed=None):
        if capacity < 1:
            raise ValueError("capacity must be >= 1")
        self.capacity = int(capacity)
        self.rng = np.random.default_rng(seed)
        self._items = []
        self._next = 0

    def __len__(self):
        return len(self._items)

    def push(self, transition):
        if len(self._items) < self.capacity:
            self._items.append(transition)
        else:
            self._items[self._next] = transition
        self._next = (self._next + 1) % self.capacity

    def sample_indices(self, batch_size):
        return self.rng.integers(0, len(self._items), size=batch_size)

    def sample(self, batch_size):
        """``batch_size`` transitions drawn uniformly with replacement."""
        return [self._items[i] for i in self.sample_indices(batch_size)]

    def items(self):
        """Contents from oldest to newest."""
        if len(self._items) < self.capacity:
            return list(self._items)
        return self._items[self._next:] + self._items[:self._next]

    def to_arrays(self):
        """Storage order, write cursor and sampler state as plain arrays."""
        if not self._items:
            raise ValueError("empty buffer has no array form")
        t = self._items
        return {
            "state_features": np.stack([x.state.features for x in t]),
            "state_masks": np.stack([x.state.selected_mask for x in t]),
            "next_features": np.stack([x.next_state.features for x in t]),
            "next_masks": np.stack([x.next_state.selected_mask for x in t]),
            "actions": np.array([x.action for x in t], dtype=np.int64),
            "rewards": np.array([x.reward for x in t], dtype=np.int64),
            "terminal": np.array([x.terminal for x in t], dtype=bool),
            "cursor": np.array([self._next, self.capacity], dtype=np.int64),
        }

    @classmethod
    def from_arrays(cls, arrays, rng_state):
        """Inverse of :meth:`to_arrays`; ``rng_state`` restores the sampler."""
        cursor, capacity = (int(v) for v in arrays["cursor"])
        buf = cls(capacity)
        buf.rng.bit_generator.state = rng_state
        for i in range(len(arrays["actions"])):
            buf._items.append(Transition(
                SelectionState(arrays["state_features"][i].copy(), arrays["state_masks"][i].copy()),
                int(arrays["actions"][i]),
                int(arrays["rewards"][i]),
                SelectionState(arrays["next_features"][i].copy(), arrays["next_masks"][i].copy()),
                bool(arrays["terminal"][i]),
            ))
        if len(buf._items) > capacity or not 0 <= cursor < capacity:
            raise ValueError("cursor or item count inconsistent with capacity")
        buf._next = cursor
        return buf


def td_targets(dqn, transitions, gamma):
    """Bootstrapped targets ``R`` (terminal) or ``R + gamma * max_legal Q(s')``.

    Targets are plain arrays, so no gradient flows through them.
    """
    rewards = np.array([t.reward for t in transitions], dtype=np.float64)
    terminal = np.array([t.terminal for t in transitions], dtype=bool)
    targets = rewards.copy()
    live = np.flatnonzero(~terminal)
    if live.size:
        nxt = [transitions[i].next_state for i in live]
        q_next = nn.forward(dqn.params, dqn.spec, _stack(nxt))[0]
        masks = np.stack([s.selected_mask for s in nxt], axis=1)
        q_next = np.where(masks, -np.inf, q_next)
        targets[live] += gamma * q_next.max(axis=0)
    return targets


def td_loss_and_grad(dqn, transitions, gamma):
    """Mean squared TD error on the taken actions and its gradient."""
    targets = td_targets(dqn, transitions, gamma)
    x = _stack([t.state for t in transitions])
    actions = np.array([t.action for t in transitions])
    cols = np.arange(len(transitions))
    target_matrix = np.zeros((dqn.n_actions, len(transitions)))
    target_matrix[actions, cols] = targets
    mask = np.zeros_like(target_matrix)
    mask[actions, cols] = 1.0
    return nn.loss_and_grad(dqn.params, dqn.spec, x, target_matrix, "squared_error", mask=mask)


def td_update(dqn, buffer, batch_size, gamma, lr, beta1=0.9):
    """Sample a minibatch, take one Adam step on the TD loss.

    Returns the pre-step loss, or ``None`` while the buffer holds fewer
    than ``batch_size`` transitions.
    """
    if len(buffer) < batch_size:
        return None
    batch = buffer.sample(batch_size)
    loss, grads = td_loss_and_grad(dqn, batch, gamma)
    nn.adam_step(dqn.params, grads, lr, beta1=beta1)
    return loss
