"""Independent reference computations shared by the test modules."""
import numpy as np

from darl import qlearn
from darl.qlearn import ReplayBuffer, SelectionState, Transition


def _state(features, selected=()):
    features = np.array(features, dtype=float)
    mask = np.zeros(features.shape[1], dtype=bool)
    mask[list(selected)] = True
    features[:, mask] = 0.0
    return SelectionState(features, mask)


def value_iteration(transitions, gamma, sweeps=200):
    """Q* for a small deterministic MDP given as ``{(s, a): (reward, s_next or None)}``."""
    q = {key: 0.0 for key in transitions}
    for _ in range(sweeps):
        for (s, a), (r, nxt) in transitions.items():
            future = max((v for (s2, _), v in q.items() if s2 == nxt), default=0.0) if nxt else 0.0
            q[(s, a)] = r + gamma * future
    return q


def toy_selection_mdp():
    """Three non-terminal states of a two-candidate selection problem.

    From the empty state either candidate earns +1.  After taking ``a``
    first, ``b`` earns -1; after ``b`` first, ``a`` earns +1.
    """
    s0 = _state([[1.0, 2.0]])
    sa, sb = qlearn.apply_action(s0, 0), qlearn.apply_action(s0, 1)
    sab, sba = qlearn.apply_action(sa, 1), qlearn.apply_action(sb, 0)
    table = {
        ("s0", 0): (1, "sa"),
        ("s0", 1): (1, "sb"),
        ("sa", 1): (-1, None),
        ("sb", 0): (1, None),
    }
    states = {"s0": s0, "sa": sa, "sb": sb}
    trs = [
        Transition(s0, 0, 1, sa, False),
        Transition(s0, 1, 1, sb, False),
        Transition(sa, 1, -1, sab, True),
        Transition(sb, 0, 1, sba, True),
    ]
    return table, states, trs


def train_toy_dqn(max_updates=50_000, check_every=500, seed=0):
    """Fit a DQN on the toy MDP; returns (oracle, learned, updates used)."""
    table, states, trs = toy_selection_mdp()
    oracle = value_iteration(table, 0.9)
    dqn = qlearn.make_dqn(1, 2, np.random.default_rng(seed), hidden=(32, 32))
    buf = ReplayBuffer(16, seed=seed)
    for t in trs:
        buf.push(t)
    learned = {}
    for step in range(1, max_updates + 1):
        qlearn.td_update(dqn, buf, 4, 0.9, 1e-3)
        if step % check_every == 0:
            learned = {(s, a): float(qlearn.q_values(dqn, states[s])[a]) for (s, a) in oracle}
            if all(abs(learned[k] - oracle[k]) < 0.05 for k in oracle):
                return oracle, learned, step
    return oracle, learned, max_updates
