"""Joint training loop: select source instances with the agent, adapt on them.

Each outer iteration samples a fresh candidate set, lets the agent pick
instances until it earns a -1 reward or runs out of candidates, and then
runs alternating discriminator / feature steps on the instances it kept.
"""
from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field, fields

import numpy as np

from . import adversarial as adv
from . import qlearn
from .exceptions import ConfigError
from .relevance import class_relevance, relevance_scores, reward

logger = logging.getLogger(__name__)

VARIANTS = ("full_darl", "no_qlearning", "pseudo_label_selection", "source_only")
STREAMS = ("data", "agent", "adversarial", "replay")


@dataclass
class DarlConfig:
    """Hyperparameters of one run.  Defaults are the desk-scale settings."""

    tau: float = 0.3
    gamma: float = 0.9
    n_candidates: int = 16
    outer_iterations: int = 300
    pretrain_epochs: int = 200
    pretrain_batch: int = 32
    lr_pretrain: float = 1e-3
    disc_warmup_steps: int = 200
    adv_steps_per_iteration: int = 10
    adv_batch_cap: int = 64
    lr_dqn: float = 1e-4
    lr_adv: float = 3e-4
    classifier_data: str = "selected"
    beta1_dqn: float = 0.9
    beta1_adv: float = 0.5
    epsilon_start: float = 1.0
    epsilon_end: float = 0.0
    epsilon_decay_fraction: float = 0.8
    replay_capacity: int = 2048
    replay_batch: int = 32
    feature_dim: int = 16
    hidden_width: int = 32
    dqn_hidden: tuple = (64, 32, 16)
    plateau_window: int = 20
    plateau_tol: float = 1e-3
    seed: int = 0

    def __post_init__(self):
        self.dqn_hidden = tuple(int(h) for h in self.dqn_hidden)
        self.validate()

    def validate(self):
        def check(name, ok, what):
            if not ok:
                raise ConfigError(f"darl.{name} = {getattr(self, name)!r}: {what}")

        check("tau", 0.0 <= self.tau <= 1.0, "must lie in [0, 1]")
        check("gamma", 0.0 <= self.gamma < 1.0, "must lie in [0, 1)")
        for name in ("epsilon_start", "epsilon_end", "epsilon_decay_fraction"):
            check(name, 0.0 <= getattr(self, name) <= 1.0, "must lie in [0, 1]")
        for name in ("lr_pretrain", "lr_dqn", "lr_adv"):
            check(name, getattr(self, name) > 0, "must be > 0")
        for name in ("beta1_dqn", "beta1_adv"):
            check(name, 0.0 <= getattr(self, name) < 1.0, "must lie in [0, 1)")
        for name in (
            "n_candidates", "pretrain_epochs", "pretrain_batch", "adv_steps_per_iteration",
            "adv_batch_cap", "replay_capacity", "replay_batch", "feature_dim", "hidden_width",
            "plateau_window",
        ):
            check(name, getattr(self, name) >= 1, "must be >= 1")
        check("outer_iterations", self.outer_iterations >= 0, "must be >= 0")
        check("disc_warmup_steps", self.disc_warmup_steps >= 0, "must be >= 0")
        check("classifier_data", self.classifier_data in ("selected", "source"), "must be 'selected' or 'source'")
        check("plateau_tol", self.plateau_tol >= 0, "must be >= 0")
        check("dqn_hidden", len(self.dqn_hidden) >= 1 and min(self.dqn_hidden) >= 1, "widths must be >= 1")

    def epsilon(self, iteration):
        """Exploration rate for 1-based outer ``iteration``: linear decay, then flat."""
        horizon = self.epsilon_decay_fraction * self.outer_iterations
        if horizon <= 0:
            return self.epsilon_end
        frac = min(1.0, (iteration - 1) / horizon)
        return self.epsilon_start + frac * (self.epsilon_end - self.epsilon_start)

    @classmethod
    def field_names(cls):
        return [f.name for f in fields(cls)]


@dataclass
class IterationRecord:
    iteration: int
    episode_len: int
    mean_reward: float
    n_selected: int
    n_selected_shared: int
    precision: float
    target_acc: float
    test_error: float
    d_loss: float
    adv_loss: float
    cls_loss: float
    td_loss: float
    epsilon: float
    adv_skipped: bool
    mu_degenerate: bool
    mu: tuple


@dataclass
class RunMetrics:
    """Per-iteration records of one run plus a few run-level facts."""

    variant: str
    k_source: int
    pretrain_accuracy: float
    records: list = field(default_factory=list)
    stopped_early: bool = False

    def __len__(self):
        return len(self.records)

    @property
    def final_target_accuracy(self):
        return self.records[-1].target_acc if self.records else self.pretrain_accuracy

    def pooled_precision(self, last=None):
        """Shared-class precision of all instances selected in the last ``last`` iterations."""
        recs = self.records if last is None else self.records[-last:]
        n = sum(r.n_selected for r in recs)
        return 1.0 if n == 0 else sum(r.n_selected_shared for r in recs) / n

    def to_dict(self):
        out = asdict(self)
        out["records"] = [asdict(r) for r in self.records]
        return out

    @classmethod
    def from_dict(cls, data):
        recs = [IterationRecord(**{**r, "mu": tuple(r["mu"])}) for r in data["records"]]
        return cls(data["variant"], data["k_source"], data["pretrain_accuracy"], recs, data["stopped_early"])


@dataclass
class Evaluation:
    target_accuracy: float
    per_class_accuracy: dict
    selection_precision: float = None
    n_selected: int = 0


@dataclass
class Agent:
    dqn: qlearn.DQN
    buffer: qlearn.ReplayBuffer
    rng: np.random.Generator


@dataclass
class EpisodeResult:
    actions: list
    rewards: list
    phis: list
    transitions: list
    td_losses: list

    @property
    def selected(self):
        """Candidate indices that earned +1 (the rejected last pick is excluded)."""
        return [a for a, r in zip(self.actions, self.rewards) if r > 0]


def selection_precision(selected_labels, shared_classes):
    """Fraction of selected instances whose class is shared; 1 for an empty selection."""
    selected_labels = np.asarray(selected_labels)
    if selected_labels.size == 0:
        return 1.0
    return float(np.isin(selected_labels, sorted(shared_classes)).mean())


def evaluate(nets, task, selected=None):
    """Target accuracy of argmax C(F(x)) against the hidden labels.

    ``selected`` optionally gives source indices whose shared-class
    precision is reported alongside.
    """
    if task.target_y_hidden is None:
        raise ValueError("task carries no target ground truth to evaluate against")
    _, pred, _ = adv.predict(nets, task.target_x)
    truth = task.target_y_hidden
    correct = pred == truth
    per_class = {int(c): float(correct[truth == c].mean()) for c in np.unique(truth)}
    out = Evaluation(float(correct.mean()), per_class)
    if selected is not None:
        selected = np.asarray(selected, dtype=np.int64)
        out.selection_precision = selection_precision(task.source_y[selected], task.shared_classes)
        out.n_selected = int(selected.size)
    return out


def run_episode(agent, nets, candidate_x, candidate_y, mu, cfg, epsilon):
    """Select from one candidate set until a -1 reward or exhaustion.

    Every step pushes a transition and runs one TD update.  Relevance is
    computed once, since the networks do not change during an episode.
    """
    n_c = candidate_x.shape[1]
    if n_c != cfg.n_candidates:
        raise ValueError(f"expected {cfg.n_candidates} candidates, got {n_c}")
    phi = relevance_scores(nets, candidate_x, mu, candidate_y)
    state = qlearn.init_state(nets, candidate_x)
    result = EpisodeResult([], [], [], [], [])
    while not state.exhausted:
        action = qlearn.select_action(agent.dqn, state, epsilon, agent.rng)
        r = reward(phi[action], cfg.tau)
        nxt = qlearn.apply_action(state, action)
        terminal = r < 0 or nxt.exhausted
        tr = qlearn.Transition(state, action, r, nxt, terminal)
        agent.buffer.push(tr)
        loss = qlearn.td_update(agent.dqn, agent.buffer, cfg.replay_batch, cfg.gamma, cfg.lr_dqn, cfg.beta1_dqn)
        result.actions.append(action)
        result.rewards.append(r)
        result.phis.append(float(phi[action]))
        result.transitions.append(tr)
        if loss is not None:
            result.td_losses.append(loss)
        state = nxt
        if r < 0:
            break
    logger.debug(
        "episode actions=%s rewards=%s phi=%s",
        result.actions, result.rewards, [round(v, 6) for v in result.phis],
    )
    return result


class DarlTrainer:
    """Stateful driver for one run of one variant.

    Call :meth:`pretrain` once and :meth:`step` per outer iteration, or
    :meth:`run` for both.  All state needed to resume (networks, replay
    buffer, generators, records) lives on the instance.
    """

    def __init__(self, task, cfg, variant="full_darl"):
        if variant not in VARIANTS:
            raise ValueError(f"variant must be one of {VARIANTS}, got {variant!r}")
        if task.n_source < cfg.n_candidates:
            raise ConfigError(
                f"darl.n_candidates = {cfg.n_candidates}: larger than the source set ({task.n_source})"
            )
        self.task = task
        self.cfg = cfg
        self.variant = variant
        seqs = dict(zip(STREAMS, np.random.SeedSequence(cfg.seed).spawn(len(STREAMS))))
        self.rngs = {name: np.random.default_rng(seq) for name, seq in seqs.items() if name != "replay"}
        self.nets = adv.make_adv_nets(
            task.d_in, task.k_source, self.rngs["adversarial"],
            feature_dim=cfg.feature_dim, hidden=cfg.hidden_width, disc_hidden=cfg.hidden_width,
        )
        dqn = qlearn.make_dqn(cfg.feature_dim, cfg.n_candidates, self.rngs["agent"], cfg.dqn_hidden)
        self.agent = Agent(dqn, qlearn.ReplayBuffer(cfg.replay_capacity, seqs["replay"]), self.rngs["agent"])
        self.metrics = None
        self.iteration = 0
        self.pretrain_curve = []

    @property
    def has_labels(self):
        return self.task.target_y_hidden is not None

    @property
    def done(self):
        return self.metrics is not None and (
            self.iteration >= self.cfg.outer_iterations or self.metrics.stopped_early
        )

    def pretrain(self):
        """Source pretraining of F and C, then a discriminator warm-up with F fixed."""
        cfg = self.cfg
        rng = self.rngs["adversarial"]
        self.pretrain_curve = adv.pretrain_source(
            self.nets, self.task, cfg.pretrain_epochs, cfg.lr_pretrain, rng, cfg.pretrain_batch, cfg.beta1_adv
        )
        adv.warm_up_discriminator(
            self.nets, self.task, cfg.disc_warmup_steps, cfg.lr_adv, rng, cfg.adv_batch_cap, cfg.beta1_adv
        )
        acc = evaluate(self.nets, self.task).target_accuracy if self.has_labels else math.nan
        self.metrics = RunMetrics(self.variant, self.task.k_source, acc)
        return self

    def _sample_candidates(self):
        return np.sort(self.rngs["data"].choice(self.task.n_source, self.cfg.n_candidates, replace=False))

    def step(self):
        """Run one outer iteration and append its record."""
        if self.metrics is None:
            raise RuntimeError("call pretrain() before step()")
        cfg, task = self.cfg, self.task
        self.iteration += 1
        eps = cfg.epsilon(self.iteration)
        mu = class_relevance(self.nets, task.target_x)
        mu_degenerate = bool(mu.max() <= 0)
        episode_len, mean_reward, td_loss = 0, math.nan, math.nan

        if self.variant == "no_qlearning":
            selected = np.arange(task.n_source)
        elif self.variant == "pseudo_label_selection":
            cand = self._sample_candidates()
            phi = relevance_scores(self.nets, task.source_x[:, cand], mu, task.source_y[cand])
            selected = cand[phi > cfg.tau]
        elif self.variant == "full_darl":
            cand = self._sample_candidates()
            ep = run_episode(self.agent, self.nets, task.source_x[:, cand], task.source_y[cand], mu, cfg, eps)
            selected = cand[ep.selected]
            episode_len = len(ep.actions)
            mean_reward = float(np.mean(ep.rewards))
            td_loss = float(np.mean(ep.td_losses)) if ep.td_losses else math.nan
        else:
            raise RuntimeError("source_only runs have no outer iterations")

        d_loss = adv_loss = cls_loss = math.nan
        skipped = selected.size == 0
        if not skipped:
            pool = (task.source_x, task.source_y) if cfg.classifier_data == "source" else (None, None)
            d_loss, adv_loss, cls_loss = adv.adversarial_round(
                self.nets, task.source_x[:, selected], task.source_y[selected], task.target_x,
                cfg.adv_steps_per_iteration, cfg.lr_adv, self.rngs["adversarial"], cfg.adv_batch_cap, cfg.beta1_adv,
                *pool,
            )

        if self.has_labels:
            ev = evaluate(self.nets, task, selected)
            acc, precision = ev.target_accuracy, ev.selection_precision
            n_shared = int(np.isin(task.source_y[selected], sorted(task.shared_classes)).sum())
        else:
            acc = precision = math.nan
            n_shared = 0
        self.metrics.records.append(IterationRecord(
            iteration=self.iteration, episode_len=episode_len, mean_reward=mean_reward,
            n_selected=int(selected.size), n_selected_shared=n_shared, precision=precision,
            target_acc=acc, test_error=1.0 - acc, d_loss=d_loss, adv_loss=adv_loss, cls_loss=cls_loss,
            td_loss=td_loss, epsilon=float(eps), adv_skipped=bool(skipped), mu_degenerate=mu_degenerate,
            mu=tuple(float(m) for m in mu),
        ))
        self.metrics.stopped_early = self._plateaued()
        return self.metrics.records[-1]

    def _plateaued(self):
        w = self.cfg.plateau_window
        recs = self.metrics.records
        if len(recs) <= w:
            return False
        errs = [r.test_error for r in recs[-(w + 1):]]
        return bool(np.isfinite(errs).all() and max(errs) - min(errs) < self.cfg.plateau_tol)

    def run(self):
        if self.metrics is None:
            self.pretrain()
        if self.variant == "source_only":
            return self.metrics
        while not self.done:
            self.step()
        return self.metrics


def run_darl(task, cfg):
    """Full joint training.  Returns ``(nets, metrics)``."""
    trainer = DarlTrainer(task, cfg, "full_darl")
    metrics = trainer.run()
    return trainer.nets, metrics


def run_ablation(task, cfg, variant):
    """Run one of :data:`VARIANTS` and return its :class:`RunMetrics`."""
    return DarlTrainer(task, cfg, variant).run()
