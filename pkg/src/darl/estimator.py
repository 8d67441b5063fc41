"""scikit-learn style wrapper around the joint training loop.

Inputs follow scikit-learn's row-major ``(n_samples, n_features)``
convention and are transposed internally.
"""
from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin, TransformerMixin
from sklearn.preprocessing import LabelEncoder
from sklearn.utils.validation import check_array, check_is_fitted, check_X_y

from .adversarial import features, predict
from .orchestrator import VARIANTS, DarlConfig, DarlTrainer
from .synthdata import DaTask, ShiftSpec


class DARLClassifier(ClassifierMixin, TransformerMixin, BaseEstimator):
    """Partial-domain-adaptation classifier trained on labelled source data
    and unlabelled target data.

    Parameters
    ----------
    tau : float, default=0.3
        Relevance threshold for the agent's +1 reward.
    gamma : float, default=0.9
        Discount factor of the Q-learning targets.
    n_candidates : int, default=16
        Source instances offered to the agent per episode.
    outer_iterations : int, default=300
    pretrain_epochs : int, default=200
    lr_adv : float, default=3e-4
    lr_dqn : float, default=1e-4
    variant : str, default="full_darl"
        One of ``full_darl``, ``no_qlearning``, ``pseudo_label_selection``
        or ``source_only``.
    random_state : int, default=0
    extra_config : dict, optional
        Any other :class:`~darl.orchestrator.DarlConfig` field.

    Attributes
    ----------
    classes_ : ndarray
    n_features_in_ : int
    nets_ : AdvNets
    metrics_ : RunMetrics
    n_iter_ : int
        Outer iterations actually run.

    Examples
    --------
    >>> from darl import generate_task
    >>> task = generate_task(seed=0)
    >>> clf = DARLClassifier(outer_iterations=5, pretrain_epochs=20)
    >>> clf = clf.fit(task.source_x.T, task.source_y, X_target=task.target_x.T)
    >>> clf.predict(task.target_x.T).shape
    (80,)
    """

    def __init__(
        self,
        tau=0.3,
        gamma=0.9,
        n_candidates=16,
        outer_iterations=300,
        pretrain_epochs=200,
        lr_adv=3e-4,
        lr_dqn=1e-4,
        variant="full_darl",
        random_state=0,
        extra_config=None,
    ):
        self.tau = tau
        self.gamma = gamma
        self.n_candidates = n_candidates
        self.outer_iterations = outer_iterations
        self.pretrain_epochs = pretrain_epochs
        self.lr_adv = lr_adv
        self.lr_dqn = lr_dqn
        self.variant = variant
        self.random_state = random_state
        self.extra_config = extra_config

    def _config(self):
        extra = dict(self.extra_config or {})
        clash = sorted(set(extra) & set(self.get_params()))
        if clash:
            raise ValueError(f"extra_config repeats constructor parameters {clash}")
        return DarlConfig(
            tau=self.tau, gamma=self.gamma, n_candidates=self.n_candidates,
            outer_iterations=self.outer_iterations, pretrain_epochs=self.pretrain_epochs,
            lr_adv=self.lr_adv, lr_dqn=self.lr_dqn, seed=self.random_state, **extra,
        )

    def fit(self, X, y, X_target=None):
        """Train on labelled source ``X, y`` and unlabelled ``X_target``.

        Parameters
        ----------
        X : array-like of shape (n_source, n_features)
        y : array-like of shape (n_source,)
        X_target : array-like of shape (n_target, n_features)
            Required.

        Returns
        -------
        self
        """
        if self.variant not in VARIANTS:
            raise ValueError(f"variant must be one of {VARIANTS}, got {self.variant!r}")
        X, y = check_X_y(X, y, dtype=np.float64)
        if X_target is None:
            raise ValueError("X_target is required: the target domain drives adaptation")
        X_target = check_array(X_target, dtype=np.float64)
        if X_target.shape[1] != X.shape[1]:
            raise ValueError(
                f"X_target has {X_target.shape[1]} features, X has {X.shape[1]}"
            )
        self._encoder = LabelEncoder().fit(y)
        self.classes_ = self._encoder.classes_
        if self.classes_.size < 2:
            raise ValueError("need at least two source classes")
        self.n_features_in_ = X.shape[1]

        cfg = self._config()
        task = DaTask(
            source_x=X.T.copy(),
            source_y=self._encoder.transform(y).astype(np.int64),
            target_x=X_target.T.copy(),
            target_y_hidden=None,
            shared_classes=None,
            k_source=int(self.classes_.size),
            seed=int(self.random_state),
            shift=ShiftSpec.identity(X.shape[1]),
        )
        trainer = DarlTrainer(task, cfg, self.variant)
        self.metrics_ = trainer.run()
        self.nets_ = trainer.nets
        self.n_iter_ = trainer.iteration
        return self

    def _columns(self, X):
        check_is_fitted(self, "nets_")
        X = check_array(X, dtype=np.float64)
        if X.shape[1] != self.n_features_in_:
            raise ValueError(f"X has {X.shape[1]} features, expected {self.n_features_in_}")
        return X.T

    def predict_proba(self, X):
        """Class probabilities, shape ``(n_samples, n_classes)``."""
        return predict(self.nets_, self._columns(X))[0].T

    def predict(self, X):
        cols = self._columns(X)
        return self.classes_[predict(self.nets_, cols)[1]]

    def transform(self, X):
        """Learned features ``F(x)``, shape ``(n_samples, feature_dim)``."""
        return features(self.nets_, self._columns(X)).T
