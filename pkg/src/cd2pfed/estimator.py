"""scikit-learn compatible wrapper around a simulated federation.

``fit(X, y, groups=...)`` treats each distinct value of ``groups`` as one
client's local dataset.  ``predict``/``predict_proba`` use the ensemble of
the personalized models unless ``client`` names a single one.
"""
from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.utils.multiclass import check_classification_targets
from sklearn.utils.validation import check_array, check_is_fitted, check_X_y

from .config import FederationConfig
from .data import Dataset, DatasetShard, FederatedData
from .evaluation import ensemble_proba, predict_proba
from .server import personalized_models, run_experiment


def check_groups(groups, n_samples: int) -> np.ndarray:
    if groups is None:
        raise ValueError("groups (one client id per sample) is required")
    groups = np.asarray(groups)
    if groups.ndim != 1 or len(groups) != n_samples:
        raise ValueError(f"groups must be 1-D with {n_samples} entries, got shape {groups.shape}")
    return groups


class CD2pFedClassifier(ClassifierMixin, BaseEstimator):
    """Federated classifier with channel-decoupled personalization.

    Parameters mirror :class:`~cd2pfed.config.FederationConfig`; ``strategy``
    selects the baselines (``fedavg``, ``local``, ``lgfed``, ``fedper``).
    """

    def __init__(self, strategy="cd2pfed", hidden=(64, 64), rounds=20, local_epochs=1, batch_size=32,
                 lr=0.05, momentum=0.9, weight_decay=5e-4, p_max=0.5, lam=1.0, beta_max=0.5,
                 t0_fraction=0.1, li=True, ta=True, cd=True, num_private_layers=1, random_state=0):
        self.strategy = strategy
        self.hidden = hidden
        self.rounds = rounds
        self.local_epochs = local_epochs
        self.batch_size = batch_size
        self.lr = lr
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.p_max = p_max
        self.lam = lam
        self.beta_max = beta_max
        self.t0_fraction = t0_fraction
        self.li = li
        self.ta = ta
        self.cd = cd
        self.num_private_layers = num_private_layers
        self.random_state = random_state

    def _config(self, n_clients: int, n_features: int, n_classes: int) -> FederationConfig:
        return FederationConfig.from_dict({
            "strategy": self.strategy, "num_private_layers": self.num_private_layers,
            "clients": n_clients, "rounds": self.rounds, "local_epochs": self.local_epochs,
            "batch_size": self.batch_size, "lr": self.lr, "momentum": self.momentum,
            "weight_decay": self.weight_decay, "p_max": self.p_max, "lambda": self.lam,
            "beta_max": self.beta_max, "t0_fraction": self.t0_fraction,
            "toggles": {"LI": bool(self.li), "TA": bool(self.ta), "CD": bool(self.cd)},
            "model": {"kind": "mlp", "hidden": list(self.hidden)},
            "data": {"num_classes": max(n_classes, 2), "dims": n_features,
                     "heterogeneity": {"kind": "iid"}},
            "eval_every": self.rounds, "seed": int(self.random_state or 0),
        })

    def fit(self, X, y, groups=None):
        X, y = check_X_y(X, y, dtype=np.float64)
        check_classification_targets(y)
        groups = check_groups(groups, len(y))
        self.classes_, y_idx = np.unique(y, return_inverse=True)
        self.n_features_in_ = X.shape[1]
        self.client_ids_ = np.unique(groups)
        n_cls = max(len(self.classes_), 2)
        shards = []
        empty = Dataset(X[:0], y_idx[:0], n_cls)
        for k, cid in enumerate(self.client_ids_):
            idx = np.flatnonzero(groups == cid)
            shards.append(DatasetShard(k, Dataset(X[idx], y_idx[idx], n_cls), empty, idx, idx[:0]))
        data = FederatedData(shards, empty)
        cfg = self._config(len(shards), X.shape[1], len(self.classes_))
        self.result_ = run_experiment(cfg, data)
        self.arch_ = self.result_.arch
        self.models_ = personalized_models(self.result_.server, self.result_.clients, self.arch_)
        return self

    def _client_index(self, client) -> int:
        hits = np.flatnonzero(self.client_ids_ == client)
        if not len(hits):
            raise ValueError(f"unknown client {client!r}")
        return int(hits[0])

    def predict_proba(self, X, client=None):
        check_is_fitted(self, "models_")
        X = check_array(X, dtype=np.float64)
        if X.shape[1] != self.n_features_in_:
            raise ValueError(f"X has {X.shape[1]} features, expected {self.n_features_in_}")
        if client is None:
            proba = ensemble_proba(self.models_, self.arch_, X)
        else:
            proba = predict_proba(self.models_[self._client_index(client)], self.arch_, X)
        return proba[:, :len(self.classes_)]

    def predict(self, X, client=None):
        return self.classes_[np.argmax(self.predict_proba(X, client), axis=1)]
