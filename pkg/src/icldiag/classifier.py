"""Softmax classifier over the known classes for the open-set pipeline."""

from __future__ import annotations

import json
import os
from dataclasses import dataclass

import numpy as np

from .data import TabularDataset
from .errors import ConfigError, TrainingDivergenceError, UsageError
from .nn import AdamState, DenseNet, adam_step, build_mlp, load_net, save_net, softmax, softmax_cross_entropy


@dataclass
class ClassifierConfig:
    hidden_units: int = 20
    lr: float = 0.001
    epochs: int = 200
    batch_size: int = 128
    seed: int = 0

    def validate(self) -> None:
        if self.hidden_units < 1:
            raise ConfigError("hidden_units must be >= 1")
        if self.epochs < 0 or self.batch_size < 1:
            raise ConfigError("epochs must be >= 0 and batch_size >= 1")


class KnownClassifier:
    """A one-hidden-layer MLP plus the original-id <-> index mapping.

    Internally classes are dense indices 0..N-1 over the sorted original
    ids; predictions are mapped back to original ids on output.
    """

    def __init__(self, net: DenseNet, classes: np.ndarray, loss_history=None):
        self.net = net
        self.classes = np.asarray(classes, dtype=int)
        self.loss_history = loss_history or []

    @property
    def n_classes(self) -> int:
        return self.classes.size

    def to_index(self, labels) -> np.ndarray:
        labels = np.asarray(labels, dtype=int)
        idx = np.searchsorted(self.classes, labels)
        bad = (idx >= self.classes.size) | (self.classes[np.minimum(idx, self.classes.size - 1)] != labels)
        if np.any(bad):
            raise UsageError(f"labels {np.unique(labels[bad]).tolist()} not in the known set")
        return idx

    def to_label(self, index) -> np.ndarray:
        return self.classes[np.asarray(index, dtype=int)]


def train_classifier(train: TabularDataset, config: ClassifierConfig) -> KnownClassifier:
    """Adam + cross-entropy training; deterministic per seed."""
    config.validate()
    classes = np.unique(train.labels)
    if classes.size < 2:
        raise ConfigError("classifier needs at least 2 distinct classes")
    X = np.asarray(train.values, dtype=float)
    y = np.searchsorted(classes, train.labels)
    net = build_mlp(
        [X.shape[1], config.hidden_units, classes.size],
        activations=["relu", "linear"],
        seed=config.seed,
    )
    params = net.parameters()
    state = AdamState(lr=config.lr)
    rng = np.random.default_rng(config.seed)
    n = X.shape[0]
    history = []
    for epoch in range(config.epochs):
        order = rng.permutation(n)
        total = 0.0
        for start in range(0, n, config.batch_size):
            sel = order[start : start + config.batch_size]
            logits, cache = net.forward(X[sel])
            loss, dlogits = softmax_cross_entropy(logits, y[sel])
            if not np.isfinite(loss):
                raise TrainingDivergenceError(
                    f"non-finite loss at epoch {epoch}, batch {start // config.batch_size}"
                )
            grads = net.backward(cache, dlogits)
            adam_step(params, grads, state)
            total += loss * sel.size
        history.append(total / n)
    net.mode = "infer"
    return KnownClassifier(net, classes, history)


def predict_known(model: KnownClassifier, x: np.ndarray):
    """Softmax probabilities and argmax class ids (ties -> lowest id).

    A 1-d input returns ((N,), int); a batch returns ((n, N), (n,)).
    """
    x = np.asarray(x, dtype=float)
    single = x.ndim == 1
    X = np.atleast_2d(x)
    probs = softmax(model.net.infer(X))
    idx = probs.argmax(axis=1)  # argmax takes the first (lowest) index on ties
    ids = model.to_label(idx)
    if single:
        return probs[0], int(ids[0])
    return probs, ids


def save_classifier(model: KnownClassifier, directory) -> None:
    os.makedirs(directory, exist_ok=True)
    save_net(model.net, os.path.join(directory, "classifier.net"))
    with open(os.path.join(directory, "classes.json"), "w", encoding="utf-8") as fh:
        json.dump({"classes": model.classes.tolist()}, fh, indent=2, sort_keys=True)
        fh.write("\n")


def load_classifier(directory) -> KnownClassifier:
    net, _ = load_net(os.path.join(directory, "classifier.net"))
    with open(os.path.join(directory, "classes.json"), "r", encoding="utf-8") as fh:
        meta = json.load(fh)
    return KnownClassifier(net, np.array(meta["classes"], dtype=int))
