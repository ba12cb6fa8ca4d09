"""The non-spiking baseline: a 784-500-500-10 logistic MLP with a softmax output."""
from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from .dataset import GRID, Image, LabeledImageSet

log = logging.getLogger(__name__)

TOPOLOGY = (GRID * GRID, 500, 500, 10)


class CorruptModelError(FloatingPointError):
    pass


class TrainingDivergedError(FloatingPointError):
    def __init__(self, epoch: int, loss: float):
        super().__init__(f"training diverged at epoch {epoch} (loss={loss})")
        self.epoch = epoch
        self.loss = loss


@dataclass
class DnnModel:
    weights: list  # [(W (n_in, n_out) float32, b (n_out,) float32), ...]

    def __post_init__(self):
        sizes = [self.weights[0][0].shape[0]] + [W.shape[1] for W, _ in self.weights]
        if tuple(sizes) != TOPOLOGY:
            raise ValueError(f"DNN layer sizes {sizes} do not chain {TOPOLOGY}")
        for W, b in self.weights:
            if W.shape[1] != b.shape[0]:
                raise ValueError("bias length does not match layer width")
        self.weights = [(np.asarray(W, np.float32), np.asarray(b, np.float32)) for W, b in self.weights]

    @property
    def topology(self):
        return TOPOLOGY

    def tensors(self):
        """Parameters in persistence order: W1, b1, W2, b2, W3, b3."""
        return [t for pair in self.weights for t in pair]

    @classmethod
    def from_tensors(cls, tensors) -> "DnnModel":
        return cls([(tensors[i], tensors[i + 1]) for i in range(0, len(tensors), 2)])

    def is_finite(self) -> bool:
        return all(np.isfinite(t).all() for t in self.tensors())


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 30
    batch_size: int = 50
    learning_rate: float = 0.1
    momentum: float = 0.9
    seed: int = 0
    validation_fraction: float = 0.0

    def __post_init__(self):
        if not self.learning_rate > 0:
            raise ValueError("learning rate must be positive")
        if self.batch_size < 1:
            raise ValueError("minibatch size must be >= 1")
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")
        if not 0 <= self.validation_fraction < 1:
            raise ValueError("validation fraction must lie in [0, 1)")


def dnn_init(seed: int) -> DnnModel:
    rng = np.random.default_rng(seed)
    layers = []
    for n_in, n_out in zip(TOPOLOGY[:-1], TOPOLOGY[1:]):
        W = rng.standard_normal((n_in, n_out)) / np.sqrt(n_in)
        layers.append((W.astype(np.float32), np.zeros(n_out, np.float32)))
    return DnnModel(layers)


def _sigmoid(z):
    return 0.5 * (1.0 + np.tanh(0.5 * z))


def _softmax(z):
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def _as_batch(x) -> np.ndarray:
    if isinstance(x, Image):
        x = x.pixels
    x = np.asarray(x, dtype=float)
    return x.reshape(-1, GRID * GRID)


def predict_proba(model: DnnModel, X) -> np.ndarray:
    """Class probabilities for a batch (float64 arithmetic on float32 parameters)."""
    a = _as_batch(X)
    params = model.weights
    for W, b in params[:-1]:
        a = _sigmoid(a @ W.astype(float) + b)
    W, b = params[-1]
    z = a @ W.astype(float) + b
    if not np.isfinite(z).all():
        raise CorruptModelError("non-finite logits; model parameters are corrupt")
    return _softmax(z)


def dnn_forward(model: DnnModel, image) -> np.ndarray:
    return predict_proba(model, image)[0]


def loss_and_gradients(tensors, X, Y):
    """Mean cross-entropy and its gradient w.r.t. ``tensors`` (W1, b1, W2, b2, W3, b3).

    ``Y`` is one-hot. Arithmetic runs in the dtype of the inputs.
    """
    W1, b1, W2, b2, W3, b3 = tensors
    n = X.shape[0]
    a1 = _sigmoid(X @ W1 + b1)
    a2 = _sigmoid(a1 @ W2 + b2)
    P = _softmax(a2 @ W3 + b3)
    loss = -np.mean(np.sum(Y * np.log(np.maximum(P, 1e-30)), axis=1))
    d3 = (P - Y) / n
    gW3, gb3 = a2.T @ d3, d3.sum(0)
    d2 = (d3 @ W3.T) * a2 * (1 - a2)
    gW2, gb2 = a1.T @ d2, d2.sum(0)
    d1 = (d2 @ W2.T) * a1 * (1 - a1)
    gW1, gb1 = X.T @ d1, d1.sum(0)
    return float(loss), [gW1, gb1, gW2, gb2, gW3, gb3]


def _split(n, fraction, rng):
    order = rng.permutation(n)
    n_val = int(round(n * fraction))
    return order[n_val:], order[:n_val]


def dnn_train(init: DnnModel, data: LabeledImageSet, cfg: TrainConfig) -> DnnModel:
    """Minibatch gradient descent with momentum on the cross-entropy loss."""
    if cfg.epochs == 0:
        return init
    rng = np.random.default_rng(cfg.seed)
    X = data.flat().astype(np.float32)
    Y = np.eye(10, dtype=np.float32)[data.labels]
    train_idx, val_idx = _split(len(data), cfg.validation_fraction, rng)
    params = [t.copy() for t in init.tensors()]
    velocity = [np.zeros_like(t) for t in params]
    lr, mom = np.float32(cfg.learning_rate), np.float32(cfg.momentum)
    for epoch in range(cfg.epochs):
        order = train_idx[rng.permutation(len(train_idx))]
        total, batches = 0.0, 0
        for start in range(0, len(order), cfg.batch_size):
            idx = order[start : start + cfg.batch_size]
            loss, grads = loss_and_gradients(params, X[idx], Y[idx])
            if not np.isfinite(loss):
                raise TrainingDivergedError(epoch, loss)
            for v, g, t in zip(velocity, grads, params):
                v *= mom
                v -= lr * g
                t += v
            total += loss
            batches += 1
        msg = f"epoch {epoch + 1}/{cfg.epochs} loss {total / batches:.4f}"
        if len(val_idx):
            val = data.subset(val_idx)
            msg += f" val_acc {_accuracy(predict_proba(DnnModel.from_tensors(params), val.images), val.labels):.4f}"
        log.info(msg)
    model = DnnModel.from_tensors(params)
    if not model.is_finite():
        raise TrainingDivergedError(cfg.epochs - 1, float("nan"))
    return model


def _accuracy(P, labels) -> float:
    # np.argmax returns the first maximum, i.e. the lowest class index on ties.
    return float(np.mean(np.argmax(P, axis=1) == labels))


def evaluate_classifier(proba, data: LabeledImageSet, batch_size: int = 1000) -> float:
    """Accuracy of any batch probability function ``proba(images) -> (n, 10)``."""
    if len(data) == 0:
        raise ValueError("cannot evaluate on an empty set")
    hits = 0
    for start in range(0, len(data), batch_size):
        P = proba(data.images[start : start + batch_size])
        hits += int(np.sum(np.argmax(P, axis=1) == data.labels[start : start + batch_size]))
    return hits / len(data)


def dnn_evaluate(model: DnnModel, data: LabeledImageSet) -> float:
    return evaluate_classifier(lambda X: predict_proba(model, X), data)


def dnn_oracle(model: DnnModel):
    """Black-box view of ``model``: a function from one image to its probability vector."""
    frozen = DnnModel([(W.copy(), b.copy()) for W, b in model.weights])

    def oracle(image):
        return predict_proba(frozen, image)[0]

    return oracle
