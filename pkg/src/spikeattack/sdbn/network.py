"""The 784-500-500-10 spiking DBN: greedy pretraining, supervised top layer, rate-mode inference."""
from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy.optimize import minimize

from ..dataset import GRID, Image, LabeledImageSet
from .neuron import NeuronParams, layer_moments, layer_rates, siegert
from .rbm import Rbm, RbmTrainConfig, hidden_activation, rbm_train_pcd

log = logging.getLogger(__name__)

TOPOLOGY = (GRID * GRID, 500, 500, 10)
# Pixels in [0, 1] are mapped to [0, INPUT_SCALE] before conversion to rates.
INPUT_SCALE = 0.2


@dataclass
class SdbnModel:
    stack: list  # [Rbm(784, 500), Rbm(500, 500), Rbm(500, 10)]
    neuron: NeuronParams = field(default_factory=NeuronParams)

    def __post_init__(self):
        sizes = [self.stack[0].W.shape[0]] + [r.W.shape[1] for r in self.stack]
        if tuple(sizes) != TOPOLOGY:
            raise ValueError(f"SDBN layer sizes {sizes} do not chain {TOPOLOGY}")
        for lower, upper in zip(self.stack[:-1], self.stack[1:]):
            if lower.W.shape[1] != upper.W.shape[0]:
                raise ValueError("adjacent RBMs do not share a layer")

    @property
    def topology(self):
        return TOPOLOGY

    def tensors(self):
        """Parameters in persistence order: W, b_v, b_h for each layer, bottom up."""
        return [t for r in self.stack for t in (r.W, r.b_v, r.b_h)]

    @classmethod
    def from_tensors(cls, tensors, neuron: NeuronParams) -> "SdbnModel":
        return cls([Rbm(*tensors[i : i + 3]) for i in range(0, len(tensors), 3)], neuron)


@dataclass(frozen=True)
class TopLayerConfig:
    # Full-batch L-BFGS iterations on the whole training set.
    max_iterations: int = 300
    l2: float = 0.0
    # Bound on |W| (drive per input spike). Without it the loss keeps sharpening
    # the outputs by scaling the weights without limit, and single spikes then
    # swamp the threshold.
    weight_bound: float | None = 0.5
    seed: int = 0
    # Initial weights in drive units per feature standard deviation.
    init_std: float = 0.01
    init_drive: float = 1.2
    # Rate (Hz) added to every output before normalising, keeps the loss finite.
    rate_floor: float = 1.0

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass(frozen=True)
class SdbnTrainConfig:
    layers: tuple = (RbmTrainConfig(), RbmTrainConfig(seed=1))
    top: TopLayerConfig = TopLayerConfig()
    neuron: NeuronParams = NeuronParams()

    def to_dict(self) -> dict:
        return {
            "layers": [c.to_dict() for c in self.layers],
            "top": self.top.to_dict(),
            "neuron": self.neuron.to_dict(),
        }


def input_rates(pixels, p: NeuronParams) -> np.ndarray:
    """Firing rates (Hz) for pixels in [0, 1]: ``pixel * 0.2 * r_max``."""
    if isinstance(pixels, Image):
        pixels = pixels.pixels
    x = np.asarray(pixels, dtype=float).reshape(-1, GRID * GRID)
    return x * (INPUT_SCALE * p.r_max)


def normalize_rates(rates) -> np.ndarray:
    """Rate shares per row; an all-silent row maps to the uniform vector."""
    rates = np.atleast_2d(np.asarray(rates, dtype=float))
    total = rates.sum(axis=1, keepdims=True)
    out = np.full_like(rates, 1.0 / rates.shape[1])
    live = total[:, 0] > 0
    out[live] = rates[live] / total[live]
    return out


def layer_activity(model: SdbnModel, pixels, depth: int | None = None):
    """Rates (Hz) of every layer for a batch of images; ``depth`` truncates the stack."""
    p = model.neuron
    rates = input_rates(pixels, p)
    acts = [rates]
    for rbm in model.stack[:depth]:
        rates = layer_rates(rates, rbm.W.astype(float), rbm.b_h.astype(float), p)
        acts.append(rates)
    return acts


def predict_proba(model: SdbnModel, pixels) -> np.ndarray:
    return normalize_rates(layer_activity(model, pixels)[-1])


def sdbn_rate_forward(model: SdbnModel, image) -> np.ndarray:
    return predict_proba(model, image)[0]


def sdbn_oracle(model: SdbnModel):
    """Deterministic rate-mode oracle: one image in, 10 probabilities out."""
    frozen = SdbnModel([Rbm(r.W.copy(), r.b_v.copy(), r.b_h.copy()) for r in model.stack], model.neuron)

    def oracle(image):
        return predict_proba(frozen, image)[0]

    return oracle


def _top_loss_and_grads(W, b, rates, labels, p: NeuronParams, floor: float):
    """Cross-entropy of floored rate shares and its gradient w.r.t. (W, b)."""
    mu, sigma = layer_moments(rates, W, b, p)
    r, dr_dmu, dr_dsigma = siegert(mu, sigma, p, derivatives=True)
    rf = r + floor
    total = rf.sum(axis=1, keepdims=True)
    n = len(labels)
    idx = np.arange(n)
    loss = float(np.mean(np.log(total[:, 0]) - np.log(rf[idx, labels])))
    dL_dr = np.broadcast_to(1.0 / total, r.shape).copy()
    dL_dr[idx, labels] -= 1.0 / rf[idx, labels]
    dL_dr /= n
    g_mu = dL_dr * dr_dmu
    g_sigma = dL_dr * dr_dsigma
    safe_sigma = np.maximum(sigma, 1e-12)
    gW = p.tau_m * (rates.T @ g_mu) + p.tau_m * W * (rates.T @ (g_sigma / (2.0 * safe_sigma)))
    gb = p.tau_m * g_mu.sum(axis=0)
    return loss, gW, gb


def _top_problem(features, labels, cfg: TopLayerConfig, p: NeuronParams, n_classes: int):
    """(objective, x0, bounds, unpack) for the top layer in its reparameterised coordinates."""
    rng = np.random.default_rng(cfg.seed)
    n_in = features.shape[1]
    n_w = n_in * n_classes
    mean = features.mean(axis=0)
    scale = p.tau_m * (features.std(axis=0) + 1e-3 * max(float(features.std()), 1e-12))
    x0 = np.concatenate([cfg.init_std * rng.standard_normal(n_w), np.full(n_classes, cfg.init_drive * p.v_th)])
    bounds = None
    if cfg.weight_bound is not None:
        lim = np.repeat(cfg.weight_bound * scale, n_classes)
        bounds = [(-a, a) for a in lim] + [(None, None)] * n_classes
        x0[:n_w] = np.clip(x0[:n_w], -lim, lim)

    def unpack(x):
        W = x[:n_w].reshape(n_in, n_classes) / scale[:, None]
        return W, x[n_w:] / p.tau_m - mean @ W

    def objective(x):
        W, b = unpack(x)
        loss, gW, gb = _top_loss_and_grads(W, b, features, labels, p, cfg.rate_floor)
        loss += 0.5 * cfg.l2 * float(np.sum(W * W))
        gW = gW + cfg.l2 * W - np.outer(mean, gb)
        if not np.isfinite(loss):
            raise FloatingPointError("top layer loss is not finite")
        return loss, np.concatenate([(gW / scale[:, None]).ravel(), gb / p.tau_m])

    return objective, x0, bounds, unpack


def train_top_layer(features, labels, cfg: TopLayerConfig, p: NeuronParams, n_classes: int = 10) -> Rbm:
    """Fit the 500->10 layer to the normalised Siegert output rates of a frozen stack.

    ``features`` are the rates (Hz) of the top hidden layer. The cross-entropy is
    minimised full-batch with L-BFGS over an affine reparameterisation: weights act on
    standardised features and are expressed in drive units, and the bias ``tau_m * b``
    is the drive at the mean feature vector. This keeps the problem well conditioned
    and starts every output unit above threshold, where its gradient is alive.
    """
    features = np.asarray(features, dtype=float)
    objective, x0, bounds, unpack = _top_problem(features, np.asarray(labels), cfg, p, n_classes)
    res = minimize(objective, x0, jac=True, method="L-BFGS-B", bounds=bounds, options={"maxiter": cfg.max_iterations, "gtol": 1e-12, "ftol": 1e-12})
    W, b = unpack(res.x)
    log.info("top layer: %d iterations, loss %.4f (%s)", res.nit, res.fun, res.message)
    return Rbm(W, np.zeros(features.shape[1]), b)


def sdbn_pretrain(data: LabeledImageSet, cfg: SdbnTrainConfig = SdbnTrainConfig()) -> SdbnModel:
    """Greedy stack: two PCD-trained RBMs, then a supervised 500->10 layer.

    ``data`` is in the (0, 1) working range; the input scaling is applied here.
    """
    if (data.lo, data.hi) != (0.0, 1.0):
        raise ValueError(f"SDBN training expects images in (0, 1), got ({data.lo}, {data.hi})")
    p = cfg.neuron
    act = input_rates(data.images, p) * p.t_ref
    stack = []
    for (n_v, n_h), layer_cfg in zip(zip(TOPOLOGY[:2], TOPOLOGY[1:3]), cfg.layers):
        rbm = rbm_train_pcd(act, (n_v, n_h), layer_cfg, p)
        stack.append(rbm)
        act = _batched(lambda a: hidden_activation(rbm, a, p), act)
    top = train_top_layer(act / p.t_ref, data.labels, cfg.top, p)
    return SdbnModel(stack + [top], p)


def _batched(fn, X, size: int = 2000):
    return np.concatenate([fn(X[i : i + size]) for i in range(0, len(X), size)])


def sdbn_evaluate(model: SdbnModel, data: LabeledImageSet) -> float:
    from ..dnn import evaluate_classifier

    return evaluate_classifier(lambda X: predict_proba(model, X), data)
