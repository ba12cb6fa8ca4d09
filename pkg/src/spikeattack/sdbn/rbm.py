"""Restricted Boltzmann machines with Siegert units, trained by persistent CD.

Activations are normalised rates: a unit firing at ``r`` Hz has activation
``r * t_ref`` in [0, 1], which doubles as its Bernoulli "on" probability during
Gibbs sampling. Inputs presented at activation ``a`` fire at ``a / t_ref`` Hz.
"""
from __future__ import annotations

import logging
from dataclasses import asdict, dataclass

import numpy as np

from .neuron import NeuronParams, layer_rates

log = logging.getLogger(__name__)


class RbmDivergedError(FloatingPointError):
    def __init__(self, epoch: int):
        super().__init__(f"RBM parameters became non-finite in epoch {epoch}")
        self.epoch = epoch


@dataclass
class Rbm:
    W: np.ndarray  # (n_visible, n_hidden)
    b_v: np.ndarray
    b_h: np.ndarray

    def __post_init__(self):
        self.W = np.asarray(self.W, np.float32)
        self.b_v = np.asarray(self.b_v, np.float32)
        self.b_h = np.asarray(self.b_h, np.float32)
        if self.W.ndim != 2 or self.b_v.shape != (self.W.shape[0],) or self.b_h.shape != (self.W.shape[1],):
            raise ValueError(f"inconsistent RBM shapes W{self.W.shape} b_v{self.b_v.shape} b_h{self.b_h.shape}")

    @property
    def shape(self):
        return self.W.shape

    def is_finite(self) -> bool:
        return bool(np.isfinite(self.W).all() and np.isfinite(self.b_v).all() and np.isfinite(self.b_h).all())


@dataclass(frozen=True)
class RbmTrainConfig:
    epochs: int = 3
    learning_rate: float = 0.03
    minibatch: int = 100
    fantasy_particles: int = 100
    seed: int = 0
    momentum: float = 0.5
    final_momentum: float = 0.9
    weight_decay: float = 2e-4
    init_std: float = 0.01
    # Initial hidden bias as a fraction of the threshold drive v_th / tau_m.
    init_hidden_drive: float = 1.1
    sample_visible: bool = False

    def to_dict(self) -> dict:
        return asdict(self)


def drive_for_activation(act, p: NeuronParams, quiet: float = 0.01) -> np.ndarray:
    """Noise-free drive ``mu`` at which a unit settles at activation ``act``.

    Inverts the deterministic LIF rate. Activations below ``quiet`` map linearly onto
    sub-threshold drives so that rarely active units start silent rather than poised
    exactly at threshold.
    """
    act = np.clip(np.asarray(act, dtype=float), 0.0, 0.95)
    climb = np.maximum(act, quiet) ** -1 * p.t_ref - p.t_ref
    e = np.exp(climb / p.tau_m)
    mu = (e * p.v_th - p.v_reset) / (e - 1.0)
    return np.where(act >= quiet, mu, p.v_reset + (p.v_th - p.v_reset) * act / quiet)


def rbm_init(n_visible: int, n_hidden: int, cfg: RbmTrainConfig, p: NeuronParams, data_mean=None) -> Rbm:
    """Small random weights; visible biases reproduce ``data_mean`` when given.

    Matching the visible biases to the data keeps the first negative phase close to
    the positive one; starting from silent visible chains instead makes every weight
    grow at once until the chains ignite and the hidden layer is driven silent.
    """
    rng = np.random.default_rng([cfg.seed, n_visible, n_hidden])
    W = cfg.init_std * rng.standard_normal((n_visible, n_hidden))
    b_h = np.full(n_hidden, cfg.init_hidden_drive * p.v_th / p.tau_m)
    b_v = np.zeros(n_visible) if data_mean is None else drive_for_activation(data_mean, p) / p.tau_m
    return Rbm(W, b_v, b_h)


def hidden_activation(rbm: Rbm, visible, p: NeuronParams) -> np.ndarray:
    return p.t_ref * layer_rates(np.asarray(visible, float) / p.t_ref, rbm.W.astype(float), rbm.b_h.astype(float), p)


def visible_activation(rbm: Rbm, hidden, p: NeuronParams) -> np.ndarray:
    return p.t_ref * layer_rates(np.asarray(hidden, float) / p.t_ref, rbm.W.T.astype(float), rbm.b_v.astype(float), p)


def reconstruction_error(rbm: Rbm, data, p: NeuronParams) -> float:
    """Mean absolute per-unit error of a deterministic up-down pass."""
    rec = visible_activation(rbm, hidden_activation(rbm, data, p), p)
    return float(np.mean(np.abs(rec - data)))


def rbm_train_pcd(data, sizes, cfg: RbmTrainConfig, p: NeuronParams, init: Rbm | None = None) -> Rbm:
    """Persistent contrastive divergence with one Gibbs sweep per minibatch.

    ``data`` holds activations in [0, 1], shape (n, n_visible). Bias steps are scaled
    by ``1 / tau_m`` so that a unit step moves the membrane drive by one unit of rate.
    """
    data = np.asarray(data, dtype=float)
    n_visible, n_hidden = sizes
    if data.ndim != 2 or data.shape[1] != n_visible:
        raise ValueError(f"data must have shape (n, {n_visible})")
    if data.size and (data.min() < 0 or data.max() > 1):
        raise ValueError("RBM data must lie in [0, 1]")
    rbm = init if init is not None else rbm_init(n_visible, n_hidden, cfg, p, data.mean(axis=0) if len(data) else None)
    if cfg.epochs == 0:
        return rbm
    rng = np.random.default_rng(cfg.seed)
    W, b_v, b_h = rbm.W.astype(float), rbm.b_v.astype(float), rbm.b_h.astype(float)
    vW, vbv, vbh = np.zeros_like(W), np.zeros_like(b_v), np.zeros_like(b_h)
    chains = data[rng.choice(len(data), cfg.fantasy_particles, replace=len(data) < cfg.fantasy_particles)].copy()
    bias_scale = 1.0 / p.tau_m

    def up(v):
        return p.t_ref * layer_rates(v / p.t_ref, W, b_h, p)

    def down(h):
        return p.t_ref * layer_rates(h / p.t_ref, W.T, b_v, p)

    for epoch in range(cfg.epochs):
        mom = cfg.momentum if epoch < 5 else cfg.final_momentum
        order = rng.permutation(len(data))
        for start in range(0, len(order), cfg.minibatch):
            v0 = data[order[start : start + cfg.minibatch]]
            h0 = up(v0)
            hc = up(chains)
            hs = (rng.random(hc.shape) < hc).astype(float)
            chains = down(hs)
            if cfg.sample_visible:
                chains = (rng.random(chains.shape) < chains).astype(float)
            hm = up(chains)
            gW = v0.T @ h0 / len(v0) - chains.T @ hm / len(chains)
            vW = mom * vW + cfg.learning_rate * (gW - cfg.weight_decay * W)
            vbv = mom * vbv + cfg.learning_rate * bias_scale * (v0.mean(0) - chains.mean(0))
            vbh = mom * vbh + cfg.learning_rate * bias_scale * (h0.mean(0) - hm.mean(0))
            W += vW
            b_v += vbv
            b_h += vbh
        if not (np.isfinite(W).all() and np.isfinite(b_v).all() and np.isfinite(b_h).all()):
            raise RbmDivergedError(epoch)
        log.info("rbm %dx%d epoch %d/%d", n_visible, n_hidden, epoch + 1, cfg.epochs)
    return Rbm(W, b_v, b_h)
