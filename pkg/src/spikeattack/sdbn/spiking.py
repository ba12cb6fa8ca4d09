"""Event-driven evaluation of a trained SDBN with Poisson inputs and LIF units.

Random streams: run ``r`` of a presentation draws its input spikes from
``Generator(PCG64(SeedSequence([sim.seed, r])))``. The stream does not depend on the
image or on its position in a batch, so every query of a stochastic oracle sees the
same noise realisation (common random numbers) and batched runs equal single runs.
"""
from __future__ import annotations

import csv
from dataclasses import asdict, dataclass
from typing import NamedTuple

import numpy as np

from ..dataset import GRID, Image
from .network import INPUT_SCALE, SdbnModel
from .neuron import NeuronParams


@dataclass(frozen=True)
class SimConfig:
    dt: float = 1e-3
    duration: float = 1.0
    seed: int = 0
    repeats: int = 3

    def __post_init__(self):
        if not self.dt > 0:
            raise ValueError("dt must be positive")
        if not self.duration >= self.dt:
            raise ValueError("duration must be at least one time step")
        if self.repeats < 1:
            raise ValueError("repeats must be a positive integer")

    @property
    def steps(self) -> int:
        return int(round(self.duration / self.dt))

    def to_dict(self) -> dict:
        return asdict(self)


def run_rng(seed: int, run: int) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence([seed, run])))


def _poisson_trains(values, p: NeuronParams, duration: float, rng: np.random.Generator):
    rates = np.asarray(values, dtype=float).ravel() * p.r_max
    counts = rng.poisson(rates * duration)
    trains = []
    for n in counts:
        t = np.unique(rng.uniform(0.0, duration, n)) if n else np.empty(0)
        trains.append(t)
    return trains


def poisson_encode(image, p: NeuronParams, sim: SimConfig, run: int = 0) -> list:
    """One Poisson spike train per pixel, at ``value * r_max`` Hz.

    Pixel values are taken as spike probabilities, i.e. already scaled into [0, 0.2]
    by the caller. Returns 784 strictly increasing arrays of times in [0, duration).
    """
    values = image.pixels if isinstance(image, Image) else np.asarray(image, dtype=float)
    if values.size != GRID * GRID:
        raise ValueError("expected a 28x28 image")
    return _poisson_trains(values, p, sim.duration, run_rng(sim.seed, run))


def bin_trains(trains, sim: SimConfig) -> np.ndarray:
    """Spike counts per (step, input)."""
    steps = sim.steps
    out = np.zeros((steps, len(trains)))
    lengths = [len(t) for t in trains]
    if sum(lengths):
        times = np.concatenate(trains)
        idx = np.repeat(np.arange(len(trains)), lengths)
        step = np.minimum((times / sim.dt).astype(np.int64), steps - 1)
        np.add.at(out, (step, idx), 1.0)
    return out


class SpikeOutput(NamedTuple):
    probs: np.ndarray  # (10,) averaged spike-count shares
    counts: np.ndarray  # (repeats, 10) output spikes per run
    silent: bool  # True when some run produced no output spike at all


def simulate(model: SdbnModel, pixels, sim: SimConfig, record: bool = False):
    """Simulate ``sim.repeats`` runs for a batch of (0, 1) images.

    Returns output spike counts of shape (batch, repeats, 10) and, with ``record``,
    a list of ``(time, layer, neuron)`` events for the first image and run.
    """
    p = model.neuron
    x = np.asarray(pixels.pixels if isinstance(pixels, Image) else pixels, dtype=float).reshape(-1, GRID * GRID)
    B, R, steps = len(x), sim.repeats, sim.steps
    # input[t, b*R + r, i]
    inputs = np.empty((steps, B * R, x.shape[1]))
    for b in range(B):
        for r in range(R):
            inputs[:, b * R + r] = bin_trains(_poisson_trains(x[b] * INPUT_SCALE, p, sim.duration, run_rng(sim.seed, r)), sim)
    layers = [(rbm.W.astype(float), rbm.b_h.astype(float)) for rbm in model.stack]
    V = [np.full((B * R, W.shape[1]), p.v_reset) for W, _ in layers]
    refractory = [np.zeros((B * R, W.shape[1]), dtype=np.int64) for W, _ in layers]
    ref_steps = int(round(p.t_ref / sim.dt))
    leak = sim.dt / p.tau_m
    counts = np.zeros((B * R, layers[-1][0].shape[1]))
    events = []
    for t in range(steps):
        s = inputs[t]
        if record:
            events.extend((t * sim.dt, 0, int(i)) for i in np.flatnonzero(s[0]))
        for k, (W, b) in enumerate(layers):
            v = V[k]
            v += leak * (p.tau_m * b - v) + s @ W
            held = refractory[k] > 0
            v[held] = p.v_reset
            refractory[k][held] -= 1
            fired = v >= p.v_th
            v[fired] = p.v_reset
            refractory[k][fired] = ref_steps
            s = fired.astype(float)
            if record:
                events.extend((t * sim.dt, k + 1, int(i)) for i in np.flatnonzero(fired[0]))
        counts += s
    counts = counts.reshape(B, R, -1)
    return (counts, events) if record else counts


def spike_probabilities(counts) -> tuple:
    """Average per-run spike-count shares; silent runs count as uniform."""
    counts = np.asarray(counts, dtype=float)
    totals = counts.sum(axis=-1, keepdims=True)
    shares = np.where(totals > 0, counts / np.where(totals > 0, totals, 1.0), 1.0 / counts.shape[-1])
    silent = (totals[..., 0] == 0).any(axis=-1)
    return shares.mean(axis=-2), silent


def sdbn_spike_forward(model: SdbnModel, image, sim: SimConfig, details: bool = False):
    """Probability vector from spike counts of a LIF simulation of ``image``."""
    counts = simulate(model, image, sim)[0]
    probs, silent = spike_probabilities(counts)
    if details:
        return SpikeOutput(probs, counts, bool(silent))
    return probs


def spike_predict_proba(model: SdbnModel, pixels, sim: SimConfig, batch: int = 25) -> np.ndarray:
    x = np.asarray(pixels, dtype=float).reshape(-1, GRID * GRID)
    out = []
    for i in range(0, len(x), batch):
        out.append(spike_probabilities(simulate(model, x[i : i + batch], sim))[0])
    return np.concatenate(out)


def sdbn_spike_oracle(model: SdbnModel, sim: SimConfig):
    """Stochastic-mode oracle with a fixed seed schedule: identical images give identical answers."""

    def oracle(image):
        return sdbn_spike_forward(model, image, sim)

    return oracle


def write_spike_csv(path, events) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["time", "layer", "neuron", "spike"])
        for t, layer, neuron in events:
            w.writerow([f"{t:.6f}", layer, neuron, 1])
