"""Exact event-driven Monte-Carlo simulation of one LIF neuron with Poisson inputs.

Independent of the package: the merged input process is simulated event by event,
so the membrane decays exactly between input spikes and no time step is involved.
Instances must keep the bias drive ``tau_m * b`` below threshold; the membrane can
then only cross threshold at an excitatory input spike.
"""
import numpy as np


def random_instances(n, rng, n_inputs=20, tau_m=0.02, v_th=1.0, mu_range=(1.0, 1.5)):
    """Rates 500..3000 Hz, weights in [-0.01, 0.01], total drive mu drawn from ``mu_range``."""
    out = []
    while len(out) < n:
        rates = rng.uniform(500.0, 3000.0, n_inputs)
        w = rng.uniform(-0.01, 0.01, n_inputs)
        mu = rng.uniform(*mu_range)
        bias = mu / tau_m - w @ rates
        if -0.5 <= tau_m * bias <= 0.8 * v_th:
            out.append((rates, w, bias))
    return out


def simulate_rates(instances, duration=10.0, trials=100, tau_m=0.02, t_ref=0.002, v_th=1.0, v_reset=0.0, seed=0):
    """Mean output rate (Hz) per instance over ``trials`` runs of ``duration`` seconds."""
    rng = np.random.default_rng(seed)
    n = len(instances)
    rates = np.array([r for r, _, _ in instances])
    weights = np.array([w for _, w, _ in instances])
    rest = np.array([tau_m * b for _, _, b in instances])
    total = rates.sum(axis=1)
    cum = np.cumsum(rates, axis=1) / total[:, None]
    inst = np.repeat(np.arange(n), trials)
    lam, cum_c, w_c, rest_c = total[inst], cum[inst], weights[inst], rest[inst]
    m = len(inst)
    t = np.zeros(m)  # time of the last input event
    t_state = np.zeros(m)  # time at which v was last set; reset is held until t_free
    t_free = np.zeros(m)
    v = np.full(m, v_reset)
    spikes = np.zeros(m)
    idx = np.arange(m)
    while len(idx):
        t_new = t[idx] + rng.exponential(1.0 / lam[idx])
        t[idx] = t_new
        keep = t_new < duration
        idx, t_new = idx[keep], t_new[keep]
        act = t_new >= t_free[idx]  # inputs arriving during refractoriness are lost
        j, tj = idx[act], t_new[act]
        start = np.maximum(t_state[j], t_free[j])
        vv = rest_c[j] + (v[j] - rest_c[j]) * np.exp(-(tj - start) / tau_m)
        k = (rng.random(len(j))[:, None] > cum_c[j]).sum(axis=1)
        vv += w_c[j, np.minimum(k, weights.shape[1] - 1)]
        fired = vv >= v_th
        spikes[j[fired]] += 1
        vv[fired] = v_reset
        t_free[j[fired]] = tj[fired] + t_ref
        v[j] = vv
        t_state[j] = tj
    return spikes.reshape(n, trials).mean(axis=1) / duration
