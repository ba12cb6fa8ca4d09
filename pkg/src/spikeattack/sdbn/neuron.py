"""LIF neuron constants and the Siegert firing-rate transfer function.

Two evaluation paths are provided. ``siegert_rate`` integrates the first-passage
integral for a single neuron with adaptive Simpson quadrature and is the reference.
``siegert`` evaluates many neurons at once from an antiderivative table and is what
training and inference use; it also returns derivatives with respect to the drive.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from functools import lru_cache

import numpy as np
from scipy.special import dawsn, erfcx

SQRT_PI = math.sqrt(math.pi)


@dataclass(frozen=True)
class NeuronParams:
    tau_m: float = 0.02
    t_ref: float = 0.002
    v_th: float = 1.0
    v_reset: float = 0.0
    r_max: float = 500.0

    def __post_init__(self):
        if not self.tau_m > 0:
            raise ValueError(f"tau_m must be positive, got {self.tau_m}")
        if not self.t_ref >= 0:
            raise ValueError(f"t_ref must be nonnegative, got {self.t_ref}")
        if not self.v_th > self.v_reset:
            raise ValueError(f"v_th ({self.v_th}) must exceed v_reset ({self.v_reset})")
        if not self.r_max > 0:
            raise ValueError(f"r_max must be positive, got {self.r_max}")

    @property
    def max_rate(self) -> float:
        return math.inf if self.t_ref == 0 else 1.0 / self.t_ref

    def to_dict(self) -> dict:
        return {k: float(getattr(self, k)) for k in ("tau_m", "t_ref", "v_th", "v_reset", "r_max")}


class QuadratureError(ArithmeticError):
    """Adaptive quadrature failed to reach tolerance; carries the operands."""

    def __init__(self, message, *, lower, upper, mu, sigma):
        super().__init__(f"{message} (lower={lower!r}, upper={upper!r}, mu={mu!r}, sigma={sigma!r})")
        self.lower = lower
        self.upper = upper
        self.mu = mu
        self.sigma = sigma


def drive_moments(input_rates, weights, bias, p: NeuronParams):
    """Mean and standard deviation of the free membrane potential under Poisson input."""
    rates = np.asarray(input_rates, dtype=float)
    w = np.asarray(weights, dtype=float)
    mu = p.tau_m * (float(np.dot(w, rates)) + bias)
    var = 0.5 * p.tau_m * float(np.dot(w * w, rates))
    return mu, math.sqrt(max(var, 0.0))


def _integrand(u):
    # exp(u^2) * (1 + erf(u)) == erfcx(-u), finite for any u below ~26.
    return erfcx(-u)


def adaptive_simpson(f, a, b, tol=1e-9, rel_tol=1e-12, max_intervals=200_000):
    """Integrate ``f`` over [a, b] with iterative adaptive Simpson.

    The tolerance applied to each panel is ``max(tol, rel_tol * |coarse estimate|)``
    split proportionally to panel width. Returns ``(value, converged)``.
    """
    if a == b:
        return 0.0, True
    fa, fm, fb = f(a), f(0.5 * (a + b)), f(b)
    whole = (b - a) / 6.0 * (fa + 4.0 * fm + fb)
    budget = max(tol, rel_tol * abs(whole))
    total = 0.0
    stack = [(a, b, fa, fm, fb, whole, budget)]
    n = 0
    while stack:
        lo, hi, flo, fmid, fhi, est, eps = stack.pop()
        mid = 0.5 * (lo + hi)
        fl = f(0.5 * (lo + mid))
        fr = f(0.5 * (mid + hi))
        left = (mid - lo) / 6.0 * (flo + 4.0 * fl + fmid)
        right = (hi - mid) / 6.0 * (fmid + 4.0 * fr + fhi)
        err = left + right - est
        n += 1
        if abs(err) <= 15.0 * eps or hi - lo < 1e-12 * max(1.0, abs(lo)):
            total += left + right + err / 15.0
            continue
        if n > max_intervals or not math.isfinite(err):
            return total, False
        stack.append((mid, hi, fmid, fr, fhi, right, 0.5 * eps))
        stack.append((lo, mid, flo, fl, fmid, left, 0.5 * eps))
    return total, True


def _deterministic_rate(mu, p: NeuronParams):
    # Noise-free LIF: time to climb from v_reset to v_th under constant drive mu.
    if mu <= p.v_th:
        return 0.0
    climb = p.tau_m * math.log((mu - p.v_reset) / (mu - p.v_th))
    return 1.0 / (p.t_ref + climb)


def siegert_rate(input_rates, weights, bias: float, p: NeuronParams, tol: float = 1e-9) -> float:
    """Stationary output rate (Hz) of one LIF neuron driven by Poisson inputs."""
    rates = np.asarray(input_rates, dtype=float)
    if np.any(rates < 0):
        raise ValueError("input rates must be nonnegative")
    mu, sigma = drive_moments(rates, weights, bias, p)
    if sigma <= 1e-12 * (p.v_th - p.v_reset):
        return _deterministic_rate(mu, p)
    lower = (p.v_reset - mu) / sigma
    upper = (p.v_th - mu) / sigma
    if upper > 26.0:
        # exp(upper^2) dominates the integral; the rate is below 1e-290 Hz.
        return 0.0
    value, ok = adaptive_simpson(_integrand, lower, upper, tol=tol)
    if not ok or not math.isfinite(value):
        raise QuadratureError("Siegert integral did not converge", lower=lower, upper=upper, mu=mu, sigma=sigma)
    return 1.0 / (p.t_ref + p.tau_m * SQRT_PI * value)


# ---------------------------------------------------------------------------
# vectorised path

_TABLE_END = 20.0
_TABLE_STEP = 1.0 / 256.0


@lru_cache(maxsize=1)
def _erfcx_antiderivative_table():
    """Nodes and values of H(y) = integral of erfcx over [0, y] on a uniform grid."""
    nodes = np.arange(0.0, _TABLE_END + 0.5 * _TABLE_STEP, _TABLE_STEP)
    gx, gw = np.polynomial.legendre.leggauss(12)
    half = 0.5 * _TABLE_STEP
    centers = nodes[:-1] + half
    pts = centers[:, None] + half * gx[None, :]
    cell = half * (erfcx(pts) @ gw)
    values = np.concatenate([[0.0], np.cumsum(cell)])
    return nodes, values


def _asymptotic_H(t):
    t2 = 1.0 / (t * t)
    return (np.log(t) + t2 * (0.25 + t2 * (-3.0 / 16 + t2 * (5.0 / 16 + t2 * (-105.0 / 128))))) / SQRT_PI


def erfcx_integral(y):
    """H(y) = integral of erfcx(t) dt over [0, y] for y >= 0 (vectorised)."""
    y = np.asarray(y, dtype=float)
    nodes, values = _erfcx_antiderivative_table()
    out = np.empty_like(y)
    inside = y <= _TABLE_END
    yi = y[inside]
    idx = np.minimum((yi / _TABLE_STEP).astype(np.int64), len(nodes) - 2)
    x0 = nodes[idx]
    s = (yi - x0) / _TABLE_STEP
    h0, h1 = values[idx], values[idx + 1]
    m0, m1 = erfcx(x0) * _TABLE_STEP, erfcx(x0 + _TABLE_STEP) * _TABLE_STEP
    s2, s3 = s * s, s * s * s
    out[inside] = (
        (2 * s3 - 3 * s2 + 1) * h0 + (s3 - 2 * s2 + s) * m0 + (-2 * s3 + 3 * s2) * h1 + (s3 - s2) * m1
    )
    yo = y[~inside]
    out[~inside] = values[-1] + _asymptotic_H(yo) - _asymptotic_H(_TABLE_END)
    return out


def _G(y):
    # Antiderivative of erfcx(-u) from 0 to y.
    out = np.empty_like(y)
    neg = y <= 0
    out[neg] = -erfcx_integral(-y[neg])
    yp = y[~neg]
    with np.errstate(over="ignore", invalid="ignore"):
        out[~neg] = 2.0 * np.exp(yp * yp) * dawsn(yp) - erfcx_integral(yp)
    return out


def siegert(mu, sigma, p: NeuronParams, derivatives: bool = False):
    """Siegert rate for arrays of drive mean ``mu`` and std ``sigma``.

    With ``derivatives=True`` also returns d(rate)/d(mu) and d(rate)/d(sigma).
    """
    mu = np.asarray(mu, dtype=float)
    sigma = np.maximum(np.asarray(sigma, dtype=float), 1e-12)
    mu, sigma = np.broadcast_arrays(mu, sigma)
    lower = ((p.v_reset - mu) / sigma).ravel()
    upper = ((p.v_th - mu) / sigma).ravel()
    with np.errstate(over="ignore", invalid="ignore"):
        integral = np.maximum(_G(upper) - _G(lower), 0.0)
        rate = 1.0 / (p.t_ref + p.tau_m * SQRT_PI * integral)
    rate = np.where(np.isfinite(rate), rate, 0.0).reshape(mu.shape)
    if not derivatives:
        return rate
    with np.errstate(over="ignore", invalid="ignore"):
        fu, fl = erfcx(-upper), erfcx(-lower)
        s = sigma.ravel()
        dI_dmu = (fl - fu) / s
        dI_dsigma = (lower * fl - upper * fu) / s
        k = -p.tau_m * SQRT_PI * rate.ravel() ** 2
        d_mu = np.nan_to_num(k * dI_dmu, nan=0.0, posinf=0.0, neginf=0.0)
        d_sigma = np.nan_to_num(k * dI_dsigma, nan=0.0, posinf=0.0, neginf=0.0)
    return rate, d_mu.reshape(mu.shape), d_sigma.reshape(mu.shape)


def layer_moments(rates, W, bias, p: NeuronParams):
    """Drive moments for a batch: ``rates`` (batch, n_in), ``W`` (n_in, n_out)."""
    mu = p.tau_m * (rates @ W + bias)
    var = (0.5 * p.tau_m) * (rates @ (W * W))
    return mu, np.sqrt(np.maximum(var, 0.0))


def layer_rates(rates, W, bias, p: NeuronParams):
    mu, sigma = layer_moments(rates, W, bias, p)
    return siegert(mu, sigma, p)
