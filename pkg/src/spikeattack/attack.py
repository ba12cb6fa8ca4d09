"""Greedy, targeted, black-box adversarial examples against a probability oracle.

An oracle is any callable mapping an ``Image`` to 10 class probabilities. The attack
never sees anything else of the model.

Query accounting for ``generate_adversarial``: one query scores the pristine image,
then every iteration issues ``2 * window.size`` single-pixel probes plus one query
scoring the perturbed candidate. The candidate's score doubles as the base gap of the
next iteration, so a run of ``k`` iterations costs ``1 + k * (2 * window.size + 1)``.
"""
from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass, field
from typing import Callable, Literal, NamedTuple

import numpy as np

from .dataset import Image, Window

SD_FLOOR = 1e-3
# Rows 11..15, cols 11..15: the central 5x5 block used when no window is given.
DEFAULT_WINDOW = Window(11, 11, 5, 5)
CSV_HEADER = "iter,p_source,p_target,gap,distance,status"

Oracle = Callable[[Image], np.ndarray]


class AttackConfigError(ValueError):
    pass


class OracleError(RuntimeError):
    def __init__(self, message, pixel=None):
        super().__init__(message if pixel is None else f"{message} (probing pixel {pixel})")
        self.pixel = pixel


@dataclass(frozen=True)
class AttackConfig:
    window: Window
    m: int = 10
    delta: float = 0.1
    d_max: float = 22.0
    target: int = 3
    max_iterations: int = 1000
    sign_mode: Literal["per-pixel", "global"] = "per-pixel"
    sd_floor: float = SD_FLOOR

    def __post_init__(self):
        if self.m < 1:
            raise AttackConfigError("M must be at least 1")
        if self.m > self.window.size:
            raise AttackConfigError(f"M={self.m} exceeds the {self.window.size} pixels of the window")
        if not self.delta > 0:
            raise AttackConfigError("delta must be positive")
        if not self.d_max >= 0:
            raise AttackConfigError("d_max must be nonnegative")
        if not 0 <= self.target <= 9:
            raise AttackConfigError("target must be a class index in 0..9")
        if self.max_iterations < 0:
            raise AttackConfigError("max_iterations must be nonnegative")
        if self.sign_mode not in ("per-pixel", "global"):
            raise AttackConfigError(f"unknown sign mode {self.sign_mode!r}")
        if not self.sd_floor > 0:
            raise AttackConfigError("the SD floor must be positive")

    def to_dict(self) -> dict:
        return {
            "window": [self.window.row0, self.window.col0, self.window.height, self.window.width],
            "m": self.m,
            "delta": self.delta,
            "d_max": self.d_max,
            "target": self.target,
            "max_iterations": self.max_iterations,
            "sign_mode": self.sign_mode,
            "sd_floor": self.sd_floor,
        }


def _pixels(image) -> np.ndarray:
    return image.pixels if isinstance(image, Image) else np.asarray(image, dtype=float)


def sd_map(image, window: Window) -> np.ndarray:
    """Per-pixel deviation of the window with the pixel's own term left out."""
    block = _pixels(image)[window.slices]
    dev2 = (block - block.mean()) ** 2
    return np.sqrt(np.maximum(dev2.sum() - dev2, 0.0) / window.size)


def distance(original, adversarial, window: Window, sd_floor: float = SD_FLOOR) -> float:
    """SD-weighted L1 change inside the window; SD is measured on ``original``."""
    rows, cols = window.slices
    change = np.abs(_pixels(adversarial)[rows, cols] - _pixels(original)[rows, cols])
    return float(np.sum(change / np.maximum(sd_map(original, window), sd_floor)))


def gap(probs, target: int) -> float:
    p = np.asarray(probs, dtype=float)
    return float(p[target] - np.max(np.delete(p, target)))


def _query(oracle: Oracle, image: Image, pixel=None) -> np.ndarray:
    try:
        p = np.asarray(oracle(image), dtype=float)
    except Exception as exc:
        raise OracleError(f"oracle failed: {exc}", pixel) from exc
    if p.shape != (10,) or not np.isfinite(p).all():
        raise OracleError(f"oracle returned an invalid probability vector {p!r}", pixel)
    return p


class Priority(NamedTuple):
    priority: np.ndarray  # (height, width)
    sign: np.ndarray  # (height, width), +1 add / -1 subtract
    probs: np.ndarray  # probabilities of the image being probed
    gap: float


def variation_priority(image: Image, oracle: Oracle, cfg: AttackConfig, base_probs=None) -> Priority:
    """Score every window pixel by its best single-pixel gap gain times its SD.

    ``base_probs`` lets a caller reuse an existing score of ``image``; without it the
    function issues ``2 * window.size + 1`` queries.
    """
    if base_probs is None:
        base_probs = _query(oracle, image)
    base = gap(base_probs, cfg.target)
    win = cfg.window
    sd = sd_map(image, win)
    pixels = image.pixels
    priority = np.zeros((win.height, win.width))
    sign = np.ones((win.height, win.width), dtype=np.int8)
    for k, (r, c) in enumerate(win.pixels()):
        i, j = divmod(k, win.width)
        gaps = {}
        for s in (1, -1):
            probe = pixels.copy()
            probe[r, c] = np.clip(probe[r, c] + s * cfg.delta, image.lo, image.hi)
            gaps[s] = gap(_query(oracle, image.with_pixels(probe), pixel=(r, c)), cfg.target)
        if gaps[-1] > gaps[1]:
            priority[i, j] = (gaps[-1] - base) * sd[i, j]
            sign[i, j] = -1
        else:
            priority[i, j] = (gaps[1] - base) * sd[i, j]
    return Priority(priority, sign, base_probs, base)


@dataclass
class IterationRecord:
    iteration: int
    probs: np.ndarray
    gap: float
    distance: float
    perturbed: list  # [(row, col, sign), ...]
    image: np.ndarray
    accepted: bool = True


@dataclass
class AttackTrace:
    config: AttackConfig
    source: int
    records: list = field(default_factory=list)
    status: str = "iteration-capped"
    stop_reason: str = ""
    queries: int = 0
    error: str | None = None

    @property
    def iterations(self) -> int:
        return len(self.records) - 1

    @property
    def accepted(self) -> list:
        return [r for r in self.records if r.accepted]

    @property
    def final(self) -> IterationRecord:
        return self.accepted[-1]

    def to_json(self, base_image_ref: str | None = None, seeds: dict | None = None) -> dict:
        return {
            "config": self.config.to_dict(),
            "source": self.source,
            "target": self.config.target,
            "status": self.status,
            "stop_reason": self.stop_reason,
            "queries": self.queries,
            "error": self.error,
            "base_image": base_image_ref,
            "seeds": seeds or {},
            "iterations": [
                {
                    "iter": r.iteration,
                    "probs": [float(x) for x in r.probs],
                    "gap": r.gap,
                    "distance": r.distance,
                    "accepted": r.accepted,
                    "perturbed": [[int(a), int(b), int(s)] for a, b, s in r.perturbed],
                }
                for r in self.records
            ],
        }


class _CountingOracle:
    def __init__(self, oracle):
        self.oracle = oracle
        self.calls = 0

    def __call__(self, image):
        self.calls += 1
        return self.oracle(image)


def generate_adversarial(oracle: Oracle, image: Image, cfg: AttackConfig, source: int | None = None):
    """Run the greedy attack; returns ``(adversarial image, trace)``.

    ``source`` defaults to the oracle's top class on ``image``. Oracle failures end the
    run with status ``aborted`` and the records gathered so far.
    """
    counter = _CountingOracle(oracle)
    original = image
    win = cfg.window
    trace = AttackTrace(cfg, source=-1 if source is None else source)
    try:
        probs = _query(counter, original)
    except OracleError as exc:
        trace.status, trace.stop_reason, trace.error = "aborted", "oracle-failure", str(exc)
        trace.queries = counter.calls
        return original, trace
    if source is None:
        trace.source = int(np.argmax(probs))
    trace.records.append(IterationRecord(0, probs, gap(probs, cfg.target), 0.0, [], original.pixels.copy()))

    current, dist = original, 0.0
    flat_coords = win.pixels()
    trace.stop_reason = "distance-exhausted" if dist >= cfg.d_max else "iteration-capped"
    it = 0
    while dist < cfg.d_max and it < cfg.max_iterations:
        it += 1
        try:
            pr = variation_priority(current, counter, cfg, base_probs=probs)
        except OracleError as exc:
            trace.status, trace.stop_reason, trace.error = "aborted", "oracle-failure", str(exc)
            break
        order = np.argsort(-pr.priority.ravel(), kind="stable")[: cfg.m]
        signs = pr.sign.ravel()
        if cfg.sign_mode == "global":
            signs = np.full_like(signs, signs[order[0]])
        candidate = current.pixels.copy()
        perturbed = []
        for k in order:
            r, c = flat_coords[k]
            s = int(signs[k])
            candidate[r, c] = np.clip(candidate[r, c] + s * cfg.delta, current.lo, current.hi)
            perturbed.append((r, c, s))
        cand_img = current.with_pixels(candidate)
        cand_dist = distance(original, cand_img, win, cfg.sd_floor)
        try:
            cand_probs = _query(counter, cand_img)
        except OracleError as exc:
            trace.status, trace.stop_reason, trace.error = "aborted", "oracle-failure", str(exc)
            break
        accepted = cand_dist < cfg.d_max
        trace.records.append(
            IterationRecord(it, cand_probs, gap(cand_probs, cfg.target), cand_dist, perturbed, candidate, accepted)
        )
        if not accepted:
            trace.stop_reason = "distance-exhausted"
            break
        current, dist, probs = cand_img, cand_dist, cand_probs
    else:
        if dist >= cfg.d_max:
            trace.stop_reason = "distance-exhausted"

    trace.queries = counter.calls
    if trace.status != "aborted":
        trace.status = "success" if int(np.argmax(probs)) == cfg.target else trace.stop_reason
    return current, trace


@dataclass
class AttackReport:
    rows: list  # [(iter, p_source, p_target, gap, distance, row_status)]
    status: str

    def to_csv(self) -> str:
        buf = io.StringIO()
        buf.write(CSV_HEADER + "\n")
        w = csv.writer(buf, lineterminator="\n")
        for it, ps, pt, g, d, st in self.rows:
            w.writerow([it, f"{ps:.6f}", f"{pt:.6f}", f"{g:.6f}", f"{d:.6f}", st])
        return buf.getvalue()


def attack_report(trace: AttackTrace) -> AttackReport:
    if not trace.records:
        raise ValueError("trace has no records")
    rows = []
    for r in trace.records:
        status = "initial" if r.iteration == 0 else ("accepted" if r.accepted else "rejected")
        rows.append((r.iteration, float(r.probs[trace.source]), float(r.probs[trace.config.target]), r.gap, r.distance, status))
    return AttackReport(rows, trace.status)


def write_trace(trace: AttackTrace, csv_path, json_path=None, **json_extra) -> None:
    with open(csv_path, "w") as f:
        f.write(attack_report(trace).to_csv())
    if json_path is not None:
        with open(json_path, "w") as f:
            json.dump(trace.to_json(**json_extra), f, indent=1)
