"""Noise-robustness sweeps and attack campaigns."""
from __future__ import annotations

import csv
import io
import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Literal

import numpy as np

from ..attack import AttackConfig, AttackTrace, generate_adversarial, write_trace
from ..sdbn.network import INPUT_SCALE
from ..dataset import CENTER_WINDOW, CORNER_WINDOW, LabeledImageSet, NoiseSpec, Window, noisy_set, write_idx_images, write_idx_labels

log = logging.getLogger(__name__)

TABLE_MAGNITUDES = (0.02, 0.05, 0.08, 0.1, 0.15, 0.2, 0.3, 0.4)
NOISE_CSV_HEADER = "magnitude,scenario,distribution,accuracy"
# Train-split noise uses a stream offset from the test split so the two never coincide.
TRAIN_SEED_OFFSET = 1_000_003


@dataclass(frozen=True)
class NoiseScenario:
    apply_to: Literal["train-only", "test-only", "both"]
    distribution: Literal["normal", "uniform"] = "normal"
    magnitudes: tuple = TABLE_MAGNITUDES
    region: Window | None = None
    seed: int = 0
    # Intensity span that magnitudes are expressed in. Images live in [0, 1]; a
    # network reading them as [0, span] sees noise of magnitude delta when the
    # pixels get delta / span.
    span: float = 1.0

    def __post_init__(self):
        if not self.span > 0:
            raise ValueError("noise span must be positive")
        if self.apply_to not in ("train-only", "test-only", "both"):
            raise ValueError(f"unknown scenario {self.apply_to!r}")
        if not self.magnitudes:
            raise ValueError("at least one magnitude is required")
        if any(not (m >= 0 and math.isfinite(m)) for m in self.magnitudes):
            raise ValueError("magnitudes must be finite and nonnegative")

    @property
    def noisy_train(self) -> bool:
        return self.apply_to in ("train-only", "both")

    @property
    def noisy_test(self) -> bool:
        return self.apply_to in ("test-only", "both")

    def spec(self, magnitude: float, split: str) -> NoiseSpec:
        seed = self.seed + (TRAIN_SEED_OFFSET if split == "train" else 0)
        return NoiseSpec(self.distribution, magnitude / self.span, self.region, seed)


def noise_span(kind: str) -> float:
    """Span of the intensities a network reads: spike probabilities for the SDBN."""
    return INPUT_SCALE if kind == "sdbn" else 1.0


@dataclass
class AccuracyTable:
    # {(magnitude, scenario, distribution): accuracy}; NaN marks a failed cell
    cells: dict = field(default_factory=dict)
    errors: dict = field(default_factory=dict)

    def __setitem__(self, key, value):
        if not (math.isnan(value) or 0.0 <= value <= 1.0):
            raise ValueError(f"accuracy {value} outside [0, 1]")
        self.cells[key] = float(value)

    def __getitem__(self, key):
        return self.cells[key]

    def get(self, magnitude, scenario, distribution):
        return self.cells[(magnitude, scenario, distribution)]

    def merge(self, other: "AccuracyTable") -> "AccuracyTable":
        out = AccuracyTable(dict(self.cells), dict(self.errors))
        out.cells.update(other.cells)
        out.errors.update(other.errors)
        return out

    def rows(self):
        return [(m, s, d, a) for (m, s, d), a in sorted(self.cells.items())]

    def to_csv(self) -> str:
        buf = io.StringIO()
        buf.write(NOISE_CSV_HEADER + "\n")
        w = csv.writer(buf, lineterminator="\n")
        for m, s, d, a in self.rows():
            w.writerow([f"{m:g}", s, d, "nan" if math.isnan(a) else f"{100 * a:.2f}"])
        return buf.getvalue()

    @classmethod
    def from_csv(cls, text: str) -> "AccuracyTable":
        rows = list(csv.reader(io.StringIO(text)))
        if ",".join(rows[0]) != NOISE_CSV_HEADER:
            raise ValueError(f"unexpected header {rows[0]}")
        table = cls()
        for m, s, d, a in rows[1:]:
            table[(float(m), s, d)] = float(a) / 100
        return table


Trainer = Callable[[LabeledImageSet], object]
Evaluator = Callable[[object, LabeledImageSet], float]


def run_noise_sweep(
    scenario: NoiseScenario,
    train: LabeledImageSet,
    test: LabeledImageSet,
    trainer: Trainer,
    evaluate: Evaluator,
    clean_model=None,
) -> AccuracyTable:
    """Test accuracy per noise magnitude for one (split, distribution) scenario.

    Scenarios that touch the training split retrain from scratch per magnitude via
    ``trainer`` (which must use a fixed seed); ``clean_model`` is reused otherwise.
    """
    table = AccuracyTable()
    for magnitude in scenario.magnitudes:
        key = (float(magnitude), scenario.apply_to, scenario.distribution)
        try:
            if scenario.noisy_train and magnitude > 0:
                model = trainer(noisy_set(train, scenario.spec(magnitude, "train")))
            else:
                model = clean_model if clean_model is not None else trainer(train)
                clean_model = model
            eval_set = noisy_set(test, scenario.spec(magnitude, "test")) if scenario.noisy_test else test
            table[key] = evaluate(model, eval_set)
            log.info("noise %s %s %g: %.4f", scenario.apply_to, scenario.distribution, magnitude, table[key])
        except Exception as exc:  # a failed cell must not stop the sweep
            log.exception("noise cell %s failed", key)
            table.cells[key] = float("nan")
            table.errors[key] = repr(exc)
    return table


def run_window_noise(
    model,
    test: LabeledImageSet,
    evaluate: Evaluator,
    magnitudes=TABLE_MAGNITUDES,
    corner: Window = CORNER_WINDOW,
    center: Window = CENTER_WINDOW,
    seed: int = 0,
    span: float = 1.0,
) -> AccuracyTable:
    """Normal noise confined to a corner and a central window of the test images."""
    for w in (corner, center):
        if w.size != 20:
            raise ValueError(f"windows must cover 20 pixels, {w} covers {w.size}")
    table = AccuracyTable()
    for name, region in (("corner", corner), ("center", center)):
        scenario = NoiseScenario("test-only", "normal", tuple(magnitudes), region, seed, span)
        sub = run_noise_sweep(scenario, test, test, trainer=None, evaluate=evaluate, clean_model=model)
        for (m, _, d), a in sub.cells.items():
            table.cells[(m, f"window-{name}", d)] = a
        table.errors.update(sub.errors)
    return table


def select_samples(test: LabeledImageSet, predicts: list, n: int, labels=None) -> list:
    """Indices of the first ``n`` test images every predictor classifies correctly."""
    chosen = []
    for i in range(len(test)):
        if labels is not None and test.labels[i] not in labels:
            continue
        x = test.images[i : i + 1]
        if all(int(np.argmax(f(x)[0])) == test.labels[i] for f in predicts):
            chosen.append(i)
            if len(chosen) == n:
                break
    return chosen


def default_target(label: int) -> int:
    return (int(label) + 1) % 10


@dataclass
class CampaignResult:
    traces: list  # [(sample index, label, AttackTrace | None, adversarial image | None)]
    summary: dict
    errors: dict = field(default_factory=dict)


def summarize(trace_docs: list) -> dict:
    """Campaign statistics from trace JSON documents (so stored traces can be re-summarised)."""
    done = [d for d in trace_docs if d.get("status") != "aborted"]
    if not trace_docs:
        return {"samples": 0, "completed": 0, "success_rate": 0.0, "mean_final_distance": 0.0, "mean_iterations": 0.0}
    finals, iters, wins = [], [], 0
    for d in done:
        accepted = [r for r in d["iterations"] if r["accepted"]]
        final = accepted[-1]
        finals.append(final["distance"])
        iters.append(final["iter"])
        wins += int(np.argmax(final["probs"]) == d["target"])
    return {
        "samples": len(trace_docs),
        "completed": len(done),
        "success_rate": wins / len(trace_docs),
        "mean_final_distance": float(np.mean(finals)) if finals else 0.0,
        "mean_iterations": float(np.mean(iters)) if iters else 0.0,
    }


def run_attack_campaign(
    oracle,
    test: LabeledImageSet,
    indices: list,
    base_cfg: AttackConfig,
    targets: dict | None = None,
    out_dir=None,
    network: str = "",
) -> CampaignResult:
    """Attack every selected test image; per-sample failures are recorded, not raised."""
    from dataclasses import replace

    rows, docs, errors = [], [], {}
    for i in indices:
        label = int(test.labels[i])
        cfg = replace(base_cfg, target=(targets or {}).get(i, default_target(label)))
        try:
            adv, trace = generate_adversarial(oracle, test[i], cfg, source=label)
        except Exception as exc:
            log.exception("attack on sample %d failed", i)
            errors[i] = repr(exc)
            rows.append((i, label, None, None))
            docs.append({"status": "aborted", "target": cfg.target, "iterations": []})
            continue
        rows.append((i, label, trace, adv))
        docs.append(trace.to_json(base_image_ref=f"test:{i}"))
        if out_dir is not None:
            d = Path(out_dir)
            d.mkdir(parents=True, exist_ok=True)
            write_trace(trace, d / f"trace_{i:05d}.csv", d / f"trace_{i:05d}.json", base_image_ref=f"test:{i}")
    summary = summarize(docs)
    summary["network"] = network
    if out_dir is not None and rows:
        d = Path(out_dir)
        done = [(i, lab, adv) for i, lab, tr, adv in rows if adv is not None]
        if done:
            scale = 255.0 / (test.hi - test.lo)
            write_idx_images(d / "adversarial-images-idx3-ubyte", [(adv.pixels - test.lo) * scale for _, _, adv in done])
            write_idx_labels(d / "adversarial-labels-idx1-ubyte", [lab for _, lab, _ in done])
        (d / "summary.json").write_text(json.dumps({**summary, "indices": list(map(int, indices)), "errors": {str(k): v for k, v in errors.items()}}, indent=1))
    return CampaignResult(rows, summary, errors)
