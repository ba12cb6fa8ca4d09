"""Command line: ``spikeattack <subcommand> ...``.

Exit codes: 0 success, 1 usage error, 2 runtime failure.
"""
from __future__ import annotations

import argparse
import hashlib
import io
import json
import logging
import shutil
import subprocess
import sys
import tarfile
import time
import urllib.request
from dataclasses import replace
from pathlib import Path

import numpy as np

from ..attack import DEFAULT_WINDOW, AttackConfig
from ..dataset import CENTER_WINDOW, CORNER_WINDOW, TEST_FILES, TRAIN_FILES, LabeledImageSet, Window, data_dir, load_mnist, rescale
from ..dnn import TrainConfig, dnn_evaluate, dnn_init, dnn_oracle, dnn_train
from ..dnn import predict_proba as dnn_proba
from ..sdbn.network import SdbnModel, SdbnTrainConfig, TopLayerConfig, sdbn_evaluate, sdbn_oracle, sdbn_pretrain
from ..sdbn.network import predict_proba as sdbn_proba
from ..sdbn.rbm import RbmTrainConfig
from ..sdbn.spiking import SimConfig, sdbn_spike_oracle, spike_predict_proba
from .experiments import TABLE_MAGNITUDES, AccuracyTable, NoiseScenario, run_attack_campaign, run_noise_sweep, run_window_noise, noise_span, select_samples, summarize
from .persistence import load_model, save_model

log = logging.getLogger("spikeattack")

MNIST_URL = "https://registry.npmjs.org/mnist-data/-/mnist-data-1.2.6.tgz"
MNIST_SHA256 = {
    "train-images-idx3-ubyte": "ba891046e6505d7aadcbbe25680a0738ad16aec93bde7f9b65e87a2fc25776db",
    "train-labels-idx1-ubyte": "65a50cbbf4e906d70832878ad85ccda5333a97f0f4c3dd2ef09a8a9eef7101c5",
    "t10k-images-idx3-ubyte": "0fa7898d509279e482958e8ce81c8e77db3f2f8254e26661ceb7762c4d494ce7",
    "t10k-labels-idx1-ubyte": "ff7bcfd416de33731a308c3f266cc351222c34898ecbeaf847f06e48f7ec33f2",
}


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


def _floats(text: str) -> tuple:
    try:
        values = tuple(float(v) for v in text.split(",") if v.strip())
    except ValueError:
        raise argparse.ArgumentTypeError(f"not a comma-separated list of numbers: {text!r}")
    if not values:
        raise argparse.ArgumentTypeError("empty list")
    return values


def _window(text: str) -> Window:
    try:
        return Window.parse(text)
    except ValueError as exc:
        raise argparse.ArgumentTypeError(str(exc))


def git_describe() -> str:
    try:
        out = subprocess.run(
            ["git", "describe", "--always", "--dirty", "--tags"],
            cwd=Path(__file__).resolve().parent,
            capture_output=True,
            text=True,
            timeout=10,
        )
        return out.stdout.strip() or "unknown"
    except (OSError, subprocess.SubprocessError):
        return "unknown"


def write_run_manifest(path, command: str, config: dict, seeds: dict, started: float, outputs=()) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    doc = {
        "command": command,
        "argv": sys.argv[1:],
        "config": config,
        "seeds": seeds,
        "git_describe": git_describe(),
        "wall_time_s": round(time.time() - started, 3),
        "outputs": [str(o) for o in outputs],
    }
    path.write_text(json.dumps(doc, indent=1, default=str))
    return path


def _manifest_for(out) -> Path:
    out = Path(out)
    return out / "run-manifest.json" if out.suffix == "" else out.with_name(out.stem + ".run.json")


# data -----------------------------------------------------------------------------


def _sha256(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def fetch_data(dest: Path, source: str | None = None) -> list:
    """Place the four MNIST IDX files in ``dest`` and verify their checksums.

    ``source`` may be a directory holding the files, a local tarball, or a URL.
    """
    dest.mkdir(parents=True, exist_ok=True)
    src = source or MNIST_URL
    if Path(src).is_dir():
        for name in MNIST_SHA256:
            shutil.copyfile(Path(src) / name, dest / name)
    else:
        if Path(src).is_file():
            blob = Path(src).read_bytes()
        else:
            with urllib.request.urlopen(src, timeout=120) as r:
                blob = r.read()
        with tarfile.open(fileobj=io.BytesIO(blob), mode="r:*") as tar:
            members = {Path(m.name).name: m for m in tar.getmembers() if m.isfile()}
            for name in MNIST_SHA256:
                if name not in members:
                    raise FileNotFoundError(f"{name} not found in {src}")
                (dest / name).write_bytes(tar.extractfile(members[name]).read())
    written = []
    for name, digest in MNIST_SHA256.items():
        got = _sha256(dest / name)
        if got != digest:
            raise ValueError(f"{dest / name}: sha256 {got} does not match the expected {digest}")
        written.append(dest / name)
    return written


def _load(split: str, args, limit: int | None = None) -> LabeledImageSet:
    data = rescale(load_mnist(split, args.data_dir), 0.0, 1.0)
    if limit:
        data = data.subset(np.arange(min(limit, len(data))))
    return data


# model configs ----------------------------------------------------------------------


def dnn_config(args) -> TrainConfig:
    return TrainConfig(epochs=args.epochs, learning_rate=args.lr, batch_size=args.batch_size, seed=args.seed)


def sdbn_config(args) -> SdbnTrainConfig:
    base = SdbnTrainConfig()
    layers = tuple(replace(c, epochs=args.rbm_epochs, seed=args.seed + i) for i, c in enumerate(base.layers))
    return replace(base, layers=layers, top=replace(base.top, max_iterations=args.top_iterations, seed=args.seed))


def trainer_for(kind: str, args):
    if kind == "dnn":
        cfg = dnn_config(args)
        return (lambda data: dnn_train(dnn_init(cfg.seed), data, cfg)), cfg
    cfg = sdbn_config(args)
    return (lambda data: sdbn_pretrain(data, cfg)), cfg


def evaluator_for(model, args=None):
    if isinstance(model, SdbnModel):
        if args is not None and getattr(args, "mode", "rate") == "spike":
            sim = SimConfig(duration=args.duration, repeats=args.repeats, seed=args.seed)
            from ..dnn import evaluate_classifier

            return lambda m, d: evaluate_classifier(lambda X: spike_predict_proba(m, X, sim), d)
        return sdbn_evaluate
    return dnn_evaluate


def oracle_for(model, args):
    if isinstance(model, SdbnModel):
        if args.mode == "spike":
            return sdbn_spike_oracle(model, SimConfig(duration=args.duration, repeats=args.repeats, seed=args.seed))
        return sdbn_oracle(model)
    return dnn_oracle(model)


def batch_proba(model):
    if isinstance(model, SdbnModel):
        return lambda X: sdbn_proba(model, X)
    return lambda X: dnn_proba(model, X)


# subcommands -----------------------------------------------------------------------


def cmd_fetch_data(args, started):
    dest = data_dir(args.data_dir)
    files = fetch_data(dest, args.source)
    print(f"MNIST ready in {dest}")
    write_run_manifest(_manifest_for(dest), "fetch-data", {"source": args.source or MNIST_URL}, {}, started, files)


def cmd_train(args, started):
    train, cfg = trainer_for(args.kind, args)
    data = _load("train", args, args.train_limit)
    model = train(data)
    save_model(model, args.out, training=cfg.to_dict() if hasattr(cfg, "to_dict") else vars(cfg), seeds={"train": args.seed})
    test = _load("test", args, args.test_limit)
    acc = evaluator_for(model)(model, test)
    print(f"test accuracy {acc:.4f}")
    write_run_manifest(_manifest_for(args.out), f"train {args.kind}", _cfg_dict(cfg), {"train": args.seed}, started, [args.out])


def _cfg_dict(cfg) -> dict:
    if hasattr(cfg, "to_dict"):
        return cfg.to_dict()
    from dataclasses import asdict

    return asdict(cfg)


def cmd_eval(args, started):
    model = load_model(args.model)
    data = _load(args.split, args, args.limit)
    acc = evaluator_for(model, args)(model, data)
    print(f"{acc:.4f}")
    config = {"model": str(args.model), "split": args.split, "limit": args.limit, "mode": args.mode}
    write_run_manifest(args.manifest or _manifest_for(Path(args.model).with_name(Path(args.model).stem + "-eval.json")), "eval", config, {"sim": args.seed}, started)


def cmd_noise_sweep(args, started):
    clean = load_model(args.model) if args.model else None
    if clean is not None and isinstance(clean, SdbnModel) != (args.kind == "sdbn"):
        raise ValueError(f"{args.model} does not hold a {args.kind} model")
    span = 1.0 if args.unit_noise else noise_span(args.kind)
    scenario = NoiseScenario(args.scenario, args.distribution, args.magnitudes, seed=args.noise_seed, span=span)
    test = _load("test", args, args.test_limit)
    train_set, cfg = None, None
    trainer = None
    if scenario.noisy_train or clean is None:
        trainer, cfg = trainer_for(args.kind, args)
        train_set = _load("train", args, args.train_limit)
    evaluate = evaluator_for(clean) if clean is not None else (sdbn_evaluate if args.kind == "sdbn" else dnn_evaluate)
    table = run_noise_sweep(scenario, train_set, test, trainer, evaluate, clean_model=clean)
    _emit_table(table, args.out)
    config = {"scenario": scenario.apply_to, "distribution": scenario.distribution, "magnitudes": list(scenario.magnitudes), "span": span,
              "kind": args.kind, "model": args.model, "training": _cfg_dict(cfg) if cfg else None}
    write_run_manifest(_manifest_for(args.out or "noise-sweep.csv"), "noise-sweep", config, {"noise": args.noise_seed, "train": args.seed}, started, [args.out] if args.out else [])
    if table.errors:
        raise RuntimeError(f"{len(table.errors)} sweep cell(s) failed: {table.errors}")


def _emit_table(table: AccuracyTable, out):
    text = table.to_csv()
    if out:
        Path(out).parent.mkdir(parents=True, exist_ok=True)
        Path(out).write_text(text)
    sys.stdout.write(text)


def cmd_window_noise(args, started):
    model = load_model(args.model)
    test = _load("test", args, args.test_limit)
    span = 1.0 if args.unit_noise else noise_span("sdbn" if isinstance(model, SdbnModel) else "dnn")
    table = run_window_noise(model, test, evaluator_for(model), args.magnitudes, args.corner, args.center, seed=args.seed, span=span)
    _emit_table(table, args.out)
    config = {"model": args.model, "corner": str(args.corner), "center": str(args.center), "magnitudes": list(args.magnitudes), "span": span}
    write_run_manifest(_manifest_for(args.out or "window-noise.csv"), "window-noise", config, {"noise": args.seed}, started, [args.out] if args.out else [])


def cmd_attack(args, started):
    model = load_model(args.model)
    kind = "sdbn" if isinstance(model, SdbnModel) else "dnn"
    if kind != args.network:
        raise ValueError(f"{args.model} holds a {kind} model, not {args.network}")
    test = _load("test", args)
    if args.index is not None:
        indices = list(args.index)
    else:
        predicts = [batch_proba(model)]
        if args.also_correct:
            predicts.append(batch_proba(load_model(args.also_correct)))
        labels = {args.label} if args.label is not None else None
        if args.target is not None:
            # digits already of the target class have nothing to attack
            labels = (labels or set(range(10))) - {args.target}
        indices = select_samples(test, predicts, args.samples, labels)
    cfg = AttackConfig(args.window, m=args.m, delta=args.delta, d_max=args.dmax, target=3 if args.target is None else args.target,
                       max_iterations=args.max_iterations, sign_mode=args.sign_mode)
    targets = None if args.target is None else {i: args.target for i in indices}
    result = run_attack_campaign(oracle_for(model, args), test, indices, cfg, targets=targets, out_dir=args.out, network=kind)
    print(json.dumps(result.summary))
    config = {"network": kind, "model": args.model, "attack": cfg.to_dict(), "target": args.target, "indices": indices, "mode": args.mode}
    write_run_manifest(_manifest_for(args.out), "attack", config, {"sim": args.seed}, started, [args.out])
    if result.errors:
        raise RuntimeError(f"{len(result.errors)} sample(s) failed: {result.errors}")


def cmd_report(args, started):
    docs = [json.loads(p.read_text()) for p in sorted(Path(args.traces).glob("trace_*.json"))]
    summary = summarize(docs)
    print(json.dumps(summary))
    if args.out:
        Path(args.out).write_text(json.dumps(summary, indent=1))
    write_run_manifest(_manifest_for(args.out or Path(args.traces) / "report.json"), "report", {"traces": str(args.traces)}, {}, started)


def _add_training_flags(p):
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--train-limit", type=int, default=None, help="use only the first N training images")
    p.add_argument("--test-limit", type=int, default=None)
    p.add_argument("--epochs", type=int, default=TrainConfig.epochs, help="DNN epochs")
    p.add_argument("--lr", type=float, default=TrainConfig.learning_rate, help="DNN learning rate")
    p.add_argument("--batch-size", type=int, default=TrainConfig.batch_size)
    p.add_argument("--rbm-epochs", type=int, default=RbmTrainConfig.epochs)
    p.add_argument("--top-iterations", type=int, default=TopLayerConfig.max_iterations)


def _add_sim_flags(p):
    p.add_argument("--mode", choices=("rate", "spike"), default="rate", help="SDBN evaluation mode")
    p.add_argument("--duration", type=float, default=SimConfig.duration, help="spiking presentation time (s)")
    p.add_argument("--repeats", type=int, default=SimConfig.repeats)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="spikeattack", description=__doc__.splitlines()[0])
    parser.add_argument("--data-dir", default=None, help="MNIST directory (default: $SPIKEATTACK_DATA or ~/.cache)")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("fetch-data", help="download and verify MNIST")
    p.add_argument("--source", default=None, help="directory, tarball or URL (default: npm mnist-data 1.2.6)")
    p.set_defaults(func=cmd_fetch_data)

    p = sub.add_parser("train", help="train a network and save it")
    p.add_argument("kind", choices=("dnn", "sdbn"))
    p.add_argument("--out", required=True, help="model manifest path (.json)")
    _add_training_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="accuracy of a saved model")
    p.add_argument("--model", required=True)
    p.add_argument("--split", choices=("train", "test"), default="test")
    p.add_argument("--limit", type=int, default=None)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--manifest", default=None)
    _add_sim_flags(p)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("noise-sweep", help="accuracy under additive noise")
    p.add_argument("--kind", choices=("dnn", "sdbn"), default="sdbn")
    p.add_argument("--model", default=None, help="clean model, reused for test-only noise")
    p.add_argument("--scenario", choices=("train-only", "test-only", "both"), default="test-only")
    p.add_argument("--distribution", choices=("normal", "uniform"), default="normal")
    p.add_argument("--magnitudes", type=_floats, default=TABLE_MAGNITUDES)
    p.add_argument("--out", default=None)
    p.add_argument("--noise-seed", dest="noise_seed", type=int, default=0)
    p.add_argument("--unit-noise", action="store_true", help="measure magnitudes in pixel units rather than the network's input range")
    _add_training_flags(p)
    p.set_defaults(func=cmd_noise_sweep)

    p = sub.add_parser("window-noise", help="accuracy under noise confined to a window")
    p.add_argument("--model", required=True)
    p.add_argument("--magnitudes", type=_floats, default=TABLE_MAGNITUDES)
    p.add_argument("--corner", type=_window, default=CORNER_WINDOW)
    p.add_argument("--center", type=_window, default=CENTER_WINDOW)
    p.add_argument("--unit-noise", action="store_true", help="measure magnitudes in pixel units rather than the network's input range")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--test-limit", type=int, default=None)
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_window_noise)

    p = sub.add_parser("attack", help="run the greedy black-box attack")
    p.add_argument("--network", choices=("dnn", "sdbn"), required=True)
    p.add_argument("--model", required=True)
    p.add_argument("--window", type=_window, default=DEFAULT_WINDOW, help="row,col,height,width")
    p.add_argument("--m", type=int, default=10)
    p.add_argument("--delta", type=float, default=0.1)
    p.add_argument("--dmax", type=float, default=22.0)
    p.add_argument("--target", type=int, default=None, help="fixed target class (default: label+1 mod 10)")
    p.add_argument("--max-iterations", type=int, default=1000)
    p.add_argument("--sign-mode", choices=("per-pixel", "global"), default="per-pixel")
    sel = p.add_mutually_exclusive_group()
    sel.add_argument("--index", type=int, nargs="+", help="test-set indices to attack")
    sel.add_argument("--samples", type=int, default=50, help="attack the first N correctly classified digits")
    p.add_argument("--label", type=int, default=None, help="only select digits of this class")
    p.add_argument("--also-correct", default=None, help="second model that must also classify the samples correctly")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True, help="output directory")
    _add_sim_flags(p)
    p.set_defaults(func=cmd_attack)

    p = sub.add_parser("report", help="recompute a campaign summary from stored traces")
    p.add_argument("traces", help="campaign output directory")
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_report)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return 1
    except SystemExit as exc:  # --help
        return 0 if exc.code in (0, None) else 1
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(asctime)s %(message)s")
    started = time.time()
    try:
        args.func(args, started)
    except Exception as exc:
        log.debug("failure", exc_info=True)
        print(f"spikeattack {args.command}: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
