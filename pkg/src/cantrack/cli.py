"""Command-line entry point: ``cantrack generate|train|track|evaluate``.

Every setting can come from a JSON file given with ``--config``; flags on the
command line win over the file.  Exit codes: 0 success, 1 validation or usage
error, 2 I/O error, 3 internal error.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
from dataclasses import dataclass
from pathlib import Path

from cantrack import __version__
from cantrack.aggregation import MetaNorm, TrainConfig
from cantrack.association import track
from cantrack.errors import CantrackError, DomainError, ValidationError
from cantrack.io import (
    load_model, read_detections, read_events, read_features, read_ground_truth, read_hypothesis,
    save_model, write_canf, write_detections, write_events, write_ground_truth, write_trajectories,
)
from cantrack.metrics import REPORT_SCHEMA, evaluate
from cantrack.pipeline import templates_from_detections, train_on_detections
from cantrack.synthworld import WorldConfig, benchmark_config, generate_scenario

log = logging.getLogger("cantrack")

EXIT_OK, EXIT_USAGE, EXIT_IO, EXIT_INTERNAL = 0, 1, 2, 3

DETECTIONS_FILE = "detections.csv"
FEATURES_FILE = "features.canf"
GROUND_TRUTH_FILE = "ground_truth.csv"
MODEL_FILE = "model.json"
TRAIN_LOG_FILE = "train_log.csv"
TRAJECTORIES_FILE = "trajectories.csv"
EVENTS_FILE = "events.jsonl"
REPORT_FILE = "report.json"

LOG_LEVELS = {"error": logging.ERROR, "warn": logging.WARNING, "info": logging.INFO, "debug": logging.DEBUG}


class UsageError(ValidationError):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # argparse would exit with 2, which is our I/O code
        raise UsageError(message)


@dataclass
class RunConfig:
    """Effective settings of one command after merging the config file and flags."""
    out: Path = Path(".")
    data: Path | None = None
    detections: Path | None = None
    features: Path | None = None
    ground_truth: Path | None = None
    hypothesis: Path | None = None
    events: Path | None = None
    model: Path | None = None
    resume: Path | None = None
    mode: str = "can"
    seed: int | None = None
    window: int = 60
    tau_sct: float = 0.2
    tau_ict: float = 0.5
    threads: int = 1
    lr: float = 0.01
    momentum: float = 0.9
    steps: int = 2000
    hidden: tuple[int, int, int] = (256, 128, 64)
    positives: int | None = None
    negatives: int = 0
    max_template_len: int = 16
    frame_w: float = 1920.0
    frame_h: float = 1080.0
    num_cameras: int = 8

    def validate(self) -> None:
        if self.mode not in ("can", "mean"):
            raise ValidationError(f"mode must be 'can' or 'mean', got {self.mode!r}")
        if self.window < 1:
            raise ValidationError("window must be >= 1")
        if self.threads < 1:
            raise ValidationError("threads must be >= 1")
        if self.steps < 0:
            raise ValidationError("steps must be >= 0")
        if self.lr < 0 or not 0 <= self.momentum < 1:
            raise ValidationError("need lr >= 0 and 0 <= momentum < 1")
        if len(self.hidden) != 3 or min(self.hidden) < 1:
            raise ValidationError(f"hidden must list three positive widths, got {list(self.hidden)}")

    def path(self, name: str, default_file: str | None = None) -> Path:
        p = getattr(self, name)
        if p is None and self.data is not None and default_file is not None:
            p = self.data / default_file
        if p is None:
            raise UsageError(f"--{name.replace('_', '-')} is required")
        if not Path(p).exists():
            raise FileNotFoundError(f"{name.replace('_', ' ')} file not found: {p}")
        return Path(p)

    def norm(self) -> MetaNorm:
        return MetaNorm(float(self.frame_w), float(self.frame_h), int(self.num_cameras))


_PATH_FIELDS = {"out", "data", "detections", "features", "ground_truth", "hypothesis", "events", "model", "resume"}


def _load_json(path: str | Path) -> dict:
    try:
        d = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise ValidationError(f"{path}:{exc.lineno}: not valid JSON ({exc.msg})") from exc
    if not isinstance(d, dict):
        raise ValidationError(f"{path}: top level must be a JSON object")
    return d


def run_config(args: argparse.Namespace, file_values: dict) -> RunConfig:
    cfg = RunConfig()
    known = set(RunConfig.__dataclass_fields__)
    for key, value in file_values.items():
        if key not in known:
            raise ValidationError(f"unknown config field {key!r}")
        _set(cfg, key, value)
    for key in known:
        value = getattr(args, key, None)
        if value is not None:
            _set(cfg, key, value)
    cfg.validate()
    return cfg


def _set(cfg: RunConfig, key: str, value) -> None:
    current = RunConfig.__dataclass_fields__[key].default
    try:
        if key in _PATH_FIELDS:
            value = Path(value)
        elif key == "hidden":
            value = tuple(int(v) for v in value)
        elif key in ("positives", "seed"):
            value = int(value)
        elif isinstance(current, (int, float, str)) and not isinstance(current, bool):
            value = type(current)(value)
    except (TypeError, ValueError) as exc:
        raise ValidationError(f"config field {key!r}: cannot use {value!r}") from exc
    setattr(cfg, key, value)


# ---------------------------------------------------------------------------
# commands


def cmd_generate(args: argparse.Namespace) -> int:
    if args.benchmark:
        world = benchmark_config(args.seed if args.seed is not None else 0)
        if args.config:
            raise UsageError("--benchmark and --config are mutually exclusive")
    else:
        world = WorldConfig.from_dict(_load_json(args.config)) if args.config else WorldConfig()
        if args.seed is not None:
            world.seed = args.seed
    data = generate_scenario(world)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_detections(out / DETECTIONS_FILE, data.detections)
    write_canf(out / FEATURES_FILE, data.features)
    write_ground_truth(out / GROUND_TRUTH_FILE, data.ground_truth)
    log.info("wrote %d detections of %d identities to %s", len(data.detections), world.num_identities, out)
    return EXIT_OK


def _load_detections(cfg: RunConfig):
    features = read_features(cfg.path("features", FEATURES_FILE))
    return read_detections(cfg.path("detections", DETECTIONS_FILE), features)


def cmd_train(cfg: RunConfig) -> int:
    detections = _load_detections(cfg)
    model = None
    seed = cfg.seed if cfg.seed is not None else 0
    if cfg.resume is not None:
        model = load_model(cfg.path("resume"))
        if cfg.seed is None:
            seed = model.seed
    positives = cfg.positives
    if positives is None:
        usable = {t.class_label for t in templates_from_detections(detections) if len(t.features) >= 2}
        positives = max(1, min(8, len(usable)))
    tc = TrainConfig(hidden=cfg.hidden, lr=cfg.lr, momentum=cfg.momentum, steps=cfg.steps,
                     positives_per_batch=positives, negatives_per_batch=cfg.negatives,
                     max_template_len=cfg.max_template_len, seed=seed)
    norm = model.norm if model is not None else cfg.norm()
    start = model.optimizer.step if model is not None and model.optimizer is not None else 0
    model, history = train_on_detections(detections, norm, tc, model)
    cfg.out.mkdir(parents=True, exist_ok=True)
    save_model(cfg.out / MODEL_FILE, model)
    with open(cfg.out / TRAIN_LOG_FILE, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["step", "J"])
        for k, J in enumerate(history):
            w.writerow([start + k + 1, repr(float(J))])
    if history:
        log.info("trained steps %d..%d, J %.4f -> %.4f", start + 1, start + len(history), history[0], history[-1])
    return EXIT_OK


def cmd_track(cfg: RunConfig) -> int:
    model = None
    if cfg.mode == "can":
        if cfg.model is None:
            raise UsageError("mode 'can' needs --model (use --mode mean for uniform weights)")
        model = load_model(cfg.path("model"))
    detections = _load_detections(cfg)
    norm = model.norm if model is not None else cfg.norm()
    result = track(detections, model, norm, cfg.window, cfg.tau_sct, cfg.tau_ict, cfg.threads)
    cfg.out.mkdir(parents=True, exist_ok=True)
    write_trajectories(cfg.out / TRAJECTORIES_FILE, result.trajectories)
    write_events(cfg.out / EVENTS_FILE, result.events)
    return EXIT_OK


REPORT_ROWS = [("IE", "ie"), ("IDP", "idp"), ("IDR", "idr"), ("IDF1", "idf1"), ("MOTA", "mota"), ("MCTA", "mcta")]


def _fmt(v) -> str:
    return "n/a" if v is None else f"{100 * v:8.2f}"


def report_table(report: dict) -> str:
    lines = [f"{'measure':<8} {'value(%)':>8}"]
    lines += [f"{name:<8} {_fmt(report.get(key))}" for name, key in REPORT_ROWS]
    c = report.get("counts", {})
    lines.append("counts   " + " ".join(f"{k}={c[k]}" for k in sorted(c)))
    if report.get("seed") is not None:
        lines.append(f"seed     {report['seed']}")
    return "\n".join(lines)


def compare_table(a: dict, b: dict, name_a: str = "A", name_b: str = "B") -> str:
    lines = [f"{'measure':<8} {name_a:>10} {name_b:>10} {'delta':>9}"]
    for name, key in REPORT_ROWS:
        va, vb = a.get(key), b.get(key)
        delta = "n/a" if va is None or vb is None else f"{100 * (va - vb):+9.2f}"
        lines.append(f"{name:<8} {_fmt(va):>10} {_fmt(vb):>10} {delta:>9}")
    return "\n".join(lines)


def _check_report(d: dict, path: Path) -> None:
    missing = [k for k in REPORT_SCHEMA["required"] if k not in d]
    if missing:
        raise ValidationError(f"{path}: not a metrics report (missing {', '.join(missing)})")


def cmd_evaluate(cfg: RunConfig, compare: list[str] | None) -> int:
    if compare:
        paths = [Path(p) for p in compare]
        reports = []
        for p in paths:
            if not p.exists():
                raise FileNotFoundError(f"report not found: {p}")
            d = _load_json(p)
            _check_report(d, p)
            reports.append(d)
        names = [p.stem for p in paths]
        if names[0] == names[1]:
            names = [f"{p.parent.name}/{p.stem}" for p in paths]
        print(compare_table(reports[0], reports[1], *names))
        return EXIT_OK
    gt = read_ground_truth(cfg.path("ground_truth", GROUND_TRUTH_FILE))
    hyp = read_hypothesis(cfg.path("hypothesis", TRAJECTORIES_FILE))
    events = read_events(cfg.path("events")) if cfg.events is not None else None
    report = evaluate(gt, hyp, events, seed=cfg.seed).to_dict()
    cfg.out.mkdir(parents=True, exist_ok=True)
    (cfg.out / REPORT_FILE).write_text(json.dumps(report, sort_keys=True, indent=1) + "\n")
    print(report_table(report))
    return EXIT_OK


# ---------------------------------------------------------------------------
# argument parsing


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="cantrack", description="Multi-camera tracking with learned template aggregation.")
    p.add_argument("--version", action="version", version=f"cantrack {__version__}")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    g = sub.add_parser("generate", help="write a synthetic scenario (detections, features, ground truth)")
    g.add_argument("--config", help="world configuration JSON")
    g.add_argument("--benchmark", action="store_true", help="use the standard comparison scenario")
    g.add_argument("--out", required=True)
    g.add_argument("--seed", type=int)

    def common(sp):
        sp.add_argument("--config", help="run configuration JSON (flags win)")
        sp.add_argument("--out")
        sp.add_argument("--data", help="directory holding the generate outputs")
        sp.add_argument("--seed", type=int)

    def inputs(sp):
        sp.add_argument("--detections")
        sp.add_argument("--features", help="CANF or CSV feature file")

    def norm(sp):
        sp.add_argument("--frame-w", dest="frame_w", type=float)
        sp.add_argument("--frame-h", dest="frame_h", type=float)
        sp.add_argument("--num-cameras", dest="num_cameras", type=int)

    t = sub.add_parser("train", help="train EvalNet on labeled detections")
    common(t)
    inputs(t)
    norm(t)
    t.add_argument("--resume", help="model file to continue training from")
    t.add_argument("--lr", type=float)
    t.add_argument("--momentum", type=float)
    t.add_argument("--steps", type=int, help="total optimizer steps, counting resumed ones")
    t.add_argument("--hidden", type=int, nargs=3, metavar="H")
    t.add_argument("--positives", type=int, help="gallery templates (and matching probes) per batch")
    t.add_argument("--negatives", type=int, help="extra non-matching probes per batch")
    t.add_argument("--max-template-len", dest="max_template_len", type=int)

    k = sub.add_parser("track", help="link detections into global trajectories")
    common(k)
    inputs(k)
    norm(k)
    k.add_argument("--model")
    k.add_argument("--mode", choices=["can", "mean"])
    k.add_argument("--window", type=int)
    k.add_argument("--tau-sct", dest="tau_sct", type=float)
    k.add_argument("--tau-ict", dest="tau_ict", type=float)
    k.add_argument("--threads", type=int)

    e = sub.add_parser("evaluate", help="score trajectories against ground truth")
    common(e)
    e.add_argument("--ground-truth", dest="ground_truth")
    e.add_argument("--hypothesis", help="trajectory CSV written by track")
    e.add_argument("--events", help="event log written by track (enables IE)")
    e.add_argument("--compare", nargs=2, metavar=("A", "B"), help="print a delta table of two reports")
    return p


def _setup_logging() -> None:
    level = os.environ.get("CANTRACK_LOG", "warn").lower()
    logging.basicConfig(level=LOG_LEVELS.get(level, logging.WARNING), stream=sys.stderr,
                        format="%(levelname)s %(name)s: %(message)s")
    if level not in LOG_LEVELS:
        log.warning("CANTRACK_LOG=%s not one of %s; using warn", level, ", ".join(LOG_LEVELS))


def run(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    if args.command == "generate":
        return cmd_generate(args)
    cfg = run_config(args, _load_json(args.config) if args.config else {})
    if args.command == "train":
        return cmd_train(cfg)
    if args.command == "track":
        return cmd_track(cfg)
    return cmd_evaluate(cfg, args.compare)


def main(argv: list[str] | None = None) -> int:
    _setup_logging()
    try:
        return run(argv)
    except (ValidationError, DomainError) as exc:
        print(f"cantrack: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except OSError as exc:
        print(f"cantrack: I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    except CantrackError as exc:
        print(f"cantrack: internal error: {exc}", file=sys.stderr)
        return EXIT_INTERNAL
    except Exception as exc:  # anything else is a bug
        log.debug("unhandled exception", exc_info=True)
        print(f"cantrack: internal error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_INTERNAL


if __name__ == "__main__":
    sys.exit(main())
