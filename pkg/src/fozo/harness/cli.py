"""Command line entry point: ``fozo <verb> [--config F] [--seed N] [--out P] [--set key=value ...]``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from ..core_math import derive_seed
from ..engine import write_metrics_csv
from ..model import ModelSpec, quantize, save_checkpoint
from ..streams import DomainSpec, TaskSpec, build_stream
from .diagnostics import DiagnosticsConfig, run_bias_variance_diagnostics
from .experiment import ExperimentConfig, load_model, run_arm, run_experiment, source_stats_for
from .pretrain import pretrain_source

log = logging.getLogger("fozo")

# config sections consumed by a single verb rather than by ExperimentConfig
_VERB_SECTIONS = ("pretrain", "diagnostics", "bits")


def parse_value(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def apply_overrides(doc: dict, overrides) -> dict:
    """Apply ``key=value`` pairs; dotted keys address nested sections, values parse as JSON when they can."""
    for item in overrides or ():
        key, sep, raw = item.partition("=")
        if not sep or not key:
            raise ValueError(f"--set expects key=value, got {item!r}")
        node = doc
        *parents, leaf = key.split(".")
        for p in parents:
            node = node.setdefault(p, {})
            if not isinstance(node, dict):
                raise ValueError(f"--set {key}: {p!r} is not a section")
        node[leaf] = parse_value(raw)
    return doc


def load_config(path, overrides) -> dict:
    doc = json.loads(Path(path).read_text()) if path else {}
    return apply_overrides(doc, overrides)


def _experiment_config(doc: dict) -> ExperimentConfig:
    return ExperimentConfig.from_dict({k: v for k, v in doc.items() if k not in _VERB_SECTIONS})


def cmd_pretrain(doc, args):
    task = TaskSpec(**doc.get("task", {}))
    spec = ModelSpec(**doc.get("model", {}))
    seed = 0 if args.seed is None else args.seed
    model = pretrain_source(spec, task, seed, **doc.get("pretrain", {}))
    out = args.out or "checkpoint.json"
    save_checkpoint(model, out)
    print(f"source accuracy {model.meta['source_accuracy']:.4f} after {model.meta['steps']} steps -> {out}")


def cmd_stats(doc, args):
    cfg = _experiment_config(doc)
    if args.seed is not None:
        cfg.stats_seed = args.seed
    cfg.source_stats = None
    stats = source_stats_for(load_model(cfg), cfg)
    out = args.out or "source_stats.json"
    stats.save(out)
    print(f"source statistics -> {out}")


def cmd_quantize(doc, args):
    cfg = _experiment_config(doc)
    cfg.quantized = False
    q = quantize(load_model(cfg), bits=int(doc.get("bits", 8)))
    out = args.out or "checkpoint_int8.json"
    save_checkpoint(q, out)
    print(f"int8 checkpoint -> {out}")


def cmd_adapt(doc, args):
    cfg = _experiment_config(doc)
    seed = cfg.seeds[0] if args.seed is None else args.seed
    model = load_model(cfg)
    source = source_stats_for(model, cfg)
    stream = list(build_stream(cfg.task, cfg.stream_schedule(), derive_seed(seed, 0x57)))
    metrics = run_arm(model, source, stream, cfg.arms[0], seed, cfg.optimizer, cfg.mode)
    out = args.out or "metrics.csv"
    write_metrics_csv(metrics, out, timing=cfg.record_timing)
    acc = sum(m.acc for m in metrics) / len(metrics)
    print(f"{cfg.arms[0]} seed {seed}: mean accuracy {acc:.4f} over {len(metrics)} batches -> {out}")


def cmd_experiment(doc, args):
    cfg = _experiment_config(doc)
    if args.seed is not None:
        cfg.seeds = (args.seed,)
    if args.out:
        cfg.out = args.out
    summary = run_experiment(cfg)
    for arm, s in summary["arms"].items():
        print(f"{arm:10s} mean acc {s['mean_acc']:.4f}  mean auc {s['mean_auc']:.4f}  forward passes {s['fp_total']}")
    print(f"summary -> {Path(cfg.out) / 'summary.json'}")


def cmd_diagnose(doc, args):
    cfg = _experiment_config(doc)
    # the reference gradients behind the report need float weights
    cfg.quantized = False
    model = load_model(cfg)
    if not hasattr(model, "params"):
        raise ValueError("diagnose needs a float checkpoint")
    diag = dict(doc.get("diagnostics", {}))
    if "domain" in diag:
        diag["domain"] = DomainSpec(**diag["domain"])
    for key in ("eps_values", "eps_min_values", "floor_seeds"):
        if key in diag:
            diag[key] = tuple(diag[key])
    dcfg = DiagnosticsConfig(task=cfg.task, lam=cfg.optimizer.lam, n_prompts=cfg.optimizer.n_prompts, **diag)
    if args.seed is not None:
        dcfg.seed = args.seed
    report = run_bias_variance_diagnostics(model, dcfg)
    out = args.out or "oracle_report.json"
    Path(out).write_text(json.dumps(report.to_dict(), indent=1))
    print(f"bias slope {report.bias_slope:.3f}  variance ratio {report.variance_ratio:.3f}  "
          f"checks {report.passed} -> {out}")
    return 0 if report.ok else 1


VERBS = {
    "pretrain": (cmd_pretrain, "train the frozen toy model on clean source data"),
    "stats": (cmd_stats, "estimate and save source feature statistics"),
    "adapt": (cmd_adapt, "run one arm over one stream and write its metrics CSV"),
    "experiment": (cmd_experiment, "run every arm and seed of a config, write CSVs and summary.json"),
    "diagnose": (cmd_diagnose, "bias, variance and error-floor report on the toy loss"),
    "quantize": (cmd_quantize, "convert a float checkpoint to INT8"),
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON config file")
    common.add_argument("--seed", type=int, help="seed override")
    common.add_argument("--out", help="output file or directory")
    common.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                        help="config override; dotted keys reach nested sections (repeatable)")
    common.add_argument("--log-level", default="WARNING")
    parser = argparse.ArgumentParser(prog="fozo", description="Forward-only zeroth-order test-time adaptation")
    sub = parser.add_subparsers(dest="verb", required=True)
    for name, (_, help_text) in VERBS.items():
        sub.add_parser(name, parents=[common], help=help_text)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=args.log_level.upper(), format="%(levelname)s %(name)s: %(message)s")
    try:
        doc = load_config(args.config, args.overrides)
        code = VERBS[args.verb][0](doc, args)
    except (FileNotFoundError, ValueError, TypeError) as err:
        print(f"fozo {args.verb}: error: {err}", file=sys.stderr)
        return 2
    return code or 0


if __name__ == "__main__":
    sys.exit(main())
