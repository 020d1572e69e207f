"""Command-line entry point: ``vcontrast <subcommand> ...``."""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from . import evaluation as ev
from .model import load_checkpoint
from .mvc.augment import ExternalRewriter, TemplateRewriter, run_augment, write_captions
from .mvc.filtering import FilterConfig, run_filter
from .mvc.simulate import simulated_records
from .mvc.store import CATEGORIES, StoreError, write_store
from .objectives import OBJECTIVES
from .synthetic import (MVC_TYPE_MIX, UNIFORM_TYPE_MIX, captions, gen_corpus, load_corpus, save_corpus,
                        strip_shortcut)
from .training import TrainConfig, read_config_file, select_checkpoint, train

log = logging.getLogger("vcontrast")

MIXES = {"mvc": MVC_TYPE_MIX, "uniform": UNIFORM_TYPE_MIX}

# CLI flag -> TrainConfig field
TRAIN_FLAGS = {
    "objective": "objective", "beta": "beta", "beta1": "beta1", "beta2": "beta2",
    "lr": "learning_rate", "epochs": "epochs", "batch_size": "batch_size", "seed": "seed",
    "checkpoint_interval": "checkpoint_interval_steps", "holdout_fraction": "holdout_fraction",
    "width": "width",
}


class UsageError(Exception):
    pass


def _dump_json(obj, path: str | Path) -> None:
    Path(path).write_text(json.dumps(obj, indent=1, sort_keys=True) + "\n", encoding="utf-8")


def _corpus_from(args) -> list:
    if args.corpus:
        corpus = load_corpus(args.corpus)
    else:
        corpus = gen_corpus(args.seed, args.n, MIXES[args.mix], shortcut=args.shortcut)
    if getattr(args, "strip_shortcut", False):
        corpus = strip_shortcut(corpus)
    return corpus


def cmd_gen_data(args) -> int:
    corpus = gen_corpus(args.seed, args.n, MIXES[args.mix], shortcut=args.shortcut)
    save_corpus(corpus, args.out, meta={"seed": args.seed, "mix": args.mix, "shortcut": args.shortcut})
    ids = [f"{args.seed}-{k:06d}" for k in range(len(corpus))]
    if args.captions:
        write_captions([{"pair_id": pid, "caption_w": cw, "caption_l": cl}
                        for pid, (cw, cl) in zip(ids, map(captions, corpus))], args.captions)
    if args.store:
        write_store(simulated_records(ids, [p.contrast_type for p in corpus], args.seed), args.store)
    print(f"wrote {len(corpus)} pairs to {args.out}")
    return 0


def cmd_filter(args) -> int:
    bypass = set()
    for item in args.bypass or []:
        bypass.update(s for s in item.split(",") if s)
    cfg = FilterConfig(tau_clip=args.tau_clip, tau_dino=args.tau_dino,
                       bypass_categories=frozenset(bypass) if args.bypass is not None else frozenset({"position"}),
                       bypass_rate=args.bypass_rate, holdout_fraction=args.holdout_fraction)
    report = run_filter(args.store, cfg, seed=args.seed, out_path=args.out)
    report_path = args.report or f"{args.out}.report.json"
    report.write(report_path)
    print(f"kept {report.kept}/{report.total}; report in {report_path}")
    return 0


def cmd_augment(args) -> int:
    if args.rewriter == "external":
        if not args.cache:
            raise UsageError("--rewriter external needs --cache <dir>")
        rewriter = ExternalRewriter(args.cache)
    else:
        rewriter = TemplateRewriter()
    report = run_augment(args.inp, rewriter, args.out, kept_path=args.kept, in_flight=args.in_flight)
    report_path = args.report or f"{args.out}.report.json"
    report.write(report_path)
    print(f"augmented {report.total} records; fallbacks: {report.fallback_malformed} malformed, "
          f"{report.fallback_contrast} contrast; report in {report_path}")
    return 0


def cmd_train(args) -> int:
    values = read_config_file(args.config) if args.config else {}
    for flag, name in TRAIN_FLAGS.items():
        value = getattr(args, flag)
        if value is not None:
            values[name] = value
    if values.get("objective", "svco") not in OBJECTIVES:
        raise UsageError(f"unknown objective {values['objective']!r}; valid objectives: {', '.join(OBJECTIVES)}")
    config = TrainConfig.from_mapping(values)
    args.seed = config.seed
    corpus = _corpus_from(args)
    run, _ = train(config, corpus, out_dir=args.out)
    best = select_checkpoint(run)
    name = Path(best.path).name
    _dump_json({"step": best.step, "checkpoint": name, "metrics": best.metrics}, Path(args.out) / "selected.json")
    print(f"trained {len(run.steps)} steps; final loss {run.steps[-1].train_loss:.6f}; "
          f"selected {name} of {args.out}")
    return 0


def cmd_eval(args) -> int:
    model = load_checkpoint(args.checkpoint)
    corpus = _corpus_from(args)
    metrics = ev.eval_battery(model, corpus)
    metrics["n"] = len(corpus)
    _dump_json(metrics, args.out)
    print(" ".join(f"{k}={v:.6g}" for k, v in sorted(metrics.items())))
    return 0


def cmd_probe(args) -> int:
    model = load_checkpoint(args.checkpoint)
    report = ev.neglect_probe(model, _corpus_from(args))
    report.write(args.out)
    if args.csv:
        ev.write_table(report.table_rows(), args.csv)
    means = report.means
    print(f"mean ppl match={means['match']:.4g} mismatch={means['mismatch']:.4g} "
          f"noimage={means['noimage']:.4g}; match<mismatch on {report.match_below_mismatch:.3f}")
    return 0


def _read_metrics(path: str) -> dict[str, float]:
    data = json.loads(Path(path).read_text(encoding="utf-8"))
    if not isinstance(data, dict):
        raise UsageError(f"{path}: expected a JSON object of metric -> value")
    return {k: float(v) for k, v in data.items()}


def cmd_report(args) -> int:
    base, tuned = _read_metrics(args.base), _read_metrics(args.tuned)
    lower = set(args.lower_better or [])
    changes = ev.metric_improvements(base, tuned, lower)
    out = {"avg_improvement": ev.avg_improvement(base, tuned, lower), "improvements": changes}
    rows = [{"metric": k, "base": base[k], "tuned": tuned[k], "improvement": v} for k, v in changes.items()]
    if args.with_images and args.without_images:
        with_img, without_img = _read_metrics(args.with_images), _read_metrics(args.without_images)
        dependency = {k: ev.visual_dependency(with_img[k], without_img[k])
                      for k in sorted(set(with_img) & set(without_img) & set(changes))}
        for row in rows:
            if row["metric"] in dependency:
                row["dependency"] = dependency[row["metric"]]
        out["dependency"] = dependency
        if len(dependency) >= 2:
            out["trend_slope"] = ev.improvement_trend((d, changes[k]) for k, d in dependency.items())
    elif args.with_images or args.without_images:
        raise UsageError("--with-images and --without-images go together")
    _dump_json(out, args.out)
    if args.csv:
        ev.write_table(rows, args.csv)
    print(f"avg_improvement={out['avg_improvement']:.6f}")
    return 0


def _corpus_args(p: argparse.ArgumentParser) -> None:
    p.add_argument("--corpus", help="corpus JSONL; generated from --seed when omitted")
    p.add_argument("--n", type=int, default=2000, help="pairs to generate without --corpus (default 2000)")
    p.add_argument("--mix", choices=sorted(MIXES), default="mvc", help="contrast-type mix for generation")
    p.add_argument("--shortcut", action="store_true", help="generate with the style shortcut on i_l")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="vcontrast", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate a synthetic contrast corpus")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--n", type=int, default=2000)
    p.add_argument("--mix", choices=sorted(MIXES), default="mvc")
    p.add_argument("--shortcut", action="store_true")
    p.add_argument("--out", required=True, help="corpus JSONL path")
    p.add_argument("--captions", help="also write caption pairs for augmentation")
    p.add_argument("--store", help="also write a simulated embedding store for filtering")
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("filter", help="dual-threshold filter over an embedding store")
    p.add_argument("--store", required=True)
    p.add_argument("--tau-clip", type=float, default=0.7)
    p.add_argument("--tau-dino", type=float, default=0.5)
    p.add_argument("--bypass", action="append", metavar="CATEGORY",
                   help=f"category exempt from thresholds (repeatable; one of {', '.join(CATEGORIES)})")
    p.add_argument("--bypass-rate", type=float, help="sampling rate for bypass categories (default: auto)")
    p.add_argument("--holdout-fraction", type=float, default=0.0)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True, help="kept-set JSONL path")
    p.add_argument("--report", help="report JSON path (default: <out>.report.json)")
    p.set_defaults(func=cmd_filter)

    p = sub.add_parser("augment", help="rewrite caption pairs into query/response records")
    p.add_argument("--in", dest="inp", required=True, help="caption JSONL")
    p.add_argument("--rewriter", choices=("template", "external"), default="template")
    p.add_argument("--cache", help="reply cache directory for the external rewriter")
    p.add_argument("--kept", help="kept-set JSONL from the filter; restricts the input")
    p.add_argument("--in-flight", type=int, default=4)
    p.add_argument("--seed", type=int, default=0, help="accepted for uniformity; augmentation is not random")
    p.add_argument("--out", required=True)
    p.add_argument("--report")
    p.set_defaults(func=cmd_augment)

    p = sub.add_parser("train", help="train the toy model under an objective")
    p.add_argument("--config", help="flat key = value config file; flags override it")
    p.add_argument("--objective", help=f"one of: {', '.join(OBJECTIVES)}")
    p.add_argument("--beta", type=float)
    p.add_argument("--beta1", type=float)
    p.add_argument("--beta2", type=float)
    p.add_argument("--lr", type=float)
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--checkpoint-interval", type=int)
    p.add_argument("--holdout-fraction", type=float)
    p.add_argument("--width", type=int)
    _corpus_args(p)
    p.add_argument("--out", default="run", help="output directory (default ./run)")
    p.set_defaults(func=cmd_train)

    for name, func, help_ in (("eval", cmd_eval, "pair accuracy and probe summary for a checkpoint"),
                              ("probe", cmd_probe, "match / mismatch / no-image perplexity probe")):
        p = sub.add_parser(name, help=help_)
        p.add_argument("--checkpoint", required=True)
        p.add_argument("--seed", type=int, default=0)
        _corpus_args(p)
        p.add_argument("--strip-shortcut", action="store_true", help="zero the style coordinate first")
        p.add_argument("--out", required=True, help="JSON output path")
        if name == "probe":
            p.add_argument("--csv", help="also write a flat CSV table")
        p.set_defaults(func=func)

    p = sub.add_parser("report", help="aggregate metric files into improvement and dependency tables")
    p.add_argument("--base", required=True, help="JSON {metric: value} for the base model")
    p.add_argument("--tuned", required=True, help="JSON {metric: value} for the tuned model")
    p.add_argument("--lower-better", nargs="*", metavar="METRIC")
    p.add_argument("--with-images", help="JSON scores with images, for dependency")
    p.add_argument("--without-images", help="JSON scores without images")
    p.add_argument("--seed", type=int, default=0, help="accepted for uniformity; report is not random")
    p.add_argument("--out", required=True)
    p.add_argument("--csv")
    p.set_defaults(func=cmd_report)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except UsageError as exc:
        parser.exit(2, f"vcontrast {args.command}: error: {exc}\n")
    except (ValueError, StoreError, OSError) as exc:
        print(f"vcontrast {args.command}: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
