"""Command-line entry point: ``cleft gen-data | pretrain | prompt-tune | eval | report``.

Exit codes: 0 success, 2 configuration or input error, 3 numeric failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path
from typing import Optional, Sequence

from cleft import pipeline
from cleft.checkpoint import atomic_write_text
from cleft.config import PRESETS_NAMES, RunConfig, config_from_dict, load_config, preset, resolve_path
from cleft.errors import CleftError, ConfigError, NumericError

log = logging.getLogger("cleft")

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_NUMERIC = 3


class _Parser(argparse.ArgumentParser):
    """argparse exits with status 2 on usage errors already; keep the message on stderr."""

    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_CONFIG, f"{self.prog}: error: {message}\n")


class _Paths:
    def __init__(self, cfg: RunConfig, config_path: Optional[Path]):
        base = config_path if config_path is not None else Path.cwd() / "config.json"
        self.data = resolve_path(base, cfg.data_dir)
        self.run = resolve_path(base, cfg.run_dir)
        self.stage1 = self.run / "stage1"
        self.stage2 = self.run / "stage2"
        self.eval = self.run / "eval"


def _load(args) -> tuple[RunConfig, _Paths]:
    if args.config is not None:
        cfg = load_config(args.config)
        path = Path(args.config)
    else:
        cfg = config_from_dict({"preset": args.preset})
        path = None
    if getattr(args, "data_dir", None):
        cfg = cfg.replace(data_dir=str(Path(args.data_dir).resolve()))
    if getattr(args, "run_dir", None):
        cfg = cfg.replace(run_dir=str(Path(args.run_dir).resolve()))
    return cfg, _Paths(cfg, path)


# --- subcommands ----------------------------------------------------------------

def cmd_init(args) -> int:
    cfg = preset(args.preset)
    out = Path(args.out)
    if out.exists() and not args.force:
        raise ConfigError(f"{out} already exists (use --force to overwrite)")
    atomic_write_text(out, cfg.to_json())
    print(out)
    return EXIT_OK


def cmd_gen_data(args) -> int:
    cfg, paths = _load(args)
    out = pipeline.gen_data(cfg, paths.data)
    print(f"wrote synthetic data to {out}")
    return EXIT_OK


def cmd_pretrain(args) -> int:
    cfg, paths = _load(args)
    corpus = pipeline.load_corpus(cfg, paths.data)
    summary = pipeline.pretrain(cfg, corpus, paths.stage1)
    print(json.dumps(pipeline.as_jsonable(summary), indent=2, sort_keys=True))
    return EXIT_OK


def cmd_prompt_tune(args) -> int:
    cfg, paths = _load(args)
    corpus = pipeline.load_corpus(cfg, paths.data)
    stage1 = pipeline.require(Path(args.checkpoint) if args.checkpoint else paths.stage1 / "best.ckpt")
    if args.sweep is not None:
        lengths = cfg.sweep_lengths() if args.sweep == "" else cfg.replace(prompt_sweep=args.sweep).sweep_lengths()
        rows = pipeline.prompt_sweep(cfg, corpus, stage1, paths.stage2, lengths)
        for r in rows:
            print(f"L={r.length}\tval={r.val_accuracy:.4f}\ttest={r.test_accuracy:.4f}")
        print(paths.stage2 / "sweep.csv")
        return EXIT_OK
    summary = pipeline.prompt_tune_run(cfg, corpus, stage1, paths.stage2, args.length)
    print(json.dumps(pipeline.as_jsonable(summary), indent=2, sort_keys=True))
    return EXIT_OK


def cmd_eval(args) -> int:
    cfg, paths = _load(args)
    if not (args.zs or args.lp or args.ft or args.ablation or args.ratios or args.plot):
        raise ConfigError("eval: choose at least one of --zs --lp --ft --ablation --ratios --plot")
    out: dict = {"reports": []}
    needs_data = args.zs or args.lp or args.ft or args.ablation or args.ratios
    corpus = pipeline.load_corpus(cfg, paths.data) if needs_data else None
    if args.zs or args.lp or args.ft:
        stage1 = pipeline.require(Path(args.checkpoint) if args.checkpoint else paths.stage1 / "best.ckpt")
        model = pipeline.load_model(cfg, corpus.vocab, stage1)
        if args.zs:
            context = Path(args.context) if args.context else paths.stage2 / "context.ckpt"
            out["reports"].append(pipeline.zero_shot(model, corpus, context))
        if args.lp:
            out["reports"].append(pipeline.linear_probe_eval(cfg, model, corpus))
        if args.ft:
            out["reports"].append(pipeline.finetune_eval(cfg, model, corpus))
    for name in args.ablation or []:
        out["reports"].append(pipeline.ablation(cfg, corpus, name, paths.run))
    if args.ratios:
        report = pipeline.ratio_report(cfg, len(corpus.vocab))
        out["ratios"] = report
        for line in report.lines():
            print(line)
    with pipeline.locked(paths.eval):
        pipeline.write_config(paths.eval, cfg)
        if args.plot:
            svg = pipeline.plot_metrics(pipeline.require(paths.stage1 / "metrics.csv"), paths.eval / "metrics.svg")
            out["plot"] = str(svg)
        for r in out["reports"]:
            auc = "n/a" if r.auc is None else f"{r.auc:.4f}"
            print(f"{r.protocol}\taccuracy={r.accuracy:.4f}\tauc={auc}")
        target = Path(args.out) if args.out else paths.eval / "report.json"
        atomic_write_text(target, json.dumps(pipeline.as_jsonable(out), indent=2, sort_keys=True) + "\n")
    print(target)
    return EXIT_OK


def cmd_report(args) -> int:
    if not args.ratios:
        raise ConfigError("report: nothing to do (pass --ratios)")
    cfg = vocab_size = None
    if args.config is not None:
        cfg, paths = _load(args)
        vocab_file = paths.data / "vocab.tsv"
        if vocab_file.is_file():
            from cleft.data import Vocab
            vocab_size = len(Vocab.load(vocab_file))
    report = pipeline.ratio_report(cfg, vocab_size)
    for line in report.lines():
        print(line)
    if args.json:
        print(json.dumps(report.to_dict(), indent=2, sort_keys=True))
    return EXIT_OK


# --- parser ----------------------------------------------------------------------

def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="flat JSON run config (defaults to the chosen preset)")
    p.add_argument("--preset", choices=PRESETS_NAMES, default="toy", help="used when --config is absent")
    p.add_argument("--data-dir", help="override the config's data_dir")
    p.add_argument("--run-dir", help="override the config's run_dir")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="cleft", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="count", default=0)
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("init", help="write a preset config file")
    p.add_argument("--preset", choices=PRESETS_NAMES, default="toy")
    p.add_argument("--out", default="config.json")
    p.add_argument("--force", action="store_true")
    p.set_defaults(func=cmd_init)

    p = sub.add_parser("gen-data", help="generate the synthetic image/caption corpus")
    _common(p)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("pretrain", help="stage 1: contrastive pretraining with adapters")
    _common(p)
    p.set_defaults(func=cmd_pretrain)

    p = sub.add_parser("prompt-tune", help="stage 2: learn the shared prompt context")
    _common(p)
    p.add_argument("--checkpoint", help="stage-1 checkpoint (default: <run_dir>/stage1/best.ckpt)")
    p.add_argument("--length", type=int, help="context length L (default from config)")
    p.add_argument("--sweep", nargs="?", const="", metavar="L1,L2,...",
                   help="sweep context lengths and write sweep.csv (default list from config)")
    p.set_defaults(func=cmd_prompt_tune)

    p = sub.add_parser("eval", help="run evaluation protocols")
    _common(p)
    p.add_argument("--checkpoint", help="stage-1 checkpoint (default: <run_dir>/stage1/best.ckpt)")
    p.add_argument("--context", help="prompt context checkpoint (default: <run_dir>/stage2/context.ckpt)")
    p.add_argument("--zs", action="store_true", help="zero-shot classification on the test split")
    p.add_argument("--lp", action="store_true", help="linear probe on frozen vision features")
    p.add_argument("--ft", action="store_true", help="fine-tune the vision tower with a linear head")
    p.add_argument("--ablation", action="append", choices=pipeline.ABLATIONS)
    p.add_argument("--ratios", action="store_true", help="parameter-ratio report")
    p.add_argument("--plot", action="store_true", help="SVG chart of the stage-1 metrics")
    p.add_argument("--out", help="report path (default: <run_dir>/eval/report.json)")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("report", help="print reports that need no training")
    _common(p)
    p.add_argument("--ratios", action="store_true")
    p.add_argument("--json", action="store_true", help="also print the report as JSON")
    p.set_defaults(func=cmd_report)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2),
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except NumericError as exc:
        print(f"numeric error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (CleftError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
