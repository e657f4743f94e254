"""Command-line entry points.

Subcommands: gen-synthetic, train, eval, sweep-nota, da-eval, report.
All model/run settings come from one TOML config file; any key can be
overridden on the command line with ``--set section.key=value``.  Exit code
is 0 on success and 2 on any configuration, corpus, or run error.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from .autodiff import AutodiffError
from .config import ConfigError, RunConfig, apply_overrides, config_hash
from .corpus import CorpusError, SyntheticSpec, gen_synthetic, serialize_dataset
from .episodes import EpisodeError
from .harness import HarnessError, RunManifest, da_eval, evaluate, nota_sweep, train
from .harness import MANIFEST_NAME
from .reports import (
    ReportError,
    EvalReport,
    emit_report,
    read_report,
    to_markdown,
)

_ERRORS = (ConfigError, CorpusError, EpisodeError, HarnessError, ReportError,
           AutodiffError, OSError)


def _read_config(path: str, overrides: list[str]) -> RunConfig:
    if sys.version_info >= (3, 11):
        import tomllib
    else:  # pragma: no cover
        import tomli as tomllib
    with open(path, "rb") as fh:
        try:
            data = tomllib.load(fh)
        except tomllib.TOMLDecodeError as exc:
            raise ConfigError(f"cannot parse {path}: {exc}") from exc
    if overrides:
        data = apply_overrides(data, overrides)
    return RunConfig.from_dict(data)


def _add_config_args(sub: argparse.ArgumentParser) -> None:
    sub.add_argument("--config", required=True, help="TOML run config")
    sub.add_argument("--set", dest="overrides", action="append", default=[],
                     metavar="SECTION.KEY=VALUE",
                     help="override one config key (repeatable)")
    sub.add_argument("--seed", type=int, default=None,
                     help="override the master seed")


def _resolved_config(args) -> RunConfig:
    overrides = list(args.overrides)
    if args.seed is not None:
        overrides.append(f"seed={args.seed}")
    return _read_config(args.config, overrides)


def _emit_standard(report: EvalReport, out_dir: Path, stem: str) -> list[Path]:
    paths = [emit_report(report, fmt, out_dir / f"{stem}.{suffix}")
             for fmt, suffix in (("csv", "csv"), ("json", "json"),
                                 ("markdown", "md"))]
    return paths


def _record_reports(out_dir: Path, paths: list[Path]) -> None:
    manifest_path = out_dir / MANIFEST_NAME
    if not manifest_path.exists():
        return
    manifest = RunManifest.read(manifest_path)
    known = set(manifest.report_paths)
    manifest.report_paths = manifest.report_paths + tuple(
        str(p) for p in paths if str(p) not in known)
    manifest.write(manifest_path)


def _cmd_gen_synthetic(args) -> int:
    fields: dict = {}
    for item in args.spec.split(","):
        if "=" not in item:
            raise ConfigError(f"--spec entry {item!r} is not key=value")
        key, _, raw = item.partition("=")
        key = key.strip()
        if key in ("num_relations", "instances_per_relation", "vocab_size"):
            fields[key] = int(raw)
        elif key == "sentence_len":
            lo, _, hi = raw.partition("-")
            fields[key] = (int(lo), int(hi))
        elif key in ("signal", "namespace"):
            fields[key] = raw
        else:
            raise ConfigError(f"unknown synthetic spec key {key!r}")
    spec = SyntheticSpec(**fields)
    dataset, _ = gen_synthetic(spec, args.seed)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(json.dumps(serialize_dataset(dataset), indent=1,
                              sort_keys=True) + "\n", encoding="utf-8")
    print(f"wrote {len(dataset)} relations to {out}")
    return 0


def _cmd_train(args) -> int:
    cfg = _resolved_config(args)
    print(f"training {cfg.model.variant} (config {config_hash(cfg)}, "
          f"seed {cfg.seed})")
    result = train(cfg, progress=print)
    print(f"best validation accuracy {result.best_valid_acc:.2f}%")
    print(f"checkpoint: {result.checkpoint_path}")
    return 0


def _cmd_eval(args) -> int:
    cfg = _resolved_config(args)
    report = evaluate(args.checkpoint, cfg, domain=args.domain,
                      corpus_path=args.corpus, alpha=args.nota_rate)
    out_dir = Path(cfg.out_dir)
    paths = _emit_standard(report, out_dir, "eval")
    _record_reports(out_dir, paths)
    print(to_markdown(report))
    print("wrote " + ", ".join(str(p) for p in paths))
    return 0


def _cmd_sweep_nota(args) -> int:
    cfg = _resolved_config(args)
    rates = None
    if args.rates:
        rates = [float(r) for r in args.rates.split(",") if r.strip() != ""]
    report = nota_sweep(args.checkpoint, cfg, rates=rates,
                        corpus_path=args.corpus)
    out_dir = Path(cfg.out_dir)
    paths = _emit_standard(report, out_dir, "nota_sweep")
    paths.append(emit_report(report, "svg", out_dir / "nota_sweep.svg"))
    _record_reports(out_dir, paths)
    print(to_markdown(report))
    print("wrote " + ", ".join(str(p) for p in paths))
    return 0


def _cmd_da_eval(args) -> int:
    cfg = _resolved_config(args)
    report = da_eval(args.checkpoint, cfg, source_path=args.source,
                     target_path=args.target)
    out_dir = Path(cfg.out_dir)
    paths = _emit_standard(report, out_dir, "da_eval")
    _record_reports(out_dir, paths)
    print(to_markdown(report))
    print("wrote " + ", ".join(str(p) for p in paths))
    return 0


def _cmd_report(args) -> int:
    report = read_report(args.infile)
    suffix = {"csv": ".csv", "json": ".json", "markdown": ".md",
              "svg": ".svg"}[args.format]
    out = Path(args.out) if args.out else Path(args.infile).with_suffix(suffix)
    emit_report(report, args.format, out)
    print(f"wrote {out}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="fewshot-rc",
        description="Few-shot relation classification: train, evaluate, "
                    "sweep abstain rates, and compare domains.")
    subs = parser.add_subparsers(dest="command", required=True)

    p = subs.add_parser("gen-synthetic", help="write a synthetic corpus")
    p.add_argument("--spec", required=True,
                   help="comma-separated fields, e.g. num_relations=20,"
                        "instances_per_relation=50,signal=keyword,"
                        "namespace=src_,sentence_len=8-14,vocab_size=120")
    p.add_argument("--out", required=True, help="output corpus path (json)")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=_cmd_gen_synthetic)

    p = subs.add_parser("train", help="train a model per the config")
    _add_config_args(p)
    p.set_defaults(func=_cmd_train)

    p = subs.add_parser("eval", help="evaluate a checkpoint")
    _add_config_args(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--corpus", default=None,
                   help="corpus path override (default: [corpus] eval_path)")
    p.add_argument("--domain", default="in-domain")
    p.add_argument("--nota-rate", type=float, default=None,
                   help="abstain-query rate override")
    p.set_defaults(func=_cmd_eval)

    p = subs.add_parser("sweep-nota",
                        help="evaluate across abstain rates on shared seeds")
    _add_config_args(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--corpus", default=None)
    p.add_argument("--rates", default=None,
                   help="comma-separated rates, e.g. 0,0.15,0.3,0.5")
    p.set_defaults(func=_cmd_sweep_nota)

    p = subs.add_parser("da-eval",
                        help="paired source/target domain evaluation")
    _add_config_args(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--source", default=None, help="source corpus override")
    p.add_argument("--target", default=None, help="target corpus override")
    p.set_defaults(func=_cmd_da_eval)

    p = subs.add_parser("report", help="convert a report file")
    p.add_argument("--in", dest="infile", required=True,
                   help="existing csv or json report")
    p.add_argument("--format", required=True,
                   choices=("csv", "json", "markdown", "svg"))
    p.add_argument("--out", default=None)
    p.set_defaults(func=_cmd_report)
    return parser


def main(argv: list[str] | None = None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(message)s")
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except _ERRORS as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
