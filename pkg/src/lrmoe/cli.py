"""Command-line entry point.

Every subcommand takes ``--config FILE`` (JSON with optional ``corpus``,
``model``, ``train`` and ``eval`` sections plus a top-level ``seed``) and any
number of ``--set section.key=value`` overrides. Values are parsed as JSON
when possible, otherwise kept as strings. The merged result is written as
``resolved_config.json`` in the output directory.

The seed is resolved as ``--seed`` flag, then the ``LRMOE_SEED`` environment
variable, then the config's ``seed`` (default 0), and is copied into every
section.

Exit codes: 0 success, 1 usage error, 2 data or config error, 3 internal
invariant breach.
"""

from __future__ import annotations

import argparse
import copy
import json
import logging
import os
import sys
from dataclasses import replace
from pathlib import Path
from typing import Sequence

from .corpus import CorpusConfig, CorpusFormatError, generate_corpus, read_corpus, read_splits, write_splits
from .evaluation import evaluate, routing_report, routing_table
from .models import (
    ANALYTIC_VARIANTS,
    VARIANTS,
    CheckpointError,
    ConfigError,
    FLOPS_CONVENTION,
    ModelConfig,
    count_flops,
    load_checkpoint,
    paper_config,
    param_count,
)
from .training import DataError, TrainConfig, TransferError, train

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_INTERNAL = 0, 1, 2, 3
SECTIONS = ("corpus", "model", "train", "eval")
EVAL_DEFAULTS = {"beam": 10, "batch_size": 32}
RESOLVED_NAME = "resolved_config.json"

log = logging.getLogger("lrmoe")


class UsageError(Exception):
    pass


class ArgParser(argparse.ArgumentParser):
    """argparse that raises instead of exiting with status 2."""

    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


# ---------------------------------------------------------------------------
# config resolution


def _parse_value(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def apply_override(cfg: dict, assignment: str) -> None:
    """Set ``section.key=value`` in place. Unknown sections or keys raise."""
    if "=" not in assignment:
        raise ConfigError(assignment, "override must look like section.key=value")
    path, raw = assignment.split("=", 1)
    parts = path.strip().split(".")
    if parts == ["seed"]:
        cfg["seed"] = _parse_value(raw)
        return
    if len(parts) != 2 or parts[0] not in SECTIONS:
        raise ConfigError(path, f"unknown config path; expected one of {', '.join(SECTIONS)} followed by .key")
    section, key = parts
    if key not in _defaults(section):
        raise ConfigError(path, "unknown config key")
    cfg.setdefault(section, {})[key] = _parse_value(raw)


def _defaults(section: str) -> dict:
    if section == "corpus":
        return CorpusConfig().to_dict()
    if section == "model":
        return ModelConfig().to_dict()
    if section == "train":
        return TrainConfig().to_dict()
    return dict(EVAL_DEFAULTS)


def load_config(path: str | None) -> dict:
    if path is None:
        return {}
    try:
        cfg = json.loads(Path(path).read_text(encoding="utf-8"))
    except FileNotFoundError as exc:
        raise DataError(f"config file not found: {path}") from exc
    except json.JSONDecodeError as exc:
        raise DataError(f"{path}: invalid JSON ({exc})") from exc
    if not isinstance(cfg, dict):
        raise ConfigError("<root>", "config must be a JSON object")
    for key, value in cfg.items():
        if key == "seed":
            continue
        if key not in SECTIONS:
            raise ConfigError(key, "unknown top-level config key")
        if not isinstance(value, dict):
            raise ConfigError(key, "section must be a JSON object")
        unknown = set(value) - set(_defaults(key))
        if unknown:
            raise ConfigError(f"{key}.{sorted(unknown)[0]}", "unknown config key")
    return cfg


def resolve_seed(flag: int | None, cfg: dict, env=None) -> int:
    env = os.environ if env is None else env
    if flag is not None:
        return int(flag)
    if env.get("LRMOE_SEED") not in (None, ""):
        try:
            return int(env["LRMOE_SEED"])
        except ValueError as exc:
            raise ConfigError("LRMOE_SEED", f"not an integer: {env['LRMOE_SEED']!r}") from exc
    return int(cfg.get("seed", 0))


def resolve(args) -> dict:
    """Config file, then overrides, then the seed, then defaults filled in."""
    cfg = load_config(args.config)
    for assignment in args.set or []:
        apply_override(cfg, assignment)
    seed = resolve_seed(args.seed, cfg)
    out = {"seed": seed}
    for section in SECTIONS:
        merged = {**_defaults(section), **copy.deepcopy(cfg.get(section, {}))}
        if "seed" in merged:
            merged["seed"] = seed
        out[section] = merged
    return out


def write_resolved(out_dir: Path, resolved: dict, command: str) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    snap = {"command": command, **resolved}
    (out_dir / RESOLVED_NAME).write_text(json.dumps(snap, indent=2, sort_keys=True) + "\n")


def _model_config(resolved: dict, corpus_cfg: CorpusConfig | None, explicit: dict) -> ModelConfig:
    m = dict(resolved["model"])
    if corpus_cfg is not None:
        # the corpus fixes vocabulary and feature size unless the user insists
        for key, value in (("vocab_sizes", list(corpus_cfg.vocab_sizes)), ("feat_dim", corpus_cfg.feat_dim)):
            if key in explicit and explicit[key] != value:
                raise ConfigError(f"model.{key}", f"{explicit[key]} does not match the corpus ({value})")
            m[key] = value
    return ModelConfig.from_dict(m).validate()


def _explicit_model_keys(args) -> dict:
    cfg = load_config(args.config)
    for assignment in args.set or []:
        apply_override(cfg, assignment)
    return cfg.get("model", {})


# ---------------------------------------------------------------------------
# subcommands


def cmd_gen_corpus(args) -> int:
    resolved = resolve(args)
    ccfg = CorpusConfig.from_dict(resolved["corpus"])
    out = Path(args.out)
    write_resolved(out, resolved, "gen-corpus")
    splits = generate_corpus(ccfg)
    write_splits(splits, out, ccfg)
    for name, utts in splits.items():
        print(f"{name}: {len(utts)} utterances")
    return EXIT_OK


def cmd_train(args) -> int:
    resolved = resolve(args)
    splits, ccfg = read_splits(args.data)
    if "train" not in splits:
        raise DataError(f"{args.data}: no train split")
    mcfg = _model_config(resolved, ccfg, _explicit_model_keys(args))
    tdict = dict(resolved["train"])
    if args.pretrain:
        tdict["pretrain"] = args.pretrain
    tcfg = TrainConfig.from_dict(tdict)
    tcfg.validate()
    resolved["model"], resolved["train"] = mcfg.to_dict(), tcfg.to_dict()
    out = Path(args.out)
    write_resolved(out, resolved, "train")
    result = train(mcfg, tcfg, splits["train"], out_dir=out, resume=args.resume)
    last = result.history[-1] if result.history else {}
    print(f"trained {len(result.history)} steps; final total loss {last.get('total', float('nan')):.4f}")
    if result.skipped:
        print(f"skipped {len(result.skipped)} infeasible utterances", file=sys.stderr)
    print(f"checkpoint: {out / 'model.ckpt'}")
    return EXIT_OK


def cmd_eval(args) -> int:
    resolved = resolve(args)
    model, _ = load_checkpoint(args.checkpoint)
    splits, _ = read_splits(args.data)
    splits = {k: v for k, v in splits.items() if k != "train"}
    if args.split:
        missing = [s for s in args.split if s not in splits]
        if missing:
            raise DataError(f"unknown split {missing[0]!r}; available: {', '.join(splits)}")
        splits = {s: splits[s] for s in args.split}
    beam = args.beam if args.beam is not None else int(resolved["eval"]["beam"])
    resolved["eval"]["beam"] = beam
    out = Path(args.out)
    write_resolved(out, resolved, "eval")
    report = evaluate(model, splits, beam=beam, batch_size=int(resolved["eval"]["batch_size"]))
    (out / "eval_report.json").write_text(report.to_json(include_records=False) + "\n")
    with open(out / "records.jsonl", "w", encoding="utf-8") as fh:
        for rec in report.records:
            fh.write(json.dumps(rec.__dict__) + "\n")
    for name, ter in report.ter.items():
        print(f"TER {name}: {ter:.2f}%")
    if report.mer is not None:
        print(f"MER: {report.mer:.2f}%")
    print(f"LID accuracy: {report.lid_accuracy:.2f}%  degenerate routings: {report.degenerate_routing_count}")
    return EXIT_OK


def cost_rows(variant: str, languages: int, paper_dims: bool, base: ModelConfig, seconds: float) -> list[dict]:
    """Params and GFLOPs for the requested variant next to the reference rows."""
    def cfg_for(v: str) -> ModelConfig:
        if paper_dims:
            return paper_config(v, languages)
        shared = base.num_layers if v == "vallina" else base.num_shared
        per_lang = base.vocab_sizes[0]
        return replace(base, variant=v, num_shared=shared, vocab_sizes=[per_lang] * languages).validate()

    names = ["vallina", "lae", "multi_encoder"]
    if variant not in names:
        names.insert(1, variant)
    rows = []
    for v in names:
        c = cfg_for(v)
        rows.append({"model": v, "params": param_count(c), "gflops": count_flops(c, seconds) / 1e9})
    ref = rows[0]["gflops"]
    for r in rows:
        r["vs_vallina"] = r["gflops"] / ref
    return rows


def format_cost_table(rows: list[dict]) -> str:
    lines = [f"{'model':<14} {'params(M)':>10} {'GFLOPs':>9} {'x vallina':>9}"]
    for r in rows:
        lines.append(f"{r['model']:<14} {r['params'] / 1e6:>10.2f} {r['gflops']:>9.2f} {r['vs_vallina']:>9.3f}")
    return "\n".join(lines)


def cmd_analyze_cost(args) -> int:
    resolved = resolve(args)
    base = ModelConfig.from_dict(resolved["model"])
    variant = args.variant or base.variant
    languages = args.languages or base.num_languages
    if languages < 1:
        raise ConfigError("languages", "must be >= 1")
    rows = cost_rows(variant, languages, args.paper_dims, base, args.seconds)
    out = Path(args.out)
    resolved["analyze_cost"] = {
        "variant": variant,
        "languages": languages,
        "paper_dims": args.paper_dims,
        "seconds": args.seconds,
        "convention": FLOPS_CONVENTION,
    }
    write_resolved(out, resolved, "analyze-cost")
    (out / "cost.json").write_text(json.dumps(rows, indent=2) + "\n")
    print(format_cost_table(rows))
    print(f"GFLOPs for {args.seconds:g} s of input; {FLOPS_CONVENTION}")
    return EXIT_OK


def cmd_inspect_routing(args) -> int:
    resolved = resolve(args)
    model, _ = load_checkpoint(args.checkpoint)
    utts = read_corpus(args.corpus)
    if args.utterance is not None:
        picked = [u for u in utts if u.id == args.utterance]
        if not picked:
            raise DataError(f"utterance {args.utterance!r} not in {args.corpus}")
        utt = picked[0]
    else:
        if not 0 <= args.index < len(utts):
            raise DataError(f"index {args.index} out of range for {len(utts)} utterances")
        utt = utts[args.index]
    rows = routing_report(model, utt)
    out = Path(args.out)
    resolved["inspect_routing"] = {"checkpoint": args.checkpoint, "corpus": args.corpus, "utterance": utt.id}
    write_resolved(out, resolved, "inspect-routing")
    with open(out / "routing.jsonl", "w", encoding="utf-8") as fh:
        for r in rows:
            fh.write(json.dumps(r) + "\n")
    table = routing_table(rows)
    (out / "routing.txt").write_text(table + "\n")
    print(f"utterance {utt.id}  language {utt.language}  tokens {utt.tokens}")
    print(table)
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser


def _common(p: argparse.ArgumentParser, out_required: bool = True, out_default: str | None = None) -> None:
    p.add_argument("--config", help="JSON config file (sections corpus/model/train/eval, top-level seed)")
    p.add_argument(
        "--set",
        action="append",
        metavar="SECTION.KEY=VALUE",
        help="override one config value; repeatable; unknown keys are rejected",
    )
    p.add_argument("--seed", type=int, help="seed for every section (beats LRMOE_SEED and the config)")
    if out_required:
        p.add_argument("--out", required=True, help="output directory")
    else:
        p.add_argument("--out", default=out_default, help=f"output directory (default: {out_default})")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to standard error")


def build_parser() -> ArgParser:
    parser = ArgParser(prog="lrmoe", description="Language-routed mixture-of-experts CTC toolkit")
    sub = parser.add_subparsers(dest="command", metavar="COMMAND", parser_class=ArgParser)

    p = sub.add_parser("gen-corpus", help="generate a synthetic corpus")
    _common(p)
    p.set_defaults(func=cmd_gen_corpus)

    p = sub.add_parser("train", help="train a model on a generated corpus")
    _common(p)
    p.add_argument("--data", required=True, help="corpus directory written by gen-corpus")
    p.add_argument("--resume", help="checkpoint with optimizer state to continue from")
    p.add_argument("--pretrain", help="vallina checkpoint whose lower layers seed the shared block")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="decode evaluation splits and report error rates")
    _common(p)
    p.add_argument("--checkpoint", required=True, help="model checkpoint")
    p.add_argument("--data", required=True, help="corpus directory written by gen-corpus")
    p.add_argument("--split", action="append", help="restrict to this split; repeatable")
    p.add_argument("--beam", type=int, help="beam width; 1 means greedy (default from eval.beam)")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("analyze-cost", help="parameter and GFLOPs table")
    _common(p, out_required=False, out_default="lrmoe-cost")
    p.add_argument("--variant", choices=VARIANTS + ANALYTIC_VARIANTS, help="variant to report next to the references")
    p.add_argument("--languages", type=int, help="number of languages K")
    p.add_argument("--paper-dims", action="store_true", help="use the full-size dimensions instead of the config")
    p.add_argument("--seconds", type=float, default=30.0, help="input duration for GFLOPs (default 30)")
    p.set_defaults(func=cmd_analyze_cost)

    p = sub.add_parser("inspect-routing", help="per-frame ASR, LID and route dump for one utterance")
    _common(p, out_required=False, out_default="lrmoe-routing")
    p.add_argument("--checkpoint", required=True, help="flr_moe checkpoint")
    p.add_argument("--corpus", required=True, help="JSONL corpus file")
    sel = p.add_mutually_exclusive_group()
    sel.add_argument("--utterance", help="utterance id")
    sel.add_argument("--index", type=int, default=0, help="utterance index (default 0)")
    p.set_defaults(func=cmd_inspect_routing)
    return parser


DATA_ERRORS = (ConfigError, CorpusFormatError, CheckpointError, DataError, TransferError, OSError, ValueError, KeyError)


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_USAGE
    except SystemExit as exc:  # --help
        return int(exc.code or 0)
    if not getattr(args, "func", None):
        parser.print_usage(sys.stderr)
        print("lrmoe: a subcommand is required", file=sys.stderr)
        return EXIT_USAGE
    if args.verbose:
        logging.basicConfig(level=logging.INFO, format="%(message)s")
    try:
        return args.func(args)
    except (AssertionError, FloatingPointError) as exc:
        print(f"internal error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_INTERNAL
    except DATA_ERRORS as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except Exception as exc:  # anything else is a bug on our side
        print(f"internal error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_INTERNAL


if __name__ == "__main__":
    sys.exit(main())
