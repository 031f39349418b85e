"""Command-line interface.

Subcommands: tokenize, train, eval, analyze, trace, gradcheck. Exit codes:
0 success, 1 usage error (bad flags, malformed config, unknown override),
2 runtime failure (missing files, non-finite loss, failed check).
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
import time
from dataclasses import dataclass, fields
from pathlib import Path

import torch

from . import analysis, gradcheck
from .data import Tokenizer, train_bpe
from .model import ModelConfig, build_model
from .router import RoutingRecord
from .training import (
    NonFiniteLossError,
    TrainConfig,
    config_hash,
    evaluate,
    load_checkpoint,
    train,
)

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_RUNTIME = 2

log = logging.getLogger("sra")


class UsageError(Exception):
    """Bad invocation or config; maps to exit code 1."""


class _Parser(argparse.ArgumentParser):
    def error(self, message: str) -> None:  # type: ignore[override]
        raise UsageError(f"{self.prog}: {message}")


@dataclass
class RunManifest:
    """Provenance stamp every command drops beside its outputs."""

    command: str
    out_dir: str
    config_hash: str | None = None
    config_path: str | None = None
    seed: int | None = None
    created_at: str = ""
    inputs: dict = dataclasses.field(default_factory=dict)

    def write(self, out_dir: str | Path) -> None:
        self.created_at = time.strftime("%Y-%m-%dT%H:%M:%S")
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / "run_manifest.json").write_text(
            json.dumps(dataclasses.asdict(self), indent=2), encoding="utf-8")


# ---------------------------------------------------------------------------
# config loading and overrides
# ---------------------------------------------------------------------------

_TOP_LEVEL_KEYS = ("corpus", "out", "tokenizer", "model", "train")


@dataclass
class RunConfig:
    corpus: str | None
    out: str | None
    tokenizer: str | None
    model: ModelConfig
    train: TrainConfig

    def hash(self) -> str:
        return config_hash(self.model, self.train)


def _parse_value(raw: str):
    try:
        return json.loads(raw)
    except json.JSONDecodeError:
        return raw


def _coerce(value, template):
    """Nudge JSON-parsed override values toward the field's existing type."""
    if isinstance(template, bool):
        if isinstance(value, bool):
            return value
        raise UsageError(f"expected true/false, got {value!r}")
    if isinstance(template, float) and isinstance(value, int):
        return float(value)
    if isinstance(template, tuple) and isinstance(value, list):
        return tuple(value)
    return value


def load_run_config(path: str | Path, overrides: list[str] | None = None,
                    variant: str | None = None, out: str | None = None) -> RunConfig:
    """Read a JSON run config and apply KEY=VAL overrides.

    Keys may be dotted (model.dim, train.alpha) or bare; a bare key must match a
    top-level entry or exactly one section field. Unknown keys are rejected
    before any work happens.
    """
    cfg_path = Path(path)
    if not cfg_path.is_file():
        raise FileNotFoundError(f"config file not found: {cfg_path}")
    try:
        payload = json.loads(cfg_path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise UsageError(f"config is not valid JSON: {exc}") from None
    if not isinstance(payload, dict):
        raise UsageError("config must be a JSON object")
    unknown = set(payload) - set(_TOP_LEVEL_KEYS)
    if unknown:
        raise UsageError(f"unknown config keys: {sorted(unknown)}")

    sections = {
        "model": dict(payload.get("model", {})),
        "train": dict(payload.get("train", {})),
    }
    top = {k: payload.get(k) for k in ("corpus", "out", "tokenizer")}
    model_fields = {f.name for f in fields(ModelConfig)}
    train_fields = {f.name for f in fields(TrainConfig)}

    for item in overrides or []:
        if "=" not in item:
            raise UsageError(f"override {item!r} is not KEY=VAL")
        key, _, raw = item.partition("=")
        value = _parse_value(raw)
        if "." in key:
            section, _, name = key.partition(".")
            if section not in sections or name not in (
                    model_fields if section == "model" else train_fields):
                raise UsageError(f"unknown override key {key!r}")
            sections[section][name] = value
        elif key in top:
            top[key] = value
        else:
            hits = [s for s, names in (("model", model_fields), ("train", train_fields))
                    if key in names]
            if not hits:
                raise UsageError(f"unknown override key {key!r}")
            if len(hits) > 1:
                raise UsageError(f"ambiguous override key {key!r}; qualify as "
                                 + " or ".join(f"{h}.{key}" for h in hits))
            sections[hits[0]][key] = value

    if variant is not None:
        sections["model"]["variant"] = variant
    if out is not None:
        top["out"] = out

    try:
        model_defaults = ModelConfig()
        train_defaults = TrainConfig()
        model_kwargs = {k: _coerce(v, getattr(model_defaults, k, None))
                        for k, v in sections["model"].items()}
        train_kwargs = {k: _coerce(v, getattr(train_defaults, k, None))
                        for k, v in sections["train"].items()}
        model_cfg = ModelConfig.from_dict(model_kwargs)
        train_cfg = TrainConfig.from_dict(train_kwargs)
    except (TypeError, ValueError) as exc:
        raise UsageError(f"invalid config: {exc}") from None
    return RunConfig(corpus=top["corpus"], out=top["out"], tokenizer=top["tokenizer"],
                     model=model_cfg, train=train_cfg)


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------

def cmd_tokenize(args: argparse.Namespace) -> int:
    if args.vocab_size <= 256:
        raise UsageError(f"--vocab-size must exceed the 256-byte alphabet, got {args.vocab_size}")
    corpus_path = Path(args.corpus)
    if not corpus_path.is_file():
        raise FileNotFoundError(f"corpus not found: {corpus_path}")
    tokenizer = train_bpe(corpus_path.read_bytes(), args.vocab_size)
    out = Path(args.out)
    tokenizer.save(out)
    RunManifest(command="tokenize", out_dir=str(out),
                inputs={"corpus": str(corpus_path.resolve()),
                        "vocab_size": args.vocab_size}).write(out)
    print(f"tokenizer: {tokenizer.vocab_size} tokens "
          f"({len(tokenizer.merges)} merges) -> {out}")
    return EXIT_OK


def cmd_train(args: argparse.Namespace) -> int:
    run_cfg = load_run_config(args.config, args.override, args.variant, args.out)
    if not run_cfg.corpus:
        raise UsageError("config must set 'corpus' (path to a UTF-8 text file)")
    if not run_cfg.out:
        raise UsageError("config must set 'out' (run directory), or pass --out")
    result = train(run_cfg.model, run_cfg.train, run_cfg.corpus, run_cfg.out,
                   tokenizer_dir=run_cfg.tokenizer, resume_from=args.resume)
    RunManifest(command="train", out_dir=str(result.out_dir), config_hash=run_cfg.hash(),
                config_path=str(Path(args.config).resolve()), seed=run_cfg.train.seed,
                inputs={"corpus": str(Path(run_cfg.corpus).resolve()),
                        "variant": run_cfg.model.variant,
                        "resumed_from": str(args.resume) if args.resume else None},
                ).write(result.out_dir)
    print(f"trained {run_cfg.model.variant} for {result.steps} steps; "
          f"final val ppl {result.final_val_perplexity:.3f}")
    print(f"checkpoint: {result.final_checkpoint}")
    return EXIT_OK


def _tokenizer_for_checkpoint(ckpt, flag_value: str | None) -> Tokenizer:
    tok_dir = flag_value or ckpt.manifest.get("tokenizer")
    if not tok_dir:
        raise UsageError("checkpoint manifest has no tokenizer path; pass --tokenizer DIR")
    tokenizer = Tokenizer.load(tok_dir)
    if tokenizer.vocab_size > ckpt.model_config.vocab_size:
        raise ValueError(f"tokenizer vocab ({tokenizer.vocab_size}) exceeds model vocab "
                         f"({ckpt.model_config.vocab_size}); wrong tokenizer for checkpoint")
    return tokenizer


def cmd_eval(args: argparse.Namespace) -> int:
    ckpt = load_checkpoint(args.checkpoint)
    tokenizer = _tokenizer_for_checkpoint(ckpt, args.tokenizer)
    corpus = args.corpus or ckpt.manifest.get("corpus")
    if not corpus:
        raise UsageError("checkpoint manifest has no corpus path; pass --corpus FILE")
    corpus_path = Path(corpus)
    if not corpus_path.is_file():
        raise FileNotFoundError(f"corpus not found: {corpus_path}")
    ids = tokenizer.encode(corpus_path.read_bytes())
    from .data import train_val_split
    train_ids, val_ids = train_val_split(ids, ckpt.train_config.val_fraction)
    split_ids = val_ids if args.split == "val" else train_ids
    result = evaluate(ckpt.model, split_ids, ckpt.train_config.batch_size,
                      ckpt.train_config.seq_len,
                      meta={"split": args.split,
                            "checkpoint": str(Path(args.checkpoint).resolve()),
                            "tokenizer": str(Path(args.tokenizer).resolve()) if args.tokenizer
                            else ckpt.manifest.get("tokenizer"),
                            "corpus": str(corpus_path.resolve())})
    out = Path(args.out) if args.out else Path(args.checkpoint) / f"eval_{args.split}"
    out.mkdir(parents=True, exist_ok=True)
    (out / "perplexity.json").write_text(json.dumps({
        "split": args.split, "perplexity": result.perplexity,
        "mean_loss": result.mean_loss, "n_tokens": result.n_tokens,
    }, indent=2), encoding="utf-8")
    result.records.save_json(out / "records.json")
    RunManifest(command="eval", out_dir=str(out),
                inputs={"checkpoint": str(Path(args.checkpoint).resolve()),
                        "split": args.split}).write(out)
    print(f"{args.split} perplexity: {result.perplexity:.4f} over {result.n_tokens} tokens")
    print(f"records: {out / 'records.json'}")
    return EXIT_OK


def cmd_analyze(args: argparse.Namespace) -> int:
    records_path = Path(args.records)
    if not records_path.is_file():
        raise FileNotFoundError(f"records file not found: {records_path}")
    record = RoutingRecord.load_json(records_path)
    out = Path(args.out)
    if args.report == "utilization":
        n_experts = int(record.meta.get("n_experts", 0))
        if n_experts < 1:
            raise ValueError("records carry no n_experts metadata")
        stats = analysis.utilization(record, n_experts)
        analysis.write_utilization_report(stats, out)
        print(analysis.format_utilization(stats))
    elif args.report == "specialization":
        tok_dir = args.tokenizer or record.meta.get("tokenizer")
        if not tok_dir:
            raise UsageError("records carry no tokenizer path; pass --tokenizer DIR")
        tokenizer = Tokenizer.load(tok_dir)
        tables = {layer: analysis.specialization_table(record, tokenizer, args.top_m, layer)
                  for layer in range(len(record.layers))}
        analysis.write_specialization_report(tables, out)
        print(analysis.format_specialization(tables[0], 0))
    elif args.report == "dispersion":
        ckpt_dir = args.checkpoint or record.meta.get("checkpoint")
        if not ckpt_dir:
            raise UsageError("records carry no checkpoint path; pass --checkpoint DIR")
        ckpt = load_checkpoint(ckpt_dir)
        anchor_sets = ckpt.model.anchor_sets()
        if not anchor_sets:
            raise ValueError(f"{ckpt.model_config.variant} checkpoint has no anchors")
        stats = [analysis.anchor_dispersion_stats(a) for a in anchor_sets]
        analysis.write_dispersion_report(stats, out)
        print(analysis.format_dispersion(stats))
    else:  # pragma: no cover - argparse choices guard this
        raise UsageError(f"unknown report {args.report!r}")
    RunManifest(command="analyze", out_dir=str(out),
                inputs={"records": str(records_path.resolve()),
                        "report": args.report}).write(out)
    return EXIT_OK


def cmd_trace(args: argparse.Namespace) -> int:
    ckpt = load_checkpoint(args.checkpoint)
    tokenizer = _tokenizer_for_checkpoint(ckpt, args.tokenizer)
    steps = analysis.routing_trace(ckpt.model, tokenizer, args.text, args.layer)
    print(analysis.format_trace(steps, args.layer))
    if args.out:
        analysis.write_trace_report(steps, args.layer, args.out)
        RunManifest(command="trace", out_dir=str(args.out),
                    inputs={"checkpoint": str(Path(args.checkpoint).resolve()),
                            "layer": args.layer, "text": args.text}).write(args.out)
    return EXIT_OK


def cmd_gradcheck(args: argparse.Namespace) -> int:
    names = sorted(gradcheck.COMPONENTS) if args.component == "all" else [args.component]
    all_passed = True
    for name in names:
        report = gradcheck.grad_check(name, tol=args.tol)
        print(report.format())
        all_passed &= report.passed
    return EXIT_OK if all_passed else EXIT_RUNTIME


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------

def build_parser() -> _Parser:
    parser = _Parser(prog="sra", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("tokenize", help="train a byte-level BPE tokenizer")
    p.add_argument("--corpus", required=True, help="UTF-8 text file")
    p.add_argument("--vocab-size", type=int, required=True)
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=cmd_tokenize)

    p = sub.add_parser("train", help="train a model from a JSON run config")
    p.add_argument("--config", required=True, help="JSON run config")
    p.add_argument("--variant", choices=("sra", "standard_moe", "dense"))
    p.add_argument("--override", action="append", default=[], metavar="KEY=VAL",
                   help="config override (dotted keys like train.alpha, repeatable)")
    p.add_argument("--out", help="run directory (overrides config 'out')")
    p.add_argument("--resume", help="checkpoint directory to resume from")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="perplexity + routing records for a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--split", choices=("val", "train"), default="val")
    p.add_argument("--corpus", help="corpus file (defaults to the training corpus)")
    p.add_argument("--tokenizer", help="tokenizer dir (defaults to the training tokenizer)")
    p.add_argument("--out", help="output directory (default: <checkpoint>/eval_<split>)")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("analyze", help="routing reports from saved records")
    p.add_argument("--records", required=True, help="records.json from `sra eval`")
    p.add_argument("--report", required=True,
                   choices=("utilization", "specialization", "dispersion"))
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--top-m", type=int, default=10, help="tokens per expert (specialization)")
    p.add_argument("--tokenizer", help="tokenizer dir (specialization)")
    p.add_argument("--checkpoint", help="checkpoint dir (dispersion)")
    p.set_defaults(func=cmd_analyze)

    p = sub.add_parser("trace", help="per-token routing table for a prompt")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--text", required=True)
    p.add_argument("--layer", type=int, default=0)
    p.add_argument("--tokenizer")
    p.add_argument("--out", help="also write trace.json/trace.txt here")
    p.set_defaults(func=cmd_trace)

    p = sub.add_parser("gradcheck", help="finite-difference gradient verification")
    p.add_argument("--component", default="all",
                   choices=("all", *sorted(gradcheck.COMPONENTS)))
    p.add_argument("--tol", type=float, default=None,
                   help="relative-error tolerance (default: per-component)")
    p.set_defaults(func=cmd_gradcheck)
    return parser


def main(argv: list[str] | None = None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(name)s: %(message)s")
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return args.func(args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except NonFiniteLossError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    except (FileNotFoundError, ValueError, RuntimeError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
