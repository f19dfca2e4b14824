"""Command line entry point: ``eeglm <command> [options]``.

Every command resolves its configuration (defaults, then ``--config``, then
run-scoped flags), writes it to ``<out>/config.txt`` and writes structured
log lines to a fresh ``<out>/log.jsonl``. Failures print one ``error: ...`` line to
stderr and exit with status 1 (2 for usage errors).
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from . import pipeline
from .config import RunConfig, load_config
from .dataio import append_jsonl, read_recording, save_checkpoint, write_recording
from .instruct import instruction_batch, render_examples
from .lm import capture_attention
from .mcar import LMTrainer, load_model
from .metrics import write_report
from .preprocess import patchify, preprocess_recording, segment
from .templates import TEMPLATES
from .tokenizer import tokenize_samples

COMMANDS = ("synth", "preprocess", "train-tokenizer", "pretrain", "instruct", "eval", "tokenize")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _bool(text: str) -> bool:
    low = text.strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise argparse.ArgumentTypeError(f"not a boolean: {text!r}")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="eeglm", description="EEG tokenizer + language model pipeline")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def command(name, help_):
        p = sub.add_parser(name, help=help_)
        p.add_argument("--config", type=Path, help="key = value run configuration")
        p.add_argument("--seed", type=int)
        p.add_argument("--out", type=Path, required=True, help="output directory")
        return p

    command("synth", "write synthetic recordings and train/test manifests")

    p = command("preprocess", "filter, resample to 200 Hz and scale a recording")
    p.add_argument("recording", type=Path)
    p.add_argument("--line-freq", type=float, default=50.0)

    p = command("train-tokenizer", "train the base text LM and the aligned tokenizer")
    p.add_argument("--manifest", type=Path, required=True)
    p.add_argument("--reconstruct", choices=("temporal", "frequency", "both"))

    p = command("pretrain", "multi-channel autoregressive pre-training")
    p.add_argument("--manifest", type=Path, required=True)
    p.add_argument("--tokenizer", type=Path, required=True)
    p.add_argument("--lm", type=Path, required=True, help="starting LM checkpoint")
    p.add_argument("--resume", action="store_true", help="continue the optimiser state and step from --lm")

    p = command("instruct", "multi-task instruction tuning")
    p.add_argument("--manifest", type=Path, required=True)
    p.add_argument("--tokenizer", type=Path, required=True)
    p.add_argument("--lm", type=Path, required=True)
    p.add_argument("--data-fraction", type=float)
    p.add_argument("--shuffle-options", type=_bool)

    p = command("eval", "constrained-decoding evaluation with metric report")
    p.add_argument("--manifest", type=Path, required=True)
    p.add_argument("--tokenizer", type=Path, required=True)
    p.add_argument("--lm", type=Path, required=True)
    p.add_argument("--dump-attention", action="store_true", help="save per-layer attention of the first example")

    p = command("tokenize", "turn a recording into token grids")
    p.add_argument("recording", type=Path)
    p.add_argument("--tokenizer", type=Path, required=True)
    p.add_argument("--window-seconds", type=float, default=1.0)
    p.add_argument("--line-freq", type=float, default=50.0)
    return parser


def resolve_config(args) -> RunConfig:
    cfg = load_config(args.config) if args.config else RunConfig()
    flags = {
        "seed": args.seed,
        "reconstruct": getattr(args, "reconstruct", None),
        "data_fraction": getattr(args, "data_fraction", None),
        "shuffle_options": getattr(args, "shuffle_options", None),
    }
    return cfg.with_overrides(**{k: v for k, v in flags.items() if v is not None})


class _Log:
    def __init__(self, path: Path, stage: str):
        self.path, self.stage = path, stage

    def __call__(self, record: dict) -> None:
        append_jsonl(self.path, {"stage": self.stage, **_plain(record)})


def _plain(record: dict) -> dict:
    out = {}
    for k, v in record.items():
        if isinstance(v, np.generic):
            v = v.item()
        if isinstance(v, (int, float, str, bool)) or v is None:
            out[k] = v
    return out


def _grids(manifest: Path, tokenizer: Path):
    records, samples = pipeline.load_manifest(manifest)
    tok = pipeline.load_tokenizer(tokenizer)
    return records, tok, tokenize_samples(tok, samples)


# ------------------------------------------------------------------ commands


def cmd_synth(args, cfg, out):
    paths = pipeline.write_synth(out, cfg)
    return {k: str(v) for k, v in paths.items()}


def cmd_preprocess(args, cfg, out):
    raw = read_recording(args.recording, line_freq=args.line_freq)
    pre = preprocess_recording(raw)
    dest = out / args.recording.name
    if dest.resolve() == args.recording.resolve():
        raise ValueError("refusing to overwrite the input recording")
    write_recording(dest, pre)
    return {"recording": str(dest), "samples": pre.n_samples}


def cmd_train_tokenizer(args, cfg, out):
    log = _Log(out / "log.jsonl", "text-warmup")
    lm = pipeline.base_lm(cfg, log)
    _, samples = pipeline.load_manifest(args.manifest)
    tok = pipeline.train_tokenizer(samples, pipeline.text_table(lm), cfg,
                                   _Log(out / "log.jsonl", "tokenizer"))
    pipeline.save_tokenizer(out / "tokenizer.nlmc", tok)
    LMTrainer(lm, pipeline._train_cfg(cfg, "pre")).save(out / "base_lm.nlmc")
    return {"tokenizer": str(out / "tokenizer.nlmc"), "lm": str(out / "base_lm.nlmc")}


def cmd_pretrain(args, cfg, out):
    _, tok, grids = _grids(args.manifest, args.tokenizer)
    model, ck = load_model(args.lm, seed=cfg.seed)
    train, val = pipeline.split_grids(grids)
    trainer = LMTrainer(model, pipeline._train_cfg(cfg, "pre"), seed=cfg.seed, frozen=tok.encoder_parameters())
    if args.resume:
        trainer.load(ck)
    evals = pipeline.pretrain(trainer, train, val, pipeline.text_pool(cfg, seed_offset=1),
                              _Log(out / "log.jsonl", "pretrain"))
    for e in evals:
        append_jsonl(out / "evals.jsonl", _plain(e))
    trainer.save(out / "lm.nlmc")
    return {"lm": str(out / "lm.nlmc"), "val_perplexity": evals[-1]["val_perplexity"] if evals else None}


def cmd_instruct(args, cfg, out):
    records, tok, grids = _grids(args.manifest, args.tokenizer)
    model, _ = load_model(args.lm, seed=cfg.seed)
    trainer = pipeline.run_instruct(model, tok, pipeline.labeled(records, grids), cfg,
                                    _Log(out / "log.jsonl", "instruct"))
    trainer.save(out / "lm.nlmc")
    return {"lm": str(out / "lm.nlmc")}


def cmd_eval(args, cfg, out):
    records, _, grids = _grids(args.manifest, args.tokenizer)
    model, _ = load_model(args.lm, seed=cfg.seed)
    data = pipeline.labeled(records, grids)
    results = pipeline.run_eval(model, data)
    write_report(out / "report.json", {t: r.report for t, r in results.items()})
    summary = {"report": str(out / "report.json")}
    if args.dump_attention:
        items = render_examples(data[:1], TEMPLATES, None, shuffle=False)
        maps = capture_attention(model, instruction_batch(items, model.vocab, answers=[""]))
        save_checkpoint(out / "attention.nlmc", {f"layer{i}": m for i, m in enumerate(maps)},
                        {"task": data[0].task, "label": data[0].label})
        summary["attention"] = str(out / "attention.nlmc")
    return summary


def cmd_tokenize(args, cfg, out):
    tok = pipeline.load_tokenizer(args.tokenizer)
    pre = preprocess_recording(read_recording(args.recording, line_freq=args.line_freq))
    windows = segment(pre, args.window_seconds)
    grids = tokenize_samples(tok, [(patchify(w), pre.channel_ids) for w in windows])
    dest = out / (args.recording.stem + ".tokens.nlmc")
    save_checkpoint(
        dest,
        {"codes": np.stack([g.codes for g in grids]).astype(np.int64),
         "offsets": np.array([w.offset for w in windows], dtype=np.int64)},
        {"channels": list(pre.channel_ids), "codebook_size": tok.cfg.codebook_size,
         "window_seconds": args.window_seconds},
    )
    return {"tokens": str(dest), "windows": len(grids)}


HANDLERS = {
    "synth": cmd_synth,
    "preprocess": cmd_preprocess,
    "train-tokenizer": cmd_train_tokenizer,
    "pretrain": cmd_pretrain,
    "instruct": cmd_instruct,
    "eval": cmd_eval,
    "tokenize": cmd_tokenize,
}


def main(argv: list[str] | None = None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except UsageError as exc:
        print(f"error: usage: {exc}", file=sys.stderr)
        return 2
    try:
        cfg = resolve_config(args)
        out = args.out
        out.mkdir(parents=True, exist_ok=True)
        (out / "config.txt").write_text(cfg.dumps(), encoding="utf-8")
        for stale in ("log.jsonl", "evals.jsonl"):
            (out / stale).unlink(missing_ok=True)
        summary = HANDLERS[args.command](args, cfg, out)
    except Exception as exc:  # noqa: BLE001 - every failure becomes one line
        msg = " ".join(str(exc).split()) or "no detail"
        print(f"error: {type(exc).__name__}: {msg}", file=sys.stderr)
        return 1
    print(json.dumps({"command": args.command, **summary}, sort_keys=True))
    return 0


if __name__ == "__main__":
    sys.exit(main())
