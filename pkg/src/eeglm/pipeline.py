"""Stage functions shared by the CLI, the experiment scripts and the tests."""

from __future__ import annotations

from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from . import corpus
from . import tensor as T
from .config import RunConfig
from .dataio import (
    InstructionRecord,
    SynthTaskSpec,
    load_checkpoint,
    read_instruction_manifest,
    read_recording,
    save_checkpoint,
    synth_generate,
    write_instruction_manifest,
    write_recording,
)
from .instruct import InstructConfig, LabeledGrid, instruct, predict_dataset, subsample
from .lm import CausalLM, LMConfig, TextVocab, build_merged_vocab, preset
from .mcar import LMTrainConfig, LMTrainer, pretrain, text_batch, text_step
from .metrics import EvalRecord, MetricsReport, evaluate_records
from .preprocess import PatchGrid, patchify, preprocess_recording
from .templates import TEMPLATES, get_template
from .tokenizer import (
    NeuralTokenizer,
    TokenGrid,
    TokenizerConfig,
    TokenizerTrainConfig,
    TokenizerTrainer,
    make_batch,
    tokenize_samples,
)

# class signatures (Hz) of the synthetic stand-in tasks
SIGNATURES = {
    "SYN2": (6.0, 30.0),
    "SYN3": (6.0, 10.0, 40.0),
}

Sample = tuple[PatchGrid, tuple[str, ...]]


# ------------------------------------------------------------------ synth


def synth_spec(task: str, cfg: RunConfig, seed: int) -> SynthTaskSpec:
    template = get_template(task)
    sig = tuple(((f, cfg.synth_amplitude),) for f in SIGNATURES[task])
    return SynthTaskSpec(
        task,
        sig,
        noise=cfg.synth_noise,
        channels=cfg.channels,
        duration=float(template.window_seconds),
        n_per_class=cfg.synth_per_class,
        seed=seed,
    )


def write_synth(out: Path, cfg: RunConfig) -> dict[str, Path]:
    """Write recordings plus ``train.jsonl`` / ``test.jsonl`` manifests under ``out``."""
    rec_dir = out / "recordings"
    rec_dir.mkdir(parents=True, exist_ok=True)
    train, test = [], []
    for ti, task in enumerate(cfg.tasks):
        data = synth_generate(synth_spec(task, cfg, seed=cfg.seed * 1000 + ti))
        n_test = int(round(cfg.holdout_fraction * len(data)))
        # data is class-interleaved, so the trailing block stays balanced
        for i, (rec, label) in enumerate(data):
            path = rec_dir / f"{task.lower()}_{i:04d}.nlm"
            write_recording(path, rec)
            (test if i >= len(data) - n_test else train).append(InstructionRecord(path, 0, task, label))
    paths = {"train": out / "train.jsonl", "test": out / "test.jsonl"}
    write_instruction_manifest(paths["train"], train)
    write_instruction_manifest(paths["test"], test)
    return paths


# ------------------------------------------------------------ data access


def load_window(rec: InstructionRecord, cache: dict | None = None) -> Sample:
    """Preprocess the recording and cut the task window at ``offset`` (in 200 Hz samples)."""
    key = str(rec.recording)
    if cache is not None and key in cache:
        pre = cache[key]
    else:
        pre = preprocess_recording(read_recording(rec.recording))
        if cache is not None:
            cache[key] = pre
    template = get_template(rec.task)
    length = rec.length or int(template.window_seconds * pre.sampling_rate)
    if rec.offset + length > pre.n_samples:
        raise ValueError(f"{rec.recording}: window [{rec.offset}, {rec.offset + length}) beyond {pre.n_samples} samples")
    window = pre.samples[:, rec.offset:rec.offset + length]
    return patchify(window), pre.channel_ids


def load_manifest(path) -> tuple[list[InstructionRecord], list[Sample]]:
    records = read_instruction_manifest(path)
    cache: dict = {}
    return records, [load_window(r, cache) for r in records]


# -------------------------------------------------------------- tokenizer


def tokenizer_config(cfg: RunConfig) -> TokenizerConfig:
    return TokenizerConfig(
        dim=cfg.tok_dim,
        enc_layers=cfg.tok_layers,
        dec_layers=cfg.tok_layers,
        codebook_size=cfg.tok_codebook,
        code_dim=cfg.tok_code_dim,
        beta=cfg.tok_beta,
        reconstruct=cfg.reconstruct,
        align=cfg.align,
        dead_code_steps=cfg.tok_dead_code_steps,
    )


def lm_config(cfg: RunConfig) -> LMConfig:
    if cfg.lm_preset != "desk":
        return preset(cfg.lm_preset)
    return LMConfig(layers=cfg.lm_layers, dim=cfg.lm_dim, heads=cfg.lm_heads, mlp=cfg.lm_mlp, eeg_dim=cfg.tok_dim)


def train_tokenizer(
    samples: list[Sample], text_table: np.ndarray | None, cfg: RunConfig, log=None, **overrides
) -> NeuralTokenizer:
    tcfg = tokenizer_config(cfg)
    if text_table is not None:
        tcfg.out_scale = float(np.sqrt(np.mean(np.square(text_table))))
    for k, v in overrides.items():
        setattr(tcfg, k, v)
    model = NeuralTokenizer(tcfg, seed=cfg.seed)
    trainer = TokenizerTrainer(
        model,
        TokenizerTrainConfig(steps=cfg.tok_steps, lr_peak=cfg.tok_lr_peak, lr_min=cfg.tok_lr_min,
                             batch_size=cfg.tok_batch, text_batch=cfg.tok_text_batch),
    )
    rng = np.random.default_rng(cfg.seed + 1)
    full = len(samples) <= cfg.tok_batch
    batch = make_batch(samples, tcfg.max_len) if full else None
    for _ in range(cfg.tok_steps):
        if not full:
            idx = np.sort(rng.choice(len(samples), size=cfg.tok_batch, replace=False))
            batch = make_batch([samples[i] for i in idx], tcfg.max_len)
        rep = trainer.step(batch, text_table, rng)
        if log is not None:
            log({k: v for k, v in rep.items() if not isinstance(v, np.ndarray)})
    return model


def save_tokenizer(path, model: NeuralTokenizer, meta: dict | None = None) -> None:
    full = {"tokenizer": _jsonable(asdict(model.cfg))}
    full.update(meta or {})
    save_checkpoint(path, {f"tokenizer/{k}": v for k, v in model.state_dict().items()}, full)


def load_tokenizer(path) -> NeuralTokenizer:
    ck = load_checkpoint(path)
    raw = dict(ck.meta["tokenizer"])
    cfg = TokenizerConfig(**{k: tuple(v) if isinstance(v, list) else v for k, v in raw.items()})
    weights = ck.section("tokenizer")
    dtype = next(iter(weights.values())).dtype if weights else T.default_dtype()
    with T.precision(dtype):
        model = NeuralTokenizer(cfg)
    model.load_state_dict(weights)
    return model


def _jsonable(d: dict) -> dict:
    return {k: list(v) if isinstance(v, tuple) else v for k, v in d.items()}


# ---------------------------------------------------------------------- LM


def text_pool(cfg: RunConfig, n: int = 512, seed_offset: int = 0) -> list[np.ndarray]:
    return corpus.text_chunks(TextVocab().encode, n, cfg.text_len, seed=cfg.seed + seed_offset)


def base_lm(cfg: RunConfig, log=None) -> CausalLM:
    """Fresh LM over the merged vocabulary, warmed up on the built-in text corpus."""
    vocab = build_merged_vocab(TextVocab(), cfg.tok_codebook)
    model = CausalLM(lm_config(cfg), vocab, seed=cfg.seed)
    if cfg.text_warmup_steps > 0:
        trainer = LMTrainer(model, _train_cfg(cfg, "pre", cfg.text_warmup_steps), seed=cfg.seed)
        pool = text_pool(cfg)
        for _ in range(cfg.text_warmup_steps):
            idx = np.sort(trainer.rng.choice(len(pool), size=8, replace=False))
            rep = text_step(trainer, text_batch([pool[i] for i in idx], vocab, model.cfg.eeg_dim))
            if log is not None:
                log(rep)
    return model


def _train_cfg(cfg: RunConfig, stage: str, steps: int | None = None) -> LMTrainConfig:
    if stage == "pre":
        return LMTrainConfig(
            steps=steps or cfg.pre_steps, lr_peak=cfg.pre_lr_peak, lr_min=cfg.pre_lr_min,
            warmup_frac=cfg.pre_warmup_frac, eeg_batch=cfg.eeg_batch, text_batch=cfg.text_batch,
            text_len=cfg.text_len, eval_every=cfg.eval_every,
        )
    return LMTrainConfig(
        steps=steps or cfg.ins_steps, lr_peak=cfg.ins_lr_peak, lr_min=cfg.ins_lr_min,
        warmup_frac=cfg.ins_warmup_frac, text_batch=cfg.ins_text_batch, text_len=cfg.text_len,
    )


def split_grids(grids: list[TokenGrid], fraction: float = 0.1) -> tuple[list[TokenGrid], list[TokenGrid]]:
    n_val = max(1, int(round(fraction * len(grids))))
    return grids[:-n_val], grids[-n_val:]


def run_pretrain(
    model: CausalLM, tokenizer: NeuralTokenizer, grids: list[TokenGrid], cfg: RunConfig, log=None
) -> tuple[LMTrainer, list[dict]]:
    train, val = split_grids(grids)
    trainer = LMTrainer(model, _train_cfg(cfg, "pre"), seed=cfg.seed, frozen=tokenizer.encoder_parameters())
    evals = pretrain(trainer, train, val, text_pool(cfg, seed_offset=1), log)
    return trainer, evals


def labeled(records: list[InstructionRecord], grids: list[TokenGrid]) -> list[LabeledGrid]:
    return [LabeledGrid(g, r.task, r.label) for r, g in zip(records, grids)]


def run_instruct(
    model: CausalLM, tokenizer: NeuralTokenizer, data: list[LabeledGrid], cfg: RunConfig, log=None
) -> LMTrainer:
    trainer = LMTrainer(model, _train_cfg(cfg, "ins"), seed=cfg.seed, frozen=tokenizer.encoder_parameters())
    icfg = InstructConfig(batch=cfg.ins_batch, shuffle_options=cfg.shuffle_options,
                          data_fraction=cfg.data_fraction, cap_ratio=cfg.cap_ratio)
    data = subsample(data, cfg.data_fraction, seed=cfg.seed) if cfg.data_fraction < 1 else data
    instruct(trainer, data, TEMPLATES, icfg, text_pool(cfg, seed_offset=2), log)
    return trainer


@dataclass
class TaskEval:
    report: MetricsReport
    records: list[EvalRecord]


def run_eval(model: CausalLM, data: list[LabeledGrid]) -> dict[str, TaskEval]:
    preds = predict_dataset(model, data, TEMPLATES)
    out = {}
    for task in sorted({d.task for d in data}):
        recs = [
            EvalRecord(d.label, p.label, tuple(float(s) for s in p.scores))
            for d, p in zip(data, preds) if d.task == task
        ]
        out[task] = TaskEval(evaluate_records(recs, get_template(task).n_classes), recs)
    return out


def text_table(model: CausalLM) -> np.ndarray:
    return model.text_embeddings().astype(np.float64)

