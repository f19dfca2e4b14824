"""Desk-scale reference experiments behind the behavioural acceptance checks.

Each function is self-contained and seeded, returns a plain dict of
measurements and never asserts; judging the numbers is left to the caller
(``tests/test_acceptance.py`` and ``scripts/run_reference.py``).
"""

from __future__ import annotations

import tempfile
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import nn
from . import pipeline
from . import tensor as T
from .config import RunConfig
from .dataio import SynthTaskSpec, bandpower, read_recording, synth_generate
from .lm import CausalLM, LMConfig, TextVocab, build_merged_vocab
from .mcar import LMTrainConfig, LMTrainer, cyclic_grids, moving_average, pretrain
from .preprocess import patchify, preprocess_recording, segment
from .tokenizer import (
    DomainClassifier,
    NeuralTokenizer,
    TokenizerConfig,
    TokenizerTrainConfig,
    TokenizerTrainer,
    domain_bce,
    make_batch,
    tokenize_samples,
    tokenizer_loss,
)

# ------------------------------------------------------------ MCAR on cycles


def mcar_cyclic(seed: int = 0, steps: int = 2000, n_codes: int = 256) -> dict:
    """4-layer desk LM on deterministic per-channel cyclic code streams."""
    t0 = time.perf_counter()
    vocab = build_merged_vocab(TextVocab(), n_codes)
    model = CausalLM(LMConfig(), vocab, seed=seed)
    channels = ("C3", "C4")
    train = cyclic_grids(512, channels, 8, n_codes, seed=seed)
    val = cyclic_grids(64, channels, 8, n_codes, seed=seed + 1)
    trainer = LMTrainer(model, LMTrainConfig(steps=steps), seed=seed)
    evals = pretrain(trainer, train, val)
    ppl = [e["val_perplexity"] for e in evals]
    ma = moving_average(ppl)
    return {
        "steps": [e["step"] for e in evals],
        "val_accuracy": [e["val_accuracy"] for e in evals],
        "val_perplexity": ppl,
        "moving_average": ma.tolist(),
        "ma_non_increasing": bool(np.all(np.diff(ma) <= 1e-6 * ma[:-1])),
        "final_accuracy": evals[-1]["val_accuracy"],
        "seconds": time.perf_counter() - t0,
    }


# ----------------------------------------------------------- tokenizer overfit


def tokenizer_overfit(seed: int = 0, steps: int = 500, n: int = 64) -> dict:
    """Train the tokenizer on one fixed batch of ``n`` synthetic samples."""
    t0 = time.perf_counter()
    spec = SynthTaskSpec("SYN3", (((6.0, 50.0),), ((10.0, 50.0),), ((40.0, 50.0),)), noise=2.0,
                         n_per_class=-(-n // 3), seed=seed + 1)
    data = synth_generate(spec)[:n]
    samples = [(patchify(segment(preprocess_recording(r), 2.0)[0]), r.channel_ids) for r, _ in data]
    batch = make_batch(samples)
    variance = float(batch.patches[batch.valid].var())
    model = NeuralTokenizer(TokenizerConfig(align=False), seed=seed)
    trainer = TokenizerTrainer(model, TokenizerTrainConfig(steps=steps))
    rng = np.random.default_rng(seed)
    first = None
    for _ in range(steps):
        rep = trainer.step(batch, None, rng)
        first = rep["temporal"] if first is None else first
    with T.no_grad():
        _, info = tokenizer_loss(model, batch)
    return {
        "n_samples": len(samples),
        "signal_variance": variance,
        "initial_ratio": first / variance,
        "temporal_mse": info["temporal"],
        "ratio": info["temporal"] / variance,
        "codes_used": int(len(np.unique(info["z"][batch.valid]))),
        "seconds": time.perf_counter() - t0,
    }


# --------------------------------------------------------------- shared data


@dataclass
class ReferenceData:
    train_records: list
    train_samples: list
    test_records: list
    test_samples: list
    oracle: dict[str, float]  # bandpower-oracle accuracy per task on the test split


def reference_data(cfg: RunConfig) -> ReferenceData:
    with tempfile.TemporaryDirectory() as tmp:
        paths = pipeline.write_synth(Path(tmp), cfg)
        rtr, s_tr = pipeline.load_manifest(paths["train"])
        rte, s_te = pipeline.load_manifest(paths["test"])
        oracle = _bandpower_oracle(rte)
    return ReferenceData(rtr, s_tr, rte, s_te, oracle)


def _bandpower_oracle(records) -> dict[str, float]:
    """Accuracy of picking the class whose signature frequency carries most power."""
    out = {}
    for task in sorted({r.task for r in records}):
        freqs = pipeline.SIGNATURES[task]
        hits = []
        for r in (r for r in records if r.task == task):
            rec = read_recording(r.recording)
            power = [bandpower(rec.samples, rec.sampling_rate, f).mean() for f in freqs]
            hits.append(int(np.argmax(power)) == r.label)
        out[task] = float(np.mean(hits))
    return out


# ----------------------------------------------------------- alignment probe


def domain_probe(eeg: np.ndarray, text: np.ndarray, seeds: int = 5, steps: int = 300, lr: float = 1e-2) -> float:
    """Held-out accuracy of a fresh EEG-vs-text classifier, averaged over splits.

    Classes are balanced by subsampling; each split trains on one half and
    scores the other.
    """
    accs = []
    for seed in range(seeds):
        rng = np.random.default_rng(seed)
        n = min(len(eeg), len(text))
        e = eeg[rng.permutation(len(eeg))[:n]]
        x = text[rng.permutation(len(text))[:n]]
        h = n // 2
        feats_tr = np.r_[e[:h], x[:h]]
        y_tr = np.r_[np.ones(h, bool), np.zeros(h, bool)]
        feats_te = np.r_[e[h:], x[h:]]
        y_te = np.r_[np.ones(n - h, bool), np.zeros(n - h, bool)]
        with T.precision(np.float64):
            clf = DomainClassifier(eeg.shape[1], np.random.default_rng(seed))
        opt = nn.AdamW(clf.parameters())
        inputs = T.Tensor(feats_tr, dtype=np.float64)
        for _ in range(steps):
            opt.zero_grad()
            T.backward(domain_bce(clf(inputs), y_tr))
            opt.step(lr)
        with T.no_grad():
            logit = clf(T.Tensor(feats_te, dtype=np.float64)).data.reshape(-1)
        accs.append(float(np.mean((logit > 0) == y_te)))
    return float(np.mean(accs))


def _valid_embeddings(grids) -> np.ndarray:
    return np.concatenate([g.embeddings.reshape(-1, g.embeddings.shape[-1]) for g in grids]).astype(np.float64)


# ------------------------------------------------------------ full pipeline


def reference_pipeline(cfg: RunConfig | None = None, log=None) -> dict:
    """Alignment probe plus instruction tuning with and without option shuffling.

    One base LM and one aligned tokenizer feed both tuning runs; an unaligned
    tokenizer trained from the same seed serves as the probe control.
    """
    cfg = cfg or RunConfig()
    say = log or (lambda _msg: None)
    times = {}
    t0 = time.perf_counter()
    data = reference_data(cfg)
    times["data"] = time.perf_counter() - t0

    t = time.perf_counter()
    base = pipeline.base_lm(cfg)
    text = pipeline.text_table(base)
    times["text_warmup"] = time.perf_counter() - t
    say(f"text warm-up {times['text_warmup']:.0f}s")

    probes = {}
    toks = {}
    for align in (True, False):
        t = time.perf_counter()
        tok = pipeline.train_tokenizer(data.train_samples, text, cfg.with_overrides(align=align))
        toks[align] = tok
        held_out = _valid_embeddings(tokenize_samples(tok, data.test_samples))
        probes[align] = domain_probe(held_out, text)
        times[f"tokenizer_align_{align}"] = time.perf_counter() - t
        say(f"tokenizer align={align}: probe {probes[align]:.3f} ({times[f'tokenizer_align_{align}']:.0f}s)")

    tok = toks[True]
    g_tr = tokenize_samples(tok, data.train_samples)
    g_te = tokenize_samples(tok, data.test_samples)
    t = time.perf_counter()
    _, evals = pipeline.run_pretrain(base, tok, g_tr, cfg)
    times["pretrain"] = time.perf_counter() - t
    say(f"pre-training {times['pretrain']:.0f}s, val perplexity {evals[-1]['val_perplexity']:.2f}")
    state = base.state_dict()

    tuned = {}
    for shuffle in (True, False):
        t = time.perf_counter()
        model = CausalLM(base.cfg, base.vocab, seed=cfg.seed)
        model.load_state_dict(state)
        pipeline.run_instruct(model, tok, pipeline.labeled(data.train_records, g_tr),
                              cfg.with_overrides(shuffle_options=shuffle))
        res = pipeline.run_eval(model, pipeline.labeled(data.test_records, g_te))
        tuned[shuffle] = {task: r.report.balanced_accuracy for task, r in res.items()}
        times[f"instruct_shuffle_{shuffle}"] = time.perf_counter() - t
        say(f"instruct shuffle={shuffle}: {tuned[shuffle]} ({times[f'instruct_shuffle_{shuffle}']:.0f}s)")

    times["total"] = time.perf_counter() - t0
    return {
        "bandpower_oracle": data.oracle,
        "probe_align_on": probes[True],
        "probe_align_off": probes[False],
        "pretrain_evals": [{k: e[k] for k in ("step", "val_perplexity", "val_accuracy")} for e in evals],
        "balanced_accuracy_shuffled": tuned[True],
        "balanced_accuracy_fixed": tuned[False],
        "seconds": times,
    }
