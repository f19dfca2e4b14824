"""Instruction tuning: prompt rendering, sequence assembly, answer-only loss
and constrained greedy prediction."""

from __future__ import annotations

from dataclasses import dataclass, field
from itertools import permutations

import numpy as np

from . import tensor as T
from .lm import CausalLM, MergedVocab, SequenceBatch, TokenSequence, collate
from .mcar import LMTrainer, eeg_sequence, flat_embeddings, lm_loss, mcar_loss, sample, text_batch
from .templates import LETTERS, InstructionTemplate
from .tensor import Tensor
from .tokenizer import TokenGrid

PARSE_FAILURE = -1


@dataclass(frozen=True)
class RenderedInstruction:
    task: str
    label: int
    prompt: str  # text after [SEP], up to and including "Answer:"
    answer: str  # text between the prompt and [END]
    order: tuple[int, ...]  # order[slot] = canonical class shown in that slot
    candidates: tuple[str, ...]  # answer string of each canonical class under this rendering


def option_orders(n: int) -> list[tuple[int, ...]]:
    return list(permutations(range(n)))


def render_instruction(
    template: InstructionTemplate, label, shuffle_seed: int | None = None, shuffle: bool = True
) -> RenderedInstruction:
    """Render the question for ``label``; options are permuted when ``shuffle`` and a seed are given."""
    label = template.class_index(label)
    n = template.n_classes
    order = tuple(range(n))
    parts = [f"Question: {template.question}"]
    if template.kind == "options":
        if shuffle and shuffle_seed is not None:
            orders = option_orders(n)
            order = orders[np.random.default_rng(shuffle_seed).integers(len(orders))]
        parts.append("Options: " + " ".join(f"({LETTERS[s]}) {template.option_text[c]}." for s, c in enumerate(order)))
        slot_of = {c: s for s, c in enumerate(order)}
        candidates = tuple(f" ({LETTERS[slot_of[c]]})" for c in range(n))
    else:
        candidates = tuple(" " + a for a in template.answers)
    parts.append("Answer:")
    return RenderedInstruction(template.task, label, " ".join(parts), candidates[label], order, candidates)


def canonical_class(rendered: RenderedInstruction, answer: str) -> int:
    """Invert the rendering: the canonical class whose answer string is ``answer``."""
    try:
        return rendered.candidates.index(answer)
    except ValueError:
        return PARSE_FAILURE


# --------------------------------------------------------------- assembly


def prompt_ids(rendered: RenderedInstruction, vocab: MergedVocab) -> list[int]:
    return [vocab.sep] + vocab.encode_text(" " + rendered.prompt)


def assemble_sequence(
    grid: TokenGrid,
    rendered: RenderedInstruction,
    vocab: MergedVocab,
    row_offset: int = 0,
    answer: str | None = None,
    max_len: int = 1024,
) -> TokenSequence:
    """[EEG][SEP] question [answer][END]; the loss covers the answer and [END].

    Pass ``answer=""`` to get the bare prompt (for decoding).
    """
    if answer is None:
        answer = rendered.answer
        if not answer:
            raise ValueError("empty answer")
    eeg = eeg_sequence(grid, vocab, row_offset, targets=False)
    text = prompt_ids(rendered, vocab)
    n_prompt = len(text)
    if answer:
        text = text + vocab.encode_text(answer) + [vocab.end]
    n_eeg = len(eeg)
    if n_eeg + len(text) > max_len:
        raise ValueError(f"sequence of {n_eeg + len(text)} positions exceeds max length {max_len}")
    text = np.asarray(text, dtype=np.int64)
    m = len(text)
    t0 = int(eeg.times.max()) + 1 if n_eeg else 0
    tgt = np.full(m, -1, dtype=np.int64)
    tgt[:-1] = text[1:]
    loss = np.zeros(m, dtype=bool)
    # position i predicts text[i + 1]; score predictions of answer tokens and [END]
    loss[n_prompt - 1:m - 1] = m > n_prompt
    return TokenSequence(
        token_ids=np.r_[eeg.token_ids, text],
        eeg_rows=np.r_[eeg.eeg_rows, np.full(m, -1, dtype=np.int64)],
        channels=np.r_[eeg.channels, np.full(m, -1, dtype=np.int64)],
        times=np.r_[eeg.times, t0 + np.arange(m)],
        targets=np.r_[np.full(n_eeg, -1, dtype=np.int64), np.where(loss, tgt, -1)],
        loss_mask=np.r_[np.zeros(n_eeg, dtype=bool), loss],
    )


def instruction_batch(
    items: list[tuple[TokenGrid, RenderedInstruction]],
    vocab: MergedVocab,
    answers: list[str] | None = None,
    max_len: int = 1024,
) -> SequenceBatch:
    seqs, tables, offset = [], [], 0
    for i, (grid, rendered) in enumerate(items):
        ans = None if answers is None else answers[i]
        seqs.append(assemble_sequence(grid, rendered, vocab, offset, ans, max_len))
        tables.append(flat_embeddings(grid))
        offset += grid.codes.size
    return collate(seqs, np.concatenate(tables, axis=0), vocab.pad, max_len)


def answer_loss(logits: Tensor, batch: SequenceBatch) -> Tensor:
    """Mean cross-entropy over answer and [END] predictions only."""
    if not batch.loss_mask.any():
        raise ValueError("batch has no answer positions")
    return mcar_loss(logits, np.where(batch.loss_mask, batch.targets, -1))


# ------------------------------------------------------------- prediction


@dataclass
class Prediction:
    label: int
    scores: np.ndarray  # per canonical class, sums to 1
    answer: str


def _log_softmax(x: np.ndarray) -> np.ndarray:
    x = x.astype(np.float64)
    top = x.max(axis=-1, keepdims=True)
    return x - top - np.log(np.exp(x - top).sum(axis=-1, keepdims=True))


def predict_answers(
    model: CausalLM,
    items: list[tuple[TokenGrid, RenderedInstruction]],
    batch_size: int = 32,
) -> list[Prediction]:
    """Greedy decoding restricted to the candidate answers.

    Candidates form a trie over token ids (each ending in [END]).  At every
    branching node the next token is the argmax among the branches; a class's
    score is the product of the branch probabilities renormalised over the
    branches along its path, so scores sum to 1.  All candidates are scored
    teacher-forced in one pass, which gives the same logits at every shared
    prefix as incremental decoding.
    """
    vocab = model.vocab
    flat = [(grid, rendered, cand) for grid, rendered in items for cand in rendered.candidates]
    logp = [None] * len(flat)
    with T.no_grad():
        for lo in range(0, len(flat), batch_size):
            chunk = flat[lo:lo + batch_size]
            batch = instruction_batch([(g, r) for g, r, _ in chunk], vocab, [a for _, _, a in chunk], model.cfg.max_len)
            lp = _log_softmax(model(batch).data)
            for j in range(len(chunk)):
                pos = np.flatnonzero(batch.loss_mask[j])
                logp[lo + j] = (lp[j, pos], batch.targets[j, pos])
    out = []
    k = 0
    for _, rendered in items:
        n = len(rendered.candidates)
        paths = [logp[k + c] for c in range(n)]
        k += n
        out.append(_walk_trie(paths, rendered))
    return out


def _walk_trie(paths, rendered: RenderedInstruction) -> Prediction:
    n = len(paths)
    scores = np.ones(n)
    # each class's score multiplies renormalised branch probabilities along its own path
    groups = [list(range(n))]
    depth = 0
    while groups:
        nxt = []
        for g in groups:
            live = [c for c in g if depth < len(paths[c][1])]
            if len(live) <= 1:
                continue
            toks = {}
            for c in live:
                toks.setdefault(int(paths[c][1][depth]), []).append(c)
            if len(toks) > 1:
                lp_row = paths[live[0]][0][depth]
                ids = np.array(sorted(toks))
                p = np.exp(lp_row[ids] - lp_row[ids].max())
                p /= p.sum()
                for t, pt in zip(ids, p):
                    for c in toks[int(t)]:
                        scores[c] *= pt
            nxt.extend(v for v in toks.values() if len(v) > 1)
        groups = nxt
        depth += 1
    # greedy path: at each branching node take the most probable branch
    alive = list(range(n))
    depth = 0
    while len(alive) > 1:
        toks = {}
        for c in alive:
            toks.setdefault(int(paths[c][1][depth]), []).append(c)
        if len(toks) > 1:
            row = paths[alive[0]][0][depth]
            best = max(toks, key=lambda t: (row[t], -t))
            alive = toks[best]
        depth += 1
    chosen = alive[0]
    return Prediction(chosen, scores / scores.sum(), rendered.candidates[chosen])


def greedy_decode(model: CausalLM, grid: TokenGrid, rendered: RenderedInstruction, max_new: int = 8) -> list[int]:
    """Unconstrained greedy continuation after the prompt, stopping at [END]."""
    vocab = model.vocab
    out: list[int] = []
    with T.no_grad():
        for _ in range(max_new):
            seq = assemble_sequence(grid, rendered, vocab, answer="")
            ids = np.r_[seq.token_ids, np.asarray(out, dtype=np.int64)]
            m = len(out)
            seq = TokenSequence(
                token_ids=ids,
                eeg_rows=np.r_[seq.eeg_rows, np.full(m, -1, dtype=np.int64)],
                channels=np.r_[seq.channels, np.full(m, -1, dtype=np.int64)],
                times=np.r_[seq.times, seq.times[-1] + 1 + np.arange(m)],
                targets=np.full(len(ids), -1, dtype=np.int64),
                loss_mask=np.zeros(len(ids), dtype=bool),
            )
            batch = collate([seq], flat_embeddings(grid), vocab.pad, model.cfg.max_len)
            nxt = int(np.argmax(model(batch).data[0, -1]))
            if nxt == vocab.end:
                break
            out.append(nxt)
    return out


def predict_unconstrained(model: CausalLM, grid: TokenGrid, rendered: RenderedInstruction) -> int:
    """Canonical class parsed from free greedy output, or ``PARSE_FAILURE``."""
    longest = max(len(c.encode("utf-8")) for c in rendered.candidates)
    text = model.vocab.text.decode(greedy_decode(model, grid, rendered, max_new=longest + 1))
    return canonical_class(rendered, text)


# ----------------------------------------------------------------- tuning


@dataclass(frozen=True)
class LabeledGrid:
    grid: TokenGrid
    task: str
    label: int


@dataclass
class InstructConfig:
    batch: int = 16
    shuffle_options: bool = True
    data_fraction: float = 1.0
    cap_ratio: float = 4.0  # no task gets more than this multiple of the smallest task's share
    extra: dict = field(default_factory=dict)


def task_weights(sizes: dict[str, int], cap_ratio: float) -> dict[str, float]:
    """Sampling weights proportional to task size, capped at ``cap_ratio`` x the smallest task."""
    if not sizes:
        raise ValueError("no tasks")
    lo = min(sizes.values())
    w = {t: min(n, cap_ratio * lo) for t, n in sizes.items()}
    total = sum(w.values())
    return {t: v / total for t, v in w.items()}


def subsample(data: list[LabeledGrid], fraction: float, seed: int = 0) -> list[LabeledGrid]:
    """Keep ``fraction`` of each task's examples (at least one), order preserved."""
    if not 0 < fraction <= 1:
        raise ValueError("data fraction must be in (0, 1]")
    rng = np.random.default_rng(seed)
    keep = []
    by_task: dict[str, list[int]] = {}
    for i, ex in enumerate(data):
        by_task.setdefault(ex.task, []).append(i)
    for task in sorted(by_task):
        idx = by_task[task]
        k = max(1, int(round(fraction * len(idx))))
        keep.extend(rng.choice(idx, size=k, replace=False).tolist())
    return [data[i] for i in sorted(keep)]


class MixedSampler:
    def __init__(self, data: list[LabeledGrid], cap_ratio: float):
        self.by_task: dict[str, list[LabeledGrid]] = {}
        for ex in data:
            self.by_task.setdefault(ex.task, []).append(ex)
        self.tasks = sorted(self.by_task)
        w = task_weights({t: len(v) for t, v in self.by_task.items()}, cap_ratio)
        self.p = np.array([w[t] for t in self.tasks])

    def draw(self, rng: np.random.Generator, n: int) -> list[LabeledGrid]:
        tasks = rng.choice(len(self.tasks), size=n, p=self.p)
        out = []
        for t in tasks:
            pool = self.by_task[self.tasks[t]]
            out.append(pool[rng.integers(len(pool))])
        return out


def render_examples(
    examples: list[LabeledGrid], templates: dict[str, InstructionTemplate], rng: np.random.Generator | None, shuffle: bool
) -> list[tuple[TokenGrid, RenderedInstruction]]:
    items = []
    for ex in examples:
        seed = None if rng is None or not shuffle else int(rng.integers(2**31))
        items.append((ex.grid, render_instruction(templates[ex.task], ex.label, seed, shuffle)))
    return items


def instruct_step(trainer: LMTrainer, batch: SequenceBatch, text: SequenceBatch | None = None) -> dict:
    model = trainer.model
    losses = {"answer_loss": answer_loss(model(batch), batch)}
    if text is not None:
        losses["text_loss"] = lm_loss(model, text)
    return trainer.update(losses)


def instruct(
    trainer: LMTrainer,
    data: list[LabeledGrid],
    templates: dict[str, InstructionTemplate],
    cfg: InstructConfig,
    text_pool: list[np.ndarray] | None = None,
    log=None,
) -> None:
    model = trainer.model
    sampler = MixedSampler(data, cfg.cap_ratio)
    while trainer.state.step < trainer.cfg.steps:
        examples = sampler.draw(trainer.rng, cfg.batch)
        items = render_examples(examples, templates, trainer.rng, cfg.shuffle_options)
        batch = instruction_batch(items, model.vocab, max_len=model.cfg.max_len)
        text = None
        if text_pool and trainer.cfg.text_batch > 0:
            text = text_batch(sample(trainer.rng, text_pool, trainer.cfg.text_batch), model.vocab, model.cfg.eeg_dim)
        rep = instruct_step(trainer, batch, text)
        if log is not None:
            log(rep)


def predict_dataset(
    model: CausalLM, data: list[LabeledGrid], templates: dict[str, InstructionTemplate]
) -> list[Prediction]:
    """Constrained predictions with options in canonical order."""
    items = render_examples(data, templates, None, shuffle=False)
    return predict_answers(model, items)
