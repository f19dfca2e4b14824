"""Multi-channel autoregressive pre-training of the LM on EEG token grids.

Each EEG position (channel c, time t) is trained to predict the code of the
same channel at time t + 1; the stair mask lets it see every channel up to
and including time t.  Every optimiser step also takes a small text batch
through the plain causal-LM loss so the language side does not drift.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np

from . import nn
from . import tensor as T
from .channels import channel_ids
from .dataio import Checkpoint, load_checkpoint, rng_from_state, rng_state, save_checkpoint
from .lm import CausalLM, MergedVocab, SequenceBatch, TokenSequence, collate, eeg_times, text_sequence
from .tensor import Tensor
from .tokenizer import TokenGrid


class FrozenParameterError(AssertionError):
    pass


# ---------------------------------------------------------------- targets


def mcar_targets(z: np.ndarray, vocab: MergedVocab) -> np.ndarray:
    """Flat time-major targets: position (t, c) -> id of z[c, t + 1]; -1 on the last step."""
    z = np.asarray(z)
    if z.ndim != 2:
        raise ValueError(f"expected a C x T code grid, got shape {z.shape}")
    c, t = z.shape
    out = np.full((t, c), -1, dtype=np.int64)
    if t > 1:
        out[:-1] = vocab.code_to_id(z[:, 1:]).T
    return out.reshape(-1)


def eeg_sequence(grid: TokenGrid, vocab: MergedVocab, row_offset: int = 0, targets: bool = True) -> TokenSequence:
    """Time-major EEG positions referencing rows ``row_offset ...`` of the embedding table."""
    c, t = grid.codes.shape
    n = c * t
    tgt = mcar_targets(grid.codes, vocab) if targets else np.full(n, -1, dtype=np.int64)
    return TokenSequence(
        token_ids=np.full(n, -1, dtype=np.int64),
        eeg_rows=row_offset + np.arange(n),
        channels=np.tile(np.asarray(channel_ids(grid.channels)), t),
        times=eeg_times(c, t),
        targets=tgt,
        loss_mask=tgt >= 0,
    )


def flat_embeddings(grid: TokenGrid) -> np.ndarray:
    """C x T x D embeddings in the time-major order used by :func:`eeg_sequence`."""
    return grid.embeddings.transpose(1, 0, 2).reshape(-1, grid.embeddings.shape[-1])


def mcar_batch(grids: list[TokenGrid], vocab: MergedVocab, max_len: int = 1024) -> SequenceBatch:
    seqs, tables, offset = [], [], 0
    for g in grids:
        seqs.append(eeg_sequence(g, vocab, offset))
        tables.append(flat_embeddings(g))
        offset += g.codes.size
    return collate(seqs, np.concatenate(tables, axis=0), vocab.pad, max_len)


def text_batch(chunks: list[np.ndarray], vocab: MergedVocab, eeg_dim: int, max_len: int = 1024) -> SequenceBatch:
    return collate([text_sequence(c) for c in chunks], np.zeros((0, eeg_dim)), vocab.pad, max_len)


# ------------------------------------------------------------------ losses


def mcar_loss(logits: Tensor, targets: np.ndarray) -> Tensor:
    """Mean cross-entropy over positions that have a target (over the whole merged vocabulary)."""
    targets = np.asarray(targets)
    mask = targets >= 0
    if not mask.any():
        raise ValueError("no position has a next-time target (need at least two time steps)")
    return T.cross_entropy_masked(logits, np.where(mask, targets, 0), mask)


def lm_loss(model: CausalLM, batch: SequenceBatch) -> Tensor:
    return mcar_loss(model(batch), np.where(batch.loss_mask, batch.targets, -1))


def nll_sum(logits: np.ndarray, targets: np.ndarray) -> tuple[float, int, int]:
    """(summed NLL, number of scored positions, number predicted correctly) in float64."""
    mask = targets >= 0
    rows = logits[mask].astype(np.float64)
    tgt = targets[mask]
    top = rows.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(rows - top).sum(axis=-1)) + top[:, 0]
    nll = lse - rows[np.arange(len(tgt)), tgt]
    return float(nll.sum()), int(mask.sum()), int((rows.argmax(-1) == tgt).sum())


def evaluate(model: CausalLM, batches: list[SequenceBatch]) -> dict:
    if not batches:
        raise ValueError("empty evaluation set")
    total, count, correct = 0.0, 0, 0
    with T.no_grad():
        for b in batches:
            s, n, k = nll_sum(model(b).data, np.where(b.loss_mask, b.targets, -1))
            total, count, correct = total + s, count + n, correct + k
    if count == 0:
        raise ValueError("evaluation set has no scored positions")
    return {"nll": total / count, "perplexity": math.exp(total / count), "accuracy": correct / count}


def validation_perplexity(model: CausalLM, batches: list[SequenceBatch]) -> float:
    return evaluate(model, batches)["perplexity"]


# ----------------------------------------------------------------- trainer


@dataclass
class LMTrainConfig:
    steps: int = 2000
    lr_peak: float = 3e-3
    lr_min: float = 3e-4
    warmup_frac: float = 0.1
    betas: tuple[float, float] = (0.9, 0.95)
    weight_decay: float = 0.1
    grad_clip: float = 1.0
    eeg_batch: int = 15
    text_batch: int = 1
    text_len: int = 64
    eval_every: int = 100

    @property
    def warmup(self) -> int:
        return int(round(self.warmup_frac * self.steps))


@dataclass
class TrainState:
    step: int
    opt: nn.AdamW
    rng: np.random.Generator
    history: list[dict] = field(default_factory=list)


class LMTrainer:
    """AdamW + cosine schedule + clipping around a :class:`CausalLM`.

    ``frozen`` lists parameters that must never receive a gradient (the
    tokenizer encoder); a nonzero gradient there raises.
    """

    def __init__(self, model: CausalLM, cfg: LMTrainConfig, seed: int = 0, frozen: list[Tensor] | None = None):
        self.model = model
        self.cfg = cfg
        self.frozen = list(frozen or [])
        self.state = TrainState(
            0,
            nn.AdamW(model.parameters(), betas=cfg.betas, weight_decay=cfg.weight_decay),
            np.random.default_rng(seed),
        )

    @property
    def rng(self) -> np.random.Generator:
        return self.state.rng

    def lr(self) -> float:
        c = self.cfg
        return nn.cosine_lr(self.state.step, c.steps, c.warmup, c.lr_peak, c.lr_min)

    def update(self, losses: dict[str, Tensor]) -> dict:
        """Sum the named losses, back-propagate once and take one optimiser step."""
        opt = self.state.opt
        opt.zero_grad()
        for p in self.frozen:
            p.grad = None
        total = None
        for v in losses.values():
            total = v if total is None else total + v
        T.backward(total)
        for p in self.frozen:
            if p.grad is not None and np.any(p.grad):
                raise FrozenParameterError("gradient reached a frozen tokenizer parameter")
        grad_norm = nn.clip_grad_norm(opt.params, self.cfg.grad_clip)
        lr = self.lr()
        opt.step(lr)
        self.state.step += 1
        rep = {"step": self.state.step, "lr": lr, "grad_norm": grad_norm, "loss": float(total.data)}
        rep.update({k: float(v.data) for k, v in losses.items()})
        self.state.history.append(rep)
        return rep

    # -- persistence
    def save(self, path, meta: dict | None = None) -> None:
        tensors = {f"model/{k}": v for k, v in self.model.state_dict().items()}
        tensors.update({f"optim/{k}": v for k, v in self.state.opt.state_dict().items()})
        full = {
            "step": self.state.step,
            "rng": rng_state(self.state.rng),
            "history": self.state.history,
            "train": asdict(self.cfg),
            "lm": asdict(self.model.cfg),
            "vocab": self.model.vocab.to_meta(),
        }
        full.update(meta or {})
        save_checkpoint(path, tensors, full)

    def load(self, source) -> Checkpoint:
        ck = source if isinstance(source, Checkpoint) else load_checkpoint(source)
        if ck.meta.get("lm") != asdict(self.model.cfg):
            raise ValueError("checkpoint LM config does not match the model")
        self.model.load_state_dict(ck.section("model"))
        optim = ck.section("optim")
        if optim:
            self.state.opt.load_state_dict(optim)
        self.state.step = int(ck.meta.get("step", 0))
        if "rng" in ck.meta:
            self.state.rng = rng_from_state(ck.meta["rng"])
        self.state.history = list(ck.meta.get("history", []))
        return ck


def load_model(source, seed: int = 0) -> tuple[CausalLM, Checkpoint]:
    """Rebuild a :class:`CausalLM` from the config and weights stored in a checkpoint."""
    from .lm import LMConfig

    ck = source if isinstance(source, Checkpoint) else load_checkpoint(source)
    cfg = dict(ck.meta["lm"])
    weights = ck.section("model")
    # rebuild at the stored precision so a resumed run matches bit for bit
    dtype = next(iter(weights.values())).dtype if weights else T.default_dtype()
    with T.precision(dtype):
        model = CausalLM(LMConfig(**cfg), MergedVocab.from_meta(ck.meta["vocab"]), seed=seed)
    model.load_state_dict(weights)
    return model, ck


# ------------------------------------------------------------ pre-training


def pretrain_step(trainer: LMTrainer, eeg: SequenceBatch, text: SequenceBatch | None = None) -> dict:
    """One update on MCAR loss (+ text causal-LM loss, weighted 1:1)."""
    model = trainer.model
    losses = {"mcar_loss": mcar_loss(model(eeg), np.where(eeg.loss_mask, eeg.targets, -1))}
    if text is not None:
        losses["text_loss"] = lm_loss(model, text)
    return trainer.update(losses)


def text_step(trainer: LMTrainer, text: SequenceBatch) -> dict:
    return trainer.update({"text_loss": lm_loss(trainer.model, text)})


def sample(rng: np.random.Generator, pool: list, n: int) -> list:
    idx = rng.choice(len(pool), size=min(n, len(pool)), replace=False)
    return [pool[i] for i in np.sort(idx)]


def pretrain(
    trainer: LMTrainer,
    train: list[TokenGrid],
    val: list[TokenGrid],
    text_pool: list[np.ndarray] | None = None,
    log=None,
    until: int | None = None,
) -> list[dict]:
    """Run the remaining steps of ``trainer.cfg.steps`` (or stop early at step
    ``until`` without touching the schedule); returns the evaluation log."""
    cfg, model = trainer.cfg, trainer.model
    stop = cfg.steps if until is None else min(until, cfg.steps)
    vocab = model.vocab
    val_batches = [mcar_batch(val[i:i + 64], vocab, model.cfg.max_len) for i in range(0, len(val), 64)]
    evals = []
    while trainer.state.step < stop:
        eeg = mcar_batch(sample(trainer.rng, train, cfg.eeg_batch), vocab, model.cfg.max_len)
        text = None
        if text_pool and cfg.text_batch > 0:
            text = text_batch(sample(trainer.rng, text_pool, cfg.text_batch), vocab, model.cfg.eeg_dim)
        rep = pretrain_step(trainer, eeg, text)
        if rep["step"] % cfg.eval_every == 0 or rep["step"] == cfg.steps:
            ev = evaluate(model, val_batches)
            rep["val_perplexity"] = ev["perplexity"]
            rep["val_accuracy"] = ev["accuracy"]
            evals.append(rep)
        if log is not None:
            log(rep)
    return evals


def moving_average(values, window: int = 5) -> np.ndarray:
    v = np.asarray(values, dtype=np.float64)
    if len(v) < window:
        return v.copy()
    return np.convolve(v, np.ones(window) / window, mode="valid")


def cyclic_grids(
    n: int, channels: tuple[str, ...], steps: int, n_codes: int, seed: int = 0, dim: int = 64, table_seed: int = 0
) -> list[TokenGrid]:
    """Deterministic per-channel cyclic code streams with a fixed random embedding per code.

    Channel c advances by ``c + 1`` codes per step from a random start, so the
    next code is a function of the current one and the channel.  The code
    embedding table depends only on ``table_seed``.
    """
    table = np.random.default_rng(table_seed).standard_normal((n_codes, dim)) / math.sqrt(dim)
    rng = np.random.default_rng(seed)
    c = len(channels)
    stride = np.arange(1, c + 1)[:, None]
    out = []
    for _ in range(n):
        start = rng.integers(0, n_codes, size=(c, 1))
        codes = (start + stride * np.arange(steps)[None, :]) % n_codes
        out.append(TokenGrid(tuple(channels), codes, table[codes]))
    return out
