"""Decoder-only causal LM over a merged text + EEG vocabulary.

EEG positions carry a patch embedding from the frozen tokenizer encoder plus a
spatial (electrode) embedding; every position also gets an entry of the
shared position table (EEG time index or text index).  Attention follows a
per-position "time": a query sees every non-padding key whose time is not
later than its own.  With EEG laid out time-major this is the stair-stepping
mask (all channels of the current and earlier steps); text positions get
distinct, increasing times after the EEG block, which makes text causal and
lets it see all EEG.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from . import nn
from . import tensor as T
from .channels import n_channels
from .tensor import Tensor

SPECIALS = ("[SEP]", "[END]", "[PAD]")


# ------------------------------------------------------------- vocabulary


@dataclass(frozen=True)
class TextVocab:
    """Byte-level text vocabulary; ``specials`` maps special names to ids inside it."""

    size: int = 256 + len(SPECIALS)
    specials: dict = field(default_factory=lambda: {name: 256 + i for i, name in enumerate(SPECIALS)})

    def encode(self, text: str) -> list[int]:
        return list(text.encode("utf-8"))

    def decode(self, ids) -> str:
        return bytes(i for i in ids if 0 <= i < 256).decode("utf-8", errors="replace")


@dataclass(frozen=True)
class MergedVocab:
    text: TextVocab
    n_codes: int
    specials: dict

    @property
    def text_size(self) -> int:
        return self.text.size

    @property
    def eeg_offset(self) -> int:
        return self.text.size

    @property
    def size(self) -> int:
        return self.text.size + self.n_codes + sum(1 for v in self.specials.values() if v >= self.text.size + self.n_codes)

    @property
    def sep(self) -> int:
        return self.specials["[SEP]"]

    @property
    def end(self) -> int:
        return self.specials["[END]"]

    @property
    def pad(self) -> int:
        return self.specials["[PAD]"]

    def code_to_id(self, code):
        code = np.asarray(code)
        if code.size and (code.min() < 0 or code.max() >= self.n_codes):
            raise IndexError(f"EEG code outside [0, {self.n_codes})")
        return code + self.eeg_offset

    def id_to_code(self, ids):
        ids = np.asarray(ids)
        code = ids - self.eeg_offset
        if ids.size and (code.min() < 0 or code.max() >= self.n_codes):
            raise IndexError("id is not an EEG code")
        return code

    def encode_text(self, text: str) -> list[int]:
        return self.text.encode(text)

    def to_meta(self) -> dict:
        return {"text_size": self.text.size, "n_codes": self.n_codes, "specials": dict(self.specials),
                "text_specials": dict(self.text.specials)}

    @classmethod
    def from_meta(cls, meta: dict) -> "MergedVocab":
        text = TextVocab(meta["text_size"], dict(meta["text_specials"]))
        return cls(text, meta["n_codes"], dict(meta["specials"]))


def build_merged_vocab(text_vocab: TextVocab, n_codes: int, capacity: int | None = None) -> MergedVocab:
    """Append ``n_codes`` EEG ids after the text ids.

    Special tokens already inside the text vocabulary keep their ids; missing
    ones are appended after the EEG block.
    """
    if n_codes <= 0:
        raise ValueError("need at least one EEG code")
    specials = dict(text_vocab.specials)
    nxt = text_vocab.size + n_codes
    for name in SPECIALS:
        if name not in specials:
            specials[name] = nxt
            nxt += 1
    vocab = MergedVocab(text_vocab, n_codes, specials)
    if capacity is not None and vocab.size > capacity:
        raise ValueError(f"merged vocabulary of {vocab.size} ids overflows an embedding table of {capacity}")
    return vocab


# ------------------------------------------------------------------ masks


def mask_from_times(times: np.ndarray, valid: np.ndarray) -> np.ndarray:
    """allowed[q, k] = time[k] <= time[q], restricted to non-padding q and k."""
    times = np.asarray(times)
    valid = np.asarray(valid, dtype=bool)
    allowed = times[..., None, :] <= times[..., :, None]
    return allowed & valid[..., None, :] & valid[..., :, None]


def eeg_times(n_channels_: int, n_steps: int) -> np.ndarray:
    return np.repeat(np.arange(n_steps), n_channels_)


def stair_step_mask(n_channels_: int, n_steps: int, pad_len: int = 0, max_len: int = 1024) -> np.ndarray:
    s = n_channels_ * n_steps + pad_len
    if s > max_len:
        raise ValueError(f"sequence of {s} positions exceeds max length {max_len}")
    times = np.r_[eeg_times(n_channels_, n_steps), np.zeros(pad_len, dtype=np.int64)]
    valid = np.r_[np.ones(n_channels_ * n_steps, dtype=bool), np.zeros(pad_len, dtype=bool)]
    return mask_from_times(times, valid)


def causal_mask(s: int) -> np.ndarray:
    if s < 1:
        raise ValueError("causal mask needs at least one position")
    return np.tril(np.ones((s, s), dtype=bool))


# --------------------------------------------------------------- sequences


@dataclass
class TokenSequence:
    """One flattened sequence. ``eeg_rows`` index an external EEG embedding table."""

    token_ids: np.ndarray  # text/special id, or -1 at EEG positions
    eeg_rows: np.ndarray  # -1 at text positions
    channels: np.ndarray  # registry id at EEG positions, -1 elsewhere
    times: np.ndarray  # position-table index and mask time
    targets: np.ndarray  # next-token target id, -1 for none
    loss_mask: np.ndarray

    def __len__(self):
        return len(self.token_ids)

    @property
    def is_eeg(self) -> np.ndarray:
        return self.eeg_rows >= 0


@dataclass
class SequenceBatch:
    token_ids: np.ndarray  # B x S
    eeg_rows: np.ndarray
    channels: np.ndarray
    times: np.ndarray
    valid: np.ndarray
    targets: np.ndarray
    loss_mask: np.ndarray
    eeg: np.ndarray  # n x D_enc EEG embedding table
    mask: np.ndarray = None  # B x S x S

    def __post_init__(self):
        if self.mask is None:
            self.mask = mask_from_times(self.times, self.valid)

    @property
    def is_eeg(self) -> np.ndarray:
        return self.eeg_rows >= 0


def collate(seqs: list[TokenSequence], eeg: np.ndarray, pad_id: int, max_len: int = 1024) -> SequenceBatch:
    """Right-pad sequences to a common length."""
    s = max(len(q) for q in seqs)
    if s > max_len:
        raise ValueError(f"sequence of {s} positions exceeds max length {max_len}")
    b = len(seqs)
    tok = np.full((b, s), pad_id, dtype=np.int64)
    rows = np.full((b, s), -1, dtype=np.int64)
    ch = np.full((b, s), -1, dtype=np.int64)
    times = np.zeros((b, s), dtype=np.int64)
    valid = np.zeros((b, s), dtype=bool)
    tgt = np.full((b, s), -1, dtype=np.int64)
    lm = np.zeros((b, s), dtype=bool)
    for i, q in enumerate(seqs):
        n = len(q)
        tok[i, :n] = np.where(q.eeg_rows >= 0, pad_id, q.token_ids)
        rows[i, :n] = q.eeg_rows
        ch[i, :n] = q.channels
        times[i, :n] = q.times
        valid[i, :n] = True
        tgt[i, :n] = q.targets
        lm[i, :n] = q.loss_mask
    return SequenceBatch(tok, rows, ch, times, valid, tgt, lm, np.asarray(eeg))


def text_sequence(ids, start_time: int = 0) -> TokenSequence:
    """Plain causal-LM sequence: every position predicts the next id."""
    ids = np.asarray(ids, dtype=np.int64)
    n = len(ids)
    tgt = np.r_[ids[1:], -1]
    return TokenSequence(
        token_ids=ids,
        eeg_rows=np.full(n, -1, dtype=np.int64),
        channels=np.full(n, -1, dtype=np.int64),
        times=start_time + np.arange(n),
        targets=tgt,
        loss_mask=tgt >= 0,
    )


# ------------------------------------------------------------------ model


@dataclass
class LMConfig:
    layers: int = 4
    dim: int = 64
    heads: int = 4
    mlp: int = 256
    max_len: int = 1024
    eeg_dim: int = 64
    tied: bool = False
    variant: str = "desk"

    def __post_init__(self):
        if self.dim % self.heads:
            raise ValueError(f"dim {self.dim} not divisible by heads {self.heads}")


# shape presets of the published B / L / XL models; not used at desk scale
PRESETS = {
    "desk": LMConfig(),
    "B": LMConfig(layers=12, dim=768, heads=12, mlp=3072, eeg_dim=768, variant="B"),
    "L": LMConfig(layers=24, dim=1024, heads=16, mlp=4096, eeg_dim=1024, variant="L"),
    "XL": LMConfig(layers=48, dim=1600, heads=25, mlp=6400, eeg_dim=1600, variant="XL"),
}


def preset(name: str, **overrides) -> LMConfig:
    if name not in PRESETS:
        raise KeyError(f"unknown LM preset {name!r}")
    return replace(PRESETS[name], **overrides)


class CausalLM(nn.Module):
    def __init__(self, cfg: LMConfig, vocab: MergedVocab, seed: int = 0):
        self.cfg = cfg
        self.vocab = vocab
        rng = np.random.default_rng(seed)
        self.tok_embed = nn.Embedding(vocab.size, cfg.dim, rng)
        self.pos_embed = nn.Embedding(cfg.max_len, cfg.dim, rng)
        self.space_embed = nn.Embedding(n_channels(), cfg.dim, rng)
        self.adapter = nn.Linear(cfg.eeg_dim, cfg.dim, rng) if cfg.eeg_dim != cfg.dim else None
        self.body = nn.Transformer(cfg.layers, cfg.dim, cfg.heads, cfg.mlp, rng)
        self.head = None if cfg.tied else nn.Linear(cfg.dim, vocab.size, rng, bias=False)

    def text_embeddings(self) -> np.ndarray:
        """Rows of the token table that belong to the text vocabulary."""
        return self.tok_embed.weight.data[: self.vocab.text_size]

    def embed(self, batch: SequenceBatch) -> Tensor:
        d = self.cfg.dim
        if batch.times.max(initial=0) >= self.cfg.max_len:
            raise ValueError("time index beyond the position table")
        is_eeg = batch.is_eeg
        is_text = ~is_eeg
        shape = batch.token_ids.shape + (d,)
        x = self.pos_embed(batch.times)
        tok = self.tok_embed(np.where(is_text, batch.token_ids, 0))
        x = x + tok * Tensor(np.broadcast_to(is_text[..., None], shape).astype(x.dtype))
        if is_eeg.any():
            if batch.eeg.shape[-1] != self.cfg.eeg_dim:
                raise ValueError(f"EEG embeddings of width {batch.eeg.shape[-1]}, expected {self.cfg.eeg_dim}")
            if (batch.channels[is_eeg] < 0).any():
                raise ValueError("EEG position without a channel id")
            table = Tensor(batch.eeg, dtype=x.dtype)
            if self.adapter is not None:
                table = self.adapter(table)
            w = Tensor(np.broadcast_to(is_eeg[..., None], shape).astype(x.dtype))
            eeg = T.embedding_lookup(table, np.where(is_eeg, batch.eeg_rows, 0))
            space = self.space_embed(np.where(is_eeg, batch.channels, 0))
            x = x + (eeg + space) * w
        return x

    def __call__(self, batch: SequenceBatch, capture: list | None = None) -> Tensor:
        x = self.embed(batch)
        x = self.body(x, batch.mask, capture)
        if self.head is None:
            return T.matmul(x, self.tok_embed.weight, transpose_b=True)
        return self.head(x)


def capture_attention(model: CausalLM, batch: SequenceBatch, max_elements: int = 50_000_000) -> list[np.ndarray]:
    """Per-layer attention maps (B x heads x S x S) from one forward pass."""
    b, s = batch.token_ids.shape
    need = model.cfg.layers * model.cfg.heads * b * s * s
    if need > max_elements:
        raise MemoryError(f"attention capture needs {need} values, cap is {max_elements}")
    maps: list[np.ndarray] = []
    with T.no_grad():
        model(batch, capture=maps)
    return maps
