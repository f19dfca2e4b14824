"""Text-aligned vector-quantised EEG tokenizer.

Patches go through a small temporal conv stack, get temporal and spatial
(electrode) embeddings, and a transformer mixes them. Each patch embedding is
matched to the nearest codebook row by cosine similarity; two decoders read
the normalised code embeddings back and reconstruct the raw patch and its
DFT magnitudes. A domain classifier behind a gradient reversal layer pushes
the encoder output towards the text embedding distribution.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import nn
from . import tensor as T
from .channels import channel_ids, n_channels
from .preprocess import PatchGrid
from .tensor import Tensor


@dataclass
class TokenizerConfig:
    patch_size: int = 200
    conv_in: tuple[int, ...] = (1, 16, 16)
    conv_out: tuple[int, ...] = (16, 16, 16)
    kernels: tuple[int, ...] = (15, 3, 3)
    strides: tuple[int, ...] = (8, 1, 1)
    paddings: tuple[int, ...] = (7, 1, 1)
    dim: int = 64
    heads: int = 4
    mlp: int = 128
    enc_layers: int = 2
    dec_layers: int = 2
    codebook_size: int = 256
    code_dim: int = 32
    max_len: int = 1024
    beta: float = 1.0
    reconstruct: str = "both"  # temporal | frequency | both
    align: bool = True
    dead_code_steps: int = 10  # 0 disables dead-code re-initialisation
    out_scale: float = 1.0  # fixed factor on the encoder output

    def __post_init__(self):
        if self.dim % self.heads:
            raise ValueError(f"dim {self.dim} not divisible by heads {self.heads}")
        if self.reconstruct not in ("temporal", "frequency", "both"):
            raise ValueError(f"reconstruct must be temporal|frequency|both, got {self.reconstruct!r}")
        if self.patch_size % 2:
            raise ValueError("patch size must be even")
        if not (len(self.conv_in) == len(self.conv_out) == len(self.kernels) == len(self.strides) == len(self.paddings)):
            raise ValueError("conv geometry lists differ in length")
        if self.conv_in[0] != 1 or any(a != b for a, b in zip(self.conv_in[1:], self.conv_out[:-1])):
            raise ValueError("conv channels do not chain")
        if self.feature_length < 1:
            raise ValueError("conv stack shrinks the patch to nothing")

    @property
    def feature_length(self) -> int:
        length = self.patch_size
        for k, s, p in zip(self.kernels, self.strides, self.paddings):
            length = T.conv_output_length(length, k, s, p)
        return length

    @property
    def n_freq(self) -> int:
        return self.patch_size // 2


# --------------------------------------------------------- spectral target


def dft_magnitude(patch: np.ndarray) -> np.ndarray:
    """One-sided DFT magnitudes for bins 1..P/2 (DC dropped), along the last axis."""
    patch = np.asarray(patch, dtype=np.float64)
    p = patch.shape[-1]
    if p % 2:
        raise ValueError(f"patch length {p} must be even")
    return np.abs(np.fft.rfft(patch, axis=-1))[..., 1:p // 2 + 1]


def zscore_magnitudes(f: np.ndarray, valid: np.ndarray | None = None) -> np.ndarray:
    """Z-score jointly over every patch and bin of one sample (std floored at 1e-8)."""
    f = np.asarray(f, dtype=np.float64)
    vals = f if valid is None else f[valid]
    if vals.size < 2:
        raise ValueError("need at least two magnitudes to z-score")
    mu = vals.mean()
    sd = max(vals.std(), 1e-8)
    out = (f - mu) / sd
    if valid is not None:
        out[~valid] = 0.0
    return out


# ------------------------------------------------------------------- batch


@dataclass
class TokenizerBatch:
    patches: np.ndarray  # B x M x P
    channels: np.ndarray  # B x M registry ids
    times: np.ndarray  # B x M patch index within the sample
    valid: np.ndarray  # B x M
    freq: np.ndarray  # B x M x P/2 z-scored magnitudes
    shape: list[tuple[int, int]] = field(default_factory=list)  # (C, N) per sample

    @property
    def attn_mask(self) -> np.ndarray:
        return self.valid[:, None, :] & self.valid[:, :, None]


def make_batch(samples: list[tuple[PatchGrid, tuple[str, ...]]], max_len: int | None = None) -> TokenizerBatch:
    """Flatten each sample's C x N patches time-major and pad to a common length."""
    lengths = [g.n_channels * g.n_patches for g, _ in samples]
    m = max(lengths)
    if max_len is not None and m > max_len:
        raise ValueError(f"sample with {m} patches exceeds max length {max_len}")
    p = samples[0][0].patch_size
    b = len(samples)
    patches = np.zeros((b, m, p))
    chans = np.zeros((b, m), dtype=np.int64)
    times = np.zeros((b, m), dtype=np.int64)
    valid = np.zeros((b, m), dtype=bool)
    freq = np.zeros((b, m, p // 2))
    shape = []
    for i, (grid, names) in enumerate(samples):
        if grid.patch_size != p:
            raise ValueError("patch size differs within the batch")
        c, n, _ = grid.patches.shape
        if len(names) != c:
            raise ValueError("channel names do not match the patch grid")
        ids = np.asarray(channel_ids(names))
        flat = grid.patches.transpose(1, 0, 2).reshape(c * n, p)
        patches[i, :c * n] = flat
        chans[i, :c * n] = np.tile(ids, n)
        times[i, :c * n] = np.repeat(np.arange(n), c)
        valid[i, :c * n] = True
        freq[i, :c * n] = zscore_magnitudes(dft_magnitude(flat))
        shape.append((c, n))
    return TokenizerBatch(patches, chans, times, valid, freq, shape)


# ------------------------------------------------------------------- model


def sphere_rows(rng: np.random.Generator, k: int, d: int) -> np.ndarray:
    v = rng.standard_normal((k, d))
    return v / np.linalg.norm(v, axis=1, keepdims=True)


class DomainClassifier(nn.Module):
    """Two-layer MLP emitting one logit for P(EEG)."""

    def __init__(self, dim: int, rng: np.random.Generator):
        self.fc = nn.Linear(dim, 2 * dim, rng)
        self.out = nn.Linear(2 * dim, 1, rng)

    def __call__(self, x: Tensor) -> Tensor:
        return self.out(T.gelu(self.fc(x)))


def domain_bce(logit: Tensor, is_eeg: np.ndarray) -> Tensor:
    """Two-sided binary cross-entropy of sigmoid(logit) against the domain labels.

    sigmoid(a) is the first entry of softmax([a, 0]), so the masked
    cross-entropy primitive computes the BCE exactly.
    """
    zeros = Tensor(np.zeros(logit.shape, dtype=logit.dtype))
    pair = T.concat([logit, zeros], axis=-1)
    targets = np.where(np.asarray(is_eeg, dtype=bool), 0, 1)
    return T.cross_entropy_masked(pair, targets, np.ones(targets.shape, dtype=bool))


class NeuralTokenizer(nn.Module):
    def __init__(self, cfg: TokenizerConfig, seed: int = 0):
        self.cfg = cfg
        rng = np.random.default_rng(seed)
        self.convs = []
        for cin, cout, k in zip(cfg.conv_in, cfg.conv_out, cfg.kernels):
            conv = nn.Module()
            bound = 1.0 / math.sqrt(cin * k)
            conv.weight = nn.param(rng.uniform(-bound, bound, size=(cout, cin, k)))
            conv.bias = nn.param(np.zeros(cout))
            self.convs.append(conv)
        feat = cfg.conv_out[-1] * cfg.feature_length
        self.patch_proj = nn.Linear(feat, cfg.dim, rng)
        self.time_embed = nn.Embedding(cfg.max_len, cfg.dim, rng)
        self.space_embed = nn.Embedding(n_channels(), cfg.dim, rng)
        self.encoder = nn.Transformer(cfg.enc_layers, cfg.dim, cfg.heads, cfg.mlp, rng)
        self.quant_head = nn.Linear(cfg.dim, cfg.code_dim, rng) if cfg.code_dim != cfg.dim else None
        self.codebook = nn.param(sphere_rows(rng, cfg.codebook_size, cfg.code_dim))
        self.dec_in = nn.Linear(cfg.code_dim, cfg.dim, rng)
        self.dec_time = nn.Embedding(cfg.max_len, cfg.dim, rng)
        self.dec_space = nn.Embedding(n_channels(), cfg.dim, rng)
        self.decoder = nn.Transformer(cfg.dec_layers, cfg.dim, cfg.heads, cfg.mlp, rng)
        self.head_t = nn.Linear(cfg.dim, cfg.patch_size, rng)
        self.head_f = nn.Linear(cfg.dim, cfg.n_freq, rng)
        self.classifier = DomainClassifier(cfg.dim, rng)
        self._last_used = np.zeros(cfg.codebook_size, dtype=np.int64)

    def encoder_parameters(self) -> list[Tensor]:
        """Everything feeding the patch embeddings h (frozen for the LM stages)."""
        mods = [*self.convs, self.patch_proj, self.time_embed, self.space_embed, self.encoder]
        return [p for m in mods for p in m.parameters()]

    # -- encoder
    def encode(self, batch: TokenizerBatch) -> Tensor:
        cfg = self.cfg
        b, m, p = batch.patches.shape
        if p != cfg.patch_size:
            raise ValueError(f"patch length {p} != configured {cfg.patch_size}")
        if m > cfg.max_len:
            raise ValueError(f"{m} patches exceed max length {cfg.max_len}")
        x = Tensor(batch.patches.reshape(b * m, 1, p), dtype=self.codebook.dtype)
        for conv, s, pad in zip(self.convs, cfg.strides, cfg.paddings):
            x = T.gelu(T.conv1d(x, conv.weight, conv.bias, stride=s, padding=pad))
        x = x.reshape(b, m, cfg.conv_out[-1] * cfg.feature_length)
        x = self.patch_proj(x) + self.time_embed(batch.times) + self.space_embed(batch.channels)
        h = self.encoder(x, batch.attn_mask)
        return h if cfg.out_scale == 1.0 else h * cfg.out_scale

    def project(self, h: Tensor) -> Tensor:
        return h if self.quant_head is None else self.quant_head(h)

    def quantize(self, h: Tensor) -> np.ndarray:
        return quantize(self.project(h).data, self.codebook.data)

    # -- decoder
    def decode_embeddings(self, codes: Tensor, batch: TokenizerBatch) -> tuple[Tensor, Tensor]:
        x = self.dec_in(codes) + self.dec_time(batch.times) + self.dec_space(batch.channels)
        x = self.decoder(x, batch.attn_mask)
        return self.head_t(x), self.head_f(x)

    def decode(self, z: np.ndarray, batch: TokenizerBatch) -> tuple[Tensor, Tensor]:
        z = np.asarray(z)
        if z.min() < 0 or z.max() >= self.cfg.codebook_size:
            raise IndexError("code index outside the codebook")
        codes = T.embedding_lookup(T.l2_normalize(self.codebook), z)
        return self.decode_embeddings(codes, batch)

    def tokenize(self, batch: TokenizerBatch) -> tuple[np.ndarray, np.ndarray]:
        """(h, z) without recording gradients; padding rows get z = -1."""
        with T.no_grad():
            h = self.encode(batch)
            z = self.quantize(h)
        z = np.where(batch.valid, z, -1)
        return h.data, z


@dataclass
class TokenGrid:
    """Codes and pre-quantisation embeddings of one sample, channel-major."""

    channels: tuple[str, ...]
    codes: np.ndarray  # C x N
    embeddings: np.ndarray  # C x N x D

    @property
    def shape(self) -> tuple[int, int]:
        return self.codes.shape


def tokenize_samples(
    model: NeuralTokenizer, samples: list[tuple[PatchGrid, tuple[str, ...]]], batch_size: int = 64
) -> list[TokenGrid]:
    out = []
    for lo in range(0, len(samples), batch_size):
        chunk = samples[lo:lo + batch_size]
        batch = make_batch(chunk, model.cfg.max_len)
        h, z = model.tokenize(batch)
        for i, (c, n) in enumerate(batch.shape):
            codes = z[i, :c * n].reshape(n, c).T.copy()
            emb = h[i, :c * n].reshape(n, c, -1).transpose(1, 0, 2).copy()
            out.append(TokenGrid(tuple(chunk[i][1]), codes, emb))
    return out


def quantize(h: np.ndarray, codebook: np.ndarray) -> np.ndarray:
    """Index of the code with the largest cosine similarity (lowest index on ties)."""
    h = np.asarray(h, dtype=np.float64)
    v = np.asarray(codebook, dtype=np.float64)
    hn = np.linalg.norm(h, axis=-1, keepdims=True)
    if np.any(hn == 0):
        raise ValueError("zero-norm embedding cannot be quantised")
    vn = np.linalg.norm(v, axis=-1, keepdims=True)
    if np.any(vn == 0):
        raise ValueError("zero-norm code in codebook")
    return np.argmax((h / hn) @ (v / vn).T, axis=-1)


def lambda_schedule(t: float, total: float) -> float:
    """Adversarial weight ramp 2 / (1 + exp(-10 t / T)) - 1, from 0 towards 1."""
    if total <= 0:
        raise ValueError("total steps must be positive")
    if not 0 <= t <= total:
        raise ValueError(f"step {t} outside [0, {total}]")
    return 2.0 / (1.0 + math.exp(-10.0 * t / total)) - 1.0


def _masked_mse(pred: Tensor, target: np.ndarray, valid: np.ndarray) -> Tensor:
    """Mean squared error over the elements of valid rows."""
    w = np.broadcast_to(valid[..., None], pred.shape).astype(pred.dtype)
    diff = pred - Tensor(np.asarray(target) * w, dtype=pred.dtype)
    diff = diff * Tensor(w)
    return T.sum_(diff * diff) * (1.0 / max(w.sum(), 1.0))


def gather_valid(h: Tensor, valid: np.ndarray) -> Tensor:
    """Rows of ``h`` (B x M x D) at valid positions, as an (n x D) tensor."""
    flat = h.reshape(-1, h.shape[-1])
    return T.embedding_lookup(flat, np.flatnonzero(valid.reshape(-1)))


def adversarial_loss(eeg: Tensor, text: np.ndarray, classifier: DomainClassifier, lam: float) -> Tensor:
    """Domain BCE with EEG embeddings behind a gradient reversal of strength ``lam``."""
    text = np.asarray(text)
    if eeg.shape[0] == 0 or text.shape[0] == 0:
        raise ValueError("adversarial batch needs both EEG and text embeddings")
    if text.shape[-1] != eeg.shape[-1]:
        raise ValueError(f"text width {text.shape[-1]} != EEG width {eeg.shape[-1]}")
    feats = T.concat([T.gradient_reverse(eeg, lam), Tensor(text, dtype=eeg.dtype)], axis=0)
    is_eeg = np.r_[np.ones(eeg.shape[0], dtype=bool), np.zeros(text.shape[0], dtype=bool)]
    return domain_bce(classifier(feats), is_eeg)


def tokenizer_loss(
    model: NeuralTokenizer,
    batch: TokenizerBatch,
    text: np.ndarray | None = None,
    lam: float = 0.0,
    pinned: dict | None = None,
) -> tuple[Tensor, dict]:
    """Reconstruction + codebook + commitment (+ domain BCE when ``text`` is given).

    The decoder reads ``l2(h) + sg(l2(v_z) - l2(h))`` so its gradient reaches the
    encoder straight through the quantiser while the codebook only moves via
    the codebook term.

    ``pinned`` takes the ``info`` of an earlier call and reuses its codes and
    stop-gradient constants. The loss is then a smooth function of the
    parameters whose exact gradient is the one autodiff reports, which is what
    a finite-difference check needs.
    """
    cfg = model.cfg
    h = model.encode(batch)
    hq = T.l2_normalize(model.project(h))
    if pinned is None:
        unit = model.codebook.data / np.linalg.norm(model.codebook.data, axis=1, keepdims=True)
        z = np.argmax(hq.data @ unit.T, axis=-1)
    else:
        z = pinned["codes"]
    vz = T.embedding_lookup(T.l2_normalize(model.codebook), z)
    sg_h, sg_v = (hq.data, vz.data) if pinned is None else (pinned["hq"], pinned["vz"])
    valid = batch.valid
    codebook_term = _masked_mse(vz, sg_h, valid)
    commit_term = _masked_mse(hq, sg_v, valid)
    st = hq + Tensor(sg_v - sg_h)
    o_t, o_f = model.decode_embeddings(st, batch)
    parts = {"codebook": codebook_term, "commitment": commit_term}
    loss = codebook_term + commit_term * cfg.beta
    if cfg.reconstruct in ("temporal", "both"):
        parts["temporal"] = _masked_mse(o_t, batch.patches, valid)
        loss = loss + parts["temporal"]
    if cfg.reconstruct in ("frequency", "both"):
        parts["frequency"] = _masked_mse(o_f, batch.freq, valid)
        loss = loss + parts["frequency"]
    if text is not None:
        parts["domain"] = adversarial_loss(gather_valid(h, valid), text, model.classifier, lam)
        loss = loss + parts["domain"]
    info = {k: float(v.data) for k, v in parts.items()}
    info["z"] = np.where(valid, z, -1)
    info["o_t"] = o_t.data
    info["o_f"] = o_f.data
    info["hq"] = hq.data
    info["codes"] = z
    info["vz"] = vz.data
    return loss, info


# ------------------------------------------------------------------- train


@dataclass
class TokenizerTrainConfig:
    steps: int = 500
    lr_peak: float = 1e-3
    lr_min: float = 5e-4
    warmup: int = 25
    betas: tuple[float, float] = (0.9, 0.999)
    weight_decay: float = 1e-4
    batch_size: int = 64
    text_batch: int = 64
    grad_clip: float | None = None


class TokenizerTrainer:
    def __init__(self, model: NeuralTokenizer, cfg: TokenizerTrainConfig):
        self.model = model
        self.cfg = cfg
        self.opt = nn.AdamW(model.parameters(), betas=cfg.betas, weight_decay=cfg.weight_decay)
        self.step_count = 0

    def lr(self) -> float:
        c = self.cfg
        return nn.cosine_lr(self.step_count, c.steps, c.warmup, c.lr_peak, c.lr_min)

    def step(self, batch: TokenizerBatch, text_table: np.ndarray | None, rng: np.random.Generator) -> dict:
        """One AdamW update on reconstruction + quantisation (+ adversarial) losses."""
        model, cfg = self.model, self.cfg
        lam = lambda_schedule(min(self.step_count, cfg.steps), cfg.steps)
        text = None
        if model.cfg.align:
            if text_table is None:
                raise ValueError("alignment enabled but no text embedding table given")
            if text_table.shape[1] != model.cfg.dim:
                raise ValueError(
                    f"tokenizer width {model.cfg.dim} must equal the LM embedding width {text_table.shape[1]}"
                )
            n_text = min(cfg.text_batch, text_table.shape[0])
            text = text_table[rng.choice(text_table.shape[0], size=n_text, replace=False)]
        self.opt.zero_grad()
        loss, info = tokenizer_loss(model, batch, text, lam)
        if not np.isfinite(loss.data):
            raise FloatingPointError(f"non-finite tokenizer loss at step {self.step_count}: {info}")
        T.backward(loss)
        grad_norm = nn.clip_grad_norm(self.opt.params, cfg.grad_clip)
        lr = self.lr()
        self.opt.step(lr)
        z = info["z"][batch.valid]
        used = np.unique(z)
        self._refresh_dead_codes(used, info["hq"][batch.valid], rng)
        self.step_count += 1
        report = {k: v for k, v in info.items() if isinstance(v, float)}
        report.update(
            step=self.step_count,
            loss=float(loss.data),
            lam=lam,
            lr=lr,
            grad_norm=grad_norm,
            utilization=len(used) / model.cfg.codebook_size,
            codes_used=int(len(used)),
        )
        return report

    def _refresh_dead_codes(self, used: np.ndarray, hq: np.ndarray, rng: np.random.Generator):
        model = self.model
        model._last_used[used] = self.step_count
        e = model.cfg.dead_code_steps
        if e <= 0:
            return
        dead = np.flatnonzero(self.step_count - model._last_used >= e)
        if dead.size == 0 or hq.shape[0] == 0:
            return
        pick = rng.choice(hq.shape[0], size=dead.size, replace=hq.shape[0] < dead.size)
        noise = 0.01 * rng.standard_normal((dead.size, hq.shape[1]))
        model.codebook.data[dead] = (hq[pick] + noise).astype(model.codebook.dtype)
        model._last_used[dead] = self.step_count
