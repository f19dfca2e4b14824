"""Layers, optimiser and schedules built on :mod:`eeglm.tensor`."""

from __future__ import annotations

import math
from typing import Iterator

import numpy as np

from . import tensor as T
from .tensor import Tensor


def param(array: np.ndarray, dtype=None) -> Tensor:
    return Tensor(np.asarray(array, dtype=dtype or T.default_dtype()), requires_grad=True)


class Module:
    """Container whose Tensor attributes (recursively) are its parameters."""

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for name, value in vars(self).items():
            if name.startswith("_"):
                continue
            full = f"{prefix}{name}"
            if isinstance(value, Tensor):
                yield full, value
            elif isinstance(value, Module):
                yield from value.named_parameters(full + ".")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{full}.{i}.")

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def zero_grad(self):
        for p in self.parameters():
            p.grad = None

    def requires_grad_(self, flag: bool):
        for p in self.parameters():
            p.requires_grad = flag
            if not flag:
                p.grad = None
        return self

    def astype(self, dtype):
        for p in self.parameters():
            p.data = p.data.astype(dtype)
            p.grad = None
        return self

    def state_dict(self) -> dict[str, np.ndarray]:
        return {name: p.data.copy() for name, p in self.named_parameters()}

    def load_state_dict(self, state: dict[str, np.ndarray]):
        own = dict(self.named_parameters())
        missing = sorted(set(own) - set(state))
        extra = sorted(set(state) - set(own))
        if missing or extra:
            raise KeyError(f"state mismatch: missing={missing[:5]} unexpected={extra[:5]}")
        for name, p in own.items():
            arr = np.asarray(state[name])
            if arr.shape != p.shape:
                raise ValueError(f"{name}: shape {arr.shape} != {p.shape}")
            p.data = arr.astype(p.dtype).copy()

    def num_parameters(self) -> int:
        return sum(p.data.size for p in self.parameters())


class Linear(Module):
    def __init__(self, n_in: int, n_out: int, rng: np.random.Generator, bias: bool = True, std: float = 0.02):
        self.weight = param(rng.normal(0.0, std, size=(n_in, n_out)))
        self.bias = param(np.zeros(n_out)) if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        y = T.matmul(x, self.weight)
        return y if self.bias is None else y + self.bias


class Embedding(Module):
    def __init__(self, n: int, dim: int, rng: np.random.Generator, std: float = 0.02):
        self.weight = param(rng.normal(0.0, std, size=(n, dim)))

    def __call__(self, ids) -> Tensor:
        return T.embedding_lookup(self.weight, ids)


class LayerNorm(Module):
    def __init__(self, dim: int):
        self.gamma = param(np.ones(dim))
        self.beta = param(np.zeros(dim))

    def __call__(self, x: Tensor) -> Tensor:
        return T.layer_norm(x, self.gamma, self.beta)


class SelfAttention(Module):
    def __init__(self, dim: int, heads: int, rng: np.random.Generator, out_std: float):
        if dim % heads:
            raise ValueError(f"width {dim} not divisible by {heads} heads")
        self.heads = heads
        self.qkv = Linear(dim, 3 * dim, rng)
        self.proj = Linear(dim, dim, rng, std=out_std)

    def __call__(self, x: Tensor, mask: np.ndarray, capture: list | None = None) -> Tensor:
        d = x.shape[-1]
        dh = d // self.heads
        qkv = self.qkv(x)
        scale = 1.0 / math.sqrt(dh)
        heads, maps = [], []
        for h in range(self.heads):
            q = qkv[..., h * dh:(h + 1) * dh]
            k = qkv[..., d + h * dh:d + (h + 1) * dh]
            v = qkv[..., 2 * d + h * dh:2 * d + (h + 1) * dh]
            att = T.masked_softmax(T.matmul(q, k, transpose_b=True) * scale, mask)
            if capture is not None:
                maps.append(att.data.copy())
            heads.append(T.matmul(att, v))
        if capture is not None:
            capture.append(np.stack(maps, axis=-3))
        out = heads[0] if len(heads) == 1 else T.concat(heads, axis=-1)
        return self.proj(out)


class MLP(Module):
    def __init__(self, dim: int, hidden: int, rng: np.random.Generator, out_std: float):
        self.fc = Linear(dim, hidden, rng)
        self.out = Linear(hidden, dim, rng, std=out_std)

    def __call__(self, x: Tensor) -> Tensor:
        return self.out(T.gelu(self.fc(x)))


class Block(Module):
    """Pre-norm transformer block."""

    def __init__(self, dim: int, heads: int, hidden: int, rng: np.random.Generator, n_layers: int):
        out_std = 0.02 / math.sqrt(2 * n_layers)
        self.ln1 = LayerNorm(dim)
        self.attn = SelfAttention(dim, heads, rng, out_std)
        self.ln2 = LayerNorm(dim)
        self.mlp = MLP(dim, hidden, rng, out_std)

    def __call__(self, x, mask, capture=None):
        x = x + self.attn(self.ln1(x), mask, capture)
        return x + self.mlp(self.ln2(x))


class Transformer(Module):
    def __init__(self, n_layers: int, dim: int, heads: int, hidden: int, rng: np.random.Generator):
        self.blocks = [Block(dim, heads, hidden, rng, n_layers) for _ in range(n_layers)]
        self.ln_f = LayerNorm(dim)

    def __call__(self, x, mask, capture=None):
        for block in self.blocks:
            x = block(x, mask, capture)
        return self.ln_f(x)


# -------------------------------------------------------------- optimiser


class AdamW:
    """Decoupled weight decay Adam. Decay applies to matrices only."""

    def __init__(self, params, betas=(0.9, 0.999), eps=1e-8, weight_decay=0.0):
        self.params = list(params)
        self.betas = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.t = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def step(self, lr: float):
        self.t += 1
        b1, b2 = self.betas
        c1 = 1.0 - b1**self.t
        c2 = 1.0 - b2**self.t
        for p, m, v in zip(self.params, self.m, self.v):
            if p.grad is None or not p.requires_grad:
                continue
            g = p.grad
            m *= b1
            m += (1 - b1) * g
            v *= b2
            v += (1 - b2) * g * g
            if self.weight_decay and p.ndim >= 2:
                p.data *= 1.0 - lr * self.weight_decay
            p.data -= (lr * (m / c1) / (np.sqrt(v / c2) + self.eps)).astype(p.dtype)

    def zero_grad(self):
        for p in self.params:
            p.grad = None

    def state_dict(self) -> dict[str, np.ndarray]:
        state = {"t": np.asarray(self.t, dtype=np.int64)}
        for i, (m, v) in enumerate(zip(self.m, self.v)):
            state[f"m.{i}"] = m.copy()
            state[f"v.{i}"] = v.copy()
        return state

    def load_state_dict(self, state: dict[str, np.ndarray]):
        self.t = int(state["t"])
        for i in range(len(self.params)):
            if state[f"m.{i}"].shape != self.m[i].shape:
                raise ValueError(f"optimizer slot {i} shape mismatch")
            self.m[i] = np.array(state[f"m.{i}"], dtype=self.m[i].dtype)
            self.v[i] = np.array(state[f"v.{i}"], dtype=self.v[i].dtype)


def clip_grad_norm(params, max_norm: float | None) -> float:
    grads = [p.grad for p in params if p.grad is not None]
    total = math.sqrt(sum(float((g.astype(np.float64) ** 2).sum()) for g in grads))
    if max_norm is not None and total > max_norm:
        scale = max_norm / (total + 1e-6)
        for p in params:
            if p.grad is not None:
                p.grad = (p.grad * scale).astype(p.dtype)
    return total


def cosine_lr(step: int, total: int, warmup: int, peak: float, minimum: float) -> float:
    """Linear warmup to ``peak`` then cosine decay to ``minimum``."""
    if warmup > 0 and step < warmup:
        return peak * (step + 1) / warmup
    if total <= warmup:
        return minimum
    progress = min(1.0, (step - warmup) / max(1, total - warmup))
    return minimum + 0.5 * (peak - minimum) * (1.0 + math.cos(math.pi * progress))
