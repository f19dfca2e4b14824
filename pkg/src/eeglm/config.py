"""Flat ``key = value`` run configuration.

Blank lines and ``#`` comments are ignored; unknown keys are errors.  Every
command writes the resolved configuration next to its outputs.
"""

from __future__ import annotations

from dataclasses import dataclass, fields, replace
from pathlib import Path


@dataclass(frozen=True)
class RunConfig:
    seed: int = 0
    # synthetic data
    synth_tasks: str = "SYN2,SYN3"
    synth_per_class: int = 48
    synth_amplitude: float = 100.0
    synth_noise: float = 10.0
    synth_channels: str = "C3,C4"
    holdout_fraction: float = 0.25
    # tokenizer
    tok_dim: int = 64
    tok_layers: int = 2
    tok_codebook: int = 256
    tok_code_dim: int = 32
    tok_steps: int = 500
    tok_batch: int = 64
    tok_text_batch: int = 64
    tok_lr_peak: float = 1e-3
    tok_lr_min: float = 5e-4
    tok_beta: float = 1.0
    tok_dead_code_steps: int = 10
    reconstruct: str = "both"
    align: bool = True
    # language model
    lm_preset: str = "desk"
    lm_layers: int = 4
    lm_dim: int = 64
    lm_heads: int = 4
    lm_mlp: int = 256
    text_warmup_steps: int = 300
    text_len: int = 64
    # pre-training
    pre_steps: int = 800
    pre_lr_peak: float = 3e-3
    pre_lr_min: float = 3e-4
    pre_warmup_frac: float = 0.1
    eeg_batch: int = 15
    text_batch: int = 1
    eval_every: int = 100
    # instruction tuning
    ins_steps: int = 2000
    ins_lr_peak: float = 2e-3
    ins_lr_min: float = 2e-4
    ins_warmup_frac: float = 0.1
    ins_batch: int = 16
    ins_text_batch: int = 2
    shuffle_options: bool = True
    data_fraction: float = 1.0
    cap_ratio: float = 4.0

    def with_overrides(self, **kw) -> "RunConfig":
        known = {f.name for f in fields(self)}
        bad = sorted(set(kw) - known)
        if bad:
            raise KeyError(f"unknown config keys: {', '.join(bad)}")
        return replace(self, **{k: _coerce(self._field_type(k), v) for k, v in kw.items()})

    @classmethod
    def _field_type(cls, name: str) -> str:
        return {f.name: f.type for f in fields(cls)}[name]

    def dumps(self) -> str:
        return "".join(f"{f.name} = {_format(getattr(self, f.name))}\n" for f in fields(self))

    @property
    def tasks(self) -> tuple[str, ...]:
        return tuple(t.strip() for t in self.synth_tasks.split(",") if t.strip())

    @property
    def channels(self) -> tuple[str, ...]:
        return tuple(c.strip() for c in self.synth_channels.split(",") if c.strip())


def _format(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    return repr(v) if isinstance(v, float) else str(v)


def _coerce(kind: str, value):
    if not isinstance(value, str):
        return value
    if kind == "bool":
        low = value.strip().lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"not a boolean: {value!r}")
    if kind == "int":
        return int(value)
    if kind == "float":
        return float(value)
    return value.strip()


def parse_config(text: str, base: RunConfig | None = None) -> RunConfig:
    pairs = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"line {lineno}: expected key = value, got {raw!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        if key in pairs:
            raise ValueError(f"line {lineno}: duplicate key {key!r}")
        pairs[key] = value
    try:
        return (base or RunConfig()).with_overrides(**pairs)
    except ValueError as exc:
        raise ValueError(f"bad config value: {exc}") from None


def load_config(path) -> RunConfig:
    return parse_config(Path(path).read_text(encoding="utf-8"))
