"""File formats and the synthetic EEG generator.

Recording file (little-endian)::

    b"NLM1" | u16 version | u16 n_channels | f64 sampling_rate | u64 n_samples
    | n_channels x (u8 length, ASCII name) | f32 payload, channel-major

Tensor container (checkpoints, token grids, attention exports)::

    b"NLMC" | u16 version | u64 header_length | UTF-8 JSON header | payloads

The JSON header holds ``meta`` (config echo, RNG state, step, ...) and one
entry per tensor with name, dtype, shape, offset and byte length.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .channels import UnknownChannelError, canonical
from .preprocess import RawRecording
from .templates import get_template

RECORDING_MAGIC = b"NLM1"
RECORDING_VERSION = 1
CONTAINER_MAGIC = b"NLMC"
CONTAINER_VERSION = 1

_HEADER = struct.Struct("<4sHHdQ")


class FormatError(ValueError):
    pass


# ------------------------------------------------------------- recordings


def write_recording(path, rec: RawRecording) -> None:
    names = [canonical(n) for n in rec.channel_ids]
    parts = [_HEADER.pack(RECORDING_MAGIC, RECORDING_VERSION, len(names), float(rec.sampling_rate), rec.n_samples)]
    for name in names:
        raw = name.encode("ascii")
        parts.append(struct.pack("<B", len(raw)) + raw)
    parts.append(np.ascontiguousarray(rec.samples, dtype="<f4").tobytes())
    Path(path).write_bytes(b"".join(parts))


def read_recording(path, line_freq: float = 50.0) -> RawRecording:
    buf = Path(path).read_bytes()
    if len(buf) < _HEADER.size:
        raise FormatError(f"{path}: truncated header")
    magic, version, n_ch, rate, n_samples = _HEADER.unpack_from(buf, 0)
    if magic != RECORDING_MAGIC:
        raise FormatError(f"{path}: bad magic {magic!r}")
    if version != RECORDING_VERSION:
        raise FormatError(f"{path}: unsupported version {version}")
    pos = _HEADER.size
    names = []
    for _ in range(n_ch):
        if pos >= len(buf):
            raise FormatError(f"{path}: truncated channel table")
        (length,) = struct.unpack_from("<B", buf, pos)
        pos += 1
        name = buf[pos:pos + length].decode("ascii")
        pos += length
        try:
            names.append(canonical(name))
        except UnknownChannelError:
            raise UnknownChannelError(f"{path}: unknown channel {name!r}") from None
    expected = n_ch * n_samples * 4
    if len(buf) - pos != expected:
        raise FormatError(f"{path}: payload has {len(buf) - pos} bytes, expected {expected}")
    samples = np.frombuffer(buf, dtype="<f4", count=n_ch * n_samples, offset=pos).reshape(n_ch, n_samples)
    return RawRecording(tuple(names), rate, samples.copy(), line_freq=line_freq)


# -------------------------------------------------------- tensor container


@dataclass
class Checkpoint:
    tensors: dict[str, np.ndarray]
    meta: dict = field(default_factory=dict)

    def section(self, prefix: str) -> dict[str, np.ndarray]:
        """Tensors under ``prefix/`` with the prefix stripped."""
        head = prefix.rstrip("/") + "/"
        return {k[len(head):]: v for k, v in self.tensors.items() if k.startswith(head)}


def _encode_header(header: dict) -> bytes:
    return json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")


def save_checkpoint(path, tensors: dict[str, np.ndarray], meta: dict | None = None) -> None:
    entries, payloads, offset = [], [], 0
    for name, arr in tensors.items():
        arr = np.asarray(arr)
        dtype = arr.dtype.newbyteorder("<")
        raw = np.ascontiguousarray(arr, dtype=dtype).tobytes()
        entries.append({"name": name, "dtype": dtype.str, "shape": list(arr.shape), "offset": offset, "nbytes": len(raw)})
        payloads.append(raw)
        offset += len(raw)
    header = _encode_header({"meta": meta or {}, "tensors": entries})
    blob = CONTAINER_MAGIC + struct.pack("<HQ", CONTAINER_VERSION, len(header)) + header + b"".join(payloads)
    Path(path).write_bytes(blob)


def load_checkpoint(path) -> Checkpoint:
    buf = Path(path).read_bytes()
    if buf[:4] != CONTAINER_MAGIC:
        raise FormatError(f"{path}: bad magic {buf[:4]!r}")
    version, hlen = struct.unpack_from("<HQ", buf, 4)
    if version != CONTAINER_VERSION:
        raise FormatError(f"{path}: unsupported version {version}")
    start = 4 + struct.calcsize("<HQ")
    header = json.loads(buf[start:start + hlen].decode("utf-8"))
    base = start + hlen
    tensors = {}
    for e in header["tensors"]:
        lo = base + e["offset"]
        if lo + e["nbytes"] > len(buf):
            raise FormatError(f"{path}: truncated tensor {e['name']}")
        arr = np.frombuffer(buf, dtype=np.dtype(e["dtype"]), count=int(np.prod(e["shape"], dtype=np.int64)), offset=lo)
        tensors[e["name"]] = arr.reshape(e["shape"]).copy()
    return Checkpoint(tensors, header["meta"])


def rng_state(rng: np.random.Generator) -> dict:
    return rng.bit_generator.state


def rng_from_state(state: dict) -> np.random.Generator:
    bg = getattr(np.random, state["bit_generator"])()
    bg.state = state
    return np.random.Generator(bg)


# ------------------------------------------------------------------- logs


def append_jsonl(path, record: dict) -> None:
    with open(path, "a", encoding="utf-8") as fh:
        fh.write(json.dumps(record, sort_keys=True) + "\n")


def read_jsonl(path) -> list[dict]:
    with open(path, encoding="utf-8") as fh:
        return [json.loads(line) for line in fh if line.strip()]


# -------------------------------------------------------------- manifests


@dataclass(frozen=True)
class InstructionRecord:
    recording: Path
    offset: int
    task: str
    label: int
    length: int | None = None  # samples; defaults to the task window


def read_instruction_manifest(path, check_files: bool = True) -> list[InstructionRecord]:
    """Parse a JSON-lines manifest; relative recording paths resolve against the manifest."""
    path = Path(path)
    root = path.parent
    records = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
                template = get_template(obj["task"])
                label = template.class_index(obj["label"])
                offset = int(obj.get("offset", 0))
            except (KeyError, ValueError, TypeError) as exc:
                raise ValueError(f"{path}:{lineno}: {exc}") from None
            rec_path = Path(obj["recording"])
            if not rec_path.is_absolute():
                rec_path = root / rec_path
            if check_files and not rec_path.exists():
                raise FileNotFoundError(f"{path}:{lineno}: missing recording {rec_path}")
            if offset < 0:
                raise ValueError(f"{path}:{lineno}: negative offset")
            length = obj.get("length")
            records.append(InstructionRecord(rec_path, offset, template.task, label, None if length is None else int(length)))
    return records


def write_instruction_manifest(path, records: list[InstructionRecord]) -> None:
    root = Path(path).parent
    with open(path, "w", encoding="utf-8") as fh:
        for r in records:
            rec = r.recording
            try:
                rec = rec.relative_to(root)
            except ValueError:
                pass
            obj = {"recording": str(rec), "offset": r.offset, "task": r.task, "label": r.label}
            if r.length is not None:
                obj["length"] = r.length
            fh.write(json.dumps(obj, sort_keys=True) + "\n")


# -------------------------------------------------------------- synthesis


@dataclass(frozen=True)
class SynthTaskSpec:
    """Class-conditional sinusoid mixtures plus white noise.

    ``signatures[k]`` lists ``(frequency_hz, amplitude_uv)`` components of
    class ``k``; every channel of a sample carries the class components with
    independent random phases.
    """

    task: str
    signatures: tuple[tuple[tuple[float, float], ...], ...]
    noise: float = 5.0
    channels: tuple[str, ...] = ("C3", "C4")
    sampling_rate: float = 200.0
    duration: float = 2.0
    n_per_class: int = 32
    seed: int = 0
    separable: bool = True

    @property
    def n_classes(self) -> int:
        return len(self.signatures)


def synth_generate(spec: SynthTaskSpec) -> list[tuple[RawRecording, int]]:
    """Labelled recordings, class-interleaved, deterministic per seed."""
    sigs = [tuple(sorted(s)) for s in spec.signatures]
    if spec.separable and len(set(sigs)) != len(sigs):
        raise ValueError(f"{spec.task}: class signatures overlap but separability was demanded")
    for s in sigs:
        for freq, _ in s:
            if not 0 < freq < spec.sampling_rate / 2:
                raise ValueError(f"{spec.task}: component {freq} Hz outside (0, Nyquist)")
    rng = np.random.default_rng(spec.seed)
    n = int(round(spec.duration * spec.sampling_rate))
    t = np.arange(n) / spec.sampling_rate
    c = len(spec.channels)
    out = []
    for _ in range(spec.n_per_class):
        for label, sig in enumerate(spec.signatures):
            x = np.zeros((c, n))
            for freq, amp in sig:
                phase = rng.uniform(0.0, 2 * np.pi, size=(c, 1))
                x += amp * np.sin(2 * np.pi * freq * t[None, :] + phase)
            x += spec.noise * rng.standard_normal((c, n))
            out.append((RawRecording(spec.channels, spec.sampling_rate, x), label))
    return out


def bandpower(x: np.ndarray, rate: float, freq: float, half_width: float = 1.0) -> np.ndarray:
    """Mean periodogram power in ``freq +/- half_width`` along the last axis."""
    spec = np.abs(np.fft.rfft(x, axis=-1)) ** 2
    f = np.fft.rfftfreq(x.shape[-1], 1.0 / rate)
    sel = (f >= freq - half_width) & (f <= freq + half_width)
    return spec[..., sel].mean(axis=-1)
