"""EEG preprocessing: band-pass + notch filtering, resampling, scaling,
windowing and patchification."""

from __future__ import annotations

import warnings
from dataclasses import dataclass, replace
from fractions import Fraction

import numpy as np
from scipy import signal as sps

from .channels import channel_ids

TARGET_RATE = 200.0
BAND = (0.1, 75.0)
SCALE = 100.0
PATCH_SIZE = 200
NOTCH_Q = 30.0


@dataclass(frozen=True)
class RawRecording:
    channel_ids: tuple[str, ...]
    sampling_rate: float
    samples: np.ndarray  # C x T, microvolts (or scaled units after preprocessing)
    line_freq: float = 50.0

    def __post_init__(self):
        samples = np.asarray(self.samples)
        if samples.ndim != 2 or samples.shape[0] != len(self.channel_ids):
            raise ValueError(
                f"samples must be C x T with C={len(self.channel_ids)}, got {samples.shape}"
            )
        object.__setattr__(self, "channel_ids", tuple(self.channel_ids))
        object.__setattr__(self, "samples", samples)
        channel_ids(self.channel_ids)
        if self.sampling_rate <= 0:
            raise ValueError("sampling rate must be positive")
        if np.isnan(samples).any():
            raise ValueError("recording contains NaN samples")

    @property
    def n_samples(self) -> int:
        return self.samples.shape[1]

    @property
    def duration(self) -> float:
        return self.n_samples / self.sampling_rate


@dataclass(frozen=True)
class EEGSample:
    channel_ids: tuple[str, ...]
    window: np.ndarray  # C x L
    offset: int = 0


@dataclass(frozen=True)
class PatchGrid:
    patches: np.ndarray  # C x N x P

    @property
    def n_channels(self) -> int:
        return self.patches.shape[0]

    @property
    def n_patches(self) -> int:
        return self.patches.shape[1]

    @property
    def patch_size(self) -> int:
        return self.patches.shape[2]

    def flatten(self) -> np.ndarray:
        c, n, p = self.patches.shape
        return self.patches.reshape(c, n * p)


def _resample(x: np.ndarray, rate: float, target: float) -> np.ndarray:
    if rate == target:
        return x.copy()
    frac = Fraction(target / rate).limit_denominator(1000)
    return sps.resample_poly(x, frac.numerator, frac.denominator, axis=-1, window=("kaiser", 8.0))


def filter_and_resample(samples: np.ndarray, rate: float, line_freq: float | None) -> np.ndarray:
    """Zero-phase band-pass (0.1-75 Hz) + notch at ``line_freq``, then resample to 200 Hz."""
    x = np.asarray(samples, dtype=np.float64)
    nyq = rate / 2.0
    # the 0.1 Hz high-pass rings for many seconds; Gustafsson's initial
    # conditions keep its edge transient out of short recordings
    x = x - x.mean(axis=-1, keepdims=True)
    b, a = sps.butter(4, BAND[0], btype="highpass", fs=rate)
    x = sps.filtfilt(b, a, x, axis=-1, method="gust")
    # at rates <= 150 Hz the upper band edge is at or above Nyquist already
    if BAND[1] < nyq:
        x = sps.sosfiltfilt(sps.butter(8, BAND[1], btype="lowpass", fs=rate, output="sos"), x, axis=-1)
    if line_freq and line_freq < nyq:
        b, a = sps.iirnotch(line_freq, NOTCH_Q, fs=rate)
        x = sps.sosfiltfilt(sps.tf2sos(b, a), x, axis=-1)
    return _resample(x, rate, TARGET_RATE)


def preprocess_recording(raw: RawRecording, scale: bool = True) -> RawRecording:
    """Filter, notch, resample to 200 Hz and divide by 100."""
    if raw.sampling_rate < 150:
        raise ValueError(f"sampling rate {raw.sampling_rate} Hz < 150 Hz cannot carry the 75 Hz band")
    if raw.n_samples == 0:
        raise ValueError("empty recording")
    if raw.duration < 1.0:
        raise ValueError(f"recording shorter than 1 s ({raw.duration:.3f} s)")
    out = filter_and_resample(raw.samples, raw.sampling_rate, raw.line_freq)
    if scale:
        out = out / SCALE
    return replace(raw, sampling_rate=TARGET_RATE, samples=out)


def segment(rec: RawRecording, window_seconds: float, patch_size: int = PATCH_SIZE) -> list[EEGSample]:
    """Non-overlapping windows in temporal order; the trailing remainder is dropped."""
    length = int(round(window_seconds * rec.sampling_rate))
    if length <= 0 or length % patch_size:
        raise ValueError(f"window of {length} samples is not a positive multiple of {patch_size}")
    if length > rec.n_samples:
        raise ValueError(f"window {window_seconds} s longer than recording {rec.duration:.3f} s")
    out = []
    for k in range(rec.n_samples // length):
        window = rec.samples[:, k * length:(k + 1) * length]
        if np.abs(window).max(initial=0.0) > 2.0:
            warnings.warn("window values outside [-2, 2]; was the recording scaled?", stacklevel=2)
        out.append(EEGSample(rec.channel_ids, window, offset=k * length))
    return out


def patchify(sample: EEGSample | np.ndarray, patch_size: int = PATCH_SIZE) -> PatchGrid:
    window = sample.window if isinstance(sample, EEGSample) else np.asarray(sample)
    c, length = window.shape
    if length % patch_size:
        raise ValueError(f"window length {length} not divisible by patch size {patch_size}")
    return PatchGrid(window.reshape(c, length // patch_size, patch_size))
