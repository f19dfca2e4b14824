"""A small built-in text corpus so the language side needs no external data.

Sentences are drawn from a fixed grammar with a seeded generator; the same
seed always yields the same text.
"""

from __future__ import annotations

import numpy as np

_SUBJECTS = ("the signal", "the patient", "a rhythm", "the model", "this segment", "the recording",
             "a sleeper", "the electrode", "each channel", "the network")
_VERBS = ("shows", "contains", "follows", "predicts", "reflects", "carries", "ends with", "starts with")
_OBJECTS = ("slow waves", "fast activity", "a spike", "an artifact", "quiet background", "alpha bursts",
            "theta power", "a clear pattern", "noise", "the next token")
_TAILS = ("today", "at night", "during the task", "after rest", "in every window", "near the end")


def sentence(rng: np.random.Generator) -> str:
    s = f"{rng.choice(_SUBJECTS)} {rng.choice(_VERBS)} {rng.choice(_OBJECTS)}"
    if rng.random() < 0.5:
        s += " " + str(rng.choice(_TAILS))
    return s[0].upper() + s[1:] + "."


def sentences(n: int, seed: int = 0) -> list[str]:
    rng = np.random.default_rng(seed)
    return [sentence(rng) for _ in range(n)]


def text_chunks(encode, n: int, length: int, seed: int = 0) -> list[np.ndarray]:
    """``n`` id sequences of exactly ``length`` tokens cut from a running text stream."""
    rng = np.random.default_rng(seed)
    out = []
    buf: list[int] = []
    while len(out) < n:
        while len(buf) < length:
            buf.extend(encode(sentence(rng) + " "))
        out.append(np.asarray(buf[:length], dtype=np.int64))
        buf = buf[length:]
    return out
