"""Canonical 10-20 / 10-10 electrode names with stable integer ids.

The list is append-only: ids index the spatial embedding tables, so an
electrode must never move once published.
"""

from __future__ import annotations

CHANNELS = (
    "FP1", "FPZ", "FP2",
    "AF9", "AF7", "AF5", "AF3", "AF1", "AFZ", "AF2", "AF4", "AF6", "AF8", "AF10",
    "F9", "F7", "F5", "F3", "F1", "FZ", "F2", "F4", "F6", "F8", "F10",
    "FT9", "FT7", "FC5", "FC3", "FC1", "FCZ", "FC2", "FC4", "FC6", "FT8", "FT10",
    "T9", "T7", "C5", "C3", "C1", "CZ", "C2", "C4", "C6", "T8", "T10",
    "TP9", "TP7", "CP5", "CP3", "CP1", "CPZ", "CP2", "CP4", "CP6", "TP8", "TP10",
    "P9", "P7", "P5", "P3", "P1", "PZ", "P2", "P4", "P6", "P8", "P10",
    "PO9", "PO7", "PO5", "PO3", "PO1", "POZ", "PO2", "PO4", "PO6", "PO8", "PO10",
    "O1", "OZ", "O2", "O9", "CB1", "CB2",
    "IZ", "O10", "T3", "T4", "T5", "T6", "M1", "M2", "A1", "A2",
)

_INDEX = {name: i for i, name in enumerate(CHANNELS)}


class UnknownChannelError(KeyError):
    pass


def channel_id(name: str) -> int:
    """Registry id of an electrode name (case-insensitive, e.g. ``Fp1``)."""
    try:
        return _INDEX[name.strip().upper()]
    except KeyError:
        raise UnknownChannelError(f"unknown channel {name!r}") from None


def channel_ids(names) -> list[int]:
    ids = [channel_id(n) for n in names]
    if len(set(ids)) != len(ids):
        raise ValueError(f"duplicate channels in {list(names)}")
    return ids


def canonical(name: str) -> str:
    return CHANNELS[channel_id(name)]


def n_channels() -> int:
    return len(CHANNELS)
