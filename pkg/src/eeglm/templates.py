"""Instruction templates for the downstream tasks.

Yes/no and free-label tasks answer with a word; multiple-choice tasks list
lettered options and answer with the letter in parentheses.
"""

from __future__ import annotations

from dataclasses import dataclass, field

LETTERS = "ABCDEFGHIJ"


@dataclass(frozen=True)
class InstructionTemplate:
    task: str
    question: str
    kind: str  # "yesno" | "options" | "labels"
    classes: tuple[str, ...]
    answers: tuple[str, ...] = ()  # per class, for "yesno" / "labels"
    option_text: tuple[str, ...] = ()  # per class, for "options"
    window_seconds: int = 4
    n_channels: int | None = None
    extra: dict = field(default_factory=dict, compare=False)

    def __post_init__(self):
        if self.kind not in ("yesno", "options", "labels"):
            raise ValueError(f"unknown answer kind {self.kind!r}")
        n = len(self.classes)
        if self.kind == "options":
            if len(self.option_text) != n or n > len(LETTERS):
                raise ValueError(f"{self.task}: need one option text per class")
        elif len(self.answers) != n or len(set(self.answers)) != n:
            raise ValueError(f"{self.task}: need one distinct answer per class")

    @property
    def n_classes(self) -> int:
        return len(self.classes)

    def class_index(self, label) -> int:
        if isinstance(label, str):
            if label not in self.classes:
                raise ValueError(f"{self.task}: label {label!r} not in {self.classes}")
            return self.classes.index(label)
        idx = int(label)
        if not 0 <= idx < self.n_classes:
            raise ValueError(f"{self.task}: label {idx} out of range 0..{self.n_classes - 1}")
        return idx


TEMPLATES: dict[str, InstructionTemplate] = {}


def register(t: InstructionTemplate) -> InstructionTemplate:
    TEMPLATES[t.task] = t
    return t


register(InstructionTemplate(
    task="TUAB",
    question="Is this EEG segment abnormal?",
    kind="yesno",
    classes=("normal", "abnormal"),
    answers=("No", "Yes"),
    window_seconds=10,
    n_channels=23,
))
register(InstructionTemplate(
    task="TUEV",
    question="Which event type does this EEG segment belong to?",
    kind="options",
    classes=("spsw", "gped", "pled", "eyem", "artf", "bckg"),
    option_text=(
        "spike and slow wave",
        "generalized periodic epileptiform discharge",
        "periodic lateralized epileptiform discharge",
        "eye movement",
        "artifact",
        "background",
    ),
    window_seconds=5,
    n_channels=23,
))
register(InstructionTemplate(
    task="SEED",
    question="Which emotion type does this EEG segment belong to?",
    kind="labels",
    classes=("positive", "neutral", "negative"),
    answers=("Positive", "Neutral", "Negative"),
    window_seconds=4,
    n_channels=62,
))
register(InstructionTemplate(
    task="HMC",
    question="Which sleep type does this EEG segment belong to?",
    kind="options",
    classes=("wake", "nrem1", "nrem2", "nrem3", "rem"),
    option_text=("Wake", "NREM-1", "NREM-2", "NREM-3", "REM"),
    window_seconds=30,
    n_channels=4,
))
register(InstructionTemplate(
    task="Workload",
    question="Is this EEG segment of high workload?",
    kind="yesno",
    classes=("low", "high"),
    answers=("No", "Yes"),
    window_seconds=4,
    n_channels=19,
))
register(InstructionTemplate(
    task="TUSL",
    question="Which type does this EEG segment belong to?",
    kind="options",
    classes=("background", "seizure", "slowing"),
    option_text=("background", "seizure", "slowing"),
    window_seconds=10,
    n_channels=23,
))

# desk-scale stand-ins used by the synthetic pipeline
register(InstructionTemplate(
    task="SYN2",
    question="Is this EEG segment fast?",
    kind="yesno",
    classes=("slow", "fast"),
    answers=("No", "Yes"),
    window_seconds=2,
))
register(InstructionTemplate(
    task="SYN3",
    question="Which rhythm is this?",
    kind="options",
    classes=("theta", "alpha", "gamma"),
    option_text=("theta", "alpha", "gamma"),
    window_seconds=2,
))

PAPER_TASKS = ("TUAB", "TUEV", "SEED", "HMC", "Workload", "TUSL")


def get_template(task: str) -> InstructionTemplate:
    try:
        return TEMPLATES[task]
    except KeyError:
        raise KeyError(f"unknown task {task!r}") from None
