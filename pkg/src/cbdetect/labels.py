"""Label spaces for the two classification tasks.

Integer codes and display names are part of the wire contract: they appear
in record files, prompts, and model responses, so they must never change
between releases.
"""

from __future__ import annotations

import enum
from typing import Union


class Task(enum.Enum):
    AGGRESSION = "aggression"
    CYBERBULLYING = "cyberbullying"


class AggressionLabel(enum.IntEnum):
    """Three-way aggression scale. Codes 0/1/2 are stable."""

    NAG = 0
    CAG = 1
    OAG = 2

    @property
    def display_name(self) -> str:
        return _AGGRESSION_DISPLAY[self]


_AGGRESSION_DISPLAY = {
    AggressionLabel.NAG: "Not-Aggressive",
    AggressionLabel.CAG: "Covertly Aggressive",
    AggressionLabel.OAG: "Overtly Aggressive",
}


class CyberbullyingLabel(enum.IntEnum):
    """Four-way cyberbullying taxonomy."""

    ETHNICITY_RACE = 0
    RELIGION = 1
    GENDER_SEXUAL = 2
    NOT_CYBERBULLYING = 3

    @property
    def display_name(self) -> str:
        return _CYBERBULLYING_DISPLAY[self]


_CYBERBULLYING_DISPLAY = {
    CyberbullyingLabel.ETHNICITY_RACE: "Ethnicity/Race",
    CyberbullyingLabel.RELIGION: "Religion",
    CyberbullyingLabel.GENDER_SEXUAL: "Gender/Sexual",
    CyberbullyingLabel.NOT_CYBERBULLYING: "Not Cyberbullying",
}

Label = Union[AggressionLabel, CyberbullyingLabel]

_TASK_LABELS = {
    Task.AGGRESSION: AggressionLabel,
    Task.CYBERBULLYING: CyberbullyingLabel,
}


def label_space(task: Task) -> type:
    """Return the label enumeration owning `task`."""
    return _TASK_LABELS[task]


def task_of_label(label: Label) -> Task:
    if isinstance(label, AggressionLabel):
        return Task.AGGRESSION
    if isinstance(label, CyberbullyingLabel):
        return Task.CYBERBULLYING
    raise TypeError(f"not a task label: {label!r}")


def labels_in_order(task: Task) -> list[Label]:
    """All labels of a task in canonical (code) order."""
    return list(label_space(task))


def display_names(task: Task) -> list[str]:
    return [lab.display_name for lab in labels_in_order(task)]


def label_to_name(label: Label) -> str:
    """Serialized form: 'NAG'/'CAG'/'OAG' or 'ethnicity_race' etc."""
    if isinstance(label, AggressionLabel):
        return label.name
    return label.name.lower()


def label_from_name(task: Task, name: str) -> Label:
    """Resolve a serialized label name for a task (inverse of label_to_name)."""
    space = label_space(task)
    try:
        return space[name.upper()]
    except KeyError:
        raise ValueError(f"unknown {task.value} label name: {name!r}") from None


def label_from_display(task: Task, display: str) -> Label:
    """Resolve a Table-style display name, case-insensitively."""
    for lab in labels_in_order(task):
        if lab.display_name.lower() == display.strip().lower():
            return lab
    raise ValueError(f"unknown {task.value} display name: {display!r}")
