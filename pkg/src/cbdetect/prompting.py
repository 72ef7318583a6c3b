"""Prompt construction: zero-shot, few-shot, and aggression-enriched.

Every render is a pure function of its arguments and produces byte-identical
output on repeated calls. The original post text always appears verbatim as
a contiguous substring of the rendered prompt. Template text lives in
versioned files under ``cbdetect/templates/``, not in code.
"""

from __future__ import annotations

import enum
import random
import re
from dataclasses import dataclass
from importlib import resources
from typing import Sequence

from .corpus import LabeledPost
from .labels import (
    AggressionLabel,
    Label,
    Task,
    display_names,
    label_space,
    labels_in_order,
)


class PromptError(ValueError):
    """Template/task mismatch, unbound placeholder, or exemplar leakage."""


class PromptMode(enum.Enum):
    ZERO_SHOT = "zero_shot"
    FEW_SHOT = "few_shot"
    ENRICHED = "enriched"


DEFAULT_TEMPLATE_IDS = {
    PromptMode.ZERO_SHOT: "zero_shot_v1",
    PromptMode.FEW_SHOT: "few_shot_v1",
    PromptMode.ENRICHED: "enriched_v1",
}

_PLACEHOLDER_RE = re.compile(r"\{([a-z_]+)\}")


def _substitute(template_text: str, values: dict[str, str]) -> str:
    # Single pass: substituted values are never re-scanned, so braces inside
    # post text cannot trigger another substitution round.
    names = set(_PLACEHOLDER_RE.findall(template_text))
    missing = names - values.keys()
    if missing:
        raise PromptError(f"unbound template placeholders: {sorted(missing)}")
    return _PLACEHOLDER_RE.sub(lambda m: values[m.group(1)], template_text)


@dataclass(frozen=True)
class PromptTemplate:
    template_id: str
    instruction_text: str
    label_space: type
    version: int

    def placeholders(self) -> set[str]:
        return set(_PLACEHOLDER_RE.findall(self.instruction_text))


def load_template(template_id: str, task: Task) -> PromptTemplate:
    """Load a shipped template file and bind it to a task's label space."""
    ref = resources.files("cbdetect.templates").joinpath(f"{template_id}.txt")
    try:
        text = ref.read_text(encoding="utf-8")
    except FileNotFoundError:
        raise PromptError(f"unknown template id: {template_id!r}") from None
    match = re.search(r"_v(\d+)$", template_id)
    version = int(match.group(1)) if match else 1
    return PromptTemplate(
        template_id=template_id,
        instruction_text=text,
        label_space=label_space(task),
        version=version,
    )


@dataclass(frozen=True)
class PromptProvenance:
    template_id: str
    template_version: int
    mode: PromptMode
    post_id: str
    exemplar_source_ids: tuple[str, ...] = ()
    aggression_label: AggressionLabel | None = None
    enrichment_order: str | None = None

    def to_dict(self) -> dict:
        out = {
            "template_id": self.template_id,
            "template_version": self.template_version,
            "mode": self.mode.value,
            "post_id": self.post_id,
        }
        if self.exemplar_source_ids:
            out["exemplar_source_ids"] = list(self.exemplar_source_ids)
        if self.aggression_label is not None:
            out["aggression_label"] = self.aggression_label.name
        if self.enrichment_order is not None:
            out["enrichment_order"] = self.enrichment_order
        return out


@dataclass(frozen=True)
class Prompt:
    """A fully rendered model input plus its target label space."""

    rendered_text: str
    label_space: type
    post_text: str
    provenance: PromptProvenance

    def __post_init__(self) -> None:
        if self.post_text not in self.rendered_text:
            raise PromptError("rendered prompt must contain the post text verbatim")


@dataclass(frozen=True)
class ExemplarSet:
    """k labelled training examples per class, in class-interleaved order."""

    task: Task
    k: int
    exemplars: tuple[tuple[str, Label], ...]
    source_ids: tuple[str, ...]
    seed: int

    def __post_init__(self) -> None:
        classes = labels_in_order(self.task)
        if len(self.exemplars) != self.k * len(classes):
            raise PromptError(
                f"exemplar set must hold k*|classes| = {self.k * len(classes)} "
                f"examples, got {len(self.exemplars)}"
            )
        per_class: dict[Label, int] = {}
        for _, lab in self.exemplars:
            per_class[lab] = per_class.get(lab, 0) + 1
        for lab in classes:
            if per_class.get(lab, 0) != self.k:
                raise PromptError(f"class {lab.display_name!r} has {per_class.get(lab, 0)} exemplars, expected {self.k}")


def select_exemplars(train: Sequence[LabeledPost], k: int, seed: int) -> ExemplarSet:
    """Sample k exemplars per class from a training pool.

    Selection is seeded uniform sampling without replacement and does not
    depend on the input ordering (candidates are sorted by id first).
    """
    if k < 1:
        raise PromptError("k must be >= 1")
    if not train:
        raise PromptError("empty training pool")
    tasks = {p.task for p in train}
    if len(tasks) > 1:
        raise PromptError("exemplar pool mixes tasks")
    task = tasks.pop()

    by_class: dict[Label, list[LabeledPost]] = {lab: [] for lab in labels_in_order(task)}
    for post in train:
        by_class[post.label].append(post)

    rng = random.Random(seed)
    chosen_per_class: dict[Label, list[LabeledPost]] = {}
    for lab in labels_in_order(task):
        candidates = sorted(by_class[lab], key=lambda p: p.id)
        if len(candidates) < k:
            raise PromptError(
                f"class {lab.display_name!r} has only {len(candidates)} training "
                f"records, cannot select k={k}"
            )
        chosen_per_class[lab] = rng.sample(candidates, k)

    exemplars: list[tuple[str, Label]] = []
    source_ids: list[str] = []
    for round_idx in range(k):
        for lab in labels_in_order(task):
            post = chosen_per_class[lab][round_idx]
            exemplars.append((post.text, post.label))
            source_ids.append(post.id)
    return ExemplarSet(
        task=task, k=k, exemplars=tuple(exemplars), source_ids=tuple(source_ids), seed=seed
    )


def _check_template_task(template: PromptTemplate, post: LabeledPost) -> None:
    if template.label_space is not label_space(post.task):
        raise PromptError(
            f"template {template.template_id!r} is bound to "
            f"{template.label_space.__name__}, post task is {post.task.value}"
        )


def _class_list(task: Task) -> str:
    return ", ".join(display_names(task))


def render_zero_shot(post: LabeledPost, template: PromptTemplate) -> Prompt:
    """Instruction + enumerated class list + the post, no examples."""
    _check_template_task(template, post)
    rendered = _substitute(
        template.instruction_text,
        {"class_list": _class_list(post.task), "post_text": post.text},
    )
    return Prompt(
        rendered_text=rendered,
        label_space=template.label_space,
        post_text=post.text,
        provenance=PromptProvenance(
            template_id=template.template_id,
            template_version=template.version,
            mode=PromptMode.ZERO_SHOT,
            post_id=post.id,
        ),
    )


def format_exemplar_block(exemplars: ExemplarSet) -> str:
    """One 'Post:/Label:' pair per exemplar, blank line between pairs."""
    blocks = [
        f"Post: {text}\nLabel: {lab.display_name}" for text, lab in exemplars.exemplars
    ]
    return "\n\n".join(blocks)


def render_few_shot(
    post: LabeledPost, template: PromptTemplate, exemplars: ExemplarSet
) -> Prompt:
    """Class-interleaved labelled examples followed by the unlabeled query."""
    _check_template_task(template, post)
    if exemplars.task is not post.task:
        raise PromptError("exemplar set task does not match the post task")
    if post.id in exemplars.source_ids:
        raise PromptError(f"exemplar leakage: post {post.id!r} is in the exemplar set")
    rendered = _substitute(
        template.instruction_text,
        {
            "class_list": _class_list(post.task),
            "exemplars": format_exemplar_block(exemplars),
            "post_text": post.text,
        },
    )
    return Prompt(
        rendered_text=rendered,
        label_space=template.label_space,
        post_text=post.text,
        provenance=PromptProvenance(
            template_id=template.template_id,
            template_version=template.version,
            mode=PromptMode.FEW_SHOT,
            post_id=post.id,
            exemplar_source_ids=exemplars.source_ids,
        ),
    )


def render_enriched(
    post: LabeledPost, predicted: AggressionLabel, template: PromptTemplate
) -> Prompt:
    """Prefix the cyberbullying prompt with a predicted aggression cue.

    The enrichment sentence comes first, then one blank line, then the post
    verbatim. Swapping the predicted label changes only the display-name
    span of the sentence.
    """
    if post.task is not Task.CYBERBULLYING:
        raise PromptError("enriched prompts are only defined for the cyberbullying task")
    if not isinstance(predicted, AggressionLabel):
        raise PromptError(f"predicted must be an aggression label, got {predicted!r}")
    _check_template_task(template, post)
    rendered = _substitute(
        template.instruction_text,
        {
            "aggression_label": predicted.display_name,
            "post_text": post.text,
            "class_list": _class_list(post.task),
        },
    )
    return Prompt(
        rendered_text=rendered,
        label_space=template.label_space,
        post_text=post.text,
        provenance=PromptProvenance(
            template_id=template.template_id,
            template_version=template.version,
            mode=PromptMode.ENRICHED,
            post_id=post.id,
            aggression_label=predicted,
            enrichment_order="enrichment_first",
        ),
    )
