"""Dataset ingestion, normalization, splits, and synthetic fixtures.

Six heterogeneous source datasets (five aggression, one cyberbullying) are
normalized into a single record shape. Raw files are read through
per-dataset schema configs shipped under ``cbdetect/schemas/``; dirty rows
are rejected with a reason instead of aborting the load. Text is stored
as-is: no lowercasing, no emoji or punctuation stripping, because surface
cues matter for covert aggression.
"""

from __future__ import annotations

import csv
import enum
import json
import random
from dataclasses import dataclass, replace
from importlib import resources
from pathlib import Path
from typing import Iterable, Sequence, Union

from .labels import (
    Label,
    Task,
    label_from_name,
    label_to_name,
    labels_in_order,
    task_of_label,
)


class DatasetId(enum.Enum):
    D1 = "D1"
    D2 = "D2"
    D3 = "D3"
    D4 = "D4"
    D5 = "D5"
    D6 = "D6"


class Split(enum.Enum):
    TRAIN = "train"
    VALIDATION = "validation"
    TEST = "test"


class CorpusError(ValueError):
    """Invalid record, schema, or split configuration."""


@dataclass(frozen=True)
class LabeledPost:
    """One normalized text record."""

    id: str
    text: str
    task: Task
    label: Label
    dataset_id: DatasetId
    split: Split
    language_tag: str

    def __post_init__(self) -> None:
        if not self.text.strip():
            raise CorpusError(f"post {self.id!r}: empty text")
        if task_of_label(self.label) is not self.task:
            raise CorpusError(
                f"post {self.id!r}: label {self.label!r} does not belong to task {self.task.value}"
            )

    def to_record(self) -> dict:
        return {
            "id": self.id,
            "text": self.text,
            "task": self.task.value,
            "label": label_to_name(self.label),
            "dataset_id": self.dataset_id.value,
            "split": self.split.value,
            "language_tag": self.language_tag,
        }

    @classmethod
    def from_record(cls, record: dict) -> "LabeledPost":
        task = Task(record["task"])
        return cls(
            id=record["id"],
            text=record["text"],
            task=task,
            label=label_from_name(task, record["label"]),
            dataset_id=DatasetId(record["dataset_id"]),
            split=Split(record["split"]),
            language_tag=record["language_tag"],
        )


@dataclass(frozen=True)
class RejectedRow:
    """A source row that could not become a LabeledPost."""

    row_number: int
    reason: str
    raw: dict


@dataclass(frozen=True)
class LoadResult:
    accepted: tuple[LabeledPost, ...]
    rejects: tuple[RejectedRow, ...]

    @property
    def rows_read(self) -> int:
        return len(self.accepted) + len(self.rejects)


@dataclass(frozen=True)
class SchemaConfig:
    """Column and label mapping for one source dataset."""

    schema_id: DatasetId
    version: int
    task: Task
    language_tag: str
    text_column: str
    label_column: str
    id_column: str | None
    label_map: dict[str, Label]

    @classmethod
    def from_dict(cls, data: dict) -> "SchemaConfig":
        task = Task(data["task"])
        return cls(
            schema_id=DatasetId(data["schema_id"]),
            version=int(data["version"]),
            task=task,
            language_tag=data["language_tag"],
            text_column=data["text_column"],
            label_column=data["label_column"],
            id_column=data.get("id_column"),
            label_map={
                raw: label_from_name(task, name) for raw, name in data["label_map"].items()
            },
        )


def load_schema(schema_id: Union[DatasetId, str]) -> SchemaConfig:
    """Load the shipped schema config for a dataset id."""
    if isinstance(schema_id, str):
        try:
            schema_id = DatasetId(schema_id.upper())
        except ValueError:
            raise CorpusError(f"unknown schema id: {schema_id!r}") from None
    name = f"{schema_id.value.lower()}.json"
    ref = resources.files("cbdetect.schemas").joinpath(name)
    return SchemaConfig.from_dict(json.loads(ref.read_text(encoding="utf-8")))


def list_schemas() -> list[SchemaConfig]:
    return [load_schema(d) for d in DatasetId]


def load_dataset(path: Union[str, Path], schema_id: Union[DatasetId, str]) -> LoadResult:
    """Read a raw CSV dump and normalize every row.

    Rows with an empty text, an unmapped label value, a missing field, or a
    duplicate id are routed to the rejects list with a reason; they never
    abort the load. accepted + rejected always equals rows read.
    """
    schema = load_schema(schema_id)
    path = Path(path)
    if not path.is_file():
        raise CorpusError(f"cannot read dataset file: {path}")

    accepted: list[LabeledPost] = []
    rejects: list[RejectedRow] = []
    seen_ids: set[str] = set()

    with path.open(newline="", encoding="utf-8") as handle:
        reader = csv.DictReader(handle)
        for row_number, row in enumerate(reader, start=1):
            reason = None
            text = (row.get(schema.text_column) or "").strip("﻿")
            raw_label = row.get(schema.label_column)
            if schema.text_column not in row or row[schema.text_column] is None:
                reason = f"missing_field:{schema.text_column}"
            elif raw_label is None:
                reason = f"missing_field:{schema.label_column}"
            elif not text.strip():
                reason = "empty_text"
            elif raw_label.strip() not in schema.label_map:
                reason = f"unmappable_label:{raw_label.strip()}"

            if reason is None:
                if schema.id_column:
                    post_id = (row.get(schema.id_column) or "").strip()
                    if not post_id:
                        reason = f"missing_field:{schema.id_column}"
                else:
                    post_id = f"{schema.schema_id.value.lower()}-{row_number:06d}"

            if reason is None and post_id in seen_ids:
                reason = f"duplicate_id:{post_id}"

            if reason is not None:
                rejects.append(RejectedRow(row_number=row_number, reason=reason, raw=dict(row)))
                continue

            seen_ids.add(post_id)
            accepted.append(
                LabeledPost(
                    id=post_id,
                    text=text,
                    task=schema.task,
                    label=schema.label_map[raw_label.strip()],
                    dataset_id=schema.schema_id,
                    split=Split.TRAIN,
                    language_tag=schema.language_tag,
                )
            )

    return LoadResult(accepted=tuple(accepted), rejects=tuple(rejects))


@dataclass(frozen=True)
class SplitSpec:
    """Train/validation/test partition policy.

    ``validation`` is either a fraction (float) or an absolute record count
    (int). With a fraction, all three fractions must cover the corpus
    exactly; validation and test sizes are floored and the remainder goes
    to train. With a count, train is floored from ``train_fraction``, the
    count is carved out, and test takes whatever remains.
    """

    train_fraction: float
    validation: Union[float, int]
    test_fraction: float
    seed: int = 0

    def __post_init__(self) -> None:
        if not 0.0 < self.train_fraction < 1.0:
            raise CorpusError(f"train_fraction must be in (0,1), got {self.train_fraction}")
        if isinstance(self.validation, bool):
            raise CorpusError("validation must be a fraction or a count")
        if isinstance(self.validation, int):
            if self.validation < 0:
                raise CorpusError("validation count must be >= 0")
            if abs(self.train_fraction + self.test_fraction - 1.0) > 1e-9:
                raise CorpusError(
                    "with an absolute validation count, train and test fractions "
                    "must cover the corpus (validation is carved out of the test side)"
                )
        else:
            if self.validation < 0 or self.test_fraction < 0:
                raise CorpusError("fractions must be >= 0")
            total = self.train_fraction + self.validation + self.test_fraction
            if abs(total - 1.0) > 1e-9:
                raise CorpusError(f"split fractions must sum to 1, got {total}")


def split_sizes(spec: SplitSpec, n: int) -> tuple[int, int, int]:
    """(train, validation, test) sizes for a corpus of n records."""
    if isinstance(spec.validation, int):
        n_train = int(spec.train_fraction * n)
        n_val = spec.validation
        n_test = n - n_train - n_val
        if n_test < 0:
            raise CorpusError(
                f"split demands {n_val} validation records but only "
                f"{n - n_train} remain after the training cut of {n_train}"
            )
    else:
        n_val = int(spec.validation * n)
        n_test = int(spec.test_fraction * n)
        n_train = n - n_val - n_test
    return n_train, n_val, n_test


def split_corpus(
    posts: Sequence[LabeledPost], spec: SplitSpec
) -> dict[Split, tuple[LabeledPost, ...]]:
    """Partition posts into train/validation/test deterministically.

    The partition depends only on the record ids and the seed, never on the
    input order. Every post lands in exactly one split, re-tagged with its
    destination.
    """
    if not posts:
        raise CorpusError("cannot split an empty corpus")
    n_train, n_val, n_test = split_sizes(spec, len(posts))

    ordered = sorted(posts, key=lambda p: p.id)
    rng = random.Random(spec.seed)
    rng.shuffle(ordered)

    sections = {
        Split.TRAIN: ordered[:n_train],
        Split.VALIDATION: ordered[n_train : n_train + n_val],
        Split.TEST: ordered[n_train + n_val :],
    }
    return {
        split: tuple(replace(post, split=split) for post in chunk)
        for split, chunk in sections.items()
    }


_SYNTH_OPENERS = [
    "just saw this thread and",
    "quoting the reply:",
    "screenshot from the group chat,",
    "someone in the comments said",
    "repost from earlier today,",
    "overheard on the timeline:",
]

_SYNTH_CLOSERS = [
    "make of that what you will",
    "context in the replies",
    "mods are asleep",
    "not the first time either",
    "thread continues below",
    "ratio incoming",
]


def synth_fixture(n_per_class: int, task: Task, seed: int = 0) -> tuple[LabeledPost, ...]:
    """Generate a balanced synthetic corpus for desk-scale tests.

    Every text embeds its class display name verbatim, so a rule-based stub
    backend keyed on class names can classify the fixture perfectly.
    Synthetic aggression records are tagged D1, cyberbullying records D6.
    """
    if n_per_class < 1:
        raise CorpusError("n_per_class must be >= 1")
    rng = random.Random(seed)
    dataset_id = DatasetId.D1 if task is Task.AGGRESSION else DatasetId.D6
    posts = []
    for i in range(n_per_class):
        for lab in labels_in_order(task):
            opener = rng.choice(_SYNTH_OPENERS)
            closer = rng.choice(_SYNTH_CLOSERS)
            name = label_to_name(lab)
            posts.append(
                LabeledPost(
                    id=f"synth-{task.value}-s{seed}-{name}-{i:03d}",
                    text=f"{opener} reviewers tagged it {lab.display_name}, {closer} #{i}",
                    task=task,
                    label=lab,
                    dataset_id=dataset_id,
                    split=Split.TRAIN,
                    language_tag="en",
                )
            )
    return tuple(posts)


def class_distribution(posts: Sequence[LabeledPost]) -> dict[Label, int]:
    """Per-label counts over a single-task corpus."""
    if not posts:
        return {}
    tasks = {p.task for p in posts}
    if len(tasks) > 1:
        raise CorpusError(f"mixed tasks in class_distribution: {sorted(t.value for t in tasks)}")
    counts: dict[Label, int] = {}
    for post in posts:
        counts[post.label] = counts.get(post.label, 0) + 1
    return counts


def merge_corpora(*groups: Sequence[LabeledPost]) -> tuple[LabeledPost, ...]:
    """Concatenate corpora, refusing duplicate ids across groups."""
    merged: list[LabeledPost] = []
    seen: set[str] = set()
    for group in groups:
        for post in group:
            if post.id in seen:
                raise CorpusError(f"duplicate id across corpora: {post.id!r}")
            seen.add(post.id)
            merged.append(post)
    return tuple(merged)


def save_records(posts: Iterable[LabeledPost], path: Union[str, Path]) -> Path:
    """Write posts as line-delimited records (UTF-8, sorted keys)."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", encoding="utf-8") as handle:
        for post in posts:
            handle.write(json.dumps(post.to_record(), sort_keys=True, ensure_ascii=False))
            handle.write("\n")
    return path


def load_records(path: Union[str, Path]) -> tuple[LabeledPost, ...]:
    """Inverse of save_records; round-trips exactly."""
    path = Path(path)
    posts = []
    with path.open(encoding="utf-8") as handle:
        for line in handle:
            line = line.strip()
            if line:
                posts.append(LabeledPost.from_record(json.loads(line)))
    return tuple(posts)


def save_rejects(rejects: Iterable[RejectedRow], path: Union[str, Path]) -> Path:
    """Write a rejects report next to a normalized corpus."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", encoding="utf-8") as handle:
        for reject in rejects:
            record = {"row_number": reject.row_number, "reason": reject.reason, "raw": reject.raw}
            handle.write(json.dumps(record, sort_keys=True, ensure_ascii=False))
            handle.write("\n")
    return path
