"""Experiment orchestration over a corpus split.

``run_baseline`` drives the four single-stage methods; ``run_epp`` drives
the three-step enriched flow: predict aggression on the raw post, embed the
predicted display name into the cyberbullying prompt, classify the enriched
prompt with the second-stage backend.

Per-record failures (transport or parse) become failure outcomes on that
record only; they never abort a run or disturb neighbouring records.
Output order always equals input order, even with a concurrent backend.
Every run can be persisted to a content-addressed directory holding the
manifest, the predictions file, and a raw-response audit log; rerunning
from the manifest with stub backends reproduces the predictions file byte
for byte.
"""

from __future__ import annotations

import enum
import hashlib
import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Mapping, Sequence, Union

from . import backend as backend_mod
from .backend import (
    BackendDescriptor,
    ParseFailure,
    RawResponse,
    TransportError,
    parse_label,
)
from .corpus import LabeledPost
from .labels import AggressionLabel, Label, Task, label_from_name, label_to_name
from .prompting import (
    DEFAULT_TEMPLATE_IDS,
    ExemplarSet,
    Prompt,
    PromptMode,
    load_template,
    render_enriched,
    render_few_shot,
    render_zero_shot,
    select_exemplars,
)


class PipelineError(ValueError):
    pass


class Method(enum.Enum):
    ZERO_SHOT = "zero_shot"
    FEW_SHOT = "few_shot"
    LORA_SFT = "lora_sft"
    MTL = "mtl"
    EPP = "epp"


STAGE1_FALLBACK_LABEL = AggressionLabel.NAG


@dataclass(frozen=True)
class ExperimentSpec:
    """What to run: method, task, backends, templates, seeds.

    The enriched-pipeline method requires exactly two backends: the
    aggression stage first, the cyberbullying stage second. Single-stage
    methods take exactly one.
    """

    method: Method
    task: Task
    backends: tuple[BackendDescriptor, ...]
    templates: dict[str, str] = field(default_factory=dict)
    exemplar_k: int = 3
    seed: int = 0
    checkpoints: tuple[str, ...] = ()

    def __post_init__(self) -> None:
        if self.method is Method.EPP:
            if self.task is not Task.CYBERBULLYING:
                raise PipelineError("the enriched pipeline targets the cyberbullying task")
            if len(self.backends) != 2:
                raise PipelineError(
                    "epp needs exactly two backends: aggression stage, cyberbullying stage"
                )
        else:
            if len(self.backends) != 1:
                raise PipelineError(f"method {self.method.value} takes exactly one backend")

    def template_id(self, role: str) -> str:
        if role in self.templates:
            return self.templates[role]
        defaults = {
            "main": DEFAULT_TEMPLATE_IDS[
                PromptMode.FEW_SHOT if self.method is Method.FEW_SHOT else PromptMode.ZERO_SHOT
            ],
            "stage1": DEFAULT_TEMPLATE_IDS[PromptMode.ZERO_SHOT],
            "enriched": DEFAULT_TEMPLATE_IDS[PromptMode.ENRICHED],
        }
        return defaults[role]


@dataclass(frozen=True)
class Prediction:
    """Outcome for one record, in input position."""

    post_id: str
    gold: Label
    predicted: Label | None
    failure: str | None = None
    aggression_annotation: AggressionLabel | None = None
    stage1_fallback: bool = False
    provenance: dict = field(default_factory=dict)
    response_text: str | None = None
    stage1_response_text: str | None = None

    def to_record(self) -> dict:
        record = {
            "post_id": self.post_id,
            "gold": label_to_name(self.gold),
            "predicted": None if self.predicted is None else label_to_name(self.predicted),
            "failure": self.failure,
            "provenance": self.provenance,
            "response_text": self.response_text,
        }
        if self.aggression_annotation is not None:
            record["aggression_annotation"] = self.aggression_annotation.name
            record["stage1_fallback"] = self.stage1_fallback
            record["stage1_response_text"] = self.stage1_response_text
        return record


@dataclass
class RunResult:
    spec: ExperimentSpec
    predictions: list[Prediction]
    manifest: dict
    audit: list[dict] = field(default_factory=list)
    run_dir: Path | None = None

    @property
    def run_id(self) -> str:
        return self.manifest["run_id"]


def _canonical_json(data) -> str:
    return json.dumps(data, sort_keys=True, ensure_ascii=False, separators=(",", ":"))


def _manifest_for(
    spec: ExperimentSpec,
    templates: dict[str, dict],
    exemplars: ExemplarSet | None,
    n_records: int,
    aggression_overrides: dict[str, str] | None = None,
) -> dict:
    manifest = {
        "method": spec.method.value,
        "task": spec.task.value,
        "seed": spec.seed,
        "templates": templates,
        "backends": [b.to_dict() for b in spec.backends],
        "checkpoints": list(spec.checkpoints),
        "n_records": n_records,
    }
    if exemplars is not None:
        manifest["exemplars"] = {
            "k": exemplars.k,
            "seed": exemplars.seed,
            "source_ids": list(exemplars.source_ids),
        }
    if aggression_overrides:
        manifest["aggression_overrides"] = dict(sorted(aggression_overrides.items()))
    manifest["run_id"] = hashlib.sha256(_canonical_json(manifest).encode("utf-8")).hexdigest()[:12]
    return manifest


def _classify_records(
    posts: Sequence[LabeledPost],
    descriptor: BackendDescriptor,
    make_prompt: Callable[[LabeledPost], Prompt],
) -> list[tuple[Prompt, Union[RawResponse, BaseException]]]:
    """Render and classify each post, preserving input order.

    Work may fan out up to the backend's parallelism limit; results are
    re-sequenced because map() yields in submission order. Exceptions are
    captured per record, not raised.
    """

    def one(post: LabeledPost) -> tuple[Prompt, Union[RawResponse, BaseException]]:
        prompt = make_prompt(post)
        try:
            return prompt, backend_mod.classify(prompt, descriptor)
        except TransportError as exc:
            return prompt, exc

    workers = descriptor.max_parallel_requests
    if workers <= 1 or len(posts) <= 1:
        return [one(p) for p in posts]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(one, posts))


def run_baseline(
    posts: Sequence[LabeledPost],
    spec: ExperimentSpec,
    train_posts: Sequence[LabeledPost] | None = None,
    out_dir: Union[str, Path, None] = None,
) -> RunResult:
    """One prediction per input record, in input order.

    Few-shot runs select exemplars from ``train_posts`` before any backend
    call, so an undersized exemplar class fails the run up front.
    """
    if spec.method is Method.EPP:
        raise PipelineError("use run_epp for the enriched pipeline")
    if not posts:
        raise PipelineError("empty evaluation split")

    template = load_template(spec.template_id("main"), spec.task)
    templates_meta = {
        "main": {"template_id": template.template_id, "version": template.version}
    }

    exemplars: ExemplarSet | None = None
    if spec.method is Method.FEW_SHOT:
        if not train_posts:
            raise PipelineError("few_shot requires a training pool for exemplar selection")
        exemplars = select_exemplars(train_posts, spec.exemplar_k, spec.seed)

    def make_prompt(post: LabeledPost) -> Prompt:
        if spec.method is Method.FEW_SHOT:
            return render_few_shot(post, template, exemplars)
        return render_zero_shot(post, template)

    descriptor = spec.backends[0]
    outcomes = _classify_records(posts, descriptor, make_prompt)

    predictions = []
    audit = []
    for post, (prompt, outcome) in zip(posts, outcomes):
        provenance = prompt.provenance.to_dict()
        provenance["backend_id"] = descriptor.backend_id
        audit.append(_audit_entry(post.id, "main", prompt, outcome))
        if isinstance(outcome, BaseException):
            predictions.append(
                Prediction(
                    post_id=post.id,
                    gold=post.label,
                    predicted=None,
                    failure=f"transport_error: {outcome}",
                    provenance=provenance,
                )
            )
            continue
        try:
            parsed = parse_label(outcome, prompt.label_space)
            predictions.append(
                Prediction(
                    post_id=post.id,
                    gold=post.label,
                    predicted=parsed.label,
                    provenance={**provenance, "match_kind": parsed.match_kind.value},
                    response_text=outcome.text,
                )
            )
        except ParseFailure:
            predictions.append(
                Prediction(
                    post_id=post.id,
                    gold=post.label,
                    predicted=None,
                    failure="parse_failure",
                    provenance=provenance,
                    response_text=outcome.text,
                )
            )

    manifest = _manifest_for(spec, templates_meta, exemplars, len(posts))
    result = RunResult(spec=spec, predictions=predictions, manifest=manifest, audit=audit)
    if out_dir is not None:
        persist_run(result, out_dir)
    return result


def _audit_entry(
    post_id: str, stage: str, prompt: Prompt, outcome: Union[RawResponse, BaseException]
) -> dict:
    entry = {"post_id": post_id, "stage": stage, "rendered_text": prompt.rendered_text}
    if isinstance(outcome, BaseException):
        entry["response_text"] = None
        entry["failure"] = str(outcome)
    else:
        entry["response_text"] = outcome.text
        entry["failure"] = None
    return entry


def run_epp(
    posts: Sequence[LabeledPost],
    spec: ExperimentSpec,
    out_dir: Union[str, Path, None] = None,
    aggression_overrides: Mapping[str, AggressionLabel] | None = None,
) -> RunResult:
    """Three sequential steps per record.

    1. The aggression-stage backend classifies the raw post.
    2. The predicted display name is embedded into the enriched prompt.
    3. The cyberbullying-stage backend classifies the enriched prompt.

    A stage-1 parse failure falls back to the Not-Aggressive enrichment and
    flags the record; the run always completes. The aggression stage is a
    previously tuned artifact used as-is: this pipeline never retrains it.

    ``aggression_overrides`` is a diagnostic mode: records listed there
    skip stage 1 and are enriched with the supplied label instead of a
    prediction. Overridden records are marked ``stage1_mode: gold_override``
    in their provenance and the override set is recorded in the manifest,
    so diagnostic runs are never mistakable for inference runs.
    """
    if spec.method is not Method.EPP:
        raise PipelineError("run_epp requires an epp experiment spec")
    if not posts:
        raise PipelineError("empty evaluation split")
    overrides = dict(aggression_overrides or {})
    for post_id, label in overrides.items():
        if not isinstance(label, AggressionLabel):
            raise PipelineError(f"override for {post_id!r} is not an aggression label")

    stage1_template = load_template(spec.template_id("stage1"), Task.AGGRESSION)
    enriched_template = load_template(spec.template_id("enriched"), Task.CYBERBULLYING)
    templates_meta = {
        "stage1": {
            "template_id": stage1_template.template_id,
            "version": stage1_template.version,
        },
        "enriched": {
            "template_id": enriched_template.template_id,
            "version": enriched_template.version,
        },
    }
    stage1_backend, stage2_backend = spec.backends

    # Stage 1: aggression cues for every record not covered by an override.
    agg_view = [
        LabeledPost(
            id=post.id,
            text=post.text,
            task=Task.AGGRESSION,
            label=AggressionLabel.NAG,  # placeholder, never read downstream
            dataset_id=post.dataset_id,
            split=post.split,
            language_tag=post.language_tag,
        )
        for post in posts
        if post.id not in overrides
    ]
    outcomes_by_id = {
        prompt.provenance.post_id: (prompt, outcome)
        for prompt, outcome in _classify_records(
            agg_view, stage1_backend, lambda p: render_zero_shot(p, stage1_template)
        )
    }

    audit = []
    stage1_labels: list[AggressionLabel] = []
    stage1_fallbacks: list[bool] = []
    stage1_texts: list[str | None] = []
    stage1_modes: list[str] = []
    for post in posts:
        if post.id in overrides:
            audit.append(
                {
                    "post_id": post.id,
                    "stage": "stage1",
                    "rendered_text": None,
                    "response_text": None,
                    "failure": None,
                    "gold_override": overrides[post.id].name,
                }
            )
            stage1_labels.append(overrides[post.id])
            stage1_fallbacks.append(False)
            stage1_texts.append(None)
            stage1_modes.append("gold_override")
            continue
        prompt, outcome = outcomes_by_id[post.id]
        audit.append(_audit_entry(post.id, "stage1", prompt, outcome))
        stage1_modes.append("predicted")
        if isinstance(outcome, BaseException):
            stage1_labels.append(STAGE1_FALLBACK_LABEL)
            stage1_fallbacks.append(True)
            stage1_texts.append(None)
            continue
        try:
            parsed = parse_label(outcome, prompt.label_space)
            stage1_labels.append(parsed.label)
            stage1_fallbacks.append(False)
        except ParseFailure:
            stage1_labels.append(STAGE1_FALLBACK_LABEL)
            stage1_fallbacks.append(True)
        stage1_texts.append(outcome.text)

    # Stages 2 and 3: enrich with the predicted cue, then classify.
    enriched_by_id = {
        post.id: render_enriched(post, label, enriched_template)
        for post, label in zip(posts, stage1_labels)
    }
    stage2_outcomes = _classify_records(
        posts, stage2_backend, lambda p: enriched_by_id[p.id]
    )

    predictions = []
    for post, agg_label, fallback, stage1_text, stage1_mode, (prompt, outcome) in zip(
        posts, stage1_labels, stage1_fallbacks, stage1_texts, stage1_modes, stage2_outcomes
    ):
        audit.append(_audit_entry(post.id, "stage2", prompt, outcome))
        provenance = prompt.provenance.to_dict()
        provenance["backend_id"] = stage2_backend.backend_id
        provenance["stage1_backend_id"] = stage1_backend.backend_id
        provenance["stage1_template_id"] = stage1_template.template_id
        provenance["stage1_mode"] = stage1_mode
        common = dict(
            post_id=post.id,
            gold=post.label,
            aggression_annotation=agg_label,
            stage1_fallback=fallback,
            stage1_response_text=stage1_text,
        )
        if isinstance(outcome, BaseException):
            predictions.append(
                Prediction(
                    predicted=None,
                    failure=f"transport_error: {outcome}",
                    provenance=provenance,
                    **common,
                )
            )
            continue
        try:
            parsed = parse_label(outcome, prompt.label_space)
            predictions.append(
                Prediction(
                    predicted=parsed.label,
                    provenance={**provenance, "match_kind": parsed.match_kind.value},
                    response_text=outcome.text,
                    **common,
                )
            )
        except ParseFailure:
            predictions.append(
                Prediction(
                    predicted=None,
                    failure="parse_failure",
                    provenance=provenance,
                    response_text=outcome.text,
                    **common,
                )
            )

    manifest = _manifest_for(
        spec,
        templates_meta,
        None,
        len(posts),
        aggression_overrides={pid: lab.name for pid, lab in overrides.items()},
    )
    result = RunResult(spec=spec, predictions=predictions, manifest=manifest, audit=audit)
    if out_dir is not None:
        persist_run(result, out_dir)
    return result


def run_experiment(
    posts: Sequence[LabeledPost],
    spec: ExperimentSpec,
    train_posts: Sequence[LabeledPost] | None = None,
    out_dir: Union[str, Path, None] = None,
) -> RunResult:
    if spec.method is Method.EPP:
        return run_epp(posts, spec, out_dir=out_dir)
    return run_baseline(posts, spec, train_posts=train_posts, out_dir=out_dir)


def predictions_jsonl(predictions: Sequence[Prediction]) -> str:
    """Deterministic line-delimited serialization (no timings, no clocks)."""
    lines = [_canonical_json(p.to_record()) for p in predictions]
    return "\n".join(lines) + "\n" if lines else ""


def persist_run(result: RunResult, out_dir: Union[str, Path]) -> Path:
    """Write manifest, predictions, and the raw-response audit log.

    The directory name is the run id, a hash of the manifest content, so
    identical configurations land in identical locations.
    """
    run_dir = Path(out_dir) / result.run_id
    run_dir.mkdir(parents=True, exist_ok=True)
    (run_dir / "manifest.json").write_text(
        json.dumps(result.manifest, sort_keys=True, ensure_ascii=False, indent=2) + "\n",
        encoding="utf-8",
    )
    (run_dir / "predictions.jsonl").write_text(
        predictions_jsonl(result.predictions), encoding="utf-8"
    )
    with (run_dir / "responses.jsonl").open("w", encoding="utf-8") as handle:
        for entry in result.audit:
            handle.write(_canonical_json(entry))
            handle.write("\n")
    result.run_dir = run_dir
    return run_dir


def spec_from_manifest(manifest: dict) -> ExperimentSpec:
    """Rebuild an experiment spec from a persisted manifest."""
    templates = {}
    for role, meta in manifest.get("templates", {}).items():
        templates[role] = meta["template_id"]
    exemplar_meta = manifest.get("exemplars", {})
    return ExperimentSpec(
        method=Method(manifest["method"]),
        task=Task(manifest["task"]),
        backends=tuple(BackendDescriptor.from_dict(d) for d in manifest["backends"]),
        templates=templates,
        exemplar_k=exemplar_meta.get("k", 3),
        seed=manifest["seed"],
        checkpoints=tuple(manifest.get("checkpoints", ())),
    )


def run_from_manifest(
    manifest: dict,
    posts: Sequence[LabeledPost],
    train_posts: Sequence[LabeledPost] | None = None,
    out_dir: Union[str, Path, None] = None,
) -> RunResult:
    """Re-execute a persisted run; with stub backends the predictions file
    is byte-identical to the original."""
    spec = spec_from_manifest(manifest)
    if spec.method is Method.EPP:
        overrides = {
            post_id: AggressionLabel[name]
            for post_id, name in manifest.get("aggression_overrides", {}).items()
        }
        return run_epp(posts, spec, out_dir=out_dir, aggression_overrides=overrides or None)
    return run_baseline(posts, spec, train_posts=train_posts, out_dir=out_dir)


def load_predictions(path: Union[str, Path], task: Task) -> list[Prediction]:
    """Read a persisted predictions file back into Prediction objects."""
    out = []
    for line in Path(path).read_text(encoding="utf-8").splitlines():
        if not line.strip():
            continue
        record = json.loads(line)
        agg = record.get("aggression_annotation")
        out.append(
            Prediction(
                post_id=record["post_id"],
                gold=label_from_name(task, record["gold"]),
                predicted=(
                    None
                    if record["predicted"] is None
                    else label_from_name(task, record["predicted"])
                ),
                failure=record.get("failure"),
                aggression_annotation=None if agg is None else AggressionLabel[agg],
                stage1_fallback=record.get("stage1_fallback", False),
                provenance=record.get("provenance", {}),
                response_text=record.get("response_text"),
                stage1_response_text=record.get("stage1_response_text"),
            )
        )
    return out
