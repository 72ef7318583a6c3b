import dataclasses
import json

import pytest

from cbdetect import (
    AggressionLabel,
    ExperimentSpec,
    Method,
    PipelineError,
    PromptError,
    Task,
    build_confusion,
    class_name_stub,
    compute_metrics,
    constant_stub,
    label_space,
    load_template,
    make_stub,
    render_enriched,
    run_baseline,
    run_epp,
    run_from_manifest,
    synth_fixture,
)
from cbdetect.pipeline import predictions_jsonl


def cb_spec(method=Method.ZERO_SHOT, **kwargs):
    defaults = dict(
        method=method,
        task=Task.CYBERBULLYING,
        backends=(class_name_stub(Task.CYBERBULLYING),),
    )
    defaults.update(kwargs)
    return ExperimentSpec(**defaults)


def epp_spec(stage1=None, stage2=None):
    return ExperimentSpec(
        method=Method.EPP,
        task=Task.CYBERBULLYING,
        backends=(
            stage1 or constant_stub("Covertly Aggressive", backend_id="agg-stage"),
            stage2 or class_name_stub(Task.CYBERBULLYING, backend_id="cb-stage"),
        ),
    )


class TestSpecValidation:
    def test_epp_needs_two_backends(self):
        with pytest.raises(PipelineError, match="two backends"):
            ExperimentSpec(
                method=Method.EPP,
                task=Task.CYBERBULLYING,
                backends=(class_name_stub(Task.CYBERBULLYING),),
            )

    def test_baseline_takes_one_backend(self):
        with pytest.raises(PipelineError, match="exactly one backend"):
            cb_spec(backends=(class_name_stub(Task.CYBERBULLYING),) * 2)

    def test_epp_is_cyberbullying_only(self):
        with pytest.raises(PipelineError, match="cyberbullying"):
            ExperimentSpec(
                method=Method.EPP,
                task=Task.AGGRESSION,
                backends=(
                    constant_stub("Covertly Aggressive"),
                    class_name_stub(Task.CYBERBULLYING),
                ),
            )


class TestRunBaseline:
    def test_zero_shot_stub_run_all_correct(self, cyberbullying_fixture):
        result = run_baseline(cyberbullying_fixture, cb_spec())
        assert len(result.predictions) == 12
        assert all(
            p.predicted is post.label
            for p, post in zip(result.predictions, cyberbullying_fixture)
        )

    def test_order_preserved_with_parallel_backend(self, cyberbullying_fixture):
        stub = class_name_stub(Task.CYBERBULLYING)
        stub = dataclasses.replace(stub, max_parallel_requests=4)
        result = run_baseline(cyberbullying_fixture, cb_spec(backends=(stub,)))
        assert [p.post_id for p in result.predictions] == [
            post.id for post in cyberbullying_fixture
        ]

    def test_few_shot_fails_fast_before_any_backend_call(self, cyberbullying_fixture):
        calls = []
        probe = make_stub([("", "Religion")])

        import cbdetect.backend as backend_mod

        original = backend_mod._classify_stub

        def counting(prompt, descriptor):
            calls.append(prompt.provenance.post_id)
            return original(prompt, descriptor)

        backend_mod._classify_stub = counting
        try:
            undersized = cyberbullying_fixture[:4]  # one record per class
            with pytest.raises(PromptError, match="cannot select k=3"):
                run_baseline(
                    cyberbullying_fixture,
                    cb_spec(method=Method.FEW_SHOT, backends=(probe,)),
                    train_posts=undersized,
                )
        finally:
            backend_mod._classify_stub = original
        assert calls == []

    def test_few_shot_runs_with_adequate_pool(self, cyberbullying_fixture):
        pool = synth_fixture(4, Task.CYBERBULLYING, seed=99)
        result = run_baseline(
            cyberbullying_fixture, cb_spec(method=Method.FEW_SHOT), train_posts=pool
        )
        assert len(result.predictions) == 12
        assert result.manifest["exemplars"]["k"] == 3
        assert len(result.manifest["exemplars"]["source_ids"]) == 12

    def test_transport_failure_is_isolated(self, cyberbullying_fixture):
        target = cyberbullying_fixture[5]
        failing = make_stub(
            [(lab.display_name, lab.display_name) for lab in label_space(Task.CYBERBULLYING)],
            fail_patterns=[target.text],
        )
        clean_result = run_baseline(cyberbullying_fixture, cb_spec())
        result = run_baseline(cyberbullying_fixture, cb_spec(backends=(failing,)))
        assert len(result.predictions) == 12
        failed = [p for p in result.predictions if p.failure]
        assert len(failed) == 1 and failed[0].post_id == target.id
        assert failed[0].failure.startswith("transport_error")
        for clean, other in zip(clean_result.predictions, result.predictions):
            if other.post_id != target.id:
                assert clean.predicted is other.predicted

    def test_parse_failure_outcome(self, cyberbullying_fixture):
        gibberish = constant_stub("&&&&")
        result = run_baseline(cyberbullying_fixture, cb_spec(backends=(gibberish,)))
        assert all(p.failure == "parse_failure" for p in result.predictions)
        assert all(p.predicted is None for p in result.predictions)

    def test_empty_split_rejected(self):
        with pytest.raises(PipelineError, match="empty"):
            run_baseline([], cb_spec())

    def test_epp_method_rejected(self, cyberbullying_fixture):
        with pytest.raises(PipelineError, match="run_epp"):
            run_baseline(cyberbullying_fixture, epp_spec())

    def test_run_dir_layout(self, tmp_path, cyberbullying_fixture):
        result = run_baseline(cyberbullying_fixture, cb_spec(), out_dir=tmp_path)
        assert result.run_dir is not None
        assert (result.run_dir / "manifest.json").is_file()
        assert (result.run_dir / "predictions.jsonl").is_file()
        assert (result.run_dir / "responses.jsonl").is_file()
        assert result.run_dir.name == result.run_id


class TestRunEpp:
    def test_every_prediction_carries_aggression_annotation(self, cyberbullying_fixture):
        result = run_epp(cyberbullying_fixture, epp_spec())
        assert len(result.predictions) == 12
        assert all(p.aggression_annotation is not None for p in result.predictions)
        assert all(not p.stage1_fallback for p in result.predictions)

    def test_stage2_prompts_start_with_stage1_prediction(self, cyberbullying_fixture):
        result = run_epp(
            cyberbullying_fixture,
            epp_spec(stage1=constant_stub("Overtly Aggressive", backend_id="agg")),
        )
        stage2 = [e for e in result.audit if e["stage"] == "stage2"]
        assert len(stage2) == 12
        for entry in stage2:
            assert entry["rendered_text"].startswith(
                "This post was predicted as Overtly Aggressive. Based on this, "
                "classify the following content for cyberbullying."
            )

    def test_epp_decomposition_byte_exact(self, cyberbullying_fixture):
        result = run_epp(cyberbullying_fixture, epp_spec())
        template = load_template("enriched_v1", Task.CYBERBULLYING)
        stage2 = {e["post_id"]: e["rendered_text"] for e in result.audit if e["stage"] == "stage2"}
        for post, prediction in zip(cyberbullying_fixture, result.predictions):
            expected = render_enriched(post, prediction.aggression_annotation, template)
            assert stage2[post.id] == expected.rendered_text

    def test_injected_stage1_parse_failure_flags_exactly_one_record(
        self, cyberbullying_fixture
    ):
        target = cyberbullying_fixture[7]
        stage1 = make_stub(
            [(target.text, "%%%"), ("", "Covertly Aggressive")], backend_id="agg-stage"
        )
        clean = run_epp(cyberbullying_fixture, epp_spec())
        result = run_epp(cyberbullying_fixture, epp_spec(stage1=stage1))
        flagged = [p for p in result.predictions if p.stage1_fallback]
        assert len(flagged) == 1
        assert flagged[0].post_id == target.id
        assert flagged[0].aggression_annotation is AggressionLabel.NAG
        for before, after in zip(clean.predictions, result.predictions):
            if after.post_id != target.id:
                assert before.predicted is after.predicted
                assert before.stage1_fallback == after.stage1_fallback

    def test_swapping_stage1_stub_changes_only_display_span(self, cyberbullying_fixture):
        nag_run = run_epp(
            cyberbullying_fixture, epp_spec(stage1=constant_stub("Not-Aggressive"))
        )
        cag_run = run_epp(
            cyberbullying_fixture, epp_spec(stage1=constant_stub("Covertly Aggressive"))
        )
        nag_prompts = {e["post_id"]: e["rendered_text"] for e in nag_run.audit if e["stage"] == "stage2"}
        cag_prompts = {e["post_id"]: e["rendered_text"] for e in cag_run.audit if e["stage"] == "stage2"}
        for post_id, nag_text in nag_prompts.items():
            cag_text = cag_prompts[post_id]
            assert nag_text.replace("Not-Aggressive", "@", 1) == cag_text.replace(
                "Covertly Aggressive", "@", 1
            )

    def test_macro_f1_is_one_on_fixture(self, cyberbullying_fixture):
        result = run_epp(cyberbullying_fixture, epp_spec())
        cm = build_confusion(result.predictions, label_space(Task.CYBERBULLYING))
        assert compute_metrics(cm).macro_f1 == 1.0


class TestGoldOverrideDiagnostics:
    def test_overrides_replace_stage1_and_are_marked(self, cyberbullying_fixture):
        target = cyberbullying_fixture[3]
        overrides = {target.id: AggressionLabel.OAG}
        result = run_epp(cyberbullying_fixture, epp_spec(), aggression_overrides=overrides)
        by_id = {p.post_id: p for p in result.predictions}
        assert by_id[target.id].aggression_annotation is AggressionLabel.OAG
        assert by_id[target.id].provenance["stage1_mode"] == "gold_override"
        # everyone else still went through stage 1
        others = [p for p in result.predictions if p.post_id != target.id]
        assert all(p.provenance["stage1_mode"] == "predicted" for p in others)
        assert all(
            p.aggression_annotation is AggressionLabel.CAG for p in others
        )  # the constant stub says Covertly Aggressive
        # stage-2 prompt for the overridden record embeds the gold cue
        stage2 = {e["post_id"]: e["rendered_text"] for e in result.audit if e["stage"] == "stage2"}
        assert stage2[target.id].startswith("This post was predicted as Overtly Aggressive.")
        assert result.manifest["aggression_overrides"] == {target.id: "OAG"}

    def test_override_runs_reproduce_from_manifest(self, tmp_path, cyberbullying_fixture):
        overrides = {cyberbullying_fixture[0].id: AggressionLabel.NAG}
        first = run_epp(
            cyberbullying_fixture,
            epp_spec(),
            out_dir=tmp_path / "a",
            aggression_overrides=overrides,
        )
        manifest = json.loads((first.run_dir / "manifest.json").read_text())
        second = run_from_manifest(manifest, cyberbullying_fixture, out_dir=tmp_path / "b")
        assert (first.run_dir / "predictions.jsonl").read_bytes() == (
            second.run_dir / "predictions.jsonl"
        ).read_bytes()


class TestReproducibility:
    def test_rerun_from_manifest_is_byte_identical(self, tmp_path, cyberbullying_fixture):
        first = run_baseline(cyberbullying_fixture, cb_spec(), out_dir=tmp_path / "a")
        manifest = json.loads((first.run_dir / "manifest.json").read_text())
        second = run_from_manifest(manifest, cyberbullying_fixture, out_dir=tmp_path / "b")
        first_bytes = (first.run_dir / "predictions.jsonl").read_bytes()
        second_bytes = (second.run_dir / "predictions.jsonl").read_bytes()
        assert first_bytes == second_bytes
        assert first.run_id == second.run_id

    def test_epp_rerun_from_manifest_matches(self, tmp_path, cyberbullying_fixture):
        first = run_epp(cyberbullying_fixture, epp_spec(), out_dir=tmp_path / "a")
        manifest = json.loads((first.run_dir / "manifest.json").read_text())
        second = run_from_manifest(manifest, cyberbullying_fixture, out_dir=tmp_path / "b")
        assert predictions_jsonl(first.predictions) == predictions_jsonl(second.predictions)

    def test_few_shot_rerun_matches(self, tmp_path, cyberbullying_fixture):
        pool = synth_fixture(4, Task.CYBERBULLYING, seed=99)
        spec = cb_spec(method=Method.FEW_SHOT, seed=21)
        first = run_baseline(cyberbullying_fixture, spec, train_posts=pool, out_dir=tmp_path / "a")
        manifest = json.loads((first.run_dir / "manifest.json").read_text())
        second = run_from_manifest(
            manifest, cyberbullying_fixture, train_posts=pool, out_dir=tmp_path / "b"
        )
        assert (first.run_dir / "predictions.jsonl").read_bytes() == (
            second.run_dir / "predictions.jsonl"
        ).read_bytes()
