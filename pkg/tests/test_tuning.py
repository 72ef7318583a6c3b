import math

import numpy as np
import pytest

from cbdetect import Task, synth_fixture
from cbdetect.tuning import (
    MtlTrainer,
    SftTrainer,
    ToyNetConfig,
    ToyTokenizer,
    ToyTransformer,
    TuneConfig,
    TuningError,
    attach_adapters,
    cross_entropy,
    load_checkpoint,
    mtl_joint_loss,
    pairs_from_posts,
    pool_embedding,
    save_checkpoint,
    write_metrics_log,
)

SMALL = ToyNetConfig(vocab_size=32, d_model=8, n_layers=1, d_ff=16, seed=11)


@pytest.fixture
def base():
    return ToyTransformer(ToyNetConfig(seed=3))


@pytest.fixture
def agg_pairs():
    return pairs_from_posts(synth_fixture(4, Task.AGGRESSION, seed=1), Task.AGGRESSION)


@pytest.fixture
def cb_pairs():
    return pairs_from_posts(synth_fixture(4, Task.CYBERBULLYING, seed=2), Task.CYBERBULLYING)


class TestTokenizer:
    def test_stable_across_instances(self):
        a, b = ToyTokenizer(128), ToyTokenizer(128)
        assert a.encode("Covertly Aggressive post") == b.encode("covertly aggressive POST")

    def test_empty_text_maps_to_unk(self):
        assert ToyTokenizer(128).encode("\U0001f600\U0001f600") == [ToyTokenizer.UNK]

    def test_batch_padding_and_mask(self):
        ids, mask = ToyTokenizer(128).batch_encode(["one two three", "one"])
        assert ids.shape == mask.shape == (2, 3)
        assert mask.tolist() == [[True, True, True], [True, False, False]]
        assert ids[1, 1] == ToyTokenizer.PAD


class TestAdapters:
    def test_zero_init_identity(self, base):
        ids, mask = base.tokenizer.batch_encode(["several words in here", "tiny"])
        before, _ = base.forward(ids, mask)
        adapted, _ = attach_adapters(base, TuneConfig(rank_r=8, seed=5))
        after, _ = adapted.forward(ids, mask)
        assert np.abs(after - before).max() <= 1e-6

    def test_rank_bound_after_training(self, base, agg_pairs):
        trainer = SftTrainer(
            base, Task.AGGRESSION, TuneConfig(rank_r=8, learning_rate=1e-2, seed=5)
        )
        for _ in range(25):
            trainer.step(agg_pairs)
        for name in trainer.adapters.targets:
            delta = trainer.adapters.delta(name)
            singular = np.linalg.svd(delta, compute_uv=False)
            assert singular[0] > 0
            assert (singular[8:] <= 1e-8 * singular[0]).all()

    def test_parameter_count_single_target(self):
        base = ToyTransformer(SMALL)
        config = TuneConfig(rank_r=2, target_layers="layers.0.attn.wq", seed=0)
        _, state = attach_adapters(base, config)
        d_out, d_in = base.params["layers.0.attn.wq"].shape
        assert state.targets == ["layers.0.attn.wq"]
        assert state.parameter_count() == config.rank_r * (d_in + d_out)

    def test_selector_matching_nothing(self, base):
        with pytest.raises(TuningError, match="matches no attachable weight"):
            attach_adapters(base, TuneConfig(target_layers="conv"))

    def test_frozen_base_bitwise_after_100_steps(self, base, agg_pairs):
        snapshot = {k: v.copy() for k, v in base.params.items()}
        trainer = SftTrainer(
            base, Task.AGGRESSION, TuneConfig(rank_r=4, learning_rate=1e-2, seed=5)
        )
        for _ in range(100):
            trainer.step(agg_pairs)
        for key, value in snapshot.items():
            assert np.array_equal(value, base.params[key])


class TestPooling:
    def test_last_unmasked_position(self):
        hidden = np.arange(24, dtype=float).reshape(1, 4, 6)
        mask = np.array([[True, True, True, False]])
        assert np.array_equal(pool_embedding(hidden, mask)[0], hidden[0, 2])

    def test_single_sequence_signature(self):
        hidden = np.arange(12, dtype=float).reshape(4, 3)
        mask = np.array([True, True, False, False])
        assert np.array_equal(pool_embedding(hidden, mask), hidden[1])

    def test_fully_masked_is_an_error(self):
        hidden = np.zeros((1, 3, 2))
        with pytest.raises(ValueError, match="fully masked"):
            pool_embedding(hidden, np.zeros((1, 3), dtype=bool))

    def test_right_padded_batch_matches_unpadded_single(self, base):
        texts = ["a longer example with several tokens", "tiny one"]
        ids, mask = base.tokenizer.batch_encode(texts)
        hidden_batch, _ = base.forward(ids, mask)
        pooled_batch = pool_embedding(hidden_batch, mask)

        ids_single, mask_single = base.tokenizer.batch_encode([texts[1]])
        hidden_single, _ = base.forward(ids_single, mask_single)
        pooled_single = pool_embedding(hidden_single, mask_single)
        assert np.allclose(pooled_batch[1], pooled_single[0], rtol=0.0, atol=1e-12)


class TestLosses:
    def test_uniform_logits_joint_loss(self):
        loss = mtl_joint_loss(np.zeros(3), 0, np.zeros(4), 2)
        assert loss == pytest.approx(math.log(3) + math.log(4), abs=1e-12)

    def test_sum_contract(self):
        # engineer logits with known per-task CE values 0.5 and 1.25
        logits_a = np.array([0.0, -10.0, -10.0])
        ce_a, _ = cross_entropy(logits_a, np.array([0]))
        logits_b = np.array([0.0, 1.0, 2.0, 3.0])
        ce_b, _ = cross_entropy(logits_b, np.array([1]))
        assert mtl_joint_loss(logits_a, 0, logits_b, 1) == pytest.approx(ce_a + ce_b, rel=1e-12)

    def test_additivity_against_independent_oracle(self):
        rng = np.random.default_rng(0)
        for _ in range(50):
            la = rng.normal(0, 2, 3)
            lb = rng.normal(0, 2, 4)
            ya, yb = rng.integers(0, 3), rng.integers(0, 4)

            def naive_ce(logits, y):
                probs = np.exp(logits) / np.exp(logits).sum()
                return -math.log(probs[y])

            expected = naive_ce(la, ya) + naive_ce(lb, yb)
            got = mtl_joint_loss(la, int(ya), lb, int(yb))
            assert abs(got - expected) / abs(expected) <= 1e-9

    def test_index_out_of_range(self):
        with pytest.raises(TuningError, match="out of range"):
            mtl_joint_loss(np.zeros(3), 5, np.zeros(4), 0)


class TestSftStep:
    def test_loss_decreases_below_initial_ln3(self, agg_pairs):
        base = ToyTransformer(ToyNetConfig(seed=0))
        trainer = SftTrainer(
            base, Task.AGGRESSION, TuneConfig(rank_r=8, learning_rate=1e-2, seed=2)
        )
        initial = trainer.loss_and_grads(agg_pairs)[0]
        assert initial == pytest.approx(math.log(3), abs=1e-12)
        last = None
        for _ in range(50):
            last = trainer.step(agg_pairs)
        assert last < initial

    def test_zero_learning_rate_leaves_adapters_unchanged(self, base, agg_pairs):
        trainer = SftTrainer(base, Task.AGGRESSION, TuneConfig(learning_rate=0.0, seed=2))
        before = {
            name: (f.down.copy(), f.up.copy())
            for name, f in trainer.adapters.factors.items()
        }
        trainer.step(agg_pairs)
        for name, (down, up) in before.items():
            assert np.array_equal(down, trainer.adapters.factors[name].down)
            assert np.array_equal(up, trainer.adapters.factors[name].up)

    def test_mixed_task_batch_rejected(self, base):
        posts = list(synth_fixture(1, Task.AGGRESSION, seed=1)) + list(
            synth_fixture(1, Task.CYBERBULLYING, seed=1)
        )
        with pytest.raises(TuningError, match="task"):
            pairs_from_posts(posts, Task.AGGRESSION)

    def test_empty_batch_rejected(self, base):
        trainer = SftTrainer(base, Task.AGGRESSION, TuneConfig(seed=2))
        with pytest.raises(TuningError, match="empty batch"):
            trainer.step([])


class TestMtlStep:
    def test_joint_loss_at_step_zero(self, base, agg_pairs, cb_pairs):
        trainer = MtlTrainer(base, TuneConfig(seed=2))
        joint, loss_agg, loss_cb, _ = trainer.joint_loss_and_grads(agg_pairs, cb_pairs)
        assert joint == pytest.approx(math.log(3) + math.log(4), abs=1e-12)
        assert joint == pytest.approx(loss_agg + loss_cb, rel=1e-12)

    def test_head_gradient_separation(self, base, agg_pairs, cb_pairs):
        trainer = MtlTrainer(base, TuneConfig(learning_rate=1e-2, seed=2))
        # move off the zero point so gradients are generic
        for _ in range(3):
            trainer.step(agg_pairs, cb_pairs)
        _, _, _, joint_grads = trainer.joint_loss_and_grads(agg_pairs, cb_pairs)

        from cbdetect.tuning.training import _branch

        _, solo = _branch(
            base,
            trainer.adapters[Task.AGGRESSION],
            trainer.heads[Task.AGGRESSION],
            agg_pairs,
            "adapter.aggression",
        )
        key = "head.aggression.weight"
        assert np.array_equal(joint_grads[key], solo[key])
        key = "head.cyberbullying.weight"
        assert key in joint_grads and key not in solo

    def test_both_adapter_sets_move(self, base, agg_pairs, cb_pairs):
        trainer = MtlTrainer(base, TuneConfig(learning_rate=1e-2, seed=2))
        for _ in range(20):
            trainer.step(agg_pairs, cb_pairs)
        for task in (Task.AGGRESSION, Task.CYBERBULLYING):
            norms = trainer.adapters[task].update_norms()
            assert max(norms.values()) > 0

    def test_empty_batch_rejected(self, base, agg_pairs):
        trainer = MtlTrainer(base, TuneConfig(seed=2))
        with pytest.raises(TuningError, match="empty batch"):
            trainer.step(agg_pairs, [])


class TestGradientCheck:
    def test_analytic_matches_central_differences(self):
        base = ToyTransformer(SMALL)
        trainer = MtlTrainer(base, TuneConfig(rank_r=2, learning_rate=1e-3, seed=7))
        rng = np.random.default_rng(99)
        for arr in trainer.optimizer.params.values():
            arr += rng.normal(0, 0.05, arr.shape)

        pairs_a = pairs_from_posts(synth_fixture(2, Task.AGGRESSION, seed=1), Task.AGGRESSION)
        pairs_c = pairs_from_posts(
            synth_fixture(2, Task.CYBERBULLYING, seed=2), Task.CYBERBULLYING
        )
        _, _, _, grads = trainer.joint_loss_and_grads(pairs_a, pairs_c)

        step = 1e-5
        worst = 0.0
        for key, arr in trainer.optimizer.params.items():
            for idx in np.ndindex(arr.shape):
                original = arr[idx]
                arr[idx] = original + step
                plus = trainer.joint_loss_and_grads(pairs_a, pairs_c)[0]
                arr[idx] = original - step
                minus = trainer.joint_loss_and_grads(pairs_a, pairs_c)[0]
                arr[idx] = original
                finite = (plus - minus) / (2 * step)
                analytic = grads[key][idx]
                rel = abs(analytic - finite) / max(abs(analytic), abs(finite), 1e-8)
                worst = max(worst, rel)
        assert worst <= 1e-4


class TestCheckpoint:
    def test_round_trip_identical(self, tmp_path, base, agg_pairs):
        trainer = SftTrainer(
            base, Task.AGGRESSION, TuneConfig(rank_r=4, learning_rate=1e-2, seed=5)
        )
        for _ in range(10):
            trainer.step(agg_pairs)
        path = save_checkpoint(
            tmp_path / "ckpt.npz",
            base.config,
            trainer.config,
            {Task.AGGRESSION: trainer.adapters},
            {Task.AGGRESSION: trainer.head},
        )
        bundle = load_checkpoint(path)
        assert bundle.model_config == base.config
        assert bundle.tune_config == trainer.config
        loaded = bundle.adapters[Task.AGGRESSION]
        for name, factors in trainer.adapters.factors.items():
            assert np.array_equal(loaded.factors[name].down, factors.down)
            assert np.array_equal(loaded.factors[name].up, factors.up)
        assert np.array_equal(bundle.heads[Task.AGGRESSION].weight, trainer.head.weight)

    def test_rebuilt_base_matches(self, tmp_path, base):
        rebuilt = ToyTransformer(base.config)
        for key, value in base.params.items():
            assert np.array_equal(value, rebuilt.params[key])

    def test_metrics_log_line_count(self, tmp_path, base):
        posts = synth_fixture(4, Task.AGGRESSION, seed=1)
        trainer = SftTrainer(
            base, Task.AGGRESSION, TuneConfig(batch_size=4, epochs=3, seed=5)
        )
        records = trainer.train(posts)
        path = write_metrics_log(records, tmp_path / "metrics.jsonl")
        assert len(path.read_text().splitlines()) == len(records) == 9
