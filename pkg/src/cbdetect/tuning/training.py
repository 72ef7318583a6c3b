"""Adapter training: independent single-task tuning and joint multi-task.

The joint objective is the plain sum of the two per-task cross-entropies,
one per classification head. Because each head and each adapter set only
feeds its own term, the joint-loss gradient w.r.t. a head equals that
task's own cross-entropy gradient. Heads start at zero so step-0 logits
are uniform: ln(3) for aggression, ln(4) for cyberbullying.
"""

from __future__ import annotations

import json
import random
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Mapping, Sequence, Union

import numpy as np

from ..corpus import LabeledPost
from ..labels import Task, labels_in_order
from .lora import AdapterState, TuneConfig, TuningError, attach_adapters
from .network import ToyTransformer, last_unmasked_index

Pair = tuple[str, int]


@dataclass
class TaskHead:
    """Linear classification head over the pooled final-layer embedding."""

    task: Task
    weight: np.ndarray  # (n_classes, d_model)
    bias: np.ndarray  # (n_classes,)

    @classmethod
    def zeros(cls, task: Task, d_model: int) -> "TaskHead":
        n = len(labels_in_order(task))
        return cls(task=task, weight=np.zeros((n, d_model)), bias=np.zeros(n))

    def logits(self, pooled: np.ndarray) -> np.ndarray:
        return pooled @ self.weight.T + self.bias

    def trainable_arrays(self) -> dict[str, np.ndarray]:
        return {
            f"head.{self.task.value}.weight": self.weight,
            f"head.{self.task.value}.bias": self.bias,
        }


def cross_entropy(logits: np.ndarray, targets: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean softmax cross-entropy and its gradient w.r.t. the logits."""
    logits = np.atleast_2d(np.asarray(logits, dtype=float))
    targets = np.atleast_1d(np.asarray(targets, dtype=int))
    n, n_classes = logits.shape
    if targets.shape != (n,):
        raise TuningError(f"targets shape {targets.shape} does not match logits {logits.shape}")
    if targets.min() < 0 or targets.max() >= n_classes:
        raise TuningError(f"class index out of range for {n_classes} classes")
    shifted = logits - logits.max(axis=1, keepdims=True)
    log_z = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    log_probs = shifted - log_z
    loss = -log_probs[np.arange(n), targets].mean()
    grad = np.exp(log_probs)
    grad[np.arange(n), targets] -= 1.0
    return float(loss), grad / n


def mtl_joint_loss(
    logits_agg: np.ndarray,
    y_agg: Union[int, np.ndarray],
    logits_cb: np.ndarray,
    y_cb: Union[int, np.ndarray],
) -> float:
    """Unweighted sum of the two per-task cross-entropies."""
    loss_agg, _ = cross_entropy(logits_agg, y_agg)
    loss_cb, _ = cross_entropy(logits_cb, y_cb)
    return loss_agg + loss_cb


class Adam:
    """Plain adaptive-moment optimizer over a named array dict (in place)."""

    def __init__(
        self,
        params: Mapping[str, np.ndarray],
        learning_rate: float,
        beta1: float = 0.9,
        beta2: float = 0.999,
        eps: float = 1e-8,
    ):
        self.params = dict(params)
        self.lr = learning_rate
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.m = {k: np.zeros_like(v) for k, v in self.params.items()}
        self.v = {k: np.zeros_like(v) for k, v in self.params.items()}
        self.t = 0

    def step(self, grads: Mapping[str, np.ndarray]) -> None:
        self.t += 1
        for key, grad in grads.items():
            m = self.m[key]
            v = self.v[key]
            m *= self.beta1
            m += (1.0 - self.beta1) * grad
            v *= self.beta2
            v += (1.0 - self.beta2) * grad * grad
            m_hat = m / (1.0 - self.beta1**self.t)
            v_hat = v / (1.0 - self.beta2**self.t)
            self.params[key] -= self.lr * m_hat / (np.sqrt(v_hat) + self.eps)


def pairs_from_posts(posts: Sequence[LabeledPost], task: Task) -> list[Pair]:
    """(text, class index) pairs; refuses mixed-task batches."""
    pairs = []
    for post in posts:
        if post.task is not task:
            raise TuningError(
                f"post {post.id!r} has task {post.task.value}, expected {task.value}"
            )
        pairs.append((post.text, int(post.label)))
    return pairs


def _branch(
    base: ToyTransformer,
    adapters: AdapterState,
    head: TaskHead,
    pairs: Sequence[Pair],
    prefix: str,
) -> tuple[float, dict[str, np.ndarray]]:
    """Loss and trainable-parameter gradients for one task branch."""
    if not pairs:
        raise TuningError("empty batch")
    texts = [text for text, _ in pairs]
    targets = np.array([y for _, y in pairs], dtype=int)
    ids, mask = base.tokenizer.batch_encode(texts, base.config.max_len)

    hidden, cache = base.forward(ids, mask, overrides=adapters.effective_weights(base.params))
    pool_idx = last_unmasked_index(mask)
    rows = np.arange(hidden.shape[0])
    pooled = hidden[rows, pool_idx]
    logits = head.logits(pooled)
    loss, d_logits = cross_entropy(logits, targets)

    grads: dict[str, np.ndarray] = {
        f"head.{head.task.value}.weight": d_logits.T @ pooled,
        f"head.{head.task.value}.bias": d_logits.sum(axis=0),
    }
    d_hidden = np.zeros_like(hidden)
    d_hidden[rows, pool_idx] = d_logits @ head.weight
    weight_grads = base.backward(cache, d_hidden)
    grads.update(adapters.factor_grads(weight_grads, prefix=prefix))
    return loss, grads


class SftTrainer:
    """Independent single-task adapter tuning on a frozen base network.

    Each gradient step touches only the adapter factors and the task head;
    the mean batch cross-entropy is returned.
    """

    def __init__(
        self,
        base: ToyTransformer,
        task: Task,
        config: TuneConfig,
        adapters: AdapterState | None = None,
        head: TaskHead | None = None,
    ):
        self.base = base
        self.task = task
        self.config = config
        if adapters is None:
            _, adapters = attach_adapters(base, config)
        self.adapters = adapters
        self.head = head if head is not None else TaskHead.zeros(task, base.config.d_model)
        self._prefix = f"adapter.{task.value}"
        trainable = dict(self.adapters.trainable_arrays(prefix=self._prefix))
        trainable.update(self.head.trainable_arrays())
        self.optimizer = Adam(trainable, config.learning_rate)

    def loss_and_grads(self, pairs: Sequence[Pair]) -> tuple[float, dict[str, np.ndarray]]:
        return _branch(self.base, self.adapters, self.head, pairs, self._prefix)

    def step(self, pairs: Sequence[Pair]) -> float:
        loss, grads = self.loss_and_grads(pairs)
        self.optimizer.step(grads)
        return loss

    def step_posts(self, posts: Sequence[LabeledPost]) -> float:
        return self.step(pairs_from_posts(posts, self.task))

    def train(self, posts: Sequence[LabeledPost], epochs: int | None = None) -> list[dict]:
        """Epoch loop with seeded shuffling; one metrics record per step."""
        pairs = pairs_from_posts(posts, self.task)
        epochs = self.config.epochs if epochs is None else epochs
        rng = random.Random(self.config.seed)
        records = []
        step = 0
        for epoch in range(epochs):
            order = list(pairs)
            rng.shuffle(order)
            for start in range(0, len(order), self.config.batch_size):
                batch = order[start : start + self.config.batch_size]
                loss = self.step(batch)
                step += 1
                records.append(
                    {"step": step, "epoch": epoch + 1, "task": self.task.value, "loss": loss}
                )
        return records

    def predict_logits(self, texts: Sequence[str]) -> np.ndarray:
        ids, mask = self.base.tokenizer.batch_encode(texts, self.base.config.max_len)
        hidden, _ = self.base.forward(
            ids, mask, overrides=self.adapters.effective_weights(self.base.params)
        )
        pooled = hidden[np.arange(hidden.shape[0]), last_unmasked_index(mask)]
        return self.head.logits(pooled)


class MtlTrainer:
    """Joint tuning: one optimizer step on the summed per-task losses.

    Two task-tagged adapter sets share the frozen base; the backward pass
    of the joint loss updates both sets and both heads in a single step.
    """

    def __init__(
        self,
        base: ToyTransformer,
        config: TuneConfig,
        adapters: Mapping[Task, AdapterState] | None = None,
        heads: Mapping[Task, TaskHead] | None = None,
    ):
        self.base = base
        self.config = config
        if adapters is None:
            adapters = {
                # distinct seeds so the two Down inits differ
                Task.AGGRESSION: attach_adapters(base, config, seed_offset=0)[1],
                Task.CYBERBULLYING: attach_adapters(base, config, seed_offset=1)[1],
            }
        self.adapters = dict(adapters)
        if heads is None:
            heads = {
                task: TaskHead.zeros(task, base.config.d_model)
                for task in (Task.AGGRESSION, Task.CYBERBULLYING)
            }
        self.heads = dict(heads)
        trainable: dict[str, np.ndarray] = {}
        for task in (Task.AGGRESSION, Task.CYBERBULLYING):
            trainable.update(self.adapters[task].trainable_arrays(prefix=f"adapter.{task.value}"))
            trainable.update(self.heads[task].trainable_arrays())
        self.optimizer = Adam(trainable, config.learning_rate)

    def joint_loss_and_grads(
        self, pairs_agg: Sequence[Pair], pairs_cb: Sequence[Pair]
    ) -> tuple[float, float, float, dict[str, np.ndarray]]:
        loss_agg, grads_agg = _branch(
            self.base,
            self.adapters[Task.AGGRESSION],
            self.heads[Task.AGGRESSION],
            pairs_agg,
            f"adapter.{Task.AGGRESSION.value}",
        )
        loss_cb, grads_cb = _branch(
            self.base,
            self.adapters[Task.CYBERBULLYING],
            self.heads[Task.CYBERBULLYING],
            pairs_cb,
            f"adapter.{Task.CYBERBULLYING.value}",
        )
        grads = dict(grads_agg)
        grads.update(grads_cb)
        return loss_agg + loss_cb, loss_agg, loss_cb, grads

    def step(
        self, pairs_agg: Sequence[Pair], pairs_cb: Sequence[Pair]
    ) -> tuple[float, float, float]:
        joint, loss_agg, loss_cb, grads = self.joint_loss_and_grads(pairs_agg, pairs_cb)
        self.optimizer.step(grads)
        return joint, loss_agg, loss_cb

    def train(
        self,
        posts_agg: Sequence[LabeledPost],
        posts_cb: Sequence[LabeledPost],
        epochs: int | None = None,
    ) -> list[dict]:
        """Alternating per-task mini-batches summed inside every step."""
        pairs_agg = pairs_from_posts(posts_agg, Task.AGGRESSION)
        pairs_cb = pairs_from_posts(posts_cb, Task.CYBERBULLYING)
        epochs = self.config.epochs if epochs is None else epochs
        rng = random.Random(self.config.seed)
        records = []
        step = 0
        size = self.config.batch_size
        for epoch in range(epochs):
            order_agg = list(pairs_agg)
            order_cb = list(pairs_cb)
            rng.shuffle(order_agg)
            rng.shuffle(order_cb)
            n_batches = max(
                (len(order_agg) + size - 1) // size, (len(order_cb) + size - 1) // size
            )
            for b in range(n_batches):
                batch_agg = _wrap_slice(order_agg, b * size, size)
                batch_cb = _wrap_slice(order_cb, b * size, size)
                joint, loss_agg, loss_cb = self.step(batch_agg, batch_cb)
                step += 1
                records.append(
                    {
                        "step": step,
                        "epoch": epoch + 1,
                        "loss_aggression": loss_agg,
                        "loss_cyberbullying": loss_cb,
                        "joint_loss": joint,
                    }
                )
        return records

    def predict_logits(self, texts: Sequence[str], task: Task) -> np.ndarray:
        ids, mask = self.base.tokenizer.batch_encode(texts, self.base.config.max_len)
        hidden, _ = self.base.forward(
            ids, mask, overrides=self.adapters[task].effective_weights(self.base.params)
        )
        pooled = hidden[np.arange(hidden.shape[0]), last_unmasked_index(mask)]
        return self.heads[task].logits(pooled)


def _wrap_slice(items: list, start: int, size: int) -> list:
    """Cyclic batch window so the shorter task pool keeps contributing."""
    if not items:
        raise TuningError("empty batch")
    count = min(size, len(items))
    return [items[(start + i) % len(items)] for i in range(count)]


def write_metrics_log(records: Iterable[dict], path: Union[str, Path]) -> Path:
    """Line-delimited training metrics."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", encoding="utf-8") as handle:
        for record in records:
            handle.write(json.dumps(record, sort_keys=True))
            handle.write("\n")
    return path
