"""Toy decoder-style transformer stack with exact manual gradients.

This is the desk-scale stand-in for a real language model: a few causal
single-head attention + GELU-MLP blocks over hashed word embeddings, all in
float64 numpy. It exists so that every tuning contract (adapter identity at
zero init, rank bounds, frozen base, loss additivity, gradient correctness)
can be verified in seconds without accelerators.

Weight matrices use the (d_out, d_in) convention: a projection is applied
as ``x @ W.T``. ``forward`` accepts an overrides mapping so adapted runs
can substitute effective weights without ever touching the base arrays.
"""

from __future__ import annotations

import hashlib
import re
from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np
from scipy.special import erf

_WORD_RE = re.compile(r"[\w']+", re.UNICODE)

_SQRT2 = np.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / np.sqrt(2.0 * np.pi)


def _gelu(x: np.ndarray) -> np.ndarray:
    return 0.5 * x * (1.0 + erf(x / _SQRT2))


def _gelu_grad(x: np.ndarray) -> np.ndarray:
    return 0.5 * (1.0 + erf(x / _SQRT2)) + x * np.exp(-0.5 * x * x) * _INV_SQRT_2PI


class ToyTokenizer:
    """Deterministic hashing tokenizer.

    Word ids come from sha1, not the process hash, so encodings are stable
    across runs and machines. Id 0 is padding, id 1 marks text with no
    word-like tokens at all (e.g. emoji-only posts).
    """

    PAD = 0
    UNK = 1

    def __init__(self, vocab_size: int):
        if vocab_size < 3:
            raise ValueError("vocab_size must be >= 3")
        self.vocab_size = vocab_size

    def encode(self, text: str) -> list[int]:
        words = _WORD_RE.findall(text.lower())
        if not words:
            return [self.UNK]
        span = self.vocab_size - 2
        return [
            2 + int(hashlib.sha1(w.encode("utf-8")).hexdigest()[:8], 16) % span
            for w in words
        ]

    def batch_encode(
        self, texts: Sequence[str], max_len: int | None = None
    ) -> tuple[np.ndarray, np.ndarray]:
        """Right-padded id matrix plus its boolean attention mask."""
        encoded = [self.encode(t) for t in texts]
        if max_len is not None:
            encoded = [e[:max_len] for e in encoded]
        width = max(len(e) for e in encoded)
        ids = np.zeros((len(encoded), width), dtype=np.int64)
        mask = np.zeros((len(encoded), width), dtype=bool)
        for row, e in enumerate(encoded):
            ids[row, : len(e)] = e
            mask[row, : len(e)] = True
        return ids, mask


@dataclass(frozen=True)
class ToyNetConfig:
    # vocab 128 keeps hash collisions away from the class-cue words the
    # synthetic fixtures rely on
    vocab_size: int = 128
    d_model: int = 16
    n_layers: int = 2
    d_ff: int = 32
    max_len: int = 32
    seed: int = 0

    def to_dict(self) -> dict:
        return {
            "vocab_size": self.vocab_size,
            "d_model": self.d_model,
            "n_layers": self.n_layers,
            "d_ff": self.d_ff,
            "max_len": self.max_len,
            "seed": self.seed,
        }

    @classmethod
    def from_dict(cls, data: Mapping) -> "ToyNetConfig":
        return cls(**{k: int(v) for k, v in data.items()})


def _masked_softmax(scores: np.ndarray) -> np.ndarray:
    """Row softmax where -inf marks disallowed keys; all-masked rows -> 0."""
    row_max = scores.max(axis=-1, keepdims=True)
    safe_max = np.where(np.isfinite(row_max), row_max, 0.0)
    expd = np.exp(scores - safe_max)
    denom = expd.sum(axis=-1, keepdims=True)
    return expd / np.where(denom > 0.0, denom, 1.0)


class ToyTransformer:
    """Randomly initialized causal transformer; parameters never trained
    directly, only through attached low-rank adapters."""

    def __init__(self, config: ToyNetConfig):
        self.config = config
        rng = np.random.default_rng(config.seed)
        d, f = config.d_model, config.d_ff
        params: dict[str, np.ndarray] = {
            "embed": rng.normal(0.0, 1.0, (config.vocab_size, d))
        }
        for i in range(config.n_layers):
            for proj in ("wq", "wk", "wv", "wo"):
                params[f"layers.{i}.attn.{proj}"] = rng.normal(0.0, d**-0.5, (d, d))
            params[f"layers.{i}.mlp.w1"] = rng.normal(0.0, d**-0.5, (f, d))
            params[f"layers.{i}.mlp.w2"] = rng.normal(0.0, f**-0.5, (d, f))
        self.params = params
        self.tokenizer = ToyTokenizer(config.vocab_size)

    @property
    def weight_names(self) -> list[str]:
        return list(self.params)

    @property
    def attachable_names(self) -> list[str]:
        """Weight matrices that can host a low-rank adapter."""
        return [n for n in self.params if n != "embed"]

    def forward(
        self,
        ids: np.ndarray,
        mask: np.ndarray,
        overrides: Mapping[str, np.ndarray] | None = None,
    ) -> tuple[np.ndarray, dict]:
        """Final-layer hidden states (B, T, d) plus the backward cache."""
        if ids.ndim != 2 or mask.shape != ids.shape:
            raise ValueError("ids and mask must both be (batch, seq)")

        def weight(name: str) -> np.ndarray:
            if overrides is not None and name in overrides:
                return overrides[name]
            return self.params[name]

        _, seq = ids.shape
        scale = self.config.d_model**-0.5
        causal = np.tril(np.ones((seq, seq), dtype=bool))
        allowed = mask[:, None, :] & causal[None, :, :]

        x = weight("embed")[ids]
        layer_caches = []
        used: dict[str, np.ndarray] = {"embed": weight("embed")}
        for i in range(self.config.n_layers):
            names = {
                "wq": f"layers.{i}.attn.wq",
                "wk": f"layers.{i}.attn.wk",
                "wv": f"layers.{i}.attn.wv",
                "wo": f"layers.{i}.attn.wo",
                "w1": f"layers.{i}.mlp.w1",
                "w2": f"layers.{i}.mlp.w2",
            }
            w = {k: weight(n) for k, n in names.items()}
            used.update({n: w[k] for k, n in names.items()})

            q = x @ w["wq"].T
            k = x @ w["wk"].T
            v = x @ w["wv"].T
            scores = (q @ k.transpose(0, 2, 1)) * scale
            scores = np.where(allowed, scores, -np.inf)
            attn = _masked_softmax(scores)
            mixed = attn @ v
            x_attn = x + mixed @ w["wo"].T

            h_pre = x_attn @ w["w1"].T
            h = _gelu(h_pre)
            x_out = x_attn + h @ w["w2"].T

            layer_caches.append(
                {"x": x, "q": q, "k": k, "v": v, "attn": attn, "mixed": mixed,
                 "x_attn": x_attn, "h_pre": h_pre, "h": h, "names": names, "w": w}
            )
            x = x_out

        cache = {"ids": ids, "layers": layer_caches, "used": used, "scale": scale}
        return x, cache

    def backward(self, cache: dict, d_hidden: np.ndarray) -> dict[str, np.ndarray]:
        """Gradients of a scalar loss w.r.t. every (effective) weight matrix.

        Uses the weights recorded in the cache, so adapted forward passes
        backpropagate through their effective weights, not the base ones.
        """
        scale = cache["scale"]
        dx = d_hidden
        grads: dict[str, np.ndarray] = {}
        for layer in reversed(cache["layers"]):
            w, names = layer["w"], layer["names"]
            # MLP: x_out = x_attn + gelu(x_attn @ w1.T) @ w2.T
            dh = dx @ w["w2"]
            grads[names["w2"]] = np.einsum("btd,btf->df", dx, layer["h"])
            dh_pre = dh * _gelu_grad(layer["h_pre"])
            grads[names["w1"]] = np.einsum("btf,btd->fd", dh_pre, layer["x_attn"])
            dx_attn = dx + dh_pre @ w["w1"]

            # attention: x_attn = x + (softmax(qk^T * scale) @ v) @ wo.T
            d_mixed = dx_attn @ w["wo"]
            grads[names["wo"]] = np.einsum("btp,btq->pq", dx_attn, layer["mixed"])
            attn = layer["attn"]
            d_attn = d_mixed @ layer["v"].transpose(0, 2, 1)
            dv = attn.transpose(0, 2, 1) @ d_mixed
            d_scores = attn * (d_attn - (d_attn * attn).sum(axis=-1, keepdims=True))
            d_scores = d_scores * scale
            dq = d_scores @ layer["k"]
            dk = d_scores.transpose(0, 2, 1) @ layer["q"]

            x_in = layer["x"]
            grads[names["wq"]] = np.einsum("btp,btq->pq", dq, x_in)
            grads[names["wk"]] = np.einsum("btp,btq->pq", dk, x_in)
            grads[names["wv"]] = np.einsum("btp,btq->pq", dv, x_in)
            dx = dx_attn + dq @ w["wq"] + dk @ w["wk"] + dv @ w["wv"]

        d_embed = np.zeros_like(cache["used"]["embed"])
        np.add.at(d_embed, cache["ids"], dx)
        grads["embed"] = d_embed
        return grads


def last_unmasked_index(mask: np.ndarray) -> np.ndarray:
    """Index of the last True per row; error if any row is fully masked."""
    if not mask.any(axis=-1).all():
        raise ValueError("fully masked input: no token to pool")
    flipped = mask[..., ::-1]
    return mask.shape[-1] - 1 - flipped.argmax(axis=-1)


def pool_embedding(hidden_states: np.ndarray, attention_mask: np.ndarray) -> np.ndarray:
    """Final-layer hidden vector of the last unmasked token.

    Accepts a single sequence (T, d) with mask (T,) or a batch (B, T, d)
    with mask (B, T).
    """
    hidden = np.asarray(hidden_states)
    mask = np.asarray(attention_mask, dtype=bool)
    if hidden.ndim == 2:
        idx = last_unmasked_index(mask[None, :])[0]
        return hidden[idx]
    if hidden.ndim == 3:
        idx = last_unmasked_index(mask)
        return hidden[np.arange(hidden.shape[0]), idx]
    raise ValueError("hidden_states must be (T, d) or (B, T, d)")
