"""Low-rank adapters over frozen base weights.

Each targeted weight matrix W (d_out x d_in) gets a factor pair: Down
(r x d_in), seeded small random, and Up (d_out x r), all zeros. The adapted
forward pass uses W + Up @ Down, so a freshly attached adapter is an exact
identity and the effective update never exceeds rank r. Base weights are
never written; the optimizer sees only factors and heads.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping

import numpy as np

from .network import ToyTransformer


class TuningError(ValueError):
    pass


@dataclass(frozen=True)
class TuneConfig:
    """Adapter training configuration.

    Defaults follow the experiment protocol: rank 8, learning rate 1e-4,
    batch size 8. One epoch is the independent-tuning default; joint
    multi-task runs conventionally use 3-6.
    """

    rank_r: int = 8
    learning_rate: float = 1e-4
    batch_size: int = 8
    epochs: int = 1
    target_layers: str = "attn"
    seed: int = 0

    MTL_EPOCH_RANGE = (3, 6)

    def __post_init__(self) -> None:
        if self.rank_r < 1:
            raise TuningError("rank_r must be >= 1")
        if self.learning_rate < 0:
            raise TuningError("learning_rate must be >= 0")
        if self.batch_size < 1:
            raise TuningError("batch_size must be >= 1")
        if self.epochs < 1:
            raise TuningError("epochs must be >= 1")

    def to_dict(self) -> dict:
        return {
            "rank_r": self.rank_r,
            "learning_rate": self.learning_rate,
            "batch_size": self.batch_size,
            "epochs": self.epochs,
            "target_layers": self.target_layers,
            "seed": self.seed,
        }

    @classmethod
    def from_dict(cls, data: Mapping) -> "TuneConfig":
        return cls(
            rank_r=int(data.get("rank_r", 8)),
            learning_rate=float(data.get("learning_rate", 1e-4)),
            batch_size=int(data.get("batch_size", 8)),
            epochs=int(data.get("epochs", 1)),
            target_layers=str(data.get("target_layers", "attn")),
            seed=int(data.get("seed", 0)),
        )


@dataclass(frozen=True)
class LoraFactors:
    down: np.ndarray  # (r, d_in)
    up: np.ndarray  # (d_out, r)

    def delta(self) -> np.ndarray:
        return self.up @ self.down


@dataclass
class AdapterState:
    """Factor pairs for every targeted weight matrix."""

    config: TuneConfig
    factors: dict[str, LoraFactors] = field(default_factory=dict)

    @property
    def targets(self) -> list[str]:
        return list(self.factors)

    def delta(self, name: str) -> np.ndarray:
        return self.factors[name].delta()

    def parameter_count(self) -> int:
        return sum(f.down.size + f.up.size for f in self.factors.values())

    def effective_weights(self, base_params: Mapping[str, np.ndarray]) -> dict[str, np.ndarray]:
        """W + Up @ Down for every target; base arrays are left untouched."""
        return {
            name: base_params[name] + f.up @ f.down for name, f in self.factors.items()
        }

    def trainable_arrays(self, prefix: str = "adapter") -> dict[str, np.ndarray]:
        out = {}
        for name, f in self.factors.items():
            out[f"{prefix}.{name}.down"] = f.down
            out[f"{prefix}.{name}.up"] = f.up
        return out

    def factor_grads(
        self, weight_grads: Mapping[str, np.ndarray], prefix: str = "adapter"
    ) -> dict[str, np.ndarray]:
        """Chain effective-weight gradients into factor gradients.

        With Weff = W + Up @ Down: dUp = dWeff @ Down.T, dDown = Up.T @ dWeff.
        """
        grads = {}
        for name, f in self.factors.items():
            d_weff = weight_grads[name]
            grads[f"{prefix}.{name}.up"] = d_weff @ f.down.T
            grads[f"{prefix}.{name}.down"] = f.up.T @ d_weff
        return grads

    def update_norms(self) -> dict[str, float]:
        """Frobenius norm of each effective delta (zero until trained)."""
        return {name: float(np.linalg.norm(f.delta())) for name, f in self.factors.items()}


def resolve_targets(base: ToyTransformer, selector: str) -> list[str]:
    """Attachable weight names whose dotted path contains the selector."""
    matches = [n for n in base.attachable_names if selector in n]
    if not matches:
        raise TuningError(
            f"target selector {selector!r} matches no attachable weight "
            f"(candidates: {base.attachable_names})"
        )
    return matches


def init_adapter_state(base: ToyTransformer, config: TuneConfig, seed_offset: int = 0) -> AdapterState:
    """Seeded factors: Down small random, Up exactly zero."""
    rng = np.random.default_rng(config.seed + seed_offset)
    factors = {}
    for name in resolve_targets(base, config.target_layers):
        d_out, d_in = base.params[name].shape
        factors[name] = LoraFactors(
            down=rng.normal(0.0, 0.01, (config.rank_r, d_in)),
            up=np.zeros((d_out, config.rank_r)),
        )
    return AdapterState(config=config, factors=factors)


class AdaptedToyModel:
    """Base network plus one adapter set; the adapted forward pass."""

    def __init__(self, base: ToyTransformer, adapters: AdapterState):
        self.base = base
        self.adapters = adapters

    def effective_weights(self) -> dict[str, np.ndarray]:
        return self.adapters.effective_weights(self.base.params)

    def forward(self, ids: np.ndarray, mask: np.ndarray) -> tuple[np.ndarray, dict]:
        return self.base.forward(ids, mask, overrides=self.effective_weights())


def attach_adapters(
    base: ToyTransformer, config: TuneConfig, seed_offset: int = 0
) -> tuple[AdaptedToyModel, AdapterState]:
    """Wrap a base network with freshly initialized adapters.

    Immediately after attachment the adapted forward pass is bit-identical
    to the base forward pass (Up = 0 forces a zero delta).
    """
    state = init_adapter_state(base, config, seed_offset=seed_offset)
    return AdaptedToyModel(base, state), state
