"""Parameter-efficient tuning contracts on a desk-scale network."""

from .checkpoint import (
    CheckpointBundle,
    ToyClassifier,
    load_checkpoint,
    load_classifier,
    save_checkpoint,
)
from .lora import (
    AdaptedToyModel,
    AdapterState,
    LoraFactors,
    TuneConfig,
    TuningError,
    attach_adapters,
    init_adapter_state,
    resolve_targets,
)
from .network import (
    ToyNetConfig,
    ToyTokenizer,
    ToyTransformer,
    last_unmasked_index,
    pool_embedding,
)
from .training import (
    Adam,
    MtlTrainer,
    SftTrainer,
    TaskHead,
    cross_entropy,
    mtl_joint_loss,
    pairs_from_posts,
    write_metrics_log,
)

__all__ = [
    "AdaptedToyModel",
    "Adam",
    "AdapterState",
    "CheckpointBundle",
    "LoraFactors",
    "MtlTrainer",
    "SftTrainer",
    "TaskHead",
    "ToyClassifier",
    "ToyNetConfig",
    "ToyTokenizer",
    "ToyTransformer",
    "TuneConfig",
    "TuningError",
    "attach_adapters",
    "cross_entropy",
    "init_adapter_state",
    "last_unmasked_index",
    "load_checkpoint",
    "load_classifier",
    "mtl_joint_loss",
    "pairs_from_posts",
    "pool_embedding",
    "resolve_targets",
    "save_checkpoint",
    "write_metrics_log",
]
