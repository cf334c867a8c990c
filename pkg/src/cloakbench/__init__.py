"""cloakbench: a desk-scale lab for adversarial face de-identification.

Builds its own small classifiers on a tiny autodiff core, crafts
L-infinity sign-gradient perturbations (single-step, iterative ascent, and
iterative least-likely-class descent), and measures Top-k Protection
Success Rate across source/target model pairs through JPEG storage and
resize boundaries.
"""

__version__ = "0.1.0"

from .attacks import AdvRecord, AttackConfig, attack_batch, bim, clip_eps, fgsm, illc, schedule
from .autodiff import Parameter, ShapeMismatchError, Tensor, backward
from .config import ExperimentConfig, default_config, parse_config
from .evaluation import (
    EvalCell,
    TransferMatrix,
    evaluate_cell,
    psr,
    psr_oracle,
    transfer_matrix,
)
from .models import (
    ArchitectureDescriptor,
    Classifier,
    TrainConfig,
    build_model,
    least_likely_class,
    load_checkpoint,
    save_checkpoint,
    stock_descriptor,
    top_k,
    train,
)
from .pipeline import (
    Dataset,
    apply_chain,
    detect_gate,
    ingest_directory,
    jpeg_roundtrip,
    quantize_u8,
    resize,
    split,
    synth_dataset,
)
from .runner import RunManifest, run_experiment, verify_manifest

__all__ = [
    "__version__",
    "AdvRecord",
    "AttackConfig",
    "attack_batch",
    "bim",
    "clip_eps",
    "fgsm",
    "illc",
    "schedule",
    "Parameter",
    "ShapeMismatchError",
    "Tensor",
    "backward",
    "ExperimentConfig",
    "default_config",
    "parse_config",
    "EvalCell",
    "TransferMatrix",
    "evaluate_cell",
    "psr",
    "psr_oracle",
    "transfer_matrix",
    "ArchitectureDescriptor",
    "Classifier",
    "TrainConfig",
    "build_model",
    "least_likely_class",
    "load_checkpoint",
    "save_checkpoint",
    "stock_descriptor",
    "top_k",
    "train",
    "Dataset",
    "apply_chain",
    "detect_gate",
    "ingest_directory",
    "jpeg_roundtrip",
    "quantize_u8",
    "resize",
    "split",
    "synth_dataset",
    "RunManifest",
    "run_experiment",
    "verify_manifest",
]
