"""Secret-permutation defence lab.

A self-contained float64 stack for studying a keyed pixel-permutation
defence against adversarial examples: a from-scratch differentiable CNN
engine, FGSM and Carlini-Wagner attacks, IDX data loading, and a
transfer-attack evaluation harness with a CLI front end.
"""

from .attacks import (
    AdversarialResult,
    AttackSpec,
    cw_attack,
    cw_attack_batch,
    cw_objective_f,
    fgsm,
    fgsm_batch,
    input_gradient,
    load_adversarial_batch_file,
    lp_norm,
    pick_targets,
    save_adversarial_batch_file,
)
from .data import (
    LabeledDataset,
    canonical_split,
    load_idx,
    load_named_dataset,
    resolve_data_dir,
    synthetic_dataset,
)
from .defence import (
    DefendedClassifier,
    ProtocolViolation,
    SecretKey,
    apply_transform,
    apply_transform_batch,
    attacker_context,
    invert_transform,
    invert_transform_batch,
    key_entropy_report,
    keygen,
    load_key,
    save_key,
)
from .harness import (
    EvalCell,
    EvalReport,
    HarnessConfig,
    ThreatScenario,
    classification_error,
    preset_config,
    report_invariant_failures,
    report_json,
    report_text,
    evaluate_defence_grid,
    run_transfer_attack,
)
from .network import (
    Network,
    TrainConfig,
    TrainingDiverged,
    build_network,
    load_model_file,
    save_model_file,
    train,
)
from .rng import derive_seed, gaussian_vector, permutation_vector, uniform_vector

__version__ = "0.1.0"

__all__ = [
    "AdversarialResult",
    "AttackSpec",
    "DefendedClassifier",
    "EvalCell",
    "EvalReport",
    "HarnessConfig",
    "LabeledDataset",
    "Network",
    "ProtocolViolation",
    "SecretKey",
    "ThreatScenario",
    "TrainConfig",
    "TrainingDiverged",
    "apply_transform",
    "apply_transform_batch",
    "attacker_context",
    "build_network",
    "canonical_split",
    "classification_error",
    "cw_attack",
    "cw_attack_batch",
    "cw_objective_f",
    "derive_seed",
    "fgsm",
    "fgsm_batch",
    "gaussian_vector",
    "input_gradient",
    "invert_transform",
    "invert_transform_batch",
    "key_entropy_report",
    "keygen",
    "load_adversarial_batch_file",
    "load_idx",
    "load_key",
    "load_model_file",
    "load_named_dataset",
    "lp_norm",
    "permutation_vector",
    "pick_targets",
    "preset_config",
    "report_invariant_failures",
    "report_json",
    "report_text",
    "evaluate_defence_grid",
    "resolve_data_dir",
    "run_transfer_attack",
    "save_adversarial_batch_file",
    "save_key",
    "save_model_file",
    "synthetic_dataset",
    "train",
    "uniform_vector",
    "__version__",
]
