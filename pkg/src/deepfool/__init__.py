"""Minimal adversarial perturbations for affine and fully connected classifiers."""

from .attacks import (
    AttackConfig,
    AttackResult,
    EpsilonSearch,
    affine_exact_oracle,
    deepfool,
    deepfool_binary,
    deepfool_multiclass,
    deepfool_step_l2,
    deepfool_step_lp,
    fast_gradient_sign,
    fgs_attack,
    fgs_epsilon_search,
    penalized_oracle,
)
from .data import Dataset, load_csv, load_idx, save_csv, save_idx, split, synth_blobs
from .errors import (
    ConfigError,
    DataFormatError,
    DeepFoolError,
    DegenerateGradientError,
    DimensionError,
    ModelFormatError,
    TrainingError,
)
from .models import (
    AffineClassifier,
    Classifier,
    MlpClassifier,
    load_model,
    predict_label,
    save_model,
)
from .robustness import (
    AttackSpec,
    RobustnessReport,
    compare_attacks,
    evaluate_robustness,
    test_error,
)
from .tensor import Dense, GradientTape, backward, forward, input_gradient, input_jacobian
from .training import (
    FinetuneConfig,
    TrainConfig,
    build_adversarial_set,
    finetune,
    finetune_experiment,
    train,
)

__version__ = "0.1.0"
