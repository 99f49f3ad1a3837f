"""icplab: a desk-scale lab for representations split into two competing parts.

A representation r = [z, y] is trained under opposing information
constraints (z capacity-limited toward a standard-normal prior, y pushed
to stay informative about the input), each part must solve the downstream
task alone, an adversarial predictor keeps the parts independent, and the
fused representation solves the task synergistically.
"""

from .distributions import DiagGaussian, kl_to_standard, sample_reparam
from .errors import (
    CheckpointError,
    ConfigurationError,
    ContractViolationError,
    DivergenceError,
    GenerationError,
    IngestionError,
)
from .objectives import (
    ICPHyperparams,
    TermBreakdown,
    assemble_loss,
    js_mi_estimate,
    mi_min_upper_bound,
    predictability_loss,
    reconstruction_loss,
    shuffle_pairs,
    supervised_inference_loss,
)
from .networks import ArchSpec, ModelBundle, build, discriminate, encode, predict_cross, solve
from .datasets import (
    FactorDataset,
    FactorSpec,
    batches,
    generate_synthetic,
    load_dsprites,
    make_classification_set,
)
from .metrics import (
    MIGReport,
    classification_error,
    discrete_mutual_information,
    latent_traversal,
    mig_score,
    mse,
    ssim,
    weight_correlation_heatmap,
)
from .trainer import (
    DatasetConfig,
    TrainConfig,
    TrainState,
    load_checkpoint,
    save_checkpoint,
    train,
    train_step,
)

__version__ = "0.1.0"
