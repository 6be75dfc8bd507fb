"""Primary-task-aware decomposition of auxiliary gradients."""

from .decomposition import (
    BasisStrategy,
    ControlParams,
    DecomposedGradient,
    PRESET_GRID,
    PRESETS,
    attittud_surrogate,
    build_basis,
    decompose,
    descent_check,
    pcgrad_reference,
    reweight,
)
from .linalg import (
    SubspaceBasis,
    exact_topk_basis,
    gram_schmidt,
    norm_fraction,
    project_onto,
    randomized_lowrank_approx,
)
from .model import Batch, MlpModel, batch_gradient, loss, per_example_jacobian, weighted_batch_gradient

__version__ = "0.1.0"
