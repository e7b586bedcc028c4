"""
gradsurgery: multi-loss gradient combination (GradDrop and baselines) with an
experiment harness.
"""

from .combine import (
    CombinerConfig,
    MaskSet,
    TaskGradients,
    activation,
    batch_marginalize,
    clip_global_norm,
    graddrop,
    gradnorm_step,
    mgda_minnorm,
    naive_sum,
    pcgrad,
    purity,
    sample_masks,
)
from .errors import (
    ConfigError,
    ContractError,
    DomainError,
    EmitError,
    GradSurgeryError,
    PreconditionError,
    ShapeError,
    SpecParseError,
)
from .ndcore import RngStream, Tensor

__version__ = "0.1.0"
