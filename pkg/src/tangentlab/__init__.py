"""Tangent-martingale simulation and verification lab in R^d."""

__version__ = "0.1.0"

from .characteristics import (
    LocalCharacteristics,
    canonical_decomposition,
    characteristics_of,
    exponential_characteristics,
    is_tangent,
    model_characteristics,
)
from .decoupling import cox_process, decoupled_tangent, jkw_discretize_and_decouple
from .models import (
    AccessibleKernel,
    ContinuousPart,
    DiscreteLaw,
    ElementaryIntegrand,
    MartingaleModel,
    QlcIntensity,
    simulate,
    simulate_batch,
    validate,
)
from .paths import CadlagPath, PathBundle, TimeChange, realized_quadratic_variation, running_sup, skorokhod_j1
from .rng import Stream

__all__ = [
    "__version__",
    "CadlagPath",
    "PathBundle",
    "TimeChange",
    "running_sup",
    "realized_quadratic_variation",
    "skorokhod_j1",
    "DiscreteLaw",
    "ElementaryIntegrand",
    "ContinuousPart",
    "QlcIntensity",
    "AccessibleKernel",
    "MartingaleModel",
    "validate",
    "simulate",
    "simulate_batch",
    "LocalCharacteristics",
    "characteristics_of",
    "model_characteristics",
    "canonical_decomposition",
    "is_tangent",
    "exponential_characteristics",
    "decoupled_tangent",
    "cox_process",
    "jkw_discretize_and_decouple",
    "Stream",
]
