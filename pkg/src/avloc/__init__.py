"""Self-supervised audio-visual sound source localization on synthetic scenes."""

from .tensor import (
    DomainError,
    GradMap,
    NonFiniteError,
    OpCheck,
    ShapeError,
    TapeError,
    Tensor,
    apply,
    backward,
    grad_check,
    gradcheck_suite,
)

__version__ = "0.1.0"

__all__ = [
    "Tensor",
    "apply",
    "backward",
    "grad_check",
    "gradcheck_suite",
    "GradMap",
    "OpCheck",
    "ShapeError",
    "DomainError",
    "NonFiniteError",
    "TapeError",
    "__version__",
]
