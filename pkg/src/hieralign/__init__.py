"""hieralign: a desk-scale lab for timestep-routed hierarchical feature alignment.

A small stochastic-interpolant diffusion transformer is trained jointly with a
timestep-conditioned router that composes alignment targets from the pooled
hierarchical features of a frozen convolutional encoder. Gradient
signal-to-noise diagnostics, routing-policy traces and PCA feature
visualizations round out the lab.
"""

__version__ = "0.1.0"

from .autodiff import (
    GradientBatch,
    ParamSet,
    Rng,
    Tensor,
    finite_diff_grad,
    grad,
    no_grad,
    per_sample_grads,
)
from .errors import CheckpointError, ConfigError, NumericError

__all__ = [
    "Tensor",
    "ParamSet",
    "GradientBatch",
    "Rng",
    "grad",
    "per_sample_grads",
    "finite_diff_grad",
    "no_grad",
    "ConfigError",
    "NumericError",
    "CheckpointError",
]
