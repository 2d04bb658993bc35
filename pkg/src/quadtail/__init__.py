"""Tail probabilities of quadratic forms of normalized i.i.d. sums."""

__version__ = "0.1.0"

from .model import DistributionSpec, QuadForm, load_spec, quad_form  # noqa: E402
from .gaussref import gaussian_ball_tail  # noqa: E402
from .estimate import TailEstimate, crude_mc, exact_tail, tilted_is  # noqa: E402

__all__ = [
    "DistributionSpec",
    "QuadForm",
    "TailEstimate",
    "crude_mc",
    "exact_tail",
    "gaussian_ball_tail",
    "load_spec",
    "quad_form",
    "tilted_is",
]
