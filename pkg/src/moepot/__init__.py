"""moepot: sparse mixture-of-experts neural operator for PDE trajectories."""

__version__ = "0.1.0"

from .tensor import Tensor, Tape, backward

__all__ = ["Tensor", "Tape", "backward", "__version__"]
