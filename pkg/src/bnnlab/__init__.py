"""Binary neural networks, batch normalization and gradient-variance analysis."""

from .core import RngStream, matmul, rademacher_moments, seeded_stream
from .normalizers import NormalizerConfig
from .theory import InitScheme, NetworkSpec

__version__ = "0.1.0"

__all__ = ["InitScheme", "NetworkSpec", "NormalizerConfig", "RngStream", "matmul",
           "rademacher_moments", "seeded_stream"]
