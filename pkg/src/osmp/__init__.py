"""Orbitally stable motion primitives: periodic motion policies learned from demonstrations."""

__version__ = "0.1.0"

from .encoder import Encoder, EncoderConfig, init_identity
from .latent import HopfParams
from .policy import Policy, ShapingState

__all__ = ["Encoder", "EncoderConfig", "HopfParams", "Policy", "ShapingState", "init_identity",
           "__version__"]
