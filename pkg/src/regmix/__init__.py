"""Adversarial training with mutual (AMR) and generalization (AGR) KL regularizers."""
from regmix.kernels import BACKEND

__version__ = "0.1.0"

__all__ = ["BACKEND", "__version__"]
