"""fringeforge: a fringe-projection 3D scanner simulator with a
differentiable reconstruction path and optical adversarial attack tooling."""

from .util import configure_torch

configure_torch()

__version__ = "0.1.0"
