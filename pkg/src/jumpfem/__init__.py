"""Sample-adapted finite elements for advection-diffusion with random jump coefficients."""

__version__ = "0.1.0"
