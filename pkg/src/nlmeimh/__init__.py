"""Independent Metropolis-Hastings with Laplace/linearized proposals for NLME models."""

__version__ = "0.1.0"
