"""Design-based regression estimation of finite-population means with
approximate Bayesian shrinkage."""

__version__ = "0.1.0"
