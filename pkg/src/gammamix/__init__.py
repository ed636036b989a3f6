"""Activity-coefficient prediction for binary mixtures.

Combines structure-conditioned Gaussian priors (formula-count MLP or a
feature-wise modulated graph network) with per-component variational
posteriors, trained jointly by stochastic variational EM on sparse
solute/solvent observation matrices.
"""

__version__ = "0.1.0"

DATA_FORMAT_VERSION = 1
