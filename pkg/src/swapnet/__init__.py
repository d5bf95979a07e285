"""swapnet: a desk-scale laboratory for stochastic residual training rules.

The package implements a minimal double-precision tensor core, a
reverse-mode tape, the family of per-unit stochastic block rules
(dropout, layer dropout, skip-forward, pairwise and general swapout),
small residual networks built from them, SGD training, deterministic
and Monte Carlo inference, and exact enumeration oracles used by the
test suite.
"""

__version__ = "0.1.0"
