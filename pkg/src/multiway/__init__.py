"""Multiway numerical-analysis toolkit.

Dense tensor algebra (contraction, Kruskal models, the t-product family),
penalized inverse solvers, constrained PARAFAC via HALS, tensor-regression
connectivity estimation, and coupled matrix-tensor fusion, with synthetic
forward-model generators for validation.
"""

__version__ = "0.1.0"
