"""Subpopulation weight estimation for heterogeneous tissue.

Estimates the proportional breakup of a mixed cell population from
normalized gene-expression measurements and per-gene expression profiles
derived from an ensemble of faulty Boolean networks. Three interchangeable
inference backends share one batched linear-algebra layer: variational
Bayes (posterior approximation), Gibbs sampling (exact MCMC), and
expectation maximization (point estimates).
"""

__version__ = "0.1.0"
