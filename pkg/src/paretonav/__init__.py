"""Pareto-manifold construction and online latent navigation for the
double-integrator multi-objective control benchmark."""

__version__ = "0.1.0"
