"""Numerical toolkit for second-order necessary and sufficient optimality
conditions of controlled stochastic evolution equations on a spectral
truncation: forward simulation, variational equations, first/second
adjoints with duality verification, and condition estimators with Monte
Carlo error control."""

__version__ = "0.1.0"
