"""Numerical toolkit for controlled stochastic systems with infinite delay."""
from ._backend import BACKEND

__version__ = "0.1.0"
