"""Numerical moderate-deviation toolkit for ergodic Markov chains X_n = f(X_{n-1}, xi_n)."""

__version__ = "0.1.0"
