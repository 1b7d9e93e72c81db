"""Numerical building blocks of the Cott-ADNet cotton detector, with a toy trainer and audits."""

__version__ = "0.1.0"
