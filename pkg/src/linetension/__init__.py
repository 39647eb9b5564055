"""Dislocation line-tension energies and their asymptotic identities."""

__version__ = "0.1.0"
