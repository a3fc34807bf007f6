"""Koopman-operator Lyapunov certificate toolkit.

Learns finite Koopman approximations from trajectory data, builds linearly
parameterized Lyapunov candidates from stable eigenfunctions, prunes the
candidate set with a sampling-based polytope algorithm, and verifies the
resulting forward-invariance certificates.
"""

from ._kernels import BACKEND as kernel_backend

__version__ = "0.1.0"

__all__ = ["kernel_backend", "__version__"]
