"""Desk-scale supernet architecture search.

Hybrid genotype space, NSGA-II, progressive weight-sharing supernet with
dual-domain distillation, and a multi-device evaluation engine.
"""

__version__ = "0.1.0"

from ._backend import BACKEND, HAS_NUMBA  # noqa: E402,F401
