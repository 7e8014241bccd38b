"""Hierarchical Coulomb gas in one, two and three dimensions.

Exact and Metropolis samplers, certified partition functions, and a
statistics harness for number-variance and linear-statistic scaling.
"""
__version__ = "0.1.0"

from .geometry import (  # noqa: F401
    Ball,
    Box,
    Configuration,
    DyadicCube,
    Point,
    UnitCube,
    parse_region,
)
from .partition import LogZTable, build_logz_table, logz  # noqa: F401
from .samplers import McmcParams, sample_exact, sample_iid, sample_mcmc, stream  # noqa: F401
