"""Partial synthesis of the sensitive AvailableDays and Price columns of listings data.

Submodules: ``data`` (loading and encoding), ``mcmc`` (sampler and
diagnostics), ``models`` (zero-inflated truncated Poisson and log-price
regression), ``synthesis`` and ``cart`` (the two synthesizers),
``utility`` and ``risk`` (evaluation), ``cli`` (pipeline).
"""

from .data import ConfidentialTable, DataError, load_csv, simulate_listings
from .synthesis import ModelFitError, SyntheticCollection, read_collection, sequential_synthesize, write_collection

__version__ = "0.1.0"

__all__ = [
    "ConfidentialTable",
    "DataError",
    "ModelFitError",
    "SyntheticCollection",
    "load_csv",
    "read_collection",
    "sequential_synthesize",
    "simulate_listings",
    "write_collection",
]
