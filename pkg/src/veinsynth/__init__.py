"""Synthetic finger-vein dataset generator."""

from .seeding import derive_seed, make_rng

__version__ = "0.1.0"

__all__ = ["derive_seed", "make_rng", "__version__"]
