"""Recover a repeated, randomly rotated target image from noisy measurements.

The pipeline: expand the target in a steerable Fourier-Bessel basis, compute
first/second/third-order autocorrelations of the measurement, predict them
analytically from candidate coefficients plus occurrence-spacing statistics,
and fit by non-convex least squares, never detecting individual occurrences.
"""

from micromoments.basis import (
    BasisSpec,
    BasisTables,
    basis_spec,
    build_basis,
    cached_basis,
    compute_bessel_roots,
    expand_image,
    random_coefficients,
    steer,
    synthesize_image,
)

__all__ = [
    "BasisSpec",
    "BasisTables",
    "basis_spec",
    "build_basis",
    "cached_basis",
    "compute_bessel_roots",
    "expand_image",
    "random_coefficients",
    "steer",
    "synthesize_image",
]

__version__ = "0.1.0"
