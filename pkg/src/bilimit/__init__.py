"""Synthesis and verification toolkit for homogeneous-in-two-limits designs.

Builds output-injection observers, backstepping state feedbacks, and scaled
output feedbacks for integrator chains, tunes their gains by a numerical
domination-constant search, and validates stability, finite-time, and
disturbance-rejection claims by simulation and sampled Lyapunov checks.
"""

from .hom_core import (
    BiLimitSignature,
    HomFunction,
    HomVectorField,
    PolarDecomposition,
    WeightVector,
    blend_positive_definite,
    check_homogeneity_limit,
    check_hom_field,
    check_hom_function,
    dilate,
    hom_norm,
    hom_product,
    hom_sum,
    interp_H,
    norm_power,
    polar_decompose,
    signed_pow,
    signed_pow_prime,
    sphere_samples,
)

__version__ = "0.1.0"
