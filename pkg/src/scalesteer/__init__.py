"""Scale-equivariant convolutions with steerable Hermite-Gaussian filters."""

from .basis import BasisSpec, SteerableBasis, assemble_kernel, basis_function, build_basis, hermite
from .group import DEFAULT_BASE, IDENTITY, GroupElement, ScaleGrid, act_on_point, compose, inverse
from .scaleconv import (
    FeatureMapH,
    ScaleConvLayer,
    conv_h_h,
    conv_h_h_interscale,
    conv_t_h,
    pointwise_nonlinearity,
    scale_axis_pool_spatial,
    scale_projection,
    shift_scale,
)

__version__ = "0.1.0"

__all__ = [
    "BasisSpec",
    "SteerableBasis",
    "GroupElement",
    "ScaleGrid",
    "FeatureMapH",
    "ScaleConvLayer",
    "DEFAULT_BASE",
    "IDENTITY",
    "assemble_kernel",
    "basis_function",
    "build_basis",
    "hermite",
    "act_on_point",
    "compose",
    "inverse",
    "conv_t_h",
    "conv_h_h",
    "conv_h_h_interscale",
    "pointwise_nonlinearity",
    "scale_projection",
    "scale_axis_pool_spatial",
    "shift_scale",
    "__version__",
]
