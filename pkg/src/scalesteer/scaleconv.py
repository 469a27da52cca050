"""Scale-convolution layers on the scale-translation group.

A feature map on the group carries a scale axis next to its channel axis:
data[c, k, y, x] is channel c observed at scale level k.  Lifting an image
onto the scale axis correlates it with the filter bank at every level
(conv_t_h); mapping group features to group features correlates each level
with the kernel assembled for that same level (conv_h_h).  Both reduce to a
single 2D convolution after packing the scale axis into the channel axis,
which is the fast path; a per-level loop defines the reference semantics.

With interaction extent K_S > 1, output level k additionally reads input
levels k+1 .. k+K_S-1 (towards coarser scales), each through its own weight
slice, with zeros past the top of the truncated scale axis.

Feature maps carry a `level_origin`: the absolute ladder level of scale
index 0.  Kernels are always taken at absolute levels, so a feature window
placed higher on the ladder is processed with correspondingly wider filters.
This is what makes the scale action literally assertable on a finite grid:
re-basing the window commutes with every layer, with no resampling involved.
"""

from dataclasses import dataclass, field

import numpy as np

from .basis import SteerableBasis, assemble_kernel
from .group import ScaleGrid
from .tensorops import (
    PAD_ZERO,
    conv2d,
    expand_signal,
    global_max_spatial,
    squeeze_output,
)


@dataclass
class FeatureMapH:
    """Signal on the scale-translation group: [C, S, U, U] plus its grid."""

    data: np.ndarray
    grid: ScaleGrid
    level_origin: int = 0

    def __post_init__(self):
        if self.data.ndim != 4:
            raise ValueError(f"expected [C, S, U, U] data, got shape {self.data.shape}")
        if self.level_origin < 0:
            raise ValueError("level_origin must be non-negative")
        if self.level_origin + self.num_scales > self.grid.num_levels:
            raise ValueError(
                f"window [{self.level_origin}, {self.level_origin + self.num_scales}) "
                f"exceeds the {self.grid.num_levels}-level grid"
            )

    @property
    def num_scales(self) -> int:
        return self.data.shape[1]


@dataclass
class ScaleConvLayer:
    """Trainable mixing weights over basis functions, plus the fixed bank.

    weights: [C_out, C_in, K_S, N_b] (a rank-3 [C_out, C_in, N_b] array is
    accepted and treated as K_S = 1).  bias, when present, is one value per
    output channel, shared across scale levels so it cannot disturb the
    scale structure.
    """

    weights: np.ndarray
    basis: SteerableBasis
    bias: np.ndarray | None = None
    padding_mode: str = PAD_ZERO
    interaction: int = field(init=False)

    def __post_init__(self):
        if self.weights.ndim == 3:
            self.weights = self.weights[:, :, None, :]
        if self.weights.ndim != 4:
            raise ValueError(f"expected weights [C_out, C_in, K_S, N_b], got shape {self.weights.shape}")
        if self.weights.shape[-1] != self.basis.num_functions:
            raise ValueError(
                f"weights mix {self.weights.shape[-1]} basis functions, bank holds {self.basis.num_functions}"
            )
        self.interaction = self.weights.shape[2]
        if self.interaction < 1 or self.interaction > self.basis.num_levels:
            raise ValueError(
                f"interaction extent {self.interaction} must lie in [1, {self.basis.num_levels}]"
            )
        if self.bias is not None and self.bias.shape != (self.weights.shape[0],):
            raise ValueError(f"bias must have one entry per output channel, got shape {self.bias.shape}")

    @property
    def c_out(self) -> int:
        return self.weights.shape[0]

    @property
    def c_in(self) -> int:
        return self.weights.shape[1]


def random_layer(
    rng: np.random.Generator,
    c_in: int,
    c_out: int,
    basis: SteerableBasis,
    interaction: int = 1,
    bias: bool = False,
    padding_mode: str = PAD_ZERO,
    dtype=np.float64,
) -> ScaleConvLayer:
    """Fan-in scaled uniform init in basis-coefficient space."""
    bound = (c_in * basis.num_functions) ** -0.5
    w = rng.uniform(-bound, bound, size=(c_out, c_in, interaction, basis.num_functions)).astype(dtype)
    b = np.zeros(c_out, dtype=dtype) if bias else None
    return ScaleConvLayer(w, basis, bias=b, padding_mode=padding_mode)


def _level_kernels(layer: ScaleConvLayer, origin: int, num_levels: int) -> np.ndarray:
    """Assembled kernels [C_out, C_in, K_S, num_levels, V, V] for a window."""
    if origin < 0 or origin + num_levels > layer.basis.num_levels:
        raise ValueError(
            f"window [{origin}, {origin + num_levels}) exceeds the {layer.basis.num_levels}-level bank"
        )
    kappa = assemble_kernel(layer.weights, layer.basis)
    return kappa[:, :, :, origin : origin + num_levels]


def _add_bias(out: np.ndarray, bias: np.ndarray | None) -> np.ndarray:
    if bias is not None:
        out = out + bias[:, None, None, None].astype(out.dtype, copy=False)
    return out


def conv_t_h(
    image: np.ndarray,
    layer: ScaleConvLayer,
    level_origin: int = 0,
    num_levels: int | None = None,
) -> FeatureMapH:
    """Lift a plane signal [C_in, U, U] onto the scale axis.

    One 2D convolution with C_out*S output channels, then a reshape: the
    kernel for output level k is the bank at absolute level origin+k.
    """
    if layer.interaction != 1:
        raise ValueError("lifting expects a layer without scale interaction")
    if image.ndim != 3:
        raise ValueError(f"expected image [C_in, U, U], got shape {image.shape}")
    if num_levels is None:
        num_levels = layer.basis.num_levels - level_origin
    kappa = _level_kernels(layer, level_origin, num_levels)[:, :, 0]
    # kappa is [O, C, S, V, V]; the flattened kernel wants output rows
    # ordered (o, s), each seeing all C input channels.
    big = kappa.transpose(0, 2, 1, 3, 4).reshape(layer.c_out * num_levels, layer.c_in, *kappa.shape[-2:])
    out = conv2d(image.astype(kappa.dtype, copy=False), big, layer.padding_mode)
    out = squeeze_output(out, num_levels)
    out = _add_bias(out, layer.bias)
    return FeatureMapH(out, layer.basis.spec.scale_grid, level_origin)


def conv_h_h(f: FeatureMapH, layer: ScaleConvLayer, fast: bool = True) -> FeatureMapH:
    """Group-to-group scale convolution (interaction extent 1)."""
    if layer.interaction != 1:
        raise ValueError("conv_h_h expects interaction extent 1; see conv_h_h_interscale")
    return conv_h_h_interscale(f, layer, fast=fast)


def _block_kernel(kappa: np.ndarray, num_levels: int) -> np.ndarray:
    """Scatter [O, C, K_S, S, V, V] kernels into one [O*S, C*S, V, V] block matrix.

    Block (o*S+k, c*S+k+j) holds the j-offset kernel for output level k;
    offsets falling past the top level stay zero, realising the zero padding
    of the truncated scale axis.
    """
    o, c, k_s, s, v, _ = kappa.shape
    big = np.zeros((o, s, c, s, v, v), dtype=kappa.dtype)
    for j in range(k_s):
        idx = np.arange(s - j)
        big[:, idx, :, idx + j] += kappa[:, :, j, : s - j].transpose(2, 0, 1, 3, 4)
    return big.reshape(o * s, c * s, v, v)


def conv_h_h_interscale(f: FeatureMapH, layer: ScaleConvLayer, fast: bool = True) -> FeatureMapH:
    """Scale convolution with interaction extent K_S >= 1.

    Fast path: expand the feature scale axis into channels, apply one 2D
    convolution with the block kernel, squeeze back.  Reference path: shift
    the input towards lower levels once per interaction offset and sum the
    per-level correlations.  Both compute the same discrete group sum.
    """
    if f.grid != layer.basis.spec.scale_grid:
        raise ValueError("feature map and layer basis live on different scale grids")
    s = f.num_scales
    if layer.interaction > s:
        raise ValueError(f"interaction extent {layer.interaction} exceeds the {s}-level window")
    kappa = _level_kernels(layer, f.level_origin, s)
    data = f.data.astype(kappa.dtype, copy=False)
    if fast:
        big = _block_kernel(kappa, s)
        out = squeeze_output(conv2d(expand_signal(data), big, layer.padding_mode), s)
    else:
        out = np.zeros((layer.c_out, s, *f.data.shape[-2:]), dtype=kappa.dtype)
        for j in range(layer.interaction):
            shifted = shift_scale(f, -j)
            for k in range(s - j):
                out[:, k] += conv2d(shifted.data[:, k].astype(kappa.dtype, copy=False),
                                    kappa[:, :, j, k], layer.padding_mode)
    out = _add_bias(out, layer.bias)
    return FeatureMapH(out, f.grid, f.level_origin)


def shift_scale(f: FeatureMapH, offset: int) -> FeatureMapH:
    """Move content along the scale axis by `offset` levels, zero-filling.

    offset < 0 moves content towards lower level indices (data'[k] =
    data[k - offset]); the window and origin stay put.
    """
    out = np.zeros_like(f.data)
    s = f.num_scales
    if offset >= 0:
        if offset < s:
            out[:, offset:] = f.data[:, : s - offset]
    else:
        if -offset < s:
            out[:, : s + offset] = f.data[:, -offset:]
    return FeatureMapH(out, f.grid, f.level_origin)


def rebase_levels(f: FeatureMapH, offset: int) -> FeatureMapH:
    """Slide the whole window along the scale ladder: the discrete scale action."""
    return FeatureMapH(f.data, f.grid, f.level_origin + offset)


def pointwise_nonlinearity(f: FeatureMapH, kind: str = "relu") -> FeatureMapH:
    if kind == "relu":
        return FeatureMapH(np.maximum(f.data, 0.0), f.grid, f.level_origin)
    if kind == "identity":
        return f
    raise ValueError(f"unknown nonlinearity {kind!r}")


def scale_projection(f: FeatureMapH) -> np.ndarray:
    """Max over the scale axis: [C, S, U, U] -> [C, U, U]."""
    return f.data.max(axis=1)


def scale_axis_pool_spatial(f: FeatureMapH) -> np.ndarray:
    """Global spatial max per (channel, level): [C, S, U, U] -> [C, S]."""
    return global_max_spatial(f.data)
