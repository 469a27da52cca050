"""Dense tensor primitives: same-size 2D cross-correlation, pooling, and the
expand/squeeze reshapes that pack the scale axis next to the channel axis.

Arrays are plain numpy ndarrays in row-major layout.  Spatial dimensions are
always the trailing two axes; a leading batch axis is optional everywhere.
The correlation convention is out(x) = sum_dx in(x + dx - r) * k(dx), i.e.
kernels are not flipped.
"""

import numpy as np

PAD_ZERO = "zero"
PAD_CIRCULAR = "circular"
_PAD_MODES = (PAD_ZERO, PAD_CIRCULAR)


def _check_padding(padding_mode: str) -> None:
    if padding_mode not in _PAD_MODES:
        raise ValueError(f"unknown padding_mode {padding_mode!r}, expected one of {_PAD_MODES}")


def pad_spatial(x: np.ndarray, radius: int, padding_mode: str) -> np.ndarray:
    """Pad the two trailing axes by `radius` on each side."""
    _check_padding(padding_mode)
    if radius == 0:
        return x
    width = [(0, 0)] * (x.ndim - 2) + [(radius, radius), (radius, radius)]
    if padding_mode == PAD_ZERO:
        return np.pad(x, width)
    return np.pad(x, width, mode="wrap")


def im2col(x: np.ndarray, size: int, padding_mode: str) -> np.ndarray:
    """Unfold padded [N, C, H, W] into a patch matrix [C*size*size, N*H*W].

    Row order is (channel, dy, dx), matching kernel.reshape(c_out, -1); the
    row-major destination keeps every slice copy sequential, which is what
    makes this path memory-friendly.
    """
    n, c, h, w = x.shape
    r = (size - 1) // 2
    xp = pad_spatial(x, r, padding_mode)
    return _unfold_kmajor(xp, size, h, w)


def _unfold_kmajor(xp: np.ndarray, size: int, h: int, w: int) -> np.ndarray:
    n, c = xp.shape[:2]
    cols = np.empty((c * size * size, n * h * w), dtype=xp.dtype)
    view = cols.reshape(c, size, size, n, h, w)
    for dy in range(size):
        for dx in range(size):
            np.copyto(view[:, dy, dx], xp[:, :, dy : dy + h, dx : dx + w].transpose(1, 0, 2, 3))
    return cols


# patch-matrix budget before conv2d switches to row-strip processing
_IM2COL_BUDGET_BYTES = 1 << 26


def conv2d(x: np.ndarray, kernel: np.ndarray, padding_mode: str = PAD_ZERO) -> np.ndarray:
    """Same-size stride-1 cross-correlation.

    x: [C_in, H, W] or [N, C_in, H, W]; kernel: [C_out, C_in, V, V] with V odd.
    Implemented as im2col followed by one matrix product, so the reduction
    order is fixed and the heavy lifting is a single GEMM.  Large inputs are
    processed in horizontal strips to cap the patch-matrix footprint.
    """
    single = x.ndim == 3
    xb = x[None] if single else x
    if xb.ndim != 4:
        raise ValueError(f"expected 3 or 4 input dimensions, got shape {x.shape}")
    if kernel.ndim != 4:
        raise ValueError(f"expected kernel [C_out, C_in, V, V], got shape {kernel.shape}")
    c_out, c_in, v, v2 = kernel.shape
    if v != v2 or v % 2 == 0:
        raise ValueError(f"kernel window must be square with odd extent, got {v}x{v2}")
    if xb.shape[1] != c_in:
        raise ValueError(f"input has {xb.shape[1]} channels, kernel expects {c_in}")
    n, _, h, w = xb.shape
    kmat = kernel.reshape(c_out, c_in * v * v).astype(xb.dtype, copy=False)
    r = (v - 1) // 2
    xp = pad_spatial(xb, r, padding_mode)
    row_bytes = n * w * c_in * v * v * xb.dtype.itemsize
    rows_per_strip = min(h, max(1, _IM2COL_BUDGET_BYTES // max(row_bytes, 1)))
    out = np.empty((c_out, n, h, w), dtype=np.result_type(xb.dtype, kmat.dtype))
    for y0 in range(0, h, rows_per_strip):
        y1 = min(y0 + rows_per_strip, h)
        strip = xp[:, :, y0 : y1 + 2 * r, :]
        cols = _unfold_kmajor(strip, v, y1 - y0, w)
        res = kmat @ cols  # [C_out, N*(y1-y0)*W]
        out[:, :, y0:y1, :] = res.reshape(c_out, n, y1 - y0, w)
    out = np.ascontiguousarray(out.transpose(1, 0, 2, 3))
    return out[0] if single else out


def conv2d_input_grad(grad_out: np.ndarray, kernel: np.ndarray, padding_mode: str) -> np.ndarray:
    """Adjoint of conv2d in its input: one transposed GEMM, then fold-add.

    The column gradient kernelT @ gradT is scattered back onto the padded
    input grid by offset; pad margins are dropped (zero) or wrapped back
    (circular).
    """
    _check_padding(padding_mode)
    single = grad_out.ndim == 3
    gb = grad_out[None] if single else grad_out
    o, c, v, _ = kernel.shape
    n, _, h, w = gb.shape
    r = (v - 1) // 2
    kmat = kernel.reshape(o, c * v * v).astype(gb.dtype, copy=False)
    gmat = np.ascontiguousarray(gb.transpose(1, 0, 2, 3)).reshape(o, n * h * w)
    dcols = kmat.T @ gmat  # [C*V*V, N*P]
    view = dcols.reshape(c, v, v, n, h, w)
    dxp = np.zeros((c, n, h + 2 * r, w + 2 * r), dtype=dcols.dtype)
    for dy in range(v):
        for dx in range(v):
            dxp[:, :, dy : dy + h, dx : dx + w] += view[:, dy, dx]
    if padding_mode == PAD_CIRCULAR and r:
        dxp[:, :, r : 2 * r, :] += dxp[:, :, h + r :, :]
        dxp[:, :, h : h + r, :] += dxp[:, :, :r, :]
        dxp[:, :, :, r : 2 * r] += dxp[:, :, :, w + r :]
        dxp[:, :, :, w : w + r] += dxp[:, :, :, :r]
    dx = np.ascontiguousarray(dxp[:, :, r : r + h, r : r + w].transpose(1, 0, 2, 3))
    return dx[0] if single else dx


def conv2d_kernel_grad(grad_out: np.ndarray, x: np.ndarray, size: int, padding_mode: str) -> np.ndarray:
    """Adjoint of conv2d in its kernel, accumulated over batch and positions."""
    single = x.ndim == 3
    xb = x[None] if single else x
    gb = grad_out[None] if single else grad_out
    n, c_out, h, w = gb.shape
    cols = im2col(xb, size, padding_mode)  # [K, N*P]
    gmat = np.ascontiguousarray(gb.transpose(1, 0, 2, 3)).reshape(c_out, n * h * w)
    dk = gmat.astype(cols.dtype, copy=False) @ cols.T
    return dk.reshape(c_out, xb.shape[1], size, size)


def expand_filter(kernel: np.ndarray) -> np.ndarray:
    """[C_out, C_in, S, V, V] -> [C_out, C_in*S, V, V]; pure reshape."""
    o, c, s, v, v2 = kernel.shape
    return kernel.reshape(o, c * s, v, v2)


def expand_signal(f: np.ndarray) -> np.ndarray:
    """[(N,) C, S, U, U] -> [(N,) C*S, U, U]; scale varies fastest within channel."""
    if f.ndim == 4:
        c, s, u, u2 = f.shape
        return f.reshape(c * s, u, u2)
    n, c, s, u, u2 = f.shape
    return f.reshape(n, c * s, u, u2)


def squeeze_output(t: np.ndarray, num_scales: int) -> np.ndarray:
    """Inverse of expand_signal: [(N,) C*S, U, U] -> [(N,) C, S, U, U]."""
    ch = t.shape[-3]
    if ch % num_scales != 0:
        raise ValueError(f"channel extent {ch} is not divisible by {num_scales} scales")
    if t.ndim == 3:
        return t.reshape(ch // num_scales, num_scales, *t.shape[1:])
    return t.reshape(t.shape[0], ch // num_scales, num_scales, *t.shape[2:])


def max_pool2d(f: np.ndarray, window: int) -> np.ndarray:
    """Non-overlapping spatial max pooling; trailing rows/cols are dropped."""
    h, w = f.shape[-2:]
    if window < 1 or window > h or window > w:
        raise ValueError(f"pool window {window} does not fit spatial extent {h}x{w}")
    ho, wo = h // window, w // window
    lead = f.shape[:-2]
    g = f[..., : ho * window, : wo * window]
    g = g.reshape(*lead, ho, window, wo, window)
    return g.max(axis=(-3, -1))


def global_max_spatial(f: np.ndarray) -> np.ndarray:
    """Maximum over the full spatial domain (the two trailing axes)."""
    return f.max(axis=(-2, -1))
