"""IDX ingestion and the scaled-digits dataset.

The dataset protocol: every image is rescaled by a factor drawn uniformly
from [0.3, 1.0] (independently per image), bilinearly, and zero-padded back
to the frame resolution with the content centred.  Splits are fixed by a
single seeded shuffle.  The generator is numpy's PCG64 stream seeded with
the realization seed, so identical seeds reproduce identical datasets on any
platform.

When no real digit corpus is on disk, `render_digit_corpus` synthesises a
deterministic stand-in: anti-aliased glyphs with random affine jitter,
written through the same IDX code paths.
"""

from dataclasses import dataclass

import numpy as np

from . import container
from .equivariance import rescale_image

IDX_UBYTE = 0x08
_SUPPORTED_CODES = {IDX_UBYTE}

FACTOR_RANGE = (0.3, 1.0)
FULL_SPLITS = (10_000, 2_000, 50_000)
DESK_SPLITS = (2_000, 500, 5_000)


class IdxError(ValueError):
    pass


@dataclass(frozen=True)
class IdxFile:
    dtype_code: int
    dims: tuple
    data: np.ndarray


def parse_idx(raw: bytes) -> IdxFile:
    """Validate and decode one IDX blob (big-endian header, u8 payload)."""
    if len(raw) < 4:
        raise IdxError("header shorter than the 4-byte magic")
    if raw[0] != 0 or raw[1] != 0:
        raise IdxError(f"bad magic: leading bytes {raw[0]:#04x} {raw[1]:#04x} must be zero")
    code, ndim = raw[2], raw[3]
    if code not in _SUPPORTED_CODES:
        raise IdxError(f"unsupported dtype code {code:#04x} (only unsigned byte 0x08)")
    if ndim < 1:
        raise IdxError("dimension count must be at least 1")
    header_len = 4 + 4 * ndim
    if len(raw) < header_len:
        raise IdxError(f"header truncated: {len(raw)} bytes cannot hold {ndim} dimension sizes")
    dims = tuple(int.from_bytes(raw[4 + 4 * i : 8 + 4 * i], "big") for i in range(ndim))
    if any(d == 0 for d in dims):
        raise IdxError(f"zero-sized dimension in {dims}")
    expected = int(np.prod(dims, dtype=np.int64))
    payload = len(raw) - header_len
    if payload < expected:
        raise IdxError(f"payload shorter than header implies: {payload} bytes for {expected} values")
    if payload > expected:
        raise IdxError(f"{payload - expected} trailing bytes after {expected} values")
    data = np.frombuffer(raw, dtype=np.uint8, count=expected, offset=header_len).reshape(dims)
    return IdxFile(code, dims, data.copy())


def read_idx(path) -> IdxFile:
    with open(path, "rb") as fh:
        return parse_idx(fh.read())


def write_idx(path, array: np.ndarray) -> None:
    arr = np.ascontiguousarray(array, dtype=np.uint8)
    header = bytes([0, 0, IDX_UBYTE, arr.ndim])
    header += b"".join(int(d).to_bytes(4, "big") for d in arr.shape)
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(arr.tobytes())


# ---------------------------------------------------------------------------
# synthetic digit corpus

_GLYPHS = {
    0: ("01110", "10001", "10011", "10101", "11001", "10001", "01110"),
    1: ("00100", "01100", "00100", "00100", "00100", "00100", "01110"),
    2: ("01110", "10001", "00001", "00110", "01000", "10000", "11111"),
    3: ("11110", "00001", "00001", "01110", "00001", "00001", "11110"),
    4: ("00010", "00110", "01010", "10010", "11111", "00010", "00010"),
    5: ("11111", "10000", "11110", "00001", "00001", "10001", "01110"),
    6: ("00110", "01000", "10000", "11110", "10001", "10001", "01110"),
    7: ("11111", "00001", "00010", "00100", "01000", "01000", "01000"),
    8: ("01110", "10001", "10001", "01110", "10001", "10001", "01110"),
    9: ("01110", "10001", "10001", "01111", "00001", "00010", "01100"),
}


def _glyph_array(digit: int) -> np.ndarray:
    rows = _GLYPHS[digit]
    return np.array([[float(ch) for ch in row] for row in rows])


def _render_glyph(digit: int, rng: np.random.Generator, size: int) -> np.ndarray:
    """Affine-jittered bilinear rendering of one glyph into a size x size frame."""
    glyph = _glyph_array(digit)
    gh, gw = glyph.shape
    zoom = size / 8.5 * rng.uniform(0.85, 1.1)
    angle = rng.uniform(-0.18, 0.18)
    shear = rng.uniform(-0.15, 0.15)
    ty, tx = rng.uniform(-1.2, 1.2, size=2)
    cos_a, sin_a = np.cos(angle), np.sin(angle)
    # output pixel -> glyph coords (inverse map), aspect keeps strokes square
    ys, xs = np.mgrid[0:size, 0:size].astype(np.float64)
    yc = ys - (size - 1) / 2 - ty
    xc = xs - (size - 1) / 2 - tx
    yr = cos_a * yc + sin_a * xc
    xr = -sin_a * yc + cos_a * xc + shear * yc
    gy = yr / zoom * (gh / (gh - 1)) + (gh - 1) / 2
    gx = xr / zoom * (gh / (gh - 1)) + (gw - 1) / 2

    y0 = np.floor(gy).astype(np.int64)
    x0 = np.floor(gx).astype(np.int64)
    fy = gy - y0
    fx = gx - x0

    def sample(yy, xx):
        inside = (yy >= 0) & (yy < gh) & (xx >= 0) & (xx < gw)
        out = np.zeros_like(gy)
        out[inside] = glyph[yy[inside], xx[inside]]
        return out

    img = (
        sample(y0, x0) * (1 - fy) * (1 - fx)
        + sample(y0, x0 + 1) * (1 - fy) * fx
        + sample(y0 + 1, x0) * fy * (1 - fx)
        + sample(y0 + 1, x0 + 1) * fy * fx
    )
    # soft pen: slight blur for anti-aliased strokes
    kernel = np.array([1.0, 2.0, 1.0])
    kernel /= kernel.sum()
    img = np.apply_along_axis(lambda r: np.convolve(r, kernel, mode="same"), 1, img)
    img = np.apply_along_axis(lambda c: np.convolve(c, kernel, mode="same"), 0, img)
    img = np.clip(img * rng.uniform(1.5, 2.2), 0.0, 1.0)
    return img


def render_digit_corpus(count: int, seed: int, size: int = 28):
    """Deterministic synthetic digits: images u8 [count, size, size], labels i64."""
    rng = np.random.default_rng((seed, 0xD161))
    images = np.empty((count, size, size), dtype=np.uint8)
    labels = rng.integers(0, 10, size=count).astype(np.int64)
    for i in range(count):
        img = _render_glyph(int(labels[i]), rng, size)
        images[i] = np.round(img * 255).astype(np.uint8)
    return images, labels


# ---------------------------------------------------------------------------
# scaled dataset


@dataclass
class ScaledDataset:
    images: np.ndarray  # float32 [N, 1, R, R], raw 0..255 range
    labels: np.ndarray  # int64 [N]
    factors: np.ndarray  # float64 [N]
    seed: int
    split_sizes: tuple
    resolution: int

    def split(self, name: str):
        n_train, n_val, n_test = self.split_sizes
        bounds = {"train": (0, n_train), "val": (n_train, n_train + n_val),
                  "test": (n_train + n_val, n_train + n_val + n_test)}
        if name not in bounds:
            raise ValueError(f"unknown split {name!r}")
        lo, hi = bounds[name]
        return self.images[lo:hi], self.labels[lo:hi]


def _rescale_and_pad(image: np.ndarray, factor: float, resolution: int) -> np.ndarray:
    """Shrink one [H, W] image by `factor` and centre it in a zero frame."""
    if factor == 1.0 and image.shape == (resolution, resolution):
        return image.astype(np.float32)
    small = rescale_image(image[None].astype(np.float64), factor)[0]
    h, w = small.shape
    if h > resolution or w > resolution:
        raise ValueError(f"factor {factor} exceeds the frame")
    top = (resolution - h) // 2
    left = (resolution - w) // 2
    frame = np.zeros((resolution, resolution), dtype=np.float32)
    frame[top : top + h, left : left + w] = small
    return frame


def make_mnist_scale(
    images: np.ndarray,
    labels: np.ndarray,
    seed: int,
    resolution: int = 28,
    split_sizes: tuple = FULL_SPLITS,
) -> ScaledDataset:
    """Build one seeded realization of the scaled-digits dataset.

    resolution 28 keeps the native frame; resolution 56 first upscales each
    source image bilinearly to 56 x 56 and then applies the same protocol.
    """
    if resolution not in (28, 56):
        raise ValueError(f"resolution must be 28 or 56, got {resolution}")
    total = int(sum(split_sizes))
    if len(images) < total:
        raise ValueError(f"need {total} images for splits {split_sizes}, have {len(images)}")
    if len(labels) != len(images):
        raise ValueError("images and labels disagree on the sample count")
    rng = np.random.default_rng(seed)  # PCG64 stream; order of draws defines the realization
    order = rng.permutation(len(images))[:total]
    factors = rng.uniform(*FACTOR_RANGE, size=total)
    out = np.empty((total, 1, resolution, resolution), dtype=np.float32)
    for i, src_idx in enumerate(order):
        img = images[src_idx].astype(np.float64)
        if resolution != img.shape[0]:
            img = rescale_image(img[None], resolution / img.shape[0])[0]
        out[i, 0] = _rescale_and_pad(img, float(factors[i]), resolution)
    return ScaledDataset(
        images=out,
        labels=labels[order].astype(np.int64),
        factors=factors,
        seed=seed,
        split_sizes=tuple(int(s) for s in split_sizes),
        resolution=resolution,
    )


def save_dataset(path, ds: ScaledDataset) -> None:
    container.save_tensors(path, {
        "images": ds.images.astype("<f4"),
        "labels": ds.labels.astype("<i8"),
        "factors": ds.factors.astype("<f8"),
        "meta.seed": np.array([ds.seed], dtype="<i8"),
        "meta.split_sizes": np.array(ds.split_sizes, dtype="<i8"),
        "meta.resolution": np.array([ds.resolution], dtype="<i8"),
    })


def load_dataset(path) -> ScaledDataset:
    t = container.load_tensors(path)
    return ScaledDataset(
        images=t["images"],
        labels=t["labels"],
        factors=t["factors"],
        seed=int(t["meta.seed"][0]),
        split_sizes=tuple(int(x) for x in t["meta.split_sizes"]),
        resolution=int(t["meta.resolution"][0]),
    )
