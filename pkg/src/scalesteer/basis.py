"""Steerable filter bank: 2D Hermite polynomials under a Gaussian envelope.

Each basis member is

    psi_sigma(x, y) = A * sigma**-2 * H_n(x/sigma) * H_m(y/sigma)
                        * exp(-(x**2 + y**2) / (2 sigma**2))

sampled on a V x V grid centred at (0, 0), for every sigma on a geometric
scale ladder sigma0 * a**level.  Rescaling such a filter is a change of the
sigma parameter, so a filter at level k+1 restricted to the points (a*y, a*x)
equals a**-2 times the level-k filter at (y, x); linear combinations inherit
the same relation.  The bank is built once, in float64, and never trained.

Hermite polynomials use the physicists' convention (H0=1, H1=2x,
H_{n+1} = 2x H_n - 2n H_{n-1}).  The probabilists' convention would produce
differently shaped filters, so the choice matters and is fixed here.

The amplitude A is a single constant chosen so the pure-Gaussian member at
the base scale has unit L2 norm over the grid, and the same A is reused for
every order and every level.  Per-level renormalisation would destroy the
rescaling relation above and must not be introduced.
"""

from dataclasses import dataclass, field

import numpy as np

from .group import ScaleGrid


def hermite(n: int, x):
    """Physicists' Hermite polynomial H_n evaluated elementwise."""
    if n < 0:
        raise ValueError(f"order must be non-negative, got {n}")
    x = np.asarray(x, dtype=np.float64)
    h_prev = np.ones_like(x)
    if n == 0:
        return h_prev
    h = 2.0 * x
    for k in range(1, n):
        h, h_prev = 2.0 * x * h - 2.0 * k * h_prev, h
    return h


def basis_function(n: int, m: int, sigma: float, x, y, amplitude: float = 1.0):
    """Single Hermite-Gaussian filter value(s) at offset (x, y) from centre."""
    if sigma <= 0:
        raise ValueError(f"sigma must be positive, got {sigma}")
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    envelope = np.exp(-(x * x + y * y) / (2.0 * sigma * sigma))
    return amplitude / (sigma * sigma) * hermite(n, x / sigma) * hermite(m, y / sigma) * envelope


def order_pairs(count: int) -> list[tuple[int, int]]:
    """First `count` (n, m) pairs by increasing n+m, ties by increasing n."""
    pairs = []
    total = 0
    while len(pairs) < count:
        for n in range(total + 1):
            pairs.append((n, total - n))
            if len(pairs) == count:
                break
        total += 1
    return pairs


def _min_max_order(count: int) -> int:
    order = 0
    while (order + 1) * (order + 2) // 2 < count:
        order += 1
    return order


@dataclass(frozen=True)
class BasisSpec:
    """Parameters of a filter bank; immutable and hashable."""

    num_functions: int
    filter_size: int
    scale_grid: ScaleGrid
    sigma0: float = 1.5
    max_order: int | None = None

    def __post_init__(self):
        if self.num_functions < 1:
            raise ValueError("need at least one basis function")
        if self.filter_size < 1 or self.filter_size % 2 == 0:
            raise ValueError(f"filter_size must be odd so the grid has an exact centre, got {self.filter_size}")
        if self.sigma0 <= 0:
            raise ValueError(f"sigma0 must be positive, got {self.sigma0}")
        if self.max_order is None:
            object.__setattr__(self, "max_order", _min_max_order(self.num_functions))
        cap = (self.max_order + 1) * (self.max_order + 2) // 2
        if self.num_functions > cap:
            raise ValueError(
                f"{self.num_functions} functions need orders beyond n+m <= {self.max_order} ({cap} available)"
            )

    @property
    def pairs(self) -> list[tuple[int, int]]:
        return order_pairs(self.num_functions)

    def level_sigma(self, level: int) -> float:
        return self.sigma0 * self.scale_grid.scale(level)


@dataclass(frozen=True)
class SteerableBasis:
    """Precomputed filter bank, shape [N_b, N_S, V, V], frozen after build."""

    spec: BasisSpec
    data: np.ndarray = field(repr=False)
    amplitude: float

    @property
    def num_functions(self) -> int:
        return self.data.shape[0]

    @property
    def num_levels(self) -> int:
        return self.data.shape[1]

    @property
    def filter_size(self) -> int:
        return self.data.shape[2]


def build_basis(spec: BasisSpec) -> SteerableBasis:
    """Evaluate the bank on the centred pixel grid; deterministic in the spec."""
    v = spec.filter_size
    centre = (v - 1) // 2
    coords = np.arange(v, dtype=np.float64) - centre
    xg, yg = np.meshgrid(coords, coords)  # xg varies along columns, yg along rows

    # Shared amplitude: unit L2 for the (0, 0) member at the base scale.
    raw = basis_function(0, 0, spec.sigma0, xg, yg, 1.0)
    amplitude = 1.0 / float(np.sqrt(np.sum(raw * raw)))

    levels = spec.scale_grid.num_levels
    data = np.empty((spec.num_functions, levels, v, v), dtype=np.float64)
    for i, (n, m) in enumerate(spec.pairs):
        for level in range(levels):
            data[i, level] = basis_function(n, m, spec.level_sigma(level), xg, yg, amplitude)
    if not np.all(np.isfinite(data)):
        raise ValueError("basis evaluation produced non-finite values")
    data.flags.writeable = False
    return SteerableBasis(spec=spec, data=data, amplitude=amplitude)


def assemble_kernel(weights: np.ndarray, basis: SteerableBasis) -> np.ndarray:
    """Mix basis filters with trainable coefficients.

    weights [C_out, C_in, N_b]       -> kernel [C_out, C_in, N_S, V, V]
    weights [C_out, C_in, K_S, N_b]  -> kernel [C_out, C_in, K_S, N_S, V, V]
    """
    if weights.shape[-1] != basis.num_functions:
        raise ValueError(
            f"weights mix {weights.shape[-1]} functions but the basis holds {basis.num_functions}"
        )
    data = basis.data.astype(weights.dtype, copy=False)
    if weights.ndim == 3:
        return np.einsum("oci,islm->ocslm", weights, data)
    if weights.ndim == 4:
        return np.einsum("ocji,islm->ocjslm", weights, data)
    raise ValueError(f"expected weights of rank 3 or 4, got shape {weights.shape}")


def save_basis(path, basis: SteerableBasis) -> None:
    """Write the bank and its spec through the tensor container."""
    from .container import save_tensors

    spec = basis.spec
    save_tensors(path, {
        "basis.data": basis.data,
        "basis.amplitude": np.array([basis.amplitude], dtype="<f8"),
        "spec.num_functions": np.array([spec.num_functions], dtype="<i8"),
        "spec.filter_size": np.array([spec.filter_size], dtype="<i8"),
        "spec.max_order": np.array([spec.max_order], dtype="<i8"),
        "spec.sigma0": np.array([spec.sigma0], dtype="<f8"),
        "spec.base": np.array([spec.scale_grid.base], dtype="<f8"),
        "spec.num_levels": np.array([spec.scale_grid.num_levels], dtype="<i8"),
    })


def load_basis(path) -> SteerableBasis:
    from .container import load_tensors

    t = load_tensors(path)
    spec = BasisSpec(
        num_functions=int(t["spec.num_functions"][0]),
        filter_size=int(t["spec.filter_size"][0]),
        scale_grid=ScaleGrid(float(t["spec.base"][0]), int(t["spec.num_levels"][0])),
        sigma0=float(t["spec.sigma0"][0]),
        max_order=int(t["spec.max_order"][0]),
    )
    data = t["basis.data"]
    data.flags.writeable = False
    return SteerableBasis(spec=spec, data=data, amplitude=float(t["basis.amplitude"][0]))


def write_pgm(path, image: np.ndarray) -> None:
    """Dump one 2D slice as a binary 8-bit PGM, min-max normalised."""
    img = np.asarray(image, dtype=np.float64)
    lo, hi = float(img.min()), float(img.max())
    scale = 255.0 / (hi - lo) if hi > lo else 0.0
    levels = np.round((img - lo) * scale).astype(np.uint8)
    with open(path, "wb") as fh:
        fh.write(b"P5\n%d %d\n255\n" % (img.shape[1], img.shape[0]))
        fh.write(levels.tobytes())


def read_pgm(path) -> np.ndarray:
    """Read a binary 8-bit PGM written by write_pgm (or any P5 file)."""
    with open(path, "rb") as fh:
        raw = fh.read()
    fields = []
    pos = 0
    while len(fields) < 4:
        while pos < len(raw) and raw[pos : pos + 1].isspace():
            pos += 1
        if raw[pos : pos + 1] == b"#":
            while pos < len(raw) and raw[pos] != 0x0A:
                pos += 1
            continue
        start = pos
        while pos < len(raw) and not raw[pos : pos + 1].isspace():
            pos += 1
        fields.append(raw[start:pos])
    if fields[0] != b"P5":
        raise ValueError(f"not a binary PGM: magic {fields[0]!r}")
    width, height, maxval = int(fields[1]), int(fields[2]), int(fields[3])
    if maxval != 255:
        raise ValueError(f"unsupported maxval {maxval}")
    pos += 1
    pixels = np.frombuffer(raw, dtype=np.uint8, count=width * height, offset=pos)
    return pixels.reshape(height, width)
