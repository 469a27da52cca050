"""Verification harness for the scale-convolution layers.

Three instruments live here:

* a brute-force group-convolution oracle that evaluates the discrete group
  sum with explicit loops, against which the fast paths are checked;
* exact discrete checks needing no resampling: integer translations with
  circular padding, and scale-axis window shifts realised by re-basing the
  level window on the ladder (content lifted j levels higher must reproduce
  the original output j levels higher, on the levels both windows share);
* the relative equivariance error Delta for real image rescaling,

      Delta = ||L_s Phi(f) - Phi L_s(f)||^2 / ||L_s Phi(f)||^2,

  where L_s resamples the image bilinearly, and the two network outputs are
  aligned by shifting the scale axis and resampling the spatial axes.  The
  comparison is restricted to the overlapping scale levels and an interior
  spatial margin; both conventions are recorded in the report.
"""

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .basis import BasisSpec, SteerableBasis, assemble_kernel, build_basis
from .group import DEFAULT_BASE, ScaleGrid
from .scaleconv import (
    FeatureMapH,
    ScaleConvLayer,
    conv_h_h_interscale,
    conv_t_h,
    pointwise_nonlinearity,
    random_layer,
)
from .tensorops import PAD_CIRCULAR, PAD_ZERO, pad_spatial


def rescale_image(f: np.ndarray, factor: float, method: str = "bilinear") -> np.ndarray:
    """Bilinear resample [C, H, W] by `factor` with the align-centres rule
    x_src = (x_dst + 0.5) / factor - 0.5.  factor == 1 returns a copy."""
    if method != "bilinear":
        raise ValueError(f"unsupported method {method!r}")
    if factor <= 0:
        raise ValueError(f"factor must be positive, got {factor}")
    if f.ndim != 3:
        raise ValueError(f"expected [C, H, W], got shape {f.shape}")
    c, h, w = f.shape
    ho, wo = int(round(h * factor)), int(round(w * factor))
    if ho < 1 or wo < 1:
        raise ValueError(f"factor {factor} collapses {h}x{w} to {ho}x{wo}")
    if ho == h and wo == w and factor == 1.0:
        return f.copy()

    def axis_weights(n_out, n_in, scale):
        src = (np.arange(n_out) + 0.5) / scale - 0.5
        lo = np.floor(src).astype(np.int64)
        frac = src - lo
        lo0 = np.clip(lo, 0, n_in - 1)
        lo1 = np.clip(lo + 1, 0, n_in - 1)
        return lo0, lo1, frac

    y0, y1, fy = axis_weights(ho, h, factor)
    x0, x1, fx = axis_weights(wo, w, factor)
    fy = fy[None, :, None]
    fx = fx[None, None, :]
    top = f[:, y0][:, :, x0] * (1 - fx) + f[:, y0][:, :, x1] * fx
    bot = f[:, y1][:, :, x0] * (1 - fx) + f[:, y1][:, :, x1] * fx
    return top * (1 - fy) + bot * fy


def band_limited_image(rng: np.random.Generator, channels: int, size: int,
                       alpha: float = 1.0, cutoff: float = 0.25) -> np.ndarray:
    """Natural-spectrum synthetic test image.

    White noise shaped to a 1/f**alpha amplitude spectrum (the statistics of
    natural photographs) with a hard cutoff removing the highest octave.
    Flat-spectrum noise would alias under large downscale factors and
    dominate any equivariance measurement.
    """
    noise = rng.standard_normal((channels, size, size))
    spec = np.fft.fft2(noise)
    fy = np.fft.fftfreq(size)[:, None]
    fx = np.fft.fftfreq(size)[None, :]
    mag = np.hypot(fy, fx)
    shaping = (mag + 1.0 / size) ** -alpha
    shaping[mag > cutoff] = 0.0
    img = np.fft.ifft2(spec * shaping).real
    img -= img.mean(axis=(1, 2), keepdims=True)
    img /= img.std(axis=(1, 2), keepdims=True) + 1e-12
    return img


def group_conv_oracle(f: FeatureMapH, kernel: np.ndarray) -> FeatureMapH:
    """Literal discrete group convolution, zero padded on both axes.

    kernel: [C_out, C_in, S, V, V] or [C_out, C_in, K_S, S, V, V]; output
    level k reads input level k+j through the (j, k) kernel slice.  Loops on
    purpose; use only on small instances.
    """
    if kernel.ndim == 5:
        kernel = kernel[:, :, None]
    if kernel.ndim != 6:
        raise ValueError(f"expected kernel of rank 5 or 6, got shape {kernel.shape}")
    c_out, c_in, k_s, s, v, _ = kernel.shape
    if s != f.num_scales or c_in != f.data.shape[0]:
        raise ValueError("kernel does not match the feature map")
    r = (v - 1) // 2
    u1, u2 = f.data.shape[-2:]
    padded = pad_spatial(f.data.astype(np.float64), r, PAD_ZERO)
    out = np.zeros((c_out, s, u1, u2))
    for o in range(c_out):
        for k in range(s):
            for j in range(k_s):
                if k + j >= s:
                    continue  # zero padding past the top of the scale axis
                for y in range(u1):
                    for x in range(u2):
                        patch = padded[:, k + j, y : y + v, x : x + v]
                        out[o, k, y, x] += np.sum(patch * kernel[o, :, j, k])
    return FeatureMapH(out, f.grid, f.level_origin)


@dataclass
class ScaleConvStack:
    """A lift layer followed by group-to-group layers, ReLU in between."""

    layers: list[ScaleConvLayer]
    nonlinearity: str = "relu"

    @property
    def depth(self) -> int:
        return len(self.layers)

    def lift(self, image: np.ndarray, level_origin: int = 0, num_levels: int | None = None) -> FeatureMapH:
        f = conv_t_h(image, self.layers[0], level_origin, num_levels)
        return pointwise_nonlinearity(f, self.nonlinearity)

    def continue_from(self, f: FeatureMapH, start: int = 1, stop: int | None = None) -> FeatureMapH:
        for layer in self.layers[start : stop if stop is not None else len(self.layers)]:
            f = conv_h_h_interscale(f, layer)
            f = pointwise_nonlinearity(f, self.nonlinearity)
        return f

    def apply(self, image: np.ndarray, level_origin: int = 0, num_levels: int | None = None) -> FeatureMapH:
        return self.continue_from(self.lift(image, level_origin, num_levels))


def random_stack(
    rng: np.random.Generator,
    depth: int,
    basis: SteerableBasis,
    channels_in: int = 1,
    channels_hidden: int = 4,
    interaction: int = 1,
    padding_mode: str = PAD_CIRCULAR,
    nonlinearity: str = "relu",
    calibrate_gain: bool = True,
    probe_size: int = 32,
    dtype=np.float32,
) -> ScaleConvStack:
    """Random stack with per-layer scalar gain calibration.

    Each layer's weights are divided by the norm gain it exhibits on a fixed
    noise probe, so activations stay O(1) at any depth.  A scalar factor
    commutes with everything the stack does, so it cannot bias equivariance
    measurements.
    """
    layers = []
    for i in range(depth):
        c_in = channels_in if i == 0 else channels_hidden
        k_s = 1 if i == 0 else interaction
        layers.append(
            random_layer(rng, c_in, channels_hidden, basis, interaction=k_s,
                         padding_mode=padding_mode, dtype=dtype)
        )
    stack = ScaleConvStack(layers, nonlinearity)
    if calibrate_gain:
        probe = band_limited_image(np.random.default_rng(7), channels_in, probe_size).astype(dtype)
        f = None
        for i, layer in enumerate(stack.layers):
            g = stack.lift(probe) if i == 0 else stack.continue_from(f, i, i + 1)
            gain = float(np.linalg.norm(g.data)) / max(float(np.linalg.norm(probe if i == 0 else f.data)), 1e-30)
            layer.weights = layer.weights / max(gain, 1e-30)
            scaled = stack.lift(probe) if i == 0 else stack.continue_from(f, i, i + 1)
            f = scaled
    return stack


def scale_shift_pair(stack: ScaleConvStack, image: np.ndarray, level_shift: int, num_levels: int):
    """Outputs of the same stack with the level window based at 0 and at j."""
    basis_levels = stack.layers[0].basis.num_levels
    if level_shift < 0 or level_shift + num_levels > basis_levels:
        raise ValueError(
            f"window of {num_levels} levels shifted by {level_shift} exceeds the {basis_levels}-level bank"
        )
    out_lo = stack.apply(image, 0, num_levels)
    out_hi = stack.apply(image, level_shift, num_levels)
    return out_lo, out_hi


def scale_shift_error(stack: ScaleConvStack, image: np.ndarray, level_shift: int, num_levels: int) -> float:
    """Relative error of the discrete scale-shift property on shared levels."""
    out_lo, out_hi = scale_shift_pair(stack, image, level_shift, num_levels)
    if level_shift == 0:
        reference = out_lo.data
        shifted = out_hi.data
    else:
        reference = out_lo.data[:, level_shift:]
        shifted = out_hi.data[:, :-level_shift] if level_shift else out_hi.data
    denom = max(float(np.linalg.norm(reference)), 1e-30)
    return float(np.linalg.norm(shifted - reference)) / denom


def translation_error(stack: ScaleConvStack, image: np.ndarray, shift: tuple[int, int],
                      num_levels: int | None = None) -> float:
    """Relative error of integer-translation equivariance (circular padding)."""
    dy, dx = shift
    rolled = np.roll(image, (dy, dx), axis=(-2, -1))
    out = stack.apply(image, 0, num_levels)
    out_rolled = stack.apply(rolled, 0, num_levels)
    expected = np.roll(out.data, (dy, dx), axis=(-2, -1))
    denom = max(float(np.linalg.norm(expected)), 1e-30)
    return float(np.linalg.norm(out_rolled.data - expected)) / denom


def semidirect_error(stack: ScaleConvStack, image: np.ndarray, level_shift: int,
                     shift: tuple[int, int], num_levels: int) -> float:
    """Combined window-shift + integer-translation check in one pass."""
    dy, dx = shift
    rolled = np.roll(image, (dy, dx), axis=(-2, -1))
    out_hi = stack.apply(rolled, level_shift, num_levels)
    out_lo = stack.apply(image, 0, num_levels)
    expected = np.roll(out_lo.data, (dy, dx), axis=(-2, -1))
    if level_shift:
        expected = expected[:, level_shift:]
        got = out_hi.data[:, :-level_shift]
    else:
        got = out_hi.data
    denom = max(float(np.linalg.norm(expected)), 1e-30)
    return float(np.linalg.norm(got - expected)) / denom


def _interior_margin(stack_depth: int, sigma_top: float, padding_mode: str) -> int:
    """Spatial margin excluded from the comparison, in coarse-grid pixels.

    With circular padding the borders wrap consistently in both branches up
    to a sub-pixel period mismatch, so only the bilinear edge is dropped.
    With zero padding the contaminated band is set by the widest compared
    filter (sigma_top, measured in coarse pixels) and the stack depth.
    """
    if padding_mode == PAD_CIRCULAR:
        return 2
    return int(np.ceil(2.5 * sigma_top * np.sqrt(stack_depth))) + 2


def equivariance_error(
    stack: ScaleConvStack,
    image: np.ndarray,
    level_shift: int,
    factor: float | None = None,
    margin: int | None = None,
    core_levels_only: bool = False,
) -> float:
    """Relative squared-L2 discrepancy between rescale-then-net and net-then-rescale.

    level_shift j >= 1 downscales the input by base**j (or by `factor` when
    the true factor is off-grid); j = 0 is the identity and returns 0.
    """
    grid = stack.layers[0].basis.spec.scale_grid
    n_s = stack.layers[0].basis.num_levels
    if level_shift < 0 or level_shift >= n_s:
        raise ValueError(f"level shift {level_shift} outside [0, {n_s})")
    if factor is None:
        factor = grid.scale(level_shift)
    out_big = stack.apply(image)
    small = rescale_image(image, 1.0 / factor)
    out_small = stack.apply(small.astype(image.dtype))
    return _delta_from_outputs(stack, out_big, out_small, level_shift, 1.0 / factor, margin,
                               core_levels_only)


def _delta_from_outputs(stack, out_big, out_small, level_shift, align_factor, margin, core_levels_only) -> float:
    n_s = out_big.data.shape[1]
    u_small = out_small.data.shape[-1]
    spec = stack.layers[0].basis.spec
    if margin is None:
        sigma_top = spec.sigma0 * spec.scale_grid.scale(max(n_s - 1 - level_shift, 0))
        margin = _interior_margin(stack.depth, sigma_top, stack.layers[0].padding_mode)
    levels = n_s - level_shift
    if core_levels_only:
        extra = max(l.interaction for l in stack.layers) - 1
        levels = min(levels, n_s - level_shift - extra)
    if levels <= 0:
        raise ValueError("no overlapping scale levels to compare")
    # extreme downscales leave tiny maps; keep at least a 2-pixel interior
    margin = min(margin, max((u_small - 2) // 2, 0))
    if 2 * margin >= u_small:
        raise ValueError(f"margin {margin} leaves no interior in a {u_small}-pixel map")
    num = 0.0
    den = 0.0
    sl = slice(margin, u_small - margin)
    for k in range(levels):
        aligned = rescale_image(
            np.ascontiguousarray(out_big.data[:, k + level_shift], dtype=np.float64), align_factor
        )
        if aligned.shape[-1] != u_small:
            raise ValueError("alignment factor does not reproduce the small branch size")
        got = out_small.data[:, k].astype(np.float64)
        diff = aligned[:, sl, sl] - got[:, sl, sl]
        num += float(np.sum(diff * diff))
        den += float(np.sum(aligned[:, sl, sl] ** 2))
    return num / max(den, 1e-30)


def equivariance_error_profile(
    stack: ScaleConvStack,
    image: np.ndarray,
    level_shift: int,
    probe_depths: list[int],
    factor: float | None = None,
    margin: int | None = None,
) -> dict[int, float]:
    """Delta after each probe depth, running both branches once."""
    grid = stack.layers[0].basis.spec.scale_grid
    if factor is None:
        factor = grid.scale(level_shift)
    small = rescale_image(image, 1.0 / factor).astype(image.dtype)
    f_big = stack.lift(image)
    f_small = stack.lift(small)
    probes = sorted(set(probe_depths))
    result = {}
    done = 1
    for d in probes:
        f_big = stack.continue_from(f_big, done, d)
        f_small = stack.continue_from(f_small, done, d)
        done = d
        sub = ScaleConvStack(stack.layers[:d], stack.nonlinearity)
        result[d] = _delta_from_outputs(sub, f_big, f_small, level_shift, 1.0 / factor, margin, False)
    return result


def run_oracle_suite(seed: int, instances: int, dtype=np.float32, base: float = DEFAULT_BASE):
    """Compare lift, group-to-group and interaction paths against the oracle.

    Feature maps, window sizes and channel counts are drawn at random per
    instance; the lift contract is expressed through the oracle by feeding a
    signal constant along the scale axis.  Returns (worst relative error,
    label of the worst instance).
    """
    rng = np.random.default_rng(seed)
    worst = 0.0
    worst_case = "none"
    for case in range(instances):
        n_s = int(rng.integers(1, 6))
        k_s = int(rng.integers(1, min(2, n_s) + 1))
        c_in = int(rng.integers(1, 5))
        c_out = int(rng.integers(1, 5))
        u = int(rng.integers(5, 17))
        v = int(rng.choice([3, 5]))
        spec = BasisSpec(4, v, ScaleGrid(base, n_s), sigma0=1.0)
        basis = build_basis(spec)
        layer = random_layer(rng, c_in, c_out, basis, interaction=k_s, dtype=dtype)
        f = FeatureMapH(rng.standard_normal((c_in, n_s, u, u)).astype(dtype), spec.scale_grid)
        kernel = assemble_kernel(layer.weights.astype(np.float64), basis)
        want = group_conv_oracle(f, kernel).data
        ref = max(float(np.linalg.norm(want)), 1e-30)
        fast = conv_h_h_interscale(f, layer).data.astype(np.float64)
        loop = conv_h_h_interscale(f, layer, fast=False).data.astype(np.float64)
        err = max(float(np.linalg.norm(fast - want)), float(np.linalg.norm(loop - want))) / ref
        if k_s == 1:
            image = f.data[:, 0]
            lifted = conv_t_h(image, layer).data.astype(np.float64)
            flat = FeatureMapH(
                np.repeat(image[:, None], n_s, axis=1).astype(dtype), spec.scale_grid
            )
            want_lift = group_conv_oracle(flat, kernel).data
            err = max(err, float(np.linalg.norm(lifted - want_lift))
                      / max(float(np.linalg.norm(want_lift)), 1e-30))
        if err > worst:
            worst = err
            worst_case = f"case{case}_C{c_in}x{c_out}_S{n_s}_K{k_s}_U{u}_V{v}"
    return worst, worst_case


# ---------------------------------------------------------------------------
# reporting sweeps


@dataclass(frozen=True)
class SweepPoint:
    sweep: str
    x: float
    delta_mean: float
    delta_std: float
    trials: int
    n_scales: int
    base: float
    seed: int


@dataclass
class EquivarianceReport:
    points: list[SweepPoint] = field(default_factory=list)
    image_source: str = "synthetic"

    CSV_HEADER = "sweep,x,delta_mean,delta_std,trials,n_scales,base,seed"

    def validate(self) -> None:
        for p in self.points:
            if p.delta_mean < 0 or p.delta_std < 0:
                raise ValueError(f"negative statistics in {p}")

    def to_csv(self) -> str:
        lines = [self.CSV_HEADER]
        for p in self.points:
            lines.append(
                f"{p.sweep},{p.x:.10g},{p.delta_mean:.10g},{p.delta_std:.10g},"
                f"{p.trials},{p.n_scales},{p.base:.10g},{p.seed}"
            )
        return "\n".join(lines) + "\n"


@dataclass
class SweepConfig:
    """Configuration for the three standard sweeps (depth, downscale, interaction).

    Defaults are calibrated so the filter window holds ~4 sigma of the widest
    level (window truncation otherwise dominates the measured error).  The
    stacks are linear scale-convolution chains with random, gain-normalised
    weights; the depth sweep uses circular padding because the receptive
    field of 50 layers leaves no zero-padding-free interior.
    """

    base: float = DEFAULT_BASE
    seed: int = 0
    trials: int = 10
    threads: int = 1
    image_size: int = 64
    channels: int = 1
    hidden: int = 4
    filter_size: int = 25
    n_basis: int = 4
    sigma0: float = 1.2
    nonlinearity: str = "identity"
    depths: tuple = (1, 10, 20, 30, 40, 50)
    depth_n_scales: int = 5
    depth_shift: int = 1
    downscale_shifts: tuple = (0, 3, 6, 9, 12, 13, 14)
    downscale_n_scales: int = 13
    downscale_image_size: int = 320
    downscale_filter_size: int = 61
    downscale_sigma0: float = 0.9
    downscale_n_basis: int = 3
    downscale_hidden: int = 2
    interactions: tuple = (1, 2, 3)
    interaction_n_scales: int = 5
    interaction_shift: int = 1
    images: np.ndarray | None = None  # [T, C, U, U] natural pack; synthetic fallback


def _sweep_basis(cfg: SweepConfig, n_scales: int, filter_size: int, sigma0: float,
                 n_basis: int | None = None) -> SteerableBasis:
    spec = BasisSpec(n_basis or cfg.n_basis, filter_size, ScaleGrid(cfg.base, n_scales), sigma0)
    return build_basis(spec)


def _trial_image(cfg: SweepConfig, rng: np.random.Generator, size: int, trial: int) -> np.ndarray:
    if cfg.images is not None:
        img = np.asarray(cfg.images[trial % len(cfg.images)], dtype=np.float64)
        if img.shape[0] != cfg.channels or img.shape[-1] < size:
            raise ValueError(f"bundled image {img.shape} unusable for size {size}")
        img = img[:, :size, :size].copy()
        img -= img.mean(axis=(1, 2), keepdims=True)
        img /= img.std(axis=(1, 2), keepdims=True) + 1e-12
        return img.astype(np.float32)
    return band_limited_image(rng, cfg.channels, size).astype(np.float32)


def _run_trials(cfg: SweepConfig, worker, trials: int):
    results = [None] * trials
    if cfg.threads > 1:
        with ThreadPoolExecutor(max_workers=cfg.threads) as pool:
            for i, res in enumerate(pool.map(worker, range(trials))):
                results[i] = res
    else:
        for i in range(trials):
            results[i] = worker(i)
    return results


def sweep_equivariance(cfg: SweepConfig) -> EquivarianceReport:
    """Run the depth, downscale and interaction sweeps and aggregate Delta."""
    report = EquivarianceReport(image_source="synthetic" if cfg.images is None else "pack")
    max_depth = max(cfg.depths)

    def depth_trial(t: int):
        rng = np.random.default_rng((cfg.seed, 0, t))
        basis = _sweep_basis(cfg, cfg.depth_n_scales, cfg.filter_size, cfg.sigma0)
        stack = random_stack(rng, max_depth, basis, cfg.channels, cfg.hidden,
                             padding_mode=PAD_CIRCULAR, nonlinearity=cfg.nonlinearity)
        img = _trial_image(cfg, rng, cfg.image_size, t)
        return equivariance_error_profile(stack, img, cfg.depth_shift, list(cfg.depths))

    profiles = _run_trials(cfg, depth_trial, cfg.trials)
    for d in cfg.depths:
        vals = np.array([p[d] for p in profiles])
        report.points.append(SweepPoint("depth", float(d), float(vals.mean()), float(vals.std()),
                                        cfg.trials, cfg.depth_n_scales, cfg.base, cfg.seed))

    def downscale_trial(t: int):
        rng = np.random.default_rng((cfg.seed, 1, t))
        basis = _sweep_basis(cfg, cfg.downscale_n_scales, cfg.downscale_filter_size,
                             cfg.downscale_sigma0, cfg.downscale_n_basis)
        stack = random_stack(rng, 1, basis, cfg.channels, cfg.downscale_hidden,
                             padding_mode=PAD_ZERO, nonlinearity=cfg.nonlinearity)
        img = _trial_image(cfg, rng, cfg.downscale_image_size, t)
        out = {}
        for j in cfg.downscale_shifts:
            factor = cfg.base**j
            j_grid = min(j, cfg.downscale_n_scales - 1)
            out[j] = equivariance_error(stack, img, j_grid, factor=factor)
        return out

    down = _run_trials(cfg, downscale_trial, cfg.trials)
    for j in cfg.downscale_shifts:
        vals = np.array([p[j] for p in down])
        report.points.append(SweepPoint("downscale", float(cfg.base**j), float(vals.mean()),
                                        float(vals.std()), cfg.trials, cfg.downscale_n_scales,
                                        cfg.base, cfg.seed))

    # The interaction sweep pairs one shared lift with a K_S-extent layer so
    # the kernels with scale extent act on a genuine group signal.
    def interaction_trial(t: int):
        rng = np.random.default_rng((cfg.seed, 2, t))
        basis = _sweep_basis(cfg, cfg.interaction_n_scales, cfg.filter_size, cfg.sigma0)
        img = _trial_image(cfg, rng, cfg.image_size, t)
        lift_layer = random_layer(rng, cfg.channels, cfg.hidden, basis, padding_mode=PAD_ZERO,
                                  dtype=np.float32)
        out_all = {}
        out_core = {}
        for k_s in cfg.interactions:
            hh = random_layer(rng, cfg.hidden, cfg.hidden, basis, interaction=k_s,
                              padding_mode=PAD_ZERO, dtype=np.float32)
            stack = ScaleConvStack([lift_layer, hh], cfg.nonlinearity)
            out_all[k_s] = equivariance_error(stack, img, cfg.interaction_shift)
            out_core[k_s] = equivariance_error(stack, img, cfg.interaction_shift, core_levels_only=True)
        return out_all, out_core

    inter = _run_trials(cfg, interaction_trial, cfg.trials)
    for k_s in cfg.interactions:
        vals = np.array([p[0][k_s] for p in inter])
        core = np.array([p[1][k_s] for p in inter])
        report.points.append(SweepPoint("interaction", float(k_s), float(vals.mean()), float(vals.std()),
                                        cfg.trials, cfg.interaction_n_scales, cfg.base, cfg.seed))
        report.points.append(SweepPoint("interaction_core", float(k_s), float(core.mean()),
                                        float(core.std()), cfg.trials, cfg.interaction_n_scales,
                                        cfg.base, cfg.seed))
    report.validate()
    return report
