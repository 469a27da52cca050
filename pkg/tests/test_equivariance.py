import numpy as np
import pytest

from scalesteer.basis import BasisSpec, assemble_kernel, build_basis
from scalesteer.equivariance import (
    EquivarianceReport,
    ScaleConvStack,
    SweepConfig,
    SweepPoint,
    band_limited_image,
    equivariance_error,
    group_conv_oracle,
    random_stack,
    rescale_image,
    run_oracle_suite,
    scale_shift_error,
    semidirect_error,
    translation_error,
)
from scalesteer.group import DEFAULT_BASE, ScaleGrid
from scalesteer.scaleconv import FeatureMapH, random_layer
from scalesteer.tensorops import PAD_CIRCULAR


def test_rescale_identity_is_bit_exact():
    rng = np.random.default_rng(0)
    img = rng.standard_normal((2, 13, 13))
    out = rescale_image(img, 1.0)
    assert np.array_equal(out, img)
    assert out is not img


def test_rescale_constant_stays_constant():
    img = np.full((1, 10, 10), 3.7)
    for factor in (0.3, 0.5, 1.7, 2.0):
        out = rescale_image(img, factor)
        assert np.allclose(out, 3.7, rtol=1e-12)


def test_rescale_reproduces_affine_ramp_interior():
    ys, xs = np.mgrid[0:16, 0:16].astype(float)
    img = (2.0 * xs + 0.5 * ys + 1.0)[None]
    up = rescale_image(img, 2.0)
    ysu, xsu = np.mgrid[0:32, 0:32].astype(float)
    want = 2.0 * ((xsu + 0.5) / 2 - 0.5) + 0.5 * ((ysu + 0.5) / 2 - 0.5) + 1.0
    assert np.allclose(up[0, 2:-2, 2:-2], want[2:-2, 2:-2], rtol=1e-12)


def test_rescale_rejects_degenerate():
    img = np.zeros((1, 4, 4))
    with pytest.raises(ValueError):
        rescale_image(img, 0.05)
    with pytest.raises(ValueError):
        rescale_image(img, -1.0)
    with pytest.raises(ValueError):
        rescale_image(img, 1.0, method="nearest")


def test_band_limited_image_is_seeded_and_normalised():
    a = band_limited_image(np.random.default_rng(5), 2, 32)
    b = band_limited_image(np.random.default_rng(5), 2, 32)
    assert np.array_equal(a, b)
    assert abs(a.mean()) < 1e-10
    assert np.allclose(a.std(axis=(1, 2)), 1.0, rtol=1e-6)


def small_stack(depth=2, levels=5, seed=0, **kw):
    basis = build_basis(BasisSpec(3, 5, ScaleGrid(DEFAULT_BASE, levels), 1.0))
    return random_stack(np.random.default_rng(seed), depth, basis, 1, 3, **kw)


def test_oracle_single_level_reduces_to_correlation():
    rng = np.random.default_rng(1)
    basis = build_basis(BasisSpec(3, 3, ScaleGrid(DEFAULT_BASE, 1), 1.0))
    layer = random_layer(rng, 2, 2, basis)
    f = FeatureMapH(rng.standard_normal((2, 1, 6, 6)), basis.spec.scale_grid)
    kernel = assemble_kernel(layer.weights, basis)
    out = group_conv_oracle(f, kernel)
    from scalesteer.tensorops import conv2d

    want = conv2d(f.data[:, 0], kernel[:, :, 0, 0])
    assert np.allclose(out.data[:, 0], want, rtol=1e-10, atol=1e-12)


def test_oracle_delta_input_reads_out_kernel():
    basis = build_basis(BasisSpec(2, 3, ScaleGrid(DEFAULT_BASE, 2), 1.0))
    kernel = assemble_kernel(np.ones((1, 1, 2)), basis)
    f = FeatureMapH(np.zeros((1, 2, 5, 5)), basis.spec.scale_grid)
    f.data[0, 1, 2, 2] = 1.0
    out = group_conv_oracle(f, kernel)
    assert np.allclose(out.data[0, 1, 1:4, 1:4], kernel[0, 0, 0, 1][::-1, ::-1], atol=1e-12)
    # level 0 reads level-0 input, which is empty
    assert not out.data[0, 0].any()


def test_oracle_suite_tolerances():
    worst32, _ = run_oracle_suite(0, 12, dtype=np.float32)
    worst64, _ = run_oracle_suite(0, 12, dtype=np.float64)
    assert worst32 <= 1e-5
    assert worst64 <= 1e-12


def test_scale_shift_property_many_depths():
    img = band_limited_image(np.random.default_rng(2), 1, 24).astype(np.float32)
    for depth in (1, 4, 10):
        stack = small_stack(depth=depth, levels=7, seed=depth, nonlinearity="relu")
        for j in (0, 1, 2):
            assert scale_shift_error(stack, img, j, num_levels=5) <= 1e-6


def test_scale_shift_rejects_windows_beyond_bank():
    stack = small_stack(levels=5)
    img = band_limited_image(np.random.default_rng(3), 1, 16).astype(np.float32)
    with pytest.raises(ValueError):
        scale_shift_error(stack, img, 3, num_levels=5)


def test_translation_equivariance_circular():
    img = band_limited_image(np.random.default_rng(4), 1, 24).astype(np.float32)
    stack = small_stack(depth=3, levels=4, padding_mode=PAD_CIRCULAR)
    assert translation_error(stack, img, (5, -7)) <= 1e-6


def test_semidirect_combined_property():
    img = band_limited_image(np.random.default_rng(5), 1, 24).astype(np.float32)
    stack = small_stack(depth=2, levels=6, padding_mode=PAD_CIRCULAR)
    assert semidirect_error(stack, img, 1, (3, 4), num_levels=4) <= 1e-6


def test_equivariance_error_zero_shift_is_zero():
    stack = small_stack(depth=1, levels=5)
    img = band_limited_image(np.random.default_rng(6), 1, 32).astype(np.float32)
    assert equivariance_error(stack, img, 0) == 0.0


def test_equivariance_error_scale_free():
    basis = build_basis(BasisSpec(3, 17, ScaleGrid(DEFAULT_BASE, 5), 1.2))
    stack = random_stack(np.random.default_rng(7), 1, basis, 1, 3, nonlinearity="identity")
    img = band_limited_image(np.random.default_rng(8), 1, 48).astype(np.float32)
    d1 = equivariance_error(stack, img, 1)
    d2 = equivariance_error(stack, 7.5 * img, 1)
    assert d1 > 0
    assert d2 == pytest.approx(d1, rel=1e-6)


def test_equivariance_error_small_for_one_layer():
    basis = build_basis(BasisSpec(4, 25, ScaleGrid(DEFAULT_BASE, 5), 1.2))
    stack = random_stack(np.random.default_rng(9), 1, basis, 1, 4, nonlinearity="identity")
    img = band_limited_image(np.random.default_rng(10), 1, 64).astype(np.float32)
    assert equivariance_error(stack, img, 1) < 0.01


def test_equivariance_error_rejects_bad_shift():
    stack = small_stack(levels=4)
    img = band_limited_image(np.random.default_rng(11), 1, 16).astype(np.float32)
    with pytest.raises(ValueError):
        equivariance_error(stack, img, 4)


def test_report_validation_and_csv():
    report = EquivarianceReport([
        SweepPoint("depth", 1.0, 0.01, 0.001, 10, 5, DEFAULT_BASE, 0),
        SweepPoint("depth", 10.0, 0.02, 0.002, 10, 5, DEFAULT_BASE, 0),
    ])
    report.validate()
    csv_text = report.to_csv()
    lines = csv_text.strip().splitlines()
    assert lines[0] == EquivarianceReport.CSV_HEADER
    assert len(lines) == 3
    bad = EquivarianceReport([SweepPoint("depth", 1.0, -0.1, 0.0, 1, 5, 2.0, 0)])
    with pytest.raises(ValueError):
        bad.validate()


def test_sweep_tiny_smoke():
    cfg = SweepConfig(
        trials=2, threads=1, image_size=32, filter_size=9, sigma0=1.0,
        depths=(1, 2), depth_n_scales=3,
        downscale_shifts=(0, 1), downscale_n_scales=3, downscale_image_size=32,
        downscale_filter_size=9, downscale_sigma0=1.0, downscale_hidden=2,
        interactions=(1, 2), interaction_n_scales=3,
    )
    report = sweep_equivariance_cached(cfg)
    sweeps = {p.sweep for p in report.points}
    assert {"depth", "downscale", "interaction", "interaction_core"} <= sweeps
    by_depth = [p for p in report.points if p.sweep == "depth"]
    assert by_depth[0].x == 1.0 and by_depth[0].trials == 2


def sweep_equivariance_cached(cfg):
    from scalesteer.equivariance import sweep_equivariance

    return sweep_equivariance(cfg)


def test_sweep_deterministic():
    cfg = SweepConfig(
        trials=1, threads=1, image_size=24, filter_size=7, sigma0=1.0,
        depths=(1,), depth_n_scales=2,
        downscale_shifts=(0,), downscale_n_scales=2, downscale_image_size=24,
        downscale_filter_size=7, downscale_sigma0=1.0, downscale_hidden=2,
        interactions=(1,), interaction_n_scales=2,
    )
    a = sweep_equivariance_cached(cfg).to_csv()
    b = sweep_equivariance_cached(cfg).to_csv()
    assert a == b
