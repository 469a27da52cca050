import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from scalesteer.group import (
    DEFAULT_BASE,
    IDENTITY,
    GroupElement,
    ScaleGrid,
    act_on_point,
    compose,
    inverse,
)

levels = st.integers(min_value=-6, max_value=6)
coords = st.floats(min_value=-50, max_value=50, allow_nan=False)
elements = st.builds(GroupElement, levels, st.tuples(coords, coords))


def close(g: GroupElement, h: GroupElement, tol=1e-12) -> bool:
    return g.scale_level == h.scale_level and np.allclose(g.translation, h.translation, atol=tol)


def test_compose_matches_semidirect_rule_base2():
    # (k=1, t=(0,2)) o (k=0, t=(3,0)) with a=2 -> (k=1, t=(6, 2))
    g2 = GroupElement(1, (0.0, 2.0))
    g1 = GroupElement(0, (3.0, 0.0))
    got = compose(g2, g1, base=2.0)
    assert got.scale_level == 1
    assert got.translation == (6.0, 2.0)


def test_identity_is_two_sided():
    g = GroupElement(2, (1.5, -0.5))
    assert close(compose(g, IDENTITY), g)
    assert close(compose(IDENTITY, g), g)


def test_inverse_base2_hand_computed():
    # (k=1, t=(2,4)) with a=2 -> (k=-1, t=(-1,-2)), from solving g * g^-1 = e
    inv = inverse(GroupElement(1, (2.0, 4.0)), base=2.0)
    assert inv.scale_level == -1
    assert inv.translation == (-1.0, -2.0)


def test_identity_inverse_is_identity():
    assert inverse(IDENTITY) == IDENTITY


@given(elements)
def test_inverse_cancels(g):
    assert close(compose(g, inverse(g)), IDENTITY, tol=1e-9)
    assert close(compose(inverse(g), g), IDENTITY, tol=1e-9)


@given(elements)
def test_inverse_is_involution(g):
    gg = inverse(inverse(g))
    assert close(gg, g, tol=1e-9)


@settings(max_examples=60)
@given(elements, elements, elements)
def test_composition_associative(g3, g2, g1):
    left = compose(compose(g3, g2), g1)
    right = compose(g3, compose(g2, g1))
    assert left.scale_level == right.scale_level
    assert np.allclose(left.translation, right.translation, rtol=1e-12, atol=1e-9)


def test_noncommutativity_witness():
    g1 = GroupElement(1, (0.0, 0.0))
    g2 = GroupElement(0, (1.0, 0.0))
    assert compose(g1, g2) != compose(g2, g1)


def test_left_quotient_formula():
    # compose(inverse(g2), g1) == (s2^-1 s1, s2^-1 (t1 - t2))
    base = 2.0
    g2 = GroupElement(2, (3.0, -1.0))
    g1 = GroupElement(1, (5.0, 7.0))
    got = compose(inverse(g2, base), g1, base)
    s2_inv = base**-2
    assert got.scale_level == -1
    assert np.allclose(got.translation, (s2_inv * (5.0 - 3.0), s2_inv * (7.0 + 1.0)))


def test_act_on_point_pure_scaling():
    assert act_on_point(GroupElement(1), (3.0, 5.0), base=2.0) == (6.0, 10.0)


def test_act_on_point_identity():
    assert act_on_point(IDENTITY, (1.25, -9.5)) == (1.25, -9.5)


def test_action_is_homomorphism():
    rng = np.random.default_rng(11)
    for _ in range(100):
        g2 = GroupElement(int(rng.integers(-3, 4)), tuple(rng.uniform(-5, 5, 2)))
        g1 = GroupElement(int(rng.integers(-3, 4)), tuple(rng.uniform(-5, 5, 2)))
        x = tuple(rng.uniform(-10, 10, 2))
        via_compose = act_on_point(compose(g2, g1), x)
        via_chain = act_on_point(g2, act_on_point(g1, x))
        assert np.allclose(via_compose, via_chain, rtol=1e-12, atol=1e-12)


def test_scale_grid_levels_increase_from_one():
    grid = ScaleGrid(DEFAULT_BASE, 5)
    scales = grid.level_scales
    assert scales[0] == 1.0
    assert all(b > a for a, b in zip(scales, scales[1:]))


def test_scale_grid_rejects_bad_parameters():
    with pytest.raises(ValueError):
        ScaleGrid(1.0, 3)
    with pytest.raises(ValueError):
        ScaleGrid(2.0, 0)


def test_default_base_three_levels_per_octave():
    assert ScaleGrid().scale(3) == pytest.approx(2.0, rel=1e-12)
