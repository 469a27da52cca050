"""Discrete scale-translation group algebra.

Elements are pairs (s, t) of a scaling s = a**k (k an integer level, a > 1
the grid base) and a 2D pixel translation t = (t_y, t_x).  Composition is
the semidirect product rule

    (s2, t2) * (s1, t1) = (s2 * s1, s2 * t1 + t2)

so scaling and translation do not commute.  Scale is stored as the integer
level k, never as a float, which keeps level arithmetic exact.
"""

from dataclasses import dataclass

# Three levels per octave: a**3 == 2 exactly in the reals, and any doubling
# of scale is a shift by three grid levels.
DEFAULT_BASE = 2.0 ** (1.0 / 3.0)

Point = tuple[float, float]


@dataclass(frozen=True)
class GroupElement:
    """One element (a**scale_level, translation) of the group."""

    scale_level: int
    translation: Point = (0.0, 0.0)


IDENTITY = GroupElement(0, (0.0, 0.0))


def compose(g2: GroupElement, g1: GroupElement, base: float = DEFAULT_BASE) -> GroupElement:
    """Product g2 * g1: apply g1 first, then g2."""
    s2 = float(base) ** g2.scale_level
    t1y, t1x = g1.translation
    t2y, t2x = g2.translation
    return GroupElement(
        g2.scale_level + g1.scale_level,
        (s2 * t1y + t2y, s2 * t1x + t2x),
    )


def inverse(g: GroupElement, base: float = DEFAULT_BASE) -> GroupElement:
    """Element h with g * h == h * g == identity."""
    s_inv = float(base) ** (-g.scale_level)
    ty, tx = g.translation
    return GroupElement(-g.scale_level, (-s_inv * ty, -s_inv * tx))


def act_on_point(g: GroupElement, point: Point, base: float = DEFAULT_BASE) -> Point:
    """Action x -> s*x + t on a plane point, so pullbacks read f(g⁻¹ x)."""
    s = float(base) ** g.scale_level
    ty, tx = g.translation
    y, x = point
    return (s * y + ty, s * x + tx)


@dataclass(frozen=True)
class ScaleGrid:
    """Truncated geometric scale ladder a**0, a**1, ..., a**(num_levels-1)."""

    base: float = DEFAULT_BASE
    num_levels: int = 1

    def __post_init__(self):
        if not self.base > 1.0:
            raise ValueError(f"grid base must exceed 1, got {self.base}")
        if self.num_levels < 1:
            raise ValueError(f"need at least one scale level, got {self.num_levels}")

    def scale(self, level: int) -> float:
        return float(self.base) ** level

    @property
    def level_scales(self) -> list[float]:
        return [self.scale(k) for k in range(self.num_levels)]
