"""
The 48 axis flips and axis swaps of the unit cube, packed as a 5-variable
code (f_x, f_y, f_z, perm_major, perm_order).

The code acts on UVW coordinates: axes are permuted first, then each
flagged output axis is mirrored u -> 1 - u about the cube center.
"""
import itertools
from dataclasses import dataclass

import numpy as np

from .errors import UsageError
from .geometry import SdfGrid, trilinear


@dataclass(frozen=True)
class AugCode:
    flips: tuple = (0, 0, 0)
    perm_major: int = 0
    perm_order: int = 0

    def __post_init__(self):
        flips = tuple(int(f) for f in self.flips)
        if len(flips) != 3 or any(f not in (0, 1) for f in flips):
            raise UsageError(f'Augmentation flips must be three 0/1 flags, got {self.flips}')
        if self.perm_major not in (0, 1, 2) or self.perm_order not in (0, 1):
            raise UsageError(f'Bad permutation slots ({self.perm_major}, {self.perm_order})')
        object.__setattr__(self, 'flips', flips)

    @property
    def permutation(self) -> tuple:
        """Output axis k reads input axis permutation[k]."""
        rest = [a for a in range(3) if a != self.perm_major]
        if self.perm_order:
            rest.reverse()
        return (self.perm_major, *rest)

    def as_tuple(self) -> tuple:
        return (*self.flips, self.perm_major, self.perm_order)

    @classmethod
    def from_tuple(cls, values) -> 'AugCode':
        fx, fy, fz, major, order = (int(v) for v in values)
        return cls((fx, fy, fz), major, order)

    def __str__(self):
        return ''.join(str(v) for v in self.as_tuple())


IDENTITY = AugCode()


def all_codes() -> list:
    return [AugCode(flips, major, order)
            for major, order in itertools.product(range(3), range(2))
            for flips in itertools.product((0, 1), repeat=3)]


def to_matrix(code: AugCode) -> np.ndarray:
    m = np.zeros((3, 3), dtype=np.int64)
    for k, src in enumerate(code.permutation):
        m[k, src] = -1 if code.flips[k] else 1
    return m


def from_matrix(matrix) -> AugCode:
    m = np.asarray(matrix)
    perm = tuple(int(np.flatnonzero(m[k])[0]) for k in range(3))
    flips = tuple(int(m[k, perm[k]] < 0) for k in range(3))
    rest = [a for a in range(3) if a != perm[0]]
    order = 0 if [perm[1], perm[2]] == rest else 1
    return AugCode(flips, perm[0], order)


def inverse(code: AugCode) -> AugCode:
    return from_matrix(to_matrix(code).T)


def compose(outer: AugCode, inner: AugCode) -> AugCode:
    """The code equal to applying `inner` then `outer`."""
    return from_matrix(to_matrix(outer) @ to_matrix(inner))


def apply_to_uvw(code: AugCode, uvw):
    q = np.asarray(uvw, dtype=np.float64)[..., list(code.permutation)]
    flips = np.asarray(code.flips, dtype=bool)
    return np.where(flips, 1.0 - q, q)


def apply_to_extents(code: AugCode, extents):
    e = np.asarray(extents, dtype=np.float64)
    if np.any(e <= 0):
        raise UsageError(f'Extents must be positive: {extents}')
    return e[..., list(code.permutation)]


def augmented_sdf(grid: SdfGrid, code: AugCode, uvw):
    """SDF of the transformed part at uvw, read from the untransformed grid.

    The part itself is not needed: the grid already carries its bbox, and the
    unit-cube uvw frame is what the code acts on.
    """
    return trilinear(grid, apply_to_uvw(inverse(code), uvw))


def encode_code(code: AugCode) -> np.ndarray:
    """Decoder input: flips as -1/+1, perm_major as 0, 1/2, 1, perm_order as 0/1."""
    flips = [2.0 * f - 1.0 for f in code.flips]
    return np.array([*flips, code.perm_major / 2.0, float(code.perm_order)])
