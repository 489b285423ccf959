# -*- coding: utf-8 -*-
"""
Analytic CSG solids and everything measured from them: signed distance,
SDF grids with trilinear lookup, boundary-biased point sampling, mass
properties and shadow (trapped) volumes for setup orientation.

Parts are origin-free: every lattice is laid over the part's bounding box,
and UVW coordinates are that box rescaled to the unit cube.
"""
import itertools
import math
import struct
from dataclasses import dataclass
from functools import cached_property
from typing import Union

import numpy as np
from loguru import logger

from .errors import GeometryError, SamplingBudgetError, UsageError, DataError
from .utils import atomic_write_bytes, atomic_write_text, format_float

PRIMITIVE_KINDS = ('box', 'sphere', 'cylinder')
CSG_OPS = ('union', 'difference', 'intersection')
SURFACE_KINDS = ('planar', 'cylindrical', 'spherical')

# Setup axes name the direction the tool travels; '-z' approaches from above.
AXES = ('+x', '-x', '+y', '-y', '+z', '-z')
AXIS_VECTORS = {
    '+x': (1, 0, 0), '-x': (-1, 0, 0),
    '+y': (0, 1, 0), '-y': (0, -1, 0),
    '+z': (0, 0, 1), '-z': (0, 0, -1),
}

NEAR_SURFACE_FRACTION = 0.4
# fraction of the longest bbox extent
NEAR_SURFACE_BAND = 0.01
SAMPLING_BUDGET = 10_000
DEFAULT_GRID_N = 40
MIN_MASS_RESOLUTION = 64
_VALIDATION_RESOLUTION = 24

GRID_MAGIC = b'VSDF'
GRID_VERSION = 1
_GRID_HEADER = struct.Struct('<4sHH6d')


def _signed_permutations():
    mats = []
    for perm in itertools.permutations(range(3)):
        for signs in itertools.product((1, -1), repeat=3):
            m = np.zeros((3, 3), dtype=np.int64)
            for row, (col, s) in enumerate(zip(perm, signs)):
                m[row, col] = s
            mats.append(m)
    return mats


SIGNED_PERMUTATIONS = tuple(_signed_permutations())
# Proper rotations only; index 0 is the identity.
ROTATIONS = tuple(m for m in SIGNED_PERMUTATIONS if round(np.linalg.det(m)) == 1)


def rotation_index(matrix) -> int:
    m = np.asarray(np.rint(matrix), dtype=np.int64)
    for i, r in enumerate(ROTATIONS):
        if np.array_equal(m, r):
            return i
    raise GeometryError(f'Not an axis-aligned rotation:\n{m}')


def is_signed_permutation(matrix) -> bool:
    m = np.asarray(matrix)
    if m.shape != (3, 3):
        return False
    return any(np.array_equal(m, p) for p in SIGNED_PERMUTATIONS)


# ---------------------------------------------------------------------------
# Surface patches
# ---------------------------------------------------------------------------

class Patch:
    """One canonical face of a primitive, in the primitive's local frame."""
    kind = 'planar'

    def __init__(self, primitive: 'Primitive'):
        self.primitive = primitive

    @property
    def area(self) -> float:
        raise NotImplementedError

    def _local_grid(self, m: int):
        raise NotImplementedError

    def _local_random(self, rng, k: int):
        raise NotImplementedError

    def _local_distance(self, local):
        raise NotImplementedError

    def grid_samples(self, m: int):
        """Deterministic equal-area samples: (points, outward normals), m*m each."""
        local, normals = self._local_grid(m)
        return self.primitive.to_world(local), self.primitive.rotate(normals)

    def random_samples(self, rng, k: int):
        local, normals = self._local_random(rng, k)
        return self.primitive.to_world(local), self.primitive.rotate(normals)

    def distance(self, points):
        return self._local_distance(self.primitive.to_local(points))

    def direction(self):
        """World normal for planes, axis for cylinders (sign-canonical), zero for spheres."""
        return np.zeros(3)


class RectPatch(Patch):
    kind = 'planar'

    def __init__(self, primitive, axis: int, sign: int):
        super().__init__(primitive)
        self.axis = axis
        self.sign = sign
        self.a, self.b = [k for k in range(3) if k != axis]
        half = np.asarray(primitive.dims) / 2.0
        self.ha, self.hb, self.hn = half[self.a], half[self.b], half[axis]

    @property
    def area(self):
        return 4.0 * self.ha * self.hb

    def _place(self, u, v):
        pts = np.zeros((len(u), 3))
        pts[:, self.a] = u
        pts[:, self.b] = v
        pts[:, self.axis] = self.sign * self.hn
        normals = np.zeros((len(u), 3))
        normals[:, self.axis] = self.sign
        return pts, normals

    def _local_grid(self, m):
        c = (np.arange(m) + 0.5) / m * 2.0 - 1.0
        uu, vv = np.meshgrid(c * self.ha, c * self.hb, indexing='ij')
        return self._place(uu.ravel(), vv.ravel())

    def _local_random(self, rng, k):
        u = rng.uniform(-self.ha, self.ha, k)
        v = rng.uniform(-self.hb, self.hb, k)
        return self._place(u, v)

    def _local_distance(self, p):
        da = np.maximum(np.abs(p[:, self.a]) - self.ha, 0.0)
        db = np.maximum(np.abs(p[:, self.b]) - self.hb, 0.0)
        dn = p[:, self.axis] - self.sign * self.hn
        return np.sqrt(da * da + db * db + dn * dn)

    def direction(self):
        n = np.zeros(3)
        n[self.axis] = self.sign
        return self.primitive.rotate(n[None, :])[0]


class DiskPatch(Patch):
    kind = 'planar'

    def __init__(self, primitive, sign: int):
        super().__init__(primitive)
        self.sign = sign
        self.r, h = primitive.dims
        self.hz = h / 2.0

    @property
    def area(self):
        return math.pi * self.r * self.r

    def _place(self, rho, theta):
        pts = np.stack([rho * np.cos(theta), rho * np.sin(theta),
                        np.full_like(rho, self.sign * self.hz)], axis=1)
        normals = np.zeros_like(pts)
        normals[:, 2] = self.sign
        return pts, normals

    def _local_grid(self, m):
        rho = self.r * np.sqrt((np.arange(m) + 0.5) / m)
        theta = 2.0 * math.pi * (np.arange(m) + 0.5) / m
        rr, tt = np.meshgrid(rho, theta, indexing='ij')
        return self._place(rr.ravel(), tt.ravel())

    def _local_random(self, rng, k):
        rho = self.r * np.sqrt(rng.random(k))
        theta = 2.0 * math.pi * rng.random(k)
        return self._place(rho, theta)

    def _local_distance(self, p):
        rho = np.hypot(p[:, 0], p[:, 1])
        dr = np.maximum(rho - self.r, 0.0)
        dz = p[:, 2] - self.sign * self.hz
        return np.hypot(dr, dz)

    def direction(self):
        return self.primitive.rotate(np.array([[0.0, 0.0, float(self.sign)]]))[0]


class CylinderSidePatch(Patch):
    kind = 'cylindrical'

    def __init__(self, primitive):
        super().__init__(primitive)
        self.r, h = primitive.dims
        self.hz = h / 2.0

    @property
    def area(self):
        return 2.0 * math.pi * self.r * 2.0 * self.hz

    def _place(self, theta, z):
        normals = np.stack([np.cos(theta), np.sin(theta), np.zeros_like(theta)], axis=1)
        pts = normals * self.r
        pts[:, 2] = z
        return pts, normals

    def _local_grid(self, m):
        z = -self.hz + (np.arange(m) + 0.5) / m * 2.0 * self.hz
        theta = 2.0 * math.pi * (np.arange(m) + 0.5) / m
        zz, tt = np.meshgrid(z, theta, indexing='ij')
        return self._place(tt.ravel(), zz.ravel())

    def _local_random(self, rng, k):
        theta = 2.0 * math.pi * rng.random(k)
        z = rng.uniform(-self.hz, self.hz, k)
        return self._place(theta, z)

    def _local_distance(self, p):
        rho = np.hypot(p[:, 0], p[:, 1])
        dz = np.maximum(np.abs(p[:, 2]) - self.hz, 0.0)
        return np.hypot(rho - self.r, dz)

    def direction(self):
        axis = self.primitive.rotate(np.array([[0.0, 0.0, 1.0]]))[0]
        # first nonzero component positive
        for v in axis:
            if abs(v) > 0.5:
                return axis if v > 0 else -axis
        return axis


class SpherePatch(Patch):
    kind = 'spherical'

    def __init__(self, primitive):
        super().__init__(primitive)
        self.r = primitive.dims[0]

    @property
    def area(self):
        return 4.0 * math.pi * self.r * self.r

    def _place(self, z, theta):
        ring = np.sqrt(np.maximum(self.r * self.r - z * z, 0.0))
        pts = np.stack([ring * np.cos(theta), ring * np.sin(theta), z], axis=1)
        return pts, pts / self.r

    def _local_grid(self, m):
        # uniform in z is uniform in area on a sphere
        z = self.r * (1.0 - 2.0 * (np.arange(m) + 0.5) / m)
        theta = 2.0 * math.pi * (np.arange(m) + 0.5) / m
        zz, tt = np.meshgrid(z, theta, indexing='ij')
        return self._place(zz.ravel(), tt.ravel())

    def _local_random(self, rng, k):
        z = rng.uniform(-self.r, self.r, k)
        theta = 2.0 * math.pi * rng.random(k)
        return self._place(z, theta)

    def _local_distance(self, p):
        return np.abs(np.linalg.norm(p, axis=1) - self.r)


# ---------------------------------------------------------------------------
# CSG tree
# ---------------------------------------------------------------------------

_DIM_COUNT = {'box': 3, 'sphere': 1, 'cylinder': 2}


@dataclass(frozen=True)
class Primitive:
    """box dims = full sizes; sphere dims = (radius,); cylinder dims = (radius, height) along local z."""
    kind: str
    translation: tuple
    rotation: int
    dims: tuple

    def __post_init__(self):
        if self.kind not in _DIM_COUNT:
            raise GeometryError(f'Unknown primitive kind: {self.kind}')
        translation = tuple(float(v) for v in self.translation)
        dims = tuple(float(v) for v in self.dims)
        object.__setattr__(self, 'translation', translation)
        object.__setattr__(self, 'dims', dims)
        if len(translation) != 3 or not all(math.isfinite(v) for v in translation):
            raise GeometryError(f'Bad translation for {self.kind}: {self.translation}')
        if len(dims) != _DIM_COUNT[self.kind]:
            raise GeometryError(f'{self.kind} takes {_DIM_COUNT[self.kind]} dims, got {len(dims)}')
        if not all(math.isfinite(d) and d > 0 for d in dims):
            raise GeometryError(f'{self.kind} dims must be strictly positive: {dims}')
        if not 0 <= int(self.rotation) < len(ROTATIONS):
            raise GeometryError(f'Rotation index out of range: {self.rotation}')
        object.__setattr__(self, 'rotation', int(self.rotation))

    @property
    def matrix(self) -> np.ndarray:
        return ROTATIONS[self.rotation].astype(np.float64)

    def to_local(self, points):
        return (points - np.asarray(self.translation)) @ self.matrix

    def to_world(self, local):
        return local @ self.matrix.T + np.asarray(self.translation)

    def rotate(self, vectors):
        return vectors @ self.matrix.T

    def local_half_extents(self) -> np.ndarray:
        if self.kind == 'box':
            return np.asarray(self.dims) / 2.0
        if self.kind == 'sphere':
            return np.full(3, self.dims[0])
        r, h = self.dims
        return np.array([r, r, h / 2.0])

    def bounds(self):
        half = np.abs(self.matrix) @ self.local_half_extents()
        t = np.asarray(self.translation)
        return t - half, t + half

    def sdf(self, points):
        p = self.to_local(points)
        if self.kind == 'box':
            q = np.abs(p) - np.asarray(self.dims) / 2.0
            outside = np.linalg.norm(np.maximum(q, 0.0), axis=1)
            inside = np.minimum(np.max(q, axis=1), 0.0)
            return outside + inside
        if self.kind == 'sphere':
            return np.linalg.norm(p, axis=1) - self.dims[0]
        r, h = self.dims
        d0 = np.hypot(p[:, 0], p[:, 1]) - r
        d1 = np.abs(p[:, 2]) - h / 2.0
        return np.minimum(np.maximum(d0, d1), 0.0) + np.hypot(np.maximum(d0, 0.0), np.maximum(d1, 0.0))

    def contains(self, points):
        p = self.to_local(points)
        if self.kind == 'box':
            return np.all(np.abs(p) < np.asarray(self.dims) / 2.0, axis=1)
        if self.kind == 'sphere':
            return np.einsum('ij,ij->i', p, p) < self.dims[0] ** 2
        r, h = self.dims
        return (p[:, 0] ** 2 + p[:, 1] ** 2 < r * r) & (np.abs(p[:, 2]) < h / 2.0)

    def patches(self) -> list:
        if self.kind == 'box':
            return [RectPatch(self, axis, sign) for axis in range(3) for sign in (1, -1)]
        if self.kind == 'cylinder':
            return [CylinderSidePatch(self), DiskPatch(self, 1), DiskPatch(self, -1)]
        return [SpherePatch(self)]


@dataclass(frozen=True)
class CsgOp:
    op: str
    left: 'CsgNode'
    right: 'CsgNode'

    def __post_init__(self):
        if self.op not in CSG_OPS:
            raise GeometryError(f'Unknown CSG op: {self.op}')
        if self.left is None or self.right is None:
            raise GeometryError(f'{self.op} needs two operands')


CsgNode = Union[Primitive, CsgOp]


def union(a, b):
    return CsgOp('union', a, b)


def difference(a, b):
    return CsgOp('difference', a, b)


def intersection(a, b):
    return CsgOp('intersection', a, b)


def _node_sdf(node, points):
    if isinstance(node, Primitive):
        return node.sdf(points)
    a = _node_sdf(node.left, points)
    b = _node_sdf(node.right, points)
    if node.op == 'union':
        return np.minimum(a, b)
    if node.op == 'intersection':
        return np.maximum(a, b)
    return np.maximum(a, -b)


def _node_contains(node, points):
    if isinstance(node, Primitive):
        return node.contains(points)
    a = _node_contains(node.left, points)
    b = _node_contains(node.right, points)
    if node.op == 'union':
        return a | b
    if node.op == 'intersection':
        return a & b
    return a & ~b


def _node_bounds(node):
    if isinstance(node, Primitive):
        return node.bounds()
    lo_a, hi_a = _node_bounds(node.left)
    if node.op == 'difference':
        return lo_a, hi_a
    lo_b, hi_b = _node_bounds(node.right)
    if node.op == 'union':
        return np.minimum(lo_a, lo_b), np.maximum(hi_a, hi_b)
    lo, hi = np.maximum(lo_a, lo_b), np.minimum(hi_a, hi_b)
    if np.any(hi <= lo):
        raise GeometryError('Intersection of disjoint operands is empty')
    return lo, hi


def iter_primitives(node):
    if isinstance(node, Primitive):
        yield node
    else:
        yield from iter_primitives(node.left)
        yield from iter_primitives(node.right)


@dataclass(frozen=True)
class BoundingBox:
    min_corner: tuple
    extents: tuple

    def __post_init__(self):
        object.__setattr__(self, 'min_corner', tuple(float(v) for v in self.min_corner))
        object.__setattr__(self, 'extents', tuple(float(v) for v in self.extents))
        if len(self.extents) != 3 or not all(e > 0 for e in self.extents):
            raise GeometryError(f'Bounding box extents must be positive: {self.extents}')

    @property
    def lo(self) -> np.ndarray:
        return np.asarray(self.min_corner)

    @property
    def hi(self) -> np.ndarray:
        return self.lo + np.asarray(self.extents)

    @property
    def center(self) -> np.ndarray:
        return self.lo + np.asarray(self.extents) / 2.0

    @property
    def longest(self) -> float:
        return max(self.extents)

    @property
    def volume(self) -> float:
        return float(np.prod(self.extents))

    def to_uvw(self, points):
        return (np.asarray(points, dtype=np.float64) - self.lo) / np.asarray(self.extents)

    def from_uvw(self, uvw):
        return self.lo + np.asarray(uvw, dtype=np.float64) * np.asarray(self.extents)


@dataclass(frozen=True)
class CsgPart:
    id: str
    root: CsgNode

    def __post_init__(self):
        if self.root is None:
            raise GeometryError(f'Part {self.id} has an empty CSG tree')
        lo, hi = _node_bounds(self.root)
        if not np.all(np.isfinite(lo)) or not np.all(np.isfinite(hi)):
            raise GeometryError(f'Part {self.id} is unbounded')
        if not _has_interior(self.root, lo, hi):
            raise GeometryError(f'Part {self.id} evaluates to an empty solid')

    @cached_property
    def bbox(self) -> BoundingBox:
        lo, hi = _node_bounds(self.root)
        return BoundingBox(lo, hi - lo)

    @property
    def primitives(self) -> list:
        return list(iter_primitives(self.root))


def _has_interior(root, lo, hi, n=_VALIDATION_RESOLUTION) -> bool:
    axes = [lo[k] + (np.arange(n) + 0.5) / n * (hi[k] - lo[k]) for k in range(3)]
    xx, yy, zz = np.meshgrid(*axes, indexing='ij')
    pts = np.stack([xx.ravel(), yy.ravel(), zz.ravel()], axis=1)
    return bool(np.any(_node_contains(root, pts)))


def sdf_eval(part: CsgPart, p):
    """Signed distance (negative inside). Accepts one point or an (N, 3) array."""
    arr = np.asarray(p, dtype=np.float64)
    if arr.ndim == 1:
        return float(_node_sdf(part.root, arr[None, :])[0])
    return _node_sdf(part.root, arr)


def contains(part: CsgPart, p):
    """Membership evaluated directly on the tree, independent of the distance bound."""
    arr = np.asarray(p, dtype=np.float64)
    if arr.ndim == 1:
        return bool(_node_contains(part.root, arr[None, :])[0])
    return _node_contains(part.root, arr)


def surface_patches(part: CsgPart) -> list:
    return [patch for prim in part.primitives for patch in prim.patches()]


def boundary_side(part: CsgPart, points, normals, eps: float):
    """+1 where the solid lies behind the normal, -1 where in front, 0 off the boundary."""
    s_out = sdf_eval(part, points + eps * normals)
    s_in = sdf_eval(part, points - eps * normals)
    side = np.zeros(len(points), dtype=np.int64)
    side[(s_out > 0) & (s_in < 0)] = 1
    side[(s_out < 0) & (s_in > 0)] = -1
    return side


# ---------------------------------------------------------------------------
# SDF grids
# ---------------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class SdfGrid:
    """n^3 samples over bbox, x-fastest: values[i + n*(j + n*k)] at (u_i, v_j, w_k)."""
    n: int
    bbox: BoundingBox
    values: np.ndarray

    def __post_init__(self):
        values = np.ascontiguousarray(self.values, dtype=np.float64).ravel()
        if len(values) != self.n ** 3:
            raise DataError(f'SDF grid expects {self.n ** 3} values, got {len(values)}')
        object.__setattr__(self, 'values', values)

    def cube(self) -> np.ndarray:
        """View indexed [k, j, i] (w, v, u)."""
        return self.values.reshape(self.n, self.n, self.n)


def lattice_uvw(n: int) -> np.ndarray:
    c = np.linspace(0.0, 1.0, n)
    ww, vv, uu = np.meshgrid(c, c, c, indexing='ij')
    return np.stack([uu.ravel(), vv.ravel(), ww.ravel()], axis=1)


def bake_grid(part: CsgPart, n: int = DEFAULT_GRID_N) -> SdfGrid:
    if n < 2:
        raise UsageError(f'SDF grid needs at least 2 samples per axis, got {n}')
    bbox = part.bbox
    points = bbox.from_uvw(lattice_uvw(n))
    return SdfGrid(n, bbox, sdf_eval(part, points))


def trilinear(grid: SdfGrid, uvw):
    """Multilinear lookup; queries outside the unit cube are clamped to its boundary."""
    q = np.asarray(uvw, dtype=np.float64)
    single = q.ndim == 1
    q = np.clip(np.atleast_2d(q), 0.0, 1.0)
    n = grid.n
    f = q * (n - 1)
    snapped = np.rint(f)
    f = np.where(np.abs(f - snapped) < 1e-9, snapped, f)
    i0 = np.clip(np.floor(f).astype(np.int64), 0, n - 2)
    t = f - i0
    cube = grid.cube()
    ix, iy, iz = i0[:, 0], i0[:, 1], i0[:, 2]
    tx, ty, tz = t[:, 0], t[:, 1], t[:, 2]

    c00 = cube[iz, iy, ix] * (1 - tx) + cube[iz, iy, ix + 1] * tx
    c10 = cube[iz, iy + 1, ix] * (1 - tx) + cube[iz, iy + 1, ix + 1] * tx
    c01 = cube[iz + 1, iy, ix] * (1 - tx) + cube[iz + 1, iy, ix + 1] * tx
    c11 = cube[iz + 1, iy + 1, ix] * (1 - tx) + cube[iz + 1, iy + 1, ix + 1] * tx
    c0 = c00 * (1 - ty) + c10 * ty
    c1 = c01 * (1 - ty) + c11 * ty
    out = c0 * (1 - tz) + c1 * tz
    return float(out[0]) if single else out


def grid_to_bytes(grid: SdfGrid) -> bytes:
    header = _GRID_HEADER.pack(GRID_MAGIC, GRID_VERSION, grid.n,
                               *grid.bbox.min_corner, *grid.bbox.extents)
    return header + grid.values.astype('<f4').tobytes()


def grid_from_bytes(data: bytes) -> SdfGrid:
    if len(data) < _GRID_HEADER.size:
        raise DataError('SDF grid file is truncated')
    magic, version, n, *box = _GRID_HEADER.unpack_from(data)
    if magic != GRID_MAGIC:
        raise DataError(f'Not an SDF grid file (magic {magic!r})')
    if version != GRID_VERSION:
        raise DataError(f'Unsupported SDF grid version {version}')
    body = data[_GRID_HEADER.size:]
    if len(body) != 4 * n ** 3:
        raise DataError(f'SDF grid body holds {len(body)} bytes, expected {4 * n ** 3}')
    values = np.frombuffer(body, dtype='<f4').astype(np.float64)
    return SdfGrid(n, BoundingBox(box[:3], box[3:]), values)


def save_grid(path: str, grid: SdfGrid) -> None:
    atomic_write_bytes(path, grid_to_bytes(grid))


def load_grid(path: str) -> SdfGrid:
    with open(path, 'rb') as f:
        return grid_from_bytes(f.read())


# ---------------------------------------------------------------------------
# Point sampling
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class SamplePoint:
    uvw: tuple
    sdf: float


@dataclass(frozen=True, eq=False)
class PointSamples:
    uvw: np.ndarray
    sdf: np.ndarray

    def __len__(self):
        return len(self.sdf)

    def __iter__(self):
        for q, s in zip(self.uvw, self.sdf):
            yield SamplePoint(tuple(float(v) for v in q), float(s))


def _draw_near_surface(part, patches, probs, bbox, band, need, rng, budget):
    chunks = []
    have = 0
    eps = 1e-7 * bbox.longest
    for _ in range(budget):
        if have >= need:
            break
        k = 2 * (need - have) + 16
        choice = rng.choice(len(patches), size=k, p=probs)
        pts, normals = [], []
        for idx in np.unique(choice):
            p, nrm = patches[idx].random_samples(rng, int(np.sum(choice == idx)))
            pts.append(p)
            normals.append(nrm)
        pts = np.concatenate(pts)
        normals = np.concatenate(normals)
        on_surface = boundary_side(part, pts, normals, eps) != 0
        offset = rng.uniform(-band, band, len(pts))
        q = pts + offset[:, None] * normals
        inside_box = np.all((q >= bbox.lo) & (q <= bbox.hi), axis=1)
        ok = on_surface & inside_box & (np.abs(sdf_eval(part, q)) <= band)
        accepted = q[ok][:need - have]
        chunks.append(accepted)
        have += len(accepted)
    if have < need:
        raise SamplingBudgetError(
            f'Part {part.id}: only {have}/{need} near-surface points within {budget} attempts')
    return np.concatenate(chunks) if chunks else np.zeros((0, 3))


def _draw_uniform(part, bbox, band, need, rng, budget):
    chunks = []
    have = 0
    for _ in range(budget):
        if have >= need:
            break
        k = 2 * (need - have) + 16
        q = bbox.lo + rng.random((k, 3)) * np.asarray(bbox.extents)
        accepted = q[np.abs(sdf_eval(part, q)) > band][:need - have]
        chunks.append(accepted)
        have += len(accepted)
    if have < need:
        raise SamplingBudgetError(
            f'Part {part.id}: only {have}/{need} off-surface points within {budget} attempts')
    return np.concatenate(chunks) if chunks else np.zeros((0, 3))


def sample_points(part: CsgPart, grid: SdfGrid, count: int, seed, budget: int = SAMPLING_BUDGET) -> PointSamples:
    """
    Exactly round(0.4 * count) points within the near-surface band, the rest
    uniform over the bbox outside the band. The band is NEAR_SURFACE_BAND times
    the longest bbox extent. SDF values are analytic.
    """
    if count < 1:
        raise UsageError(f'Need at least one sample point, got {count}')
    bbox = grid.bbox
    band = NEAR_SURFACE_BAND * bbox.longest
    rng = np.random.default_rng(seed)
    n_near = int(round(NEAR_SURFACE_FRACTION * count))

    patches = surface_patches(part)
    areas = np.array([p.area for p in patches])
    near = _draw_near_surface(part, patches, areas / areas.sum(), bbox, band, n_near, rng, budget)
    far = _draw_uniform(part, bbox, band, count - n_near, rng, budget)

    points = np.concatenate([near, far])[rng.permutation(count)]
    uvw = np.clip(bbox.to_uvw(points), 0.0, 1.0)
    return PointSamples(uvw, sdf_eval(part, points))


# ---------------------------------------------------------------------------
# Volumetric measures
# ---------------------------------------------------------------------------

def _lattice_sdf(part, axes):
    """SDF over the tensor lattice of three coordinate vectors, shape (nx, ny, nz)."""
    xs, ys, zs = axes
    out = np.empty((len(xs), len(ys), len(zs)))
    xx, yy = np.meshgrid(xs, ys, indexing='ij')
    plane = np.stack([xx.ravel(), yy.ravel(), np.zeros(xx.size)], axis=1)
    for k, z in enumerate(zs):
        plane[:, 2] = z
        out[:, :, k] = sdf_eval(part, plane).reshape(len(xs), len(ys))
    return out


def mass_properties(part: CsgPart, resolution: int = MIN_MASS_RESOLUTION):
    """
    (volume, surface area) from a padded cubic-cell lattice with cell size
    h = longest extent / resolution.

    Volume counts cell centers with negative SDF. Area integrates a raised
    cosine of width 2 eps over the SDF, eps = 2 h. With eps a whole number of
    cells the kernel sums to one at any offset, so lattice-aligned planes are
    exact and curved faces land within a few percent.
    """
    if resolution < MIN_MASS_RESOLUTION:
        raise UsageError(f'mass_properties needs resolution >= {MIN_MASS_RESOLUTION}, got {resolution}')
    bbox = part.bbox
    h = bbox.longest / resolution
    eps = 2.0 * h
    pad = 2.0 * eps
    lo = bbox.lo - pad
    counts = np.ceil((np.asarray(bbox.extents) + 2.0 * pad) / h).astype(int)
    axes = [lo[k] + (np.arange(counts[k]) + 0.5) * h for k in range(3)]
    sdf = _lattice_sdf(part, axes)
    cell = h ** 3
    volume = float(np.count_nonzero(sdf < 0.0)) * cell
    band = sdf[np.abs(sdf) < eps]
    area = float(np.sum(1.0 + np.cos(np.pi * band / eps))) * cell / (2.0 * eps)
    return volume, area


@dataclass(frozen=True, eq=False)
class Voxels:
    """Cell-centered SDF lattice exactly spanning the bbox, indexed [x, y, z]."""
    bbox: BoundingBox
    spacing: np.ndarray
    sdf: np.ndarray

    @property
    def occupancy(self) -> np.ndarray:
        return self.sdf < 0.0

    @property
    def counts(self):
        return self.sdf.shape

    @property
    def cell_volume(self) -> float:
        return float(np.prod(self.spacing))


def voxelize(part: CsgPart, resolution: int = MIN_MASS_RESOLUTION) -> Voxels:
    bbox = part.bbox
    h = bbox.longest / resolution
    ext = np.asarray(bbox.extents)
    counts = np.maximum(1, np.rint(ext / h).astype(int))
    spacing = ext / counts
    axes = [bbox.lo[k] + (np.arange(counts[k]) + 0.5) * spacing[k] for k in range(3)]
    return Voxels(bbox, spacing, _lattice_sdf(part, axes))


def trapped_mask(voxels: Voxels, axis: str) -> np.ndarray:
    """Void cells occluded by solid along the ray toward the tool's approach side."""
    if axis not in AXES:
        raise UsageError(f'Unknown axis {axis!r}, expected one of {AXES}')
    dim = 'xyz'.index(axis[1])
    occ = np.moveaxis(voxels.occupancy, dim, 0)
    blocked = np.zeros_like(occ)
    if axis[0] == '+':
        # tool travels +, so it enters from the low end
        seen = np.logical_or.accumulate(occ, axis=0)
        blocked[1:] = seen[:-1]
    else:
        seen = np.logical_or.accumulate(occ[::-1], axis=0)[::-1]
        blocked[:-1] = seen[1:]
    return np.moveaxis(~occ & blocked, 0, dim)


def shadow_volume_from_voxels(voxels: Voxels, axis: str) -> float:
    return float(np.count_nonzero(trapped_mask(voxels, axis))) * voxels.cell_volume


def shadow_volume(part: CsgPart, axis: str, resolution: int = MIN_MASS_RESOLUTION) -> float:
    return shadow_volume_from_voxels(voxelize(part, resolution), axis)


def orientation_from_voxels(voxels: Voxels) -> str:
    counts = [int(np.count_nonzero(trapped_mask(voxels, axis))) for axis in AXES]
    # min() keeps the first of equal counts, which is the documented tie-break order
    return AXES[counts.index(min(counts))]


def choose_setup_orientation(part: CsgPart, resolution: int = MIN_MASS_RESOLUTION) -> str:
    return orientation_from_voxels(voxelize(part, resolution))


# ---------------------------------------------------------------------------
# Rigid transforms and text format
# ---------------------------------------------------------------------------

_LOCAL_Z_FLIP = np.diag([1, 1, -1])


def transform_part(part: CsgPart, matrix, part_id: str = None) -> CsgPart:
    """Apply a signed permutation about the bbox center. Reflections are realized
    with a local z flip, under which every primitive is symmetric."""
    m = np.asarray(matrix, dtype=np.int64)
    if not is_signed_permutation(m):
        raise GeometryError(f'Not a signed permutation:\n{m}')
    c = part.bbox.center

    def rebuild(node):
        if isinstance(node, Primitive):
            t = m @ (np.asarray(node.translation) - c) + c
            r = m @ ROTATIONS[node.rotation]
            if round(np.linalg.det(r)) < 0:
                r = r @ _LOCAL_Z_FLIP
            return Primitive(node.kind, t, rotation_index(r), node.dims)
        return CsgOp(node.op, rebuild(node.left), rebuild(node.right))

    return CsgPart(part_id or part.id, rebuild(part.root))


def translate_part(part: CsgPart, offset, part_id: str = None) -> CsgPart:
    offset = np.asarray(offset, dtype=np.float64)

    def rebuild(node):
        if isinstance(node, Primitive):
            return Primitive(node.kind, np.asarray(node.translation) + offset, node.rotation, node.dims)
        return CsgOp(node.op, rebuild(node.left), rebuild(node.right))

    return CsgPart(part_id or part.id, rebuild(part.root))


PART_HEADER = '# virl-part v1'


def dump_part(part: CsgPart) -> str:
    """
    One CSG node per line, children before parents:

        part <id>
        node <index> box|sphere|cylinder <tx> <ty> <tz> <rotation 0-23> <dims...>
        node <index> union|difference|intersection <left index> <right index>
        root <index>
    """
    lines = [PART_HEADER, f'part {part.id}']

    def emit(node):
        if isinstance(node, Primitive):
            fields = [node.kind, *map(format_float, node.translation), str(node.rotation),
                      *map(format_float, node.dims)]
        else:
            left, right = emit(node.left), emit(node.right)
            fields = [node.op, str(left), str(right)]
        index = len(lines) - 2
        lines.append(f'node {index} ' + ' '.join(fields))
        return index

    root = emit(part.root)
    lines.append(f'root {root}')
    return '\n'.join(lines) + '\n'


def parse_part(text: str) -> CsgPart:
    part_id = None
    nodes = {}
    root = None
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith('#'):
            continue
        tokens = line.split()
        try:
            if tokens[0] == 'part':
                part_id = tokens[1]
            elif tokens[0] == 'node':
                index, kind = int(tokens[1]), tokens[2]
                if kind in PRIMITIVE_KINDS:
                    values = tokens[3:]
                    nodes[index] = Primitive(kind, [float(v) for v in values[:3]], int(values[3]),
                                             [float(v) for v in values[4:]])
                elif kind in CSG_OPS:
                    nodes[index] = CsgOp(kind, nodes[int(tokens[3])], nodes[int(tokens[4])])
                else:
                    raise GeometryError(f'unknown node kind {kind!r}')
            elif tokens[0] == 'root':
                root = nodes[int(tokens[1])]
            else:
                raise GeometryError(f'unknown record {tokens[0]!r}')
        except (IndexError, KeyError, ValueError) as e:
            raise GeometryError(f'Malformed part file at line {lineno}: {raw!r} ({e})')
    if part_id is None or root is None:
        raise GeometryError('Part file is missing its part or root record')
    return CsgPart(part_id, root)


def save_part(path: str, part: CsgPart) -> None:
    atomic_write_text(path, dump_part(part))


def load_part(path: str) -> CsgPart:
    with open(path, 'r', encoding='utf-8') as f:
        part = parse_part(f.read())
    logger.debug(f'Loaded part {part.id} from {path}')
    return part


def box(size, center=(0.0, 0.0, 0.0), rotation: int = 0) -> Primitive:
    return Primitive('box', center, rotation, size)


def sphere(radius: float, center=(0.0, 0.0, 0.0)) -> Primitive:
    return Primitive('sphere', center, 0, (radius,))


def cylinder(radius: float, height: float, center=(0.0, 0.0, 0.0), rotation: int = 0) -> Primitive:
    return Primitive('cylinder', center, rotation, (radius, height))


def rotation_for_axis(axis: int) -> int:
    """Rotation index taking local z onto world axis 0, 1 or 2."""
    for i, r in enumerate(ROTATIONS):
        if r[axis, 2] == 1:
            return i
    raise GeometryError(f'No rotation maps z to axis {axis}')
