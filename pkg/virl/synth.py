"""
Procedural parts and deterministic proxy labels for the four
manufacturability tasks.

Every part starts from a block resting on the build plate (z = 0) and
receives boolean features: through-holes, top or side pockets, spherical
dimples, top bosses, side overhangs and mushroom caps. The labels are
closed-form functions of volumetric measures, so they depend on exactly
the structure that SDF pretraining sees.
"""
from dataclasses import asdict, dataclass

import numpy as np
from loguru import logger

from .encoder import extract_graph
from .errors import DataError, DegenerateFaceError, GeometryError, UsageError
from .geometry import (MIN_MASS_RESOLUTION, AXES, CsgPart, box, cylinder, difference, mass_properties,
                       orientation_from_voxels, rotation_for_axis, sphere, translate_part, trapped_mask,
                       union, voxelize)
from .heuristics import INFILL_FRACTION, WALL_THICKNESS, AmVolumeTerms
from .utils import derive_seed

MIN_PRIMITIVES = 2
MAX_PRIMITIVES = 8
GENERATION_BUDGET = 50

# am_time = (V*IP + A*w) * AM_A + V_over * AM_B + A_foot * AM_C, times noise
AM_A, AM_B, AM_C = 1.0, 0.5, 0.3
AM_NOISE = 0.03
# stress = k0 * height + k1 * height * max layer-area jump + k2 * V_over
STRESS_K = (0.1, 0.5, 2.0)
# removal rates in volume per unit time for bulk, near-surface and surface bands
TOOL_RATES = (1.0, 0.25, 0.0625)
NEAR_BAND_CELLS = 3.0
SURFACE_BAND_CELLS = 1.0
SETUP_TIME = 0.02
FINISH_DEPTH = 0.005

LABEL_COLUMNS = ('sm_time', 'am_time', 'stress_proxy', 'blade_proxy')


@dataclass(frozen=True)
class PartSpec:
    seed: int
    primitive_count: int = 4
    through_holes: bool = True
    pockets: bool = True
    bosses: bool = True

    def __post_init__(self):
        if not MIN_PRIMITIVES <= self.primitive_count <= MAX_PRIMITIVES:
            raise UsageError(
                f'primitive_count must be in [{MIN_PRIMITIVES}, {MAX_PRIMITIVES}], got {self.primitive_count}')
        if not (self.through_holes or self.pockets or self.bosses):
            raise UsageError('PartSpec needs at least one feature family enabled')

    @property
    def part_id(self) -> str:
        return f'part_{self.seed:06d}'

    @classmethod
    def random(cls, seed: int) -> 'PartSpec':
        rng = np.random.default_rng(derive_seed('spec', seed))
        flags = rng.random(3) < 0.75
        if not flags.any():
            flags[int(rng.integers(3))] = True
        count = int(rng.integers(MIN_PRIMITIVES, MAX_PRIMITIVES + 1))
        return cls(seed, count, bool(flags[0]), bool(flags[1]), bool(flags[2]))


# ---------------------------------------------------------------------------
# Features. Each returns (op, [primitives]) for a block of size s at the origin.
# ---------------------------------------------------------------------------

def _through_hole(rng, s):
    axis = int(rng.integers(3))
    others = [k for k in range(3) if k != axis]
    r = rng.uniform(0.08, 0.2) * min(s[k] for k in others)
    center = np.asarray(s) / 2.0
    for k in others:
        margin = r + 0.12 * s[k]
        center[k] = rng.uniform(margin, s[k] - margin)
    return 'difference', [cylinder(r, s[axis] + 0.4, center, rotation_for_axis(axis))]


def _top_pocket(rng, s):
    w = [rng.uniform(0.2, 0.5) * s[0], rng.uniform(0.2, 0.5) * s[1]]
    depth = rng.uniform(0.2, 0.7) * s[2]
    cx = rng.uniform(w[0] / 2 + 0.1 * s[0], s[0] - w[0] / 2 - 0.1 * s[0])
    cy = rng.uniform(w[1] / 2 + 0.1 * s[1], s[1] - w[1] / 2 - 0.1 * s[1])
    size = (w[0], w[1], depth + 0.2)
    return 'difference', [box(size, (cx, cy, s[2] - depth + size[2] / 2.0))]


def _side_pocket(rng, s):
    # blind slot from the +x or -x face, below the top so it can trap material
    depth = rng.uniform(0.2, 0.5) * s[0]
    wy = rng.uniform(0.2, 0.5) * s[1]
    wz = rng.uniform(0.2, 0.4) * s[2]
    cy = rng.uniform(wy / 2 + 0.1 * s[1], s[1] - wy / 2 - 0.1 * s[1])
    cz = rng.uniform(wz / 2 + 0.15 * s[2], s[2] - wz / 2 - 0.15 * s[2])
    size = (depth + 0.2, wy, wz)
    cx = s[0] - depth + size[0] / 2.0 if rng.random() < 0.5 else depth - size[0] / 2.0
    return 'difference', [box(size, (cx, cy, cz))]


def _dimple(rng, s):
    rho = rng.uniform(0.12, 0.25) * min(s)
    cx = rng.uniform(rho + 0.1 * s[0], s[0] - rho - 0.1 * s[0])
    cy = rng.uniform(rho + 0.1 * s[1], s[1] - rho - 0.1 * s[1])
    return 'difference', [sphere(rho, (cx, cy, s[2]))]


def _top_boss(rng, s):
    r = rng.uniform(0.08, 0.2) * min(s[0], s[1])
    h = rng.uniform(0.1, 0.4)
    cx = rng.uniform(r + 0.1 * s[0], s[0] - r - 0.1 * s[0])
    cy = rng.uniform(r + 0.1 * s[1], s[1] - r - 0.1 * s[1])
    if rng.random() < 0.5:
        return 'union', [cylinder(r, h + 0.05, (cx, cy, s[2] + h / 2.0 - 0.025))]
    return 'union', [box((2 * r, 2 * r, h + 0.05), (cx, cy, s[2] + h / 2.0 - 0.025))]


def _side_overhang(rng, s):
    # shelf sticking out of the +y or -y face, clear of the plate
    reach = rng.uniform(0.1, 0.3)
    wx = rng.uniform(0.3, 0.7) * s[0]
    z1 = rng.uniform(0.6, 0.9) * s[2]
    z0 = rng.uniform(0.3, 0.5) * z1
    cx = rng.uniform(wx / 2 + 0.05 * s[0], s[0] - wx / 2 - 0.05 * s[0])
    size = (wx, reach + 0.05, z1 - z0)
    cy = s[1] + reach / 2.0 - 0.025 if rng.random() < 0.5 else -reach / 2.0 + 0.025
    return 'union', [box(size, (cx, cy, (z0 + z1) / 2.0))]


def _mushroom(rng, s):
    r_stem = rng.uniform(0.06, 0.1) * min(s[0], s[1])
    r_cap = rng.uniform(2.0, 3.0) * r_stem
    h_stem = rng.uniform(0.1, 0.3)
    h_cap = rng.uniform(0.05, 0.12)
    cx = rng.uniform(r_cap + 0.05 * s[0], s[0] - r_cap - 0.05 * s[0])
    cy = rng.uniform(r_cap + 0.05 * s[1], s[1] - r_cap - 0.05 * s[1])
    stem = cylinder(r_stem, h_stem + 0.05 + h_cap / 2.0, (cx, cy, s[2] + (h_stem + h_cap / 2.0) / 2.0 - 0.025))
    cap = cylinder(r_cap, h_cap, (cx, cy, s[2] + h_stem + h_cap / 2.0))
    return 'union', [stem, cap]


FEATURES = {
    'through_holes': (_through_hole,),
    'pockets': (_top_pocket, _side_pocket, _dimple),
    'bosses': (_top_boss, _side_overhang, _mushroom),
}


def _build(spec: PartSpec, rng) -> CsgPart:
    s = (rng.uniform(0.6, 1.0), rng.uniform(0.6, 1.0), rng.uniform(0.3, 0.8))
    families = [name for name in FEATURES if getattr(spec, name)]
    additive, subtractive = [], []
    budget = spec.primitive_count - 1
    while budget > 0:
        family = families[int(rng.integers(len(families)))]
        options = FEATURES[family]
        op, prims = options[int(rng.integers(len(options)))](rng, s)
        if len(prims) > budget:
            continue
        (additive if op == 'union' else subtractive).append(prims)
        budget -= len(prims)
    root = box(s, np.asarray(s) / 2.0)
    for prims in additive:
        for prim in prims:
            root = union(root, prim)
    for prims in subtractive:
        for prim in prims:
            root = difference(root, prim)
    part = CsgPart(spec.part_id, root)
    return translate_part(part, -part.bbox.lo)


def generate_part_with_graph(spec: PartSpec):
    """(part, graph); resamples until the part is valid and its graph extracts cleanly."""
    for attempt in range(GENERATION_BUDGET):
        rng = np.random.default_rng(derive_seed('part', spec.seed, attempt))
        try:
            part = _build(spec, rng)
            graph = extract_graph(part)
        except (GeometryError, DegenerateFaceError) as e:
            logger.debug(f'{spec.part_id} attempt {attempt} rejected: {e}')
            continue
        if graph.num_faces == 0:
            continue
        return part, graph
    raise DataError(f'Could not generate a valid part for seed {spec.seed} in {GENERATION_BUDGET} attempts')


def generate_part(spec: PartSpec) -> CsgPart:
    return generate_part_with_graph(spec)[0]


# ---------------------------------------------------------------------------
# Measures and labels
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class PartMeasures:
    volume: float
    area: float
    stock_volume: float
    height: float
    overhang_volume: float
    footprint_area: float
    overhang_fraction: float
    max_layer_jump: float
    setup_axis: str
    removal_bulk: float
    removal_near: float
    removal_surface: float
    setups: int

    def to_dict(self) -> dict:
        return asdict(self)


def _removal_by_axis(voxels, setup_axis: str):
    """Void volume newly reachable per axis, setup axis first, split into distance bands."""
    h = float(np.max(voxels.spacing))
    void = ~voxels.occupancy
    removed = np.zeros_like(void)
    bands = np.zeros(3)
    setups = 0
    order = [setup_axis] + [a for a in AXES if a != setup_axis]
    for axis in order:
        newly = void & ~trapped_mask(voxels, axis) & ~removed
        if not newly.any():
            continue
        setups += 1
        removed |= newly
        d = voxels.sdf[newly]
        surface = d <= SURFACE_BAND_CELLS * h
        near = (d <= NEAR_BAND_CELLS * h) & ~surface
        bulk = ~(surface | near)
        bands += np.array([bulk.sum(), near.sum(), surface.sum()]) * voxels.cell_volume
    return bands, setups


def measure_part(part: CsgPart, resolution: int = MIN_MASS_RESOLUTION) -> PartMeasures:
    volume, area = mass_properties(part, resolution)
    vox = voxelize(part, resolution)
    occ = vox.occupancy
    cell_area = float(vox.spacing[0] * vox.spacing[1])

    trapped_down = trapped_mask(vox, '-z')
    overhang_volume = float(np.count_nonzero(trapped_down)) * vox.cell_volume
    columns = occ.any(axis=2)
    overhang_columns = trapped_down.any(axis=2)
    footprint_cols = int(np.count_nonzero(columns))
    overhang_fraction = float(np.count_nonzero(overhang_columns)) / footprint_cols if footprint_cols else 0.0

    layer_areas = occ.sum(axis=(0, 1)) * cell_area
    jumps = np.abs(np.diff(layer_areas))
    setup_axis = orientation_from_voxels(vox)
    bands, setups = _removal_by_axis(vox, setup_axis)
    return PartMeasures(
        volume=volume, area=area, stock_volume=part.bbox.volume, height=part.bbox.extents[2],
        overhang_volume=overhang_volume, footprint_area=footprint_cols * cell_area,
        overhang_fraction=min(max(overhang_fraction, 0.0), 1.0),
        max_layer_jump=float(jumps.max()) if len(jumps) else 0.0,
        setup_axis=setup_axis, removal_bulk=float(bands[0]), removal_near=float(bands[1]),
        removal_surface=float(bands[2]), setups=setups)


def am_terms(m: PartMeasures) -> AmVolumeTerms:
    return AmVolumeTerms(AM_A * m.volume, AM_A * m.area, support=AM_B * m.overhang_volume,
                         adhesion=AM_C * m.footprint_area,
                         infill_fraction=INFILL_FRACTION, wall=WALL_THICKNESS)


def am_time_from_measures(m: PartMeasures, part_id: str) -> float:
    rng = np.random.default_rng(derive_seed('am_noise', part_id))
    return am_terms(m).total * float(rng.uniform(1.0 - AM_NOISE, 1.0 + AM_NOISE))


def sm_time_from_measures(m: PartMeasures) -> float:
    removal = (m.removal_bulk / TOOL_RATES[0] + m.removal_near / TOOL_RATES[1]
               + m.removal_surface / TOOL_RATES[2])
    finishing = m.area * FINISH_DEPTH / TOOL_RATES[2]
    return removal + m.setups * SETUP_TIME + finishing


def stress_from_measures(m: PartMeasures) -> float:
    k0, k1, k2 = STRESS_K
    return k0 * m.height + k1 * m.height * m.max_layer_jump + k2 * m.overhang_volume


def blade_from_measures(m: PartMeasures) -> float:
    return min(max(m.overhang_fraction, 0.0), 1.0)


@dataclass(frozen=True)
class LabelRecord:
    part_id: str
    sm_time: float
    am_time: float
    stress_proxy: float
    blade_proxy: float

    def __post_init__(self):
        if min(self.sm_time, self.am_time, self.stress_proxy) <= 0.0:
            raise DataError(f'Labels of {self.part_id} must be positive: {self}')
        if not 0.0 <= self.blade_proxy <= 1.0:
            raise DataError(f'blade_proxy of {self.part_id} out of [0, 1]: {self.blade_proxy}')

    def value(self, task: str) -> float:
        if task not in LABEL_COLUMNS:
            raise UsageError(f'Unknown task {task!r}, expected one of {LABEL_COLUMNS}')
        return getattr(self, task)


def labels_from_measures(part_id: str, m: PartMeasures) -> LabelRecord:
    return LabelRecord(part_id, sm_time_from_measures(m), am_time_from_measures(m, part_id),
                       stress_from_measures(m), blade_from_measures(m))


def label_part(part: CsgPart, resolution: int = MIN_MASS_RESOLUTION) -> LabelRecord:
    return labels_from_measures(part.id, measure_part(part, resolution))


def label_am_time(part: CsgPart) -> float:
    return am_time_from_measures(measure_part(part), part.id)


def label_sm_time(part: CsgPart) -> float:
    return sm_time_from_measures(measure_part(part))


def label_stress_proxy(part: CsgPart) -> float:
    return stress_from_measures(measure_part(part))


def label_blade_proxy(part: CsgPart) -> float:
    return blade_from_measures(measure_part(part))


ORACLE_FEATURES = ('am_volume', 'overhang_volume', 'footprint_area', 'height', 'height_jump',
                   'overhang_fraction', 'removal_bulk', 'removal_near', 'removal_surface', 'area', 'setups')


def oracle_features_from_measures(m: PartMeasures) -> np.ndarray:
    """The closed-form inputs of every label generator, for the ceiling regressor."""
    return np.array([
        m.volume * INFILL_FRACTION + m.area * WALL_THICKNESS,
        m.overhang_volume,
        m.footprint_area,
        m.height,
        m.height * m.max_layer_jump,
        m.overhang_fraction,
        m.removal_bulk,
        m.removal_near,
        m.removal_surface,
        m.area,
        float(m.setups),
    ])


def label_oracle_features(part: CsgPart) -> np.ndarray:
    return oracle_features_from_measures(measure_part(part))
