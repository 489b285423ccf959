"""Tests for virl/geometry.py: analytic SDF, grids, sampling, mass and shadow volumes."""
import numpy as np
import numpy.testing as npt
import pytest

from virl.errors import DataError, GeometryError, UsageError
from virl.geometry import (AXES, AXIS_VECTORS, GRID_MAGIC, NEAR_SURFACE_BAND, ROTATIONS, SIGNED_PERMUTATIONS,
                           BoundingBox, CsgPart, SdfGrid, bake_grid, box, choose_setup_orientation, contains,
                           difference, dump_part, grid_from_bytes, grid_to_bytes, intersection, lattice_uvw,
                           mass_properties, parse_part, rotation_for_axis, sample_points, sdf_eval, shadow_volume,
                           shadow_volume_from_voxels, sphere, surface_patches, transform_part, trapped_mask,
                           trilinear, union, voxelize)


# ---------------------------------------------------------------------------
# Helpers
# ---------------------------------------------------------------------------

def _random_points(part, k=500, seed=0):
    rng = np.random.default_rng(seed)
    bbox = part.bbox
    return bbox.lo - 0.1 + rng.random((k, 3)) * (np.asarray(bbox.extents) + 0.2)


# ===========================================================================
# CSG and signed distance
# ===========================================================================

class TestCsg:
    def test_rotation_tables(self):
        assert len(SIGNED_PERMUTATIONS) == 48
        assert len(ROTATIONS) == 24
        npt.assert_array_equal(ROTATIONS[0], np.eye(3))

    def test_box_center_and_outside(self, parts):
        part = parts['unit_box']
        npt.assert_allclose(sdf_eval(part, (0.5, 0.5, 0.5)), -0.5, atol=1e-12)
        npt.assert_allclose(sdf_eval(part, (2.0, 0.5, 0.5)), 1.0, atol=1e-12)
        npt.assert_allclose(sdf_eval(part, (1.0, 0.5, 0.5)), 0.0, atol=1e-12)

    def test_pocket_is_outside(self, parts):
        part = parts['open_top']
        assert sdf_eval(part, (0.5, 0.5, 0.9)) > 0.0
        assert not contains(part, (0.5, 0.5, 0.9))
        assert contains(part, (0.5, 0.5, 0.2))

    def test_sign_agrees_with_membership(self, small_parts):
        for part in small_parts:
            pts = _random_points(part)
            d = sdf_eval(part, pts)
            inside = contains(part, pts)
            away = np.abs(d) > 1e-9
            npt.assert_array_equal(inside[away], d[away] < 0.0)

    def test_batch_shape(self, parts):
        pts = _random_points(parts['unit_box'], 17)
        assert sdf_eval(parts['unit_box'], pts).shape == (17,)

    def test_bbox_of_difference_is_left_operand(self, parts):
        bbox = parts['open_top'].bbox
        npt.assert_allclose(bbox.lo, 0.0, atol=1e-12)
        npt.assert_allclose(bbox.extents, (1.0, 1.0, 1.0), atol=1e-12)

    def test_empty_solid_rejected(self):
        with pytest.raises(GeometryError):
            CsgPart('gone', difference(box((1, 1, 1)), box((2, 2, 2))))

    def test_disjoint_intersection_rejected(self):
        with pytest.raises(GeometryError):
            CsgPart('apart', intersection(box((1, 1, 1)), box((1, 1, 1), (5, 0, 0))))

    @pytest.mark.parametrize('dims', [(1.0, 0.0, 1.0), (1.0, -2.0, 1.0), (1.0, 1.0)])
    def test_bad_box_dims(self, dims):
        with pytest.raises(GeometryError):
            box(dims)

    def test_unknown_primitive(self):
        from virl.geometry import Primitive
        with pytest.raises(GeometryError):
            Primitive('torus', (0, 0, 0), 0, (1.0,))

    def test_rotation_out_of_range(self):
        with pytest.raises(GeometryError):
            box((1, 1, 1), rotation=24)

    def test_rotation_for_axis(self):
        for axis in range(3):
            assert ROTATIONS[rotation_for_axis(axis)][axis, 2] == 1

    def test_patch_grid_counts(self, parts):
        for patch in surface_patches(parts['block_with_boss']):
            pts, normals = patch.grid_samples(5)
            assert pts.shape == (25, 3)
            npt.assert_allclose(np.linalg.norm(normals, axis=1), 1.0, atol=1e-12)

    def test_part_text_round_trip(self, small_parts):
        for part in small_parts:
            text = dump_part(part)
            again = parse_part(text)
            assert dump_part(again) == text
            pts = _random_points(part, 50)
            npt.assert_array_equal(sdf_eval(again, pts), sdf_eval(part, pts))

    def test_malformed_part_text(self):
        with pytest.raises(GeometryError):
            parse_part('# virl-part v1\npart x\nnode 0 box 0 0\nroot 0\n')
        with pytest.raises(GeometryError):
            parse_part('# virl-part v1\npart x\n')


class TestTransform:
    def test_rotation_preserves_distance(self, parts):
        part = parts['block_with_boss']
        c = part.bbox.center
        for m in (ROTATIONS[5], ROTATIONS[17], np.diag([-1, 1, 1]), SIGNED_PERMUTATIONS[41]):
            moved = transform_part(part, m)
            pts = _random_points(part, 200, seed=3)
            mapped = (pts - c) @ np.asarray(m, dtype=float).T + c
            npt.assert_allclose(sdf_eval(moved, mapped), sdf_eval(part, pts), atol=1e-12)

    def test_not_a_signed_permutation(self, parts):
        with pytest.raises(GeometryError):
            transform_part(parts['unit_box'], np.ones((3, 3)))


# ===========================================================================
# SDF grids
# ===========================================================================

class TestSdfGrid:
    def test_layout_is_x_fastest(self, parts):
        part = parts['block_with_boss']
        n = 5
        grid = bake_grid(part, n)
        i, j, k = 3, 1, 4
        point = part.bbox.from_uvw((i / (n - 1), j / (n - 1), k / (n - 1)))
        npt.assert_allclose(grid.values[i + n * (j + n * k)], sdf_eval(part, point), atol=1e-12)

    def test_trilinear_exact_at_nodes(self, parts):
        grid = bake_grid(parts['capped_post'], 6)
        npt.assert_allclose(trilinear(grid, lattice_uvw(6)), grid.values, atol=1e-12)

    def test_trilinear_reproduces_linear_fields(self):
        n = 4
        uvw = lattice_uvw(n)
        values = uvw @ np.array([1.0, 2.0, 3.0]) - 0.5
        grid = SdfGrid(n, BoundingBox((0, 0, 0), (1, 1, 1)), values)
        q = np.random.default_rng(0).random((100, 3))
        npt.assert_allclose(trilinear(grid, q), q @ np.array([1.0, 2.0, 3.0]) - 0.5, atol=1e-12)

    def test_trilinear_clamps(self):
        uvw = lattice_uvw(3)
        grid = SdfGrid(3, BoundingBox((0, 0, 0), (1, 1, 1)), uvw[:, 0])
        assert trilinear(grid, (2.0, 0.5, 0.5)) == pytest.approx(1.0)
        assert trilinear(grid, (-1.0, 0.5, 0.5)) == pytest.approx(0.0)

    def test_wrong_value_count(self):
        with pytest.raises(DataError):
            SdfGrid(3, BoundingBox((0, 0, 0), (1, 1, 1)), np.zeros(26))

    def test_too_small(self, parts):
        with pytest.raises(UsageError):
            bake_grid(parts['unit_box'], 1)

    def test_trilinear_error_is_second_order(self):
        ball = CsgPart('ball', sphere(1.0))
        rng = np.random.default_rng(0)
        points = rng.uniform(-1.0, 1.0, (3000, 3))
        # the distance field has a kink at the center, where interpolation is only first order
        points = points[np.linalg.norm(points, axis=1) >= 0.5][:1000]
        exact = sdf_eval(ball, points)
        errors = [np.max(np.abs(trilinear(bake_grid(ball, n), ball.bbox.to_uvw(points)) - exact)) for n in (20, 40)]
        assert 3.0 <= errors[0] / errors[1] <= 6.0

    def test_file_codec(self, parts):
        grid = bake_grid(parts['open_top'], 5)
        data = grid_to_bytes(grid)
        assert data[:4] == GRID_MAGIC
        again = grid_from_bytes(data)
        assert again.n == 5
        assert again.bbox == grid.bbox
        npt.assert_allclose(again.values, grid.values, atol=1e-6)

    def test_bad_files(self, parts):
        data = grid_to_bytes(bake_grid(parts['unit_box'], 3))
        with pytest.raises(DataError):
            grid_from_bytes(b'XXXX' + data[4:])
        with pytest.raises(DataError):
            grid_from_bytes(data[:-4])
        with pytest.raises(DataError):
            grid_from_bytes(data[:10])


# ===========================================================================
# Point sampling
# ===========================================================================

class TestSamplePoints:
    def test_near_surface_fraction(self, parts):
        part = parts['block_with_boss']
        grid = bake_grid(part, 6)
        samples = sample_points(part, grid, 250, seed=7)
        assert len(samples) == 250
        band = NEAR_SURFACE_BAND * part.bbox.longest
        assert int(np.count_nonzero(np.abs(samples.sdf) <= band)) == 100

    def test_uvw_in_unit_cube_and_analytic(self, parts):
        part = parts['capped_post']
        samples = sample_points(part, bake_grid(part, 4), 64, seed=1)
        assert samples.uvw.min() >= 0.0 and samples.uvw.max() <= 1.0
        npt.assert_allclose(samples.sdf, sdf_eval(part, part.bbox.from_uvw(samples.uvw)), atol=1e-12)

    def test_deterministic(self, parts):
        part = parts['open_top']
        grid = bake_grid(part, 4)
        a = sample_points(part, grid, 40, seed=11)
        b = sample_points(part, grid, 40, seed=11)
        npt.assert_array_equal(a.uvw, b.uvw)
        c = sample_points(part, grid, 40, seed=12)
        assert not np.array_equal(a.uvw, c.uvw)

    def test_iterates_sample_points(self, parts):
        part = parts['unit_box']
        first = next(iter(sample_points(part, bake_grid(part, 3), 5, seed=0)))
        assert len(first.uvw) == 3

    def test_needs_points(self, parts):
        with pytest.raises(UsageError):
            sample_points(parts['unit_box'], bake_grid(parts['unit_box'], 3), 0, seed=0)


# ===========================================================================
# Mass properties and shadow volumes
# ===========================================================================

class TestMassProperties:
    def test_unit_box(self, parts):
        volume, area = mass_properties(parts['unit_box'], 64)
        assert volume == pytest.approx(1.0, rel=1e-6)
        assert area == pytest.approx(6.0, rel=0.05)

    def test_sphere(self):
        part = CsgPart('ball', sphere(0.5, (0.5, 0.5, 0.5)))
        volume, area = mass_properties(part, 64)
        assert volume == pytest.approx(4.0 / 3.0 * np.pi * 0.125, rel=0.03)
        assert area == pytest.approx(np.pi, rel=0.05)

    def test_low_resolution_rejected(self, parts):
        with pytest.raises(UsageError):
            mass_properties(parts['unit_box'], 32)


class TestShadow:
    def test_open_top_box_faces_up(self, parts):
        assert choose_setup_orientation(parts['open_top']) == '-z'

    def test_cube_tie_breaks_to_first_axis(self, parts):
        assert choose_setup_orientation(parts['unit_box']) == '+x'
        for axis in AXES:
            assert shadow_volume(parts['unit_box'], axis) == 0.0

    def test_pocket_is_trapped_from_below(self, parts):
        part = parts['open_top']
        assert shadow_volume(part, '-z') == 0.0
        assert shadow_volume(part, '+z') == pytest.approx(0.18, rel=0.1)
        assert shadow_volume(part, '+x') == pytest.approx(0.18, rel=0.1)

    def test_overhang_under_cap(self, parts):
        assert shadow_volume(parts['capped_post'], '-z') == pytest.approx(0.36, rel=0.1)

    def test_mask_only_marks_void(self, parts):
        vox = voxelize(parts['capped_post'])
        for axis in AXES:
            assert not np.any(trapped_mask(vox, axis) & vox.occupancy)

    def test_unknown_axis(self, parts):
        with pytest.raises(UsageError):
            trapped_mask(voxelize(parts['unit_box']), 'up')

    def test_solid_preserving_rewrites(self, parts):
        part = parts['capped_post']
        doubled = CsgPart('doubled', union(part.root, part.root))
        swapped = CsgPart('swapped', union(part.root.right, part.root.left))
        for axis in AXES:
            expected = shadow_volume(part, axis)
            assert shadow_volume(doubled, axis) == expected
            assert shadow_volume(swapped, axis) == expected

    def test_orientation_follows_rotations(self, parts):
        part = parts['open_top']
        chosen = choose_setup_orientation(part)
        base = voxelize(part)
        volumes = {axis: shadow_volume_from_voxels(base, axis) for axis in AXES}
        names = {tuple(v): axis for axis, v in AXIS_VECTORS.items()}

        def rotated_axis(matrix, axis):
            return names[tuple(int(c) for c in np.asarray(matrix) @ AXIS_VECTORS[axis])]

        for index, matrix in enumerate(ROTATIONS):
            turned = transform_part(part, matrix, f'open_top_r{index}')
            assert choose_setup_orientation(turned) == rotated_axis(matrix, chosen)
            vox = voxelize(turned)
            for axis in AXES:
                assert shadow_volume_from_voxels(vox, rotated_axis(matrix, axis)) == pytest.approx(volumes[axis])
