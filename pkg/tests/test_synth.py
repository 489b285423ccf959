import numpy as np
import numpy.testing as npt
import pytest

from virl.errors import DataError, UsageError
from virl.geometry import CsgPart, box, cylinder, difference, dump_part, union
from virl.synth import (AM_NOISE, FINISH_DEPTH, LABEL_COLUMNS, ORACLE_FEATURES, TOOL_RATES, LabelRecord, PartSpec,
                        am_terms, am_time_from_measures, generate_part_with_graph, label_blade_proxy,
                        label_oracle_features, label_part, measure_part)


def _block(name, *extras):
    part = box((1.0, 1.0, 1.0), (0.5, 0.5, 0.5))
    for extra in extras:
        part = union(part, extra)
    return CsgPart(name, part)


def _pocketed_block(name, depth):
    pocket = box((0.6, 0.6, depth + 0.1), (0.5, 0.5, 1.0 - depth / 2.0 + 0.05))
    return CsgPart(name, difference(box((1.0, 1.0, 1.0), (0.5, 0.5, 0.5)), pocket))


def _mushroom():
    stem = cylinder(0.15, 0.6, (0.5, 0.5, 0.3))
    cap = box((1.0, 1.0, 0.2), (0.5, 0.5, 0.7))
    return CsgPart('mushroom', union(stem, cap))


def _stepped_pyramid():
    layers = [box((w, w, 0.3), (0.5, 0.5, 0.15 + 0.3 * i)) for i, w in enumerate((1.0, 0.6, 0.2))]
    return CsgPart('pyramid', union(union(layers[0], layers[1]), layers[2]))


class TestPartSpec:
    def test_id(self):
        assert PartSpec(42).part_id == 'part_000042'

    @pytest.mark.parametrize('count', [1, 9])
    def test_primitive_count_range(self, count):
        with pytest.raises(UsageError):
            PartSpec(0, primitive_count=count)

    def test_needs_a_feature_family(self):
        with pytest.raises(UsageError):
            PartSpec(0, through_holes=False, pockets=False, bosses=False)

    def test_random_is_seeded(self):
        assert PartSpec.random(5) == PartSpec.random(5)
        assert PartSpec.random(5).seed == 5


class TestGeneration:
    def test_deterministic(self):
        spec = PartSpec.random(3)
        a, graph_a = generate_part_with_graph(spec)
        b, graph_b = generate_part_with_graph(spec)
        assert dump_part(a) == dump_part(b)
        npt.assert_array_equal(graph_a.faces, graph_b.faces)

    def test_parts_rest_on_the_origin(self):
        for seed in range(3):
            part, graph = generate_part_with_graph(PartSpec.random(seed))
            npt.assert_allclose(part.bbox.lo, 0.0, atol=1e-12)
            assert graph.num_faces > 0
            assert 2 <= len(part.primitives) <= 8

    @pytest.mark.slow
    def test_corpus_is_valid_and_varied(self):
        face_counts = set()
        for seed in range(1000):
            part, graph = generate_part_with_graph(PartSpec.random(seed))
            assert isinstance(part, CsgPart)
            assert all(e > 0.0 for e in part.bbox.extents)
            face_counts.add(graph.num_faces)
        assert len(face_counts) >= 5


class TestMeasures:
    def test_unit_box(self, parts):
        m = measure_part(parts['unit_box'])
        assert m.overhang_volume == 0.0
        assert m.overhang_fraction == 0.0
        assert m.footprint_area == pytest.approx(1.0)
        assert m.height == pytest.approx(1.0)
        assert m.setups == 0
        assert m.removal_bulk + m.removal_near + m.removal_surface == 0.0
        assert m.max_layer_jump == 0.0

    def test_open_top_box_needs_one_setup(self, parts):
        m = measure_part(parts['open_top'])
        assert m.setup_axis == '-z'
        assert m.setups == 1
        assert m.removal_bulk + m.removal_near + m.removal_surface == pytest.approx(0.18, rel=0.1)
        assert m.overhang_volume == 0.0

    def test_capped_post_overhang(self, parts):
        m = measure_part(parts['capped_post'])
        assert m.overhang_volume == pytest.approx(0.36, rel=0.1)
        assert m.overhang_fraction == pytest.approx(0.6, abs=0.05)
        assert label_blade_proxy(parts['capped_post']) == pytest.approx(m.overhang_fraction)
        assert m.max_layer_jump == pytest.approx(0.6, rel=0.1)


class TestLabels:
    def test_labels_are_valid(self, small_parts):
        for part in small_parts:
            labels = label_part(part)
            assert min(labels.sm_time, labels.am_time, labels.stress_proxy) > 0.0
            assert 0.0 <= labels.blade_proxy <= 1.0

    def test_am_noise_is_bounded_and_seeded(self, parts):
        m = measure_part(parts['block_with_boss'])
        total = am_terms(m).total
        value = am_time_from_measures(m, 'block_with_boss')
        assert abs(value / total - 1.0) <= AM_NOISE
        assert value == am_time_from_measures(m, 'block_with_boss')
        assert value != am_time_from_measures(m, 'another_id')

    def test_overhang_raises_stress(self, parts):
        assert label_part(parts['capped_post']).stress_proxy > label_part(parts['unit_box']).stress_proxy

    def test_record_validation(self):
        with pytest.raises(DataError):
            LabelRecord('p', 0.0, 1.0, 1.0, 0.5)
        with pytest.raises(DataError):
            LabelRecord('p', 1.0, 1.0, 1.0, 1.5)
        record = LabelRecord('p', 1.0, 2.0, 3.0, 0.5)
        assert [record.value(t) for t in LABEL_COLUMNS] == [1.0, 2.0, 3.0, 0.5]
        with pytest.raises(UsageError):
            record.value('cost')

    def test_oracle_features(self, parts):
        features = label_oracle_features(parts['capped_post'])
        assert features.shape == (len(ORACLE_FEATURES),)
        assert np.all(np.isfinite(features))

    def test_overhanging_boss_takes_longer_to_print(self):
        cube = _block('cube')
        bossed = _block('bossed', box((0.5, 0.4, 0.2), (1.15, 0.5, 0.9)))
        assert measure_part(bossed).overhang_volume > 0.0
        assert label_part(bossed).am_time > label_part(cube).am_time

    def test_deeper_pocket_takes_longer_to_machine(self):
        shallow = label_part(_pocketed_block('shallow', 0.2)).sm_time
        deep = label_part(_pocketed_block('deep', 0.5)).sm_time
        assert deep > shallow

    def test_full_stock_only_needs_finishing(self, parts):
        assert label_part(parts['unit_box']).sm_time == pytest.approx(6.0 * FINISH_DEPTH / TOOL_RATES[2], rel=0.05)

    def test_mushroom_is_a_blade_hazard(self):
        pyramid = label_blade_proxy(_stepped_pyramid())
        assert pyramid == 0.0
        assert label_blade_proxy(_mushroom()) > 0.8
