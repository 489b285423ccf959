import numpy as np
import numpy.testing as npt
import pytest

from virl.errors import DataError, UsageError
from virl.geometry import CsgPart, box, difference
from virl.heuristics import (AmVolumeTerms, SmTdiModel, am_feature, am_feature_from_properties, fit_am_model,
                             fit_sm_model, is_positive_tdi, sm_tdi, subtracted_from_volumes, subtracted_volume)


class TestAm:
    def test_feature_arithmetic(self):
        assert am_feature_from_properties(10.0, 5.0) == pytest.approx(10.0 * 0.2 + 5.0 * 0.8)
        assert am_feature_from_properties(10.0, 5.0, infill_fraction=0.5, wall=1.0) == pytest.approx(10.0)

    def test_terms(self):
        terms = AmVolumeTerms(2.0, 3.0, support=0.5, adhesion=0.25)
        assert terms.infill == pytest.approx(0.4)
        assert terms.contour == pytest.approx(2.4)
        assert terms.total == pytest.approx(0.4 + 2.4 + 0.5 + 0.25)

    def test_terms_reject_negative(self):
        with pytest.raises(DataError):
            AmVolumeTerms(-1.0, 1.0)
        with pytest.raises(UsageError):
            AmVolumeTerms(1.0, 1.0, infill_fraction=0.0)

    def test_unit_box_feature(self, parts):
        assert am_feature(parts['unit_box']) == pytest.approx(0.2 * 1.0 + 0.8 * 6.0, rel=0.03)

    def test_fit_recovers_line(self):
        model = fit_am_model([1.0, 2.0, 3.0, 5.0], [3.0, 5.0, 7.0, 11.0])
        assert model.alpha == pytest.approx(2.0)
        assert model.beta == pytest.approx(1.0)
        npt.assert_allclose(model.predict([4.0]), [9.0])

    def test_prediction_floor(self):
        model = fit_am_model([1.0, 2.0], [1.0, 2.0])
        assert model.predict([-10.0])[0] > 0.0

    def test_fit_inputs(self):
        with pytest.raises(UsageError):
            fit_am_model([1.0], [1.0])
        with pytest.raises(UsageError):
            fit_am_model([1.0, 2.0], [1.0])
        with pytest.raises(DataError):
            fit_am_model([2.0, 2.0, 2.0], [1.0, 2.0, 3.0])
        with pytest.raises(DataError):
            fit_am_model([1.0, np.nan], [1.0, 2.0])


class TestSm:
    def test_fit_recovers_power_law(self):
        sub = np.array([0.1, 0.5, 1.0, 4.0])
        times = np.exp(0.5) * sub ** 1.5
        model = fit_sm_model(sub, times)
        assert model.slope == pytest.approx(1.5)
        assert model.intercept == pytest.approx(0.5)
        npt.assert_allclose(model.predict(sub), times)

    def test_degraded_has_zero_slope(self):
        sub = np.array([0.1, 0.5, 1.0, 4.0])
        times = sub ** 2
        model = fit_sm_model(sub, times, degraded=True)
        assert model.slope == 0.0
        assert model.intercept == pytest.approx(np.log(times).mean())

    def test_needs_positive_values(self):
        with pytest.raises(DataError):
            fit_sm_model([0.0, 1.0], [1.0, 2.0])
        with pytest.raises(DataError):
            SmTdiModel(1.0, 0.0).predict([0.0])

    def test_subtracted_volume(self, parts):
        assert subtracted_from_volumes(2.0, 0.5) == 1.5
        with pytest.raises(DataError):
            subtracted_from_volumes(1.0, 1.0)
        with pytest.raises(DataError):
            subtracted_volume(parts['unit_box'])
        assert subtracted_volume(parts['open_top']) == pytest.approx(0.18, rel=0.05)

    def test_part_tdi(self, parts):
        assert sm_tdi(parts['open_top'], SmTdiModel(1.0, 0.0)) == pytest.approx(0.18, rel=0.05)

    def test_larger_cavity_takes_longer(self):
        model = SmTdiModel(1.5, 0.2)
        predictions = []
        for depth in (0.2, 0.35, 0.5, 0.65):
            pocket = box((0.6, 0.6, depth + 0.1), (0.5, 0.5, 1.0 - depth / 2.0 + 0.05))
            part = CsgPart(f'pocket_{depth}', difference(box((1.0, 1.0, 1.0), (0.5, 0.5, 0.5)), pocket))
            predictions.append(sm_tdi(part, model))
        assert all(a < b for a, b in zip(predictions, predictions[1:]))


def test_positive_tdi():
    assert is_positive_tdi([0.1, 2.0])
    assert not is_positive_tdi([0.1, 0.0])
    assert not is_positive_tdi([np.inf])
