"""
Task-dependent inputs (TDI): cheap physics-style estimates of a label that
the downstream head can lean on.

AM: print time is linear in the printed volume, V_p * IP + A_p * w, where
infill and contour volumes dominate. Support and adhesion terms are folded
into the fitted offset.

SM: machining time is log-linear in the volume removed from the bounding
box stock.
"""
from dataclasses import asdict, dataclass

import numpy as np
from loguru import logger

from .errors import DataError, UsageError
from .geometry import MIN_MASS_RESOLUTION, CsgPart, mass_properties

INFILL_FRACTION = 0.20
WALL_THICKNESS = 0.8
# stock - part must exceed this fraction of the stock volume
SUBTRACTED_GUARD = 1e-3
MIN_TDI = 1e-9


@dataclass(frozen=True)
class AmVolumeTerms:
    """Printed volume split into infill, contour, support and adhesion."""
    volume: float
    area: float
    support: float = 0.0
    adhesion: float = 0.0
    infill_fraction: float = INFILL_FRACTION
    wall: float = WALL_THICKNESS

    def __post_init__(self):
        if not 0.0 < self.infill_fraction <= 1.0 or self.wall <= 0.0:
            raise UsageError(f'Bad print settings: IP={self.infill_fraction}, w={self.wall}')
        for name in ('volume', 'area', 'support', 'adhesion'):
            if getattr(self, name) < 0.0:
                raise DataError(f'AM volume term {name} must be >= 0, got {getattr(self, name)}')

    @property
    def infill(self) -> float:
        return self.volume * self.infill_fraction

    @property
    def contour(self) -> float:
        return self.area * self.wall

    @property
    def total(self) -> float:
        return self.infill + self.contour + self.support + self.adhesion


def am_feature_from_properties(volume: float, area: float,
                               infill_fraction: float = INFILL_FRACTION, wall: float = WALL_THICKNESS) -> float:
    terms = AmVolumeTerms(volume, area, infill_fraction=infill_fraction, wall=wall)
    return terms.infill + terms.contour


def am_feature(part: CsgPart, resolution: int = MIN_MASS_RESOLUTION) -> float:
    volume, area = mass_properties(part, resolution)
    return am_feature_from_properties(volume, area)


@dataclass(frozen=True)
class AmTimeModel:
    alpha: float
    beta: float
    infill_fraction: float = INFILL_FRACTION
    wall: float = WALL_THICKNESS

    def predict(self, features):
        """T = alpha * feature + beta, floored so the TDI stays positive."""
        pred = self.alpha * np.asarray(features, dtype=np.float64) + self.beta
        return np.maximum(pred, MIN_TDI)

    def to_dict(self) -> dict:
        return asdict(self)


def _check_fit_inputs(x, y):
    x = np.asarray(x, dtype=np.float64).ravel()
    y = np.asarray(y, dtype=np.float64).ravel()
    if len(x) != len(y):
        raise UsageError(f'{len(x)} features but {len(y)} labels')
    if len(x) < 2:
        raise UsageError(f'Need at least 2 samples to fit, got {len(x)}')
    if not np.all(np.isfinite(x)) or not np.all(np.isfinite(y)):
        raise DataError('Non-finite values in heuristic fit inputs')
    if np.ptp(x) == 0.0:
        raise DataError('Cannot fit a heuristic on a constant feature')
    return x, y


def _least_squares_line(x, y):
    design = np.stack([x, np.ones_like(x)], axis=1)
    (slope, intercept), *_ = np.linalg.lstsq(design, y, rcond=None)
    return float(slope), float(intercept)


def fit_am_model(features, times) -> AmTimeModel:
    """Ordinary least squares for (alpha, beta) on training-split labels only."""
    x, y = _check_fit_inputs(features, times)
    alpha, beta = _least_squares_line(x, y)
    logger.debug(f'AM time model: alpha={alpha:.4g}, beta={beta:.4g} on {len(x)} parts')
    return AmTimeModel(alpha, beta)


@dataclass(frozen=True)
class SmTdiModel:
    """ln(time) = slope * ln(subtracted volume) + intercept."""
    slope: float
    intercept: float

    def predict(self, subtracted):
        sub = np.asarray(subtracted, dtype=np.float64)
        if np.any(sub <= 0.0):
            raise DataError('Subtracted volume must be positive')
        return np.exp(self.slope * np.log(sub) + self.intercept)

    def to_dict(self) -> dict:
        return asdict(self)


def subtracted_from_volumes(stock_volume: float, part_volume: float) -> float:
    sub = stock_volume - part_volume
    if sub <= SUBTRACTED_GUARD * stock_volume:
        raise DataError(f'Part fills its stock: subtracted volume {sub:.4g} of {stock_volume:.4g}')
    return sub


def subtracted_volume(part: CsgPart, resolution: int = MIN_MASS_RESOLUTION) -> float:
    volume, _ = mass_properties(part, resolution)
    return subtracted_from_volumes(part.bbox.volume, volume)


def fit_sm_model(subtracted, times, degraded: bool = False) -> SmTdiModel:
    """Log-log fit. degraded=True forces slope 0, leaving only the mean log time."""
    x, y = _check_fit_inputs(subtracted, times)
    if np.any(x <= 0.0) or np.any(y <= 0.0):
        raise DataError('SM fit needs positive subtracted volumes and times')
    lx, ly = np.log(x), np.log(y)
    if degraded:
        model = SmTdiModel(0.0, float(ly.mean()))
    else:
        model = SmTdiModel(*_least_squares_line(lx, ly))
    logger.debug(f'SM TDI model: slope={model.slope:.4g}, intercept={model.intercept:.4g}')
    return model


def sm_tdi(part: CsgPart, model: SmTdiModel, resolution: int = MIN_MASS_RESOLUTION) -> float:
    return float(model.predict(subtracted_volume(part, resolution)))


def is_positive_tdi(values) -> bool:
    arr = np.asarray(values, dtype=np.float64)
    return bool(np.all(np.isfinite(arr)) and np.all(arr > 0.0))
