import os
from dataclasses import replace

import pytest

from virl.config import load_config
from virl.encoder import extract_graph
from virl.geometry import CsgPart, bake_grid, box, cylinder, difference, union
from virl.pretrain import CorpusPart

PROJECT_ROOT = os.path.dirname(os.path.dirname(os.path.abspath(__file__)))
SMOKE_CONFIG = os.path.join(PROJECT_ROOT, 'config', 'smoke.json')


def unit_box() -> CsgPart:
    return CsgPart('unit_box', box((1.0, 1.0, 1.0), (0.5, 0.5, 0.5)))


def open_top_box() -> CsgPart:
    """Unit block with a 0.6 x 0.6 pocket, 0.5 deep, opening upward."""
    pocket = box((0.6, 0.6, 0.6), (0.5, 0.5, 0.8))
    return CsgPart('open_top', difference(box((1.0, 1.0, 1.0), (0.5, 0.5, 0.5)), pocket))


def capped_post() -> CsgPart:
    """A 0.4-wide post under a full-width cap: 0.36 of overhang volume."""
    post = box((0.4, 1.0, 0.6), (0.5, 0.5, 0.3))
    cap = box((1.0, 1.0, 0.2), (0.5, 0.5, 0.7))
    return CsgPart('capped_post', union(post, cap))


def plain_cylinder() -> CsgPart:
    return CsgPart('plain_cylinder', cylinder(0.3, 0.5, (0.3, 0.3, 0.25)))


def block_with_boss() -> CsgPart:
    base = box((1.0, 0.8, 0.4), (0.5, 0.4, 0.2))
    boss = cylinder(0.15, 0.3, (0.7, 0.4, 0.5))
    return CsgPart('block_with_boss', union(base, boss))


@pytest.fixture(scope='session')
def parts():
    """Hand-built parts by id."""
    built = [unit_box(), open_top_box(), capped_post(), plain_cylinder(), block_with_boss()]
    return {p.id: p for p in built}


@pytest.fixture(scope='session')
def small_parts(parts):
    return list(parts.values())


@pytest.fixture(scope='session')
def small_graphs(small_parts):
    return [extract_graph(p) for p in small_parts]


@pytest.fixture(scope='session')
def small_corpus(small_parts, small_graphs):
    return [CorpusPart(p, g, bake_grid(p, 8)) for p, g in zip(small_parts, small_graphs)]


@pytest.fixture
def smoke_config(tmp_path):
    config = load_config(SMOKE_CONFIG)
    return replace(config, out=str(tmp_path / 'run'), threads=1)
