# -*- coding: utf-8 -*-
"""
Three-tier part graph and the hierarchical graph encoder.

Graph extraction works on equal-area sample grids laid on every primitive
face. A face is kept where its samples lie on the final solid's boundary;
two kept faces share an edge where the samples of each come within a thin
band of the other; three mutually adjacent faces meeting near a common
point make a vertex. Closed curves (a hole rim, a boss rim) are edges with
no vertices.
"""
from dataclasses import dataclass, field
from functools import cached_property

import numpy as np
import torch
from loguru import logger
from torch import nn

from .errors import DataError, DegenerateFaceError, ShapeError
from .geometry import (SURFACE_KINDS, CsgPart, boundary_side, surface_patches)
from .nncore import (DTYPE, GraphConv, count_parameters, linear, make_generator,
                     segment_max, segment_mean)
from .utils import atomic_write_text, format_float

EDGE_KINDS = ('line', 'arc', 'circle')
FACE_DIM = 1 + 3 + 3 + len(SURFACE_KINDS)
EDGE_DIM = 1 + len(EDGE_KINDS)
VERTEX_DIM = 3

FACE_SAMPLES = 64
# fractions of the longest bbox extent
ADJACENCY_BAND = 0.03
MIN_FACE_AREA = 1e-6
_PARALLEL = 0.99


@dataclass(eq=False)
class PartGraph:
    """
    faces: (F, FACE_DIM) rows of [area, centroid uvw, normal or axis, one-hot surface kind]
    edges: (E, EDGE_DIM) rows of [length, one-hot edge kind]
    vertices: (V, 3) normalized coordinates
    edge_faces: the two faces each edge separates
    edge_vertices: endpoint vertices of each edge, empty for closed curves
    """
    faces: np.ndarray
    edges: np.ndarray
    vertices: np.ndarray
    edge_faces: list
    edge_vertices: list = field(default_factory=list)

    def __post_init__(self):
        self.faces = np.asarray(self.faces, dtype=np.float64).reshape(-1, FACE_DIM)
        self.edges = np.asarray(self.edges, dtype=np.float64).reshape(-1, EDGE_DIM)
        self.vertices = np.asarray(self.vertices, dtype=np.float64).reshape(-1, VERTEX_DIM)
        self.edge_faces = [tuple(int(f) for f in pair) for pair in self.edge_faces]
        if not self.edge_vertices:
            self.edge_vertices = [() for _ in self.edge_faces]
        self.edge_vertices = [tuple(int(v) for v in vs) for vs in self.edge_vertices]
        n_f, n_e, n_v = len(self.faces), len(self.edges), len(self.vertices)
        if len(self.edge_faces) != n_e or len(self.edge_vertices) != n_e:
            raise DataError(f'Graph has {n_e} edges but {len(self.edge_faces)} face pairs')
        for a, b in self.edge_faces:
            if not (0 <= a < n_f and 0 <= b < n_f) or a == b:
                raise DataError(f'Edge face pair ({a}, {b}) out of range for {n_f} faces')
        for vs in self.edge_vertices:
            if any(not 0 <= v < n_v for v in vs):
                raise DataError(f'Edge vertices {vs} out of range for {n_v} vertices')
        if n_v and (self.vertices.min() < 0.0 or self.vertices.max() > 1.0):
            raise DataError('Vertex coordinates must be normalized to [0, 1]')

    @property
    def num_faces(self):
        return len(self.faces)

    @property
    def face_edges(self) -> list:
        out = [[] for _ in range(self.num_faces)]
        for e, (a, b) in enumerate(self.edge_faces):
            out[a].append(e)
            out[b].append(e)
        return out

    @property
    def face_adjacency(self) -> list:
        out = [set() for _ in range(self.num_faces)]
        for a, b in self.edge_faces:
            out[a].add(b)
            out[b].add(a)
        return [sorted(s) for s in out]

    @property
    def edge_adjacency(self) -> list:
        """Edges are neighbors when they bound a common face."""
        out = [set() for _ in self.edge_faces]
        for edges in self.face_edges:
            for e in edges:
                out[e].update(x for x in edges if x != e)
        return [sorted(s) for s in out]

    @property
    def vertex_adjacency(self) -> list:
        out = [set() for _ in range(len(self.vertices))]
        for vs in self.edge_vertices:
            for v in vs:
                out[v].update(x for x in vs if x != v)
        return [sorted(s) for s in out]

    @cached_property
    def index_arrays(self) -> dict:
        def pairs(neighbor_lists):
            src = [j for lst in neighbor_lists for j in lst]
            dst = [i for i, lst in enumerate(neighbor_lists) for _ in lst]
            return np.array(src, dtype=np.int64), np.array(dst, dtype=np.int64)

        edge_ids = [e for e, vs in enumerate(self.edge_vertices) for _ in vs]
        vertex_ids = [v for vs in self.edge_vertices for v in vs]
        face_ids = [f for f, es in enumerate(self.face_edges) for _ in es]
        face_edge_ids = [e for es in self.face_edges for e in es]
        return {
            'vertex_nbrs': pairs(self.vertex_adjacency),
            'edge_nbrs': pairs(self.edge_adjacency),
            'face_nbrs': pairs(self.face_adjacency),
            'edge_vertex': (np.array(edge_ids, dtype=np.int64), np.array(vertex_ids, dtype=np.int64)),
            'face_edge': (np.array(face_ids, dtype=np.int64), np.array(face_edge_ids, dtype=np.int64)),
        }


# ---------------------------------------------------------------------------
# Extraction from CSG
# ---------------------------------------------------------------------------

@dataclass(eq=False)
class _Face:
    patch: object
    points: np.ndarray
    area: float
    weight: float
    direction: np.ndarray
    centroid: np.ndarray


def _kept_faces(part: CsgPart, m: int) -> list:
    bbox = part.bbox
    eps = 1e-7 * bbox.longest
    min_area = MIN_FACE_AREA * bbox.longest ** 2
    faces = []
    for patch in surface_patches(part):
        pts, normals = patch.grid_samples(m)
        side = boundary_side(part, pts, normals, eps)
        kept = side != 0
        if not kept.any():
            continue
        weight = patch.area / len(pts)
        area = weight * int(kept.sum())
        if area < min_area:
            raise DegenerateFaceError(f'Part {part.id}: {patch.kind} face with area {area:.3g} is degenerate')
        direction = patch.direction()
        if patch.kind == 'planar' and side[kept].sum() < 0:
            direction = -direction
        centroid = np.clip(bbox.to_uvw(pts[kept].mean(axis=0)), 0.0, 1.0)
        faces.append(_Face(patch, pts[kept], area, weight, direction, centroid))
    return faces


def _face_key(face: _Face):
    return (SURFACE_KINDS.index(face.patch.kind),
            *np.round(face.centroid, 6), *np.round(face.direction, 6), round(face.area, 9))


def _edge_kind(fa: _Face, fb: _Face, closed: bool) -> str:
    kinds = {fa.patch.kind, fb.patch.kind}
    if kinds == {'planar'}:
        return 'line'
    if 'spherical' not in kinds:
        aligned = abs(float(np.dot(fa.direction, fb.direction))) > _PARALLEL
        # plane against cylinder: rim when the axis is along the normal
        # cylinder against cylinder: straight seam when axes are parallel
        straight = (not aligned) if kinds == {'planar', 'cylindrical'} else aligned
        if straight:
            return 'line'
    return 'circle' if closed else 'arc'


def _cluster(points: np.ndarray, radius: float) -> list:
    order = np.lexsort(points.T[::-1])
    seeds, members = [], []
    for idx in order:
        p = points[idx]
        for k, s in enumerate(seeds):
            if np.linalg.norm(p - s) < radius:
                members[k].append(idx)
                break
        else:
            seeds.append(p)
            members.append([idx])
    return [points[m].mean(axis=0) for m in members]


def extract_graph(part: CsgPart, samples: int = FACE_SAMPLES) -> PartGraph:
    """Deterministic face/edge/vertex graph; faces sorted by (kind, centroid, direction, area)."""
    bbox = part.bbox
    delta = ADJACENCY_BAND * bbox.longest
    faces = sorted(_kept_faces(part, samples), key=_face_key)
    n = len(faces)

    near = {}
    edges = {}
    for i in range(n):
        for j in range(i + 1, n):
            fi, fj = faces[i], faces[j]
            if fi.patch.kind == 'planar' and fj.patch.kind == 'planar' \
                    and abs(float(np.dot(fi.direction, fj.direction))) > _PARALLEL:
                continue
            near_ij = fj.patch.distance(fi.points) < delta
            if not near_ij.any():
                continue
            near_ji = fi.patch.distance(fj.points) < delta
            if not near_ji.any():
                continue
            near[(i, j)] = near_ij
            near[(j, i)] = near_ji
            length = 0.5 * (near_ij.sum() * fi.weight + near_ji.sum() * fj.weight) / delta
            edges[(i, j)] = length

    # vertices: three mutually adjacent faces meeting near a point
    vertex_points, vertex_faces = [], []
    for (i, j) in sorted(edges):
        for k in range(j + 1, n):
            if (i, k) not in edges or (j, k) not in edges:
                continue
            mask = near[(i, j)] & near[(i, k)]
            if not mask.any():
                continue
            for p in _cluster(faces[i].points[mask], 3.0 * delta):
                for v, q in enumerate(vertex_points):
                    if np.linalg.norm(p - q) < 2.0 * delta:
                        vertex_faces[v].update((i, j, k))
                        break
                else:
                    vertex_points.append(p)
                    vertex_faces.append({i, j, k})

    uvw = np.clip(bbox.to_uvw(np.array(vertex_points).reshape(-1, 3)), 0.0, 1.0)
    v_order = sorted(range(len(uvw)), key=lambda v: tuple(np.round(uvw[v], 6)))
    v_rank = {v: r for r, v in enumerate(v_order)}

    face_rows = []
    for face in faces:
        onehot = [1.0 if face.patch.kind == k else 0.0 for k in SURFACE_KINDS]
        face_rows.append([face.area, *face.centroid, *face.direction, *onehot])

    edge_rows, edge_faces, edge_vertices = [], [], []
    for (i, j) in sorted(edges):
        ends = sorted(v_rank[v] for v, fs in enumerate(vertex_faces) if i in fs and j in fs)
        kind = _edge_kind(faces[i], faces[j], closed=not ends)
        edge_rows.append([edges[(i, j)], *[1.0 if kind == k else 0.0 for k in EDGE_KINDS]])
        edge_faces.append((i, j))
        edge_vertices.append(tuple(ends))

    graph = PartGraph(np.array(face_rows), np.array(edge_rows), uvw[v_order], edge_faces, edge_vertices)
    logger.debug(f'Part {part.id}: {len(face_rows)} faces, {len(edge_rows)} edges, {len(uvw)} vertices')
    return graph


# ---------------------------------------------------------------------------
# Text format
# ---------------------------------------------------------------------------

GRAPH_HEADER = '# virl-graph v1'


def dump_graph(graph: PartGraph) -> str:
    """
        counts <F> <E> <V>
        f <area> <cu> <cv> <cw> <dx> <dy> <dz> <planar|cylindrical|spherical>
        e <length> <line|arc|circle> <face a> <face b> [<vertex> ...]
        v <u> <v> <w>
    """
    lines = [GRAPH_HEADER, f'counts {len(graph.faces)} {len(graph.edges)} {len(graph.vertices)}']
    for row in graph.faces:
        kind = SURFACE_KINDS[int(np.argmax(row[7:]))]
        lines.append('f ' + ' '.join(format_float(v) for v in row[:7]) + f' {kind}')
    for row, (a, b), vs in zip(graph.edges, graph.edge_faces, graph.edge_vertices):
        kind = EDGE_KINDS[int(np.argmax(row[1:]))]
        lines.append(' '.join(['e', format_float(row[0]), kind, str(a), str(b), *map(str, vs)]))
    for row in graph.vertices:
        lines.append('v ' + ' '.join(format_float(v) for v in row))
    return '\n'.join(lines) + '\n'


def parse_graph(text: str) -> PartGraph:
    faces, edges, vertices, edge_faces, edge_vertices = [], [], [], [], []
    for lineno, raw in enumerate(text.splitlines(), start=1):
        tokens = raw.split()
        if not tokens or tokens[0].startswith('#') or tokens[0] == 'counts':
            continue
        try:
            if tokens[0] == 'f':
                onehot = [1.0 if tokens[8] == k else 0.0 for k in SURFACE_KINDS]
                faces.append([float(v) for v in tokens[1:8]] + onehot)
            elif tokens[0] == 'e':
                onehot = [1.0 if tokens[2] == k else 0.0 for k in EDGE_KINDS]
                edges.append([float(tokens[1])] + onehot)
                edge_faces.append((int(tokens[3]), int(tokens[4])))
                edge_vertices.append(tuple(int(v) for v in tokens[5:]))
            elif tokens[0] == 'v':
                vertices.append([float(v) for v in tokens[1:4]])
            else:
                raise DataError(f'unknown record {tokens[0]!r}')
        except (IndexError, ValueError) as e:
            raise DataError(f'Malformed graph file at line {lineno}: {raw!r} ({e})')
    return PartGraph(np.array(faces), np.array(edges), np.array(vertices), edge_faces, edge_vertices)


def save_graph(path: str, graph: PartGraph) -> None:
    atomic_write_text(path, dump_graph(graph))


def load_graph(path: str) -> PartGraph:
    with open(path, 'r', encoding='utf-8') as f:
        return parse_graph(f.read())


# ---------------------------------------------------------------------------
# Batching and the encoder
# ---------------------------------------------------------------------------

@dataclass(eq=False)
class GraphBatch:
    vertex_x: torch.Tensor
    vertex_nbrs: tuple
    edge_x: torch.Tensor
    edge_nbrs: tuple
    edge_vertex: tuple
    face_x: torch.Tensor
    face_nbrs: tuple
    face_edge: tuple
    face_graph: torch.Tensor
    num_graphs: int


def collate(graphs) -> GraphBatch:
    """Concatenate graphs into one disjoint graph with shifted indices."""
    graphs = list(graphs)
    if not graphs:
        raise ShapeError('Cannot collate an empty list of graphs')
    v_off = e_off = f_off = 0
    parts = {k: ([], []) for k in ('vertex_nbrs', 'edge_nbrs', 'face_nbrs', 'edge_vertex', 'face_edge')}
    offsets = {'vertex_nbrs': ('v', 'v'), 'edge_nbrs': ('e', 'e'), 'face_nbrs': ('f', 'f'),
               'edge_vertex': ('e', 'v'), 'face_edge': ('f', 'e')}
    face_graph = []
    for g_idx, g in enumerate(graphs):
        if g.num_faces == 0:
            raise DataError('Cannot encode a graph with zero faces')
        shift = {'v': v_off, 'e': e_off, 'f': f_off}
        for key, (a, b) in g.index_arrays.items():
            sa, sb = offsets[key]
            parts[key][0].append(a + shift[sa])
            parts[key][1].append(b + shift[sb])
        face_graph.append(np.full(g.num_faces, g_idx, dtype=np.int64))
        v_off += len(g.vertices)
        e_off += len(g.edges)
        f_off += g.num_faces

    def cat(arrays):
        return torch.from_numpy(np.concatenate(arrays)).long()

    return GraphBatch(
        vertex_x=torch.from_numpy(np.concatenate([g.vertices for g in graphs])).to(DTYPE),
        vertex_nbrs=(cat(parts['vertex_nbrs'][0]), cat(parts['vertex_nbrs'][1])),
        edge_x=torch.from_numpy(np.concatenate([g.edges for g in graphs])).to(DTYPE),
        edge_nbrs=(cat(parts['edge_nbrs'][0]), cat(parts['edge_nbrs'][1])),
        edge_vertex=(cat(parts['edge_vertex'][0]), cat(parts['edge_vertex'][1])),
        face_x=torch.from_numpy(np.concatenate([g.faces for g in graphs])).to(DTYPE),
        face_nbrs=(cat(parts['face_nbrs'][0]), cat(parts['face_nbrs'][1])),
        face_edge=(cat(parts['face_edge'][0]), cat(parts['face_edge'][1])),
        face_graph=cat(face_graph),
        num_graphs=len(graphs),
    )


@dataclass(frozen=True)
class EncoderConfig:
    hidden_width: int = 1024
    latent_width: int = 64
    convs_per_tier: int = 2
    activation: str = 'relu'
    pooling: str = 'mean'
    seed: int = 0

    def __post_init__(self):
        if self.hidden_width < 1 or self.latent_width < 1:
            raise ShapeError(f'Encoder widths must be >= 1, got {self.hidden_width}/{self.latent_width}')
        if self.convs_per_tier < 1:
            raise ShapeError(f'convs_per_tier must be >= 1, got {self.convs_per_tier}')
        if self.pooling not in ('mean', 'max'):
            raise ShapeError(f'Unknown pooling {self.pooling!r}')


class HierarchicalEncoder(nn.Module):
    """
    Tier 1 convolves vertices. Tier 2 starts from a conv over raw edge
    features, adds the mean state of each edge's endpoints, and convolves
    edges. Tier 3 does the same for faces over their boundary edges. Face
    states are pooled per graph and mapped to the latent width.
    """

    def __init__(self, config: EncoderConfig):
        super().__init__()
        self.config = config
        g = make_generator(config.seed)
        h, act = config.hidden_width, config.activation

        def tier(d_in):
            convs = [GraphConv(d_in, h, g, act)]
            convs += [GraphConv(h, h, g, act) for _ in range(config.convs_per_tier - 1)]
            return nn.ModuleList(convs)

        self.vertex_convs = tier(VERTEX_DIM)
        self.edge_convs = tier(EDGE_DIM)
        self.face_convs = tier(FACE_DIM)
        self.readout = linear(h, config.latent_width, g)

    def forward(self, batch: GraphBatch) -> torch.Tensor:
        v = batch.vertex_x
        for conv in self.vertex_convs:
            v = conv(v, batch.vertex_nbrs)

        edge_ids, vertex_ids = batch.edge_vertex
        e = self.edge_convs[0](batch.edge_x, batch.edge_nbrs)
        e = e + segment_mean(v[vertex_ids], edge_ids, e.shape[0])
        for conv in self.edge_convs[1:]:
            e = conv(e, batch.edge_nbrs)

        face_ids, edge_of_face = batch.face_edge
        f = self.face_convs[0](batch.face_x, batch.face_nbrs)
        f = f + segment_mean(e[edge_of_face], face_ids, f.shape[0])
        for conv in self.face_convs[1:]:
            f = conv(f, batch.face_nbrs)

        if self.config.pooling == 'max':
            pooled = segment_max(f, batch.face_graph, batch.num_graphs)
        else:
            pooled = segment_mean(f, batch.face_graph, batch.num_graphs)
        return self.readout(pooled)

    def parameter_count(self) -> int:
        return count_parameters(self)


def encode(graph: PartGraph, encoder: HierarchicalEncoder) -> np.ndarray:
    """Latent code of one part, latent_width finite values."""
    with torch.no_grad():
        z = encoder(collate([graph]))[0]
    out = z.numpy().copy()
    if not np.all(np.isfinite(out)):
        raise DataError('Encoder produced a non-finite latent code')
    return out


def expected_parameter_count(config: EncoderConfig) -> int:
    h, c = config.hidden_width, config.convs_per_tier
    first = sum(2 * d * h + h for d in (VERTEX_DIM, EDGE_DIM, FACE_DIM))
    rest = 3 * (c - 1) * (2 * h * h + h)
    return first + rest + h * config.latent_width + config.latent_width


def describe(config: EncoderConfig) -> str:
    n = expected_parameter_count(config)
    return f'hidden {config.hidden_width}, latent {config.latent_width}, ' \
           f'{config.convs_per_tier} convs/tier, {n / 1e6:.2f} M params'


