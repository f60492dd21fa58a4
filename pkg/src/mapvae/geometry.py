"""Point clouds, synthetic shapes, kNN geodesics and multi-angle splitting."""
from __future__ import annotations

import heapq
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .errors import ConfigError, DegenerateError, ParseError, SizeError


@dataclass
class PointCloud:
    points: np.ndarray
    labels: Optional[np.ndarray] = None

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=np.float64).reshape(-1, 3)
        if not np.all(np.isfinite(self.points)):
            raise ValueError("point coordinates must be finite")
        if self.labels is not None:
            self.labels = np.asarray(self.labels, dtype=np.int64).reshape(-1)
            if len(self.labels) != len(self.points):
                raise SizeError(
                    f"{len(self.labels)} labels for {len(self.points)} points")

    def __len__(self):
        return len(self.points)

    def subset(self, indices) -> "PointCloud":
        indices = np.asarray(indices, dtype=np.int64)
        labels = None if self.labels is None else self.labels[indices]
        return PointCloud(self.points[indices], labels)


# --------------------------------------------------------------------------
# file readers


def _parse_floats(tokens, lineno):
    try:
        values = [float(t) for t in tokens]
    except ValueError:
        raise ParseError(f"expected numbers, got {' '.join(tokens)!r}", lineno)
    if not all(math.isfinite(v) for v in values):
        raise ParseError("non-finite value", lineno)
    return values


def _read_xyz(lines):
    points, labels = [], []
    for lineno, line in enumerate(lines, 1):
        tokens = line.split()
        if not tokens or tokens[0].startswith("#"):
            continue
        if len(tokens) not in (3, 4):
            raise ParseError(f"expected 3 or 4 columns, got {len(tokens)}", lineno)
        points.append(_parse_floats(tokens[:3], lineno))
        if len(tokens) == 4:
            try:
                labels.append(int(tokens[3]))
            except ValueError:
                raise ParseError(f"bad label {tokens[3]!r}", lineno)
    if not points:
        raise ParseError("no points in file", 1)
    if labels and len(labels) != len(points):
        raise ParseError("labels present on some lines only", len(lines))
    return PointCloud(np.array(points), np.array(labels) if labels else None)


def _read_ply(lines):
    if not lines or lines[0].strip() != "ply":
        raise ParseError("missing 'ply' magic", 1)
    n_vertex = None
    props = []
    in_vertex = False
    body = None
    for lineno, line in enumerate(lines[1:], 2):
        tokens = line.split()
        if not tokens:
            continue
        head = tokens[0]
        if head == "format":
            if len(tokens) < 2 or tokens[1] != "ascii":
                raise ParseError("only ascii ply is supported", lineno)
        elif head == "element":
            if len(tokens) != 3:
                raise ParseError("malformed element line", lineno)
            in_vertex = tokens[1] == "vertex"
            if in_vertex:
                try:
                    n_vertex = int(tokens[2])
                except ValueError:
                    raise ParseError("bad vertex count", lineno)
        elif head == "property":
            if in_vertex:
                if tokens[1] == "list":
                    raise ParseError("list property on vertex element", lineno)
                props.append(tokens[-1])
        elif head == "end_header":
            body = lineno
            break
        elif head not in ("comment", "obj_info"):
            raise ParseError(f"unexpected header keyword {head!r}", lineno)
    if body is None:
        raise ParseError("missing end_header", len(lines))
    if n_vertex is None or n_vertex < 1:
        raise ParseError("no vertex element", body)
    try:
        cols = [props.index(c) for c in ("x", "y", "z")]
    except ValueError:
        raise ParseError("vertex element lacks x/y/z", body)
    label_col = props.index("label") if "label" in props else None
    points, labels = [], []
    lineno = body
    for line in lines[body:]:
        lineno += 1
        tokens = line.split()
        if not tokens:
            continue
        if len(points) == n_vertex:
            break  # remaining elements (faces) are ignored
        if len(tokens) != len(props):
            raise ParseError(f"expected {len(props)} values, got {len(tokens)}", lineno)
        values = _parse_floats(tokens, lineno)
        points.append([values[c] for c in cols])
        if label_col is not None:
            labels.append(int(values[label_col]))
    if len(points) != n_vertex:
        raise ParseError(f"header declares {n_vertex} vertices, found {len(points)}", lineno)
    return PointCloud(np.array(points), np.array(labels) if labels else None)


def _read_off(lines):
    content = [(i, l.split()) for i, l in enumerate(lines, 1)
               if l.split() and not l.lstrip().startswith("#")]
    if not content:
        raise ParseError("empty file", 1)
    lineno, tokens = content[0]
    if tokens[0] == "OFF":
        tokens = tokens[1:]
        if not tokens:
            content = content[1:]
            if not content:
                raise ParseError("missing counts line", lineno)
            lineno, tokens = content[0]
    elif tokens[0].startswith("OFF"):
        # "OFF8 4 2 0" style header with glued counts
        tokens = [tokens[0][3:]] + tokens[1:]
    else:
        raise ParseError("missing 'OFF' magic", lineno)
    try:
        n_vert, n_face = int(tokens[0]), int(tokens[1])
    except (ValueError, IndexError):
        raise ParseError("bad counts line", lineno)
    rows = content[1:]
    if len(rows) < n_vert + n_face:
        raise ParseError("file truncated", rows[-1][0] if rows else lineno)
    verts = np.array([_parse_floats(t[:3], i) for i, t in rows[:n_vert]])
    tris = []
    for i, t in rows[n_vert:n_vert + n_face]:
        try:
            k = int(t[0])
            idx = [int(x) for x in t[1:1 + k]]
        except (ValueError, IndexError):
            raise ParseError("bad face line", i)
        if k < 3 or len(idx) != k or min(idx) < 0 or max(idx) >= n_vert:
            raise ParseError("face index out of range", i)
        for j in range(1, k - 1):
            tris.append((idx[0], idx[j], idx[j + 1]))
    return verts, np.array(tris, dtype=np.int64).reshape(-1, 3)


def sample_mesh_surface(vertices, triangles, count, seed):
    """Area-weighted uniform samples on a triangle mesh."""
    a, b, c = (vertices[triangles[:, i]] for i in range(3))
    areas = 0.5 * np.linalg.norm(np.cross(b - a, c - a), axis=1)
    total = areas.sum()
    if not total > 0:
        raise DegenerateError("mesh has zero total surface area")
    rng = np.random.default_rng(seed)
    tri = rng.choice(len(areas), size=count, p=areas / total)
    r1 = np.sqrt(rng.random(count))[:, None]
    r2 = rng.random(count)[:, None]
    return (1 - r1) * a[tri] + r1 * (1 - r2) * b[tri] + r1 * r2 * c[tri]


def load_point_cloud(path, format=None, count=2048, seed=0) -> PointCloud:
    """Read an xyz-text, ascii-ply or off-mesh file.

    OFF meshes are sampled to ``count`` points with ``seed``. No normalization
    is applied.
    """
    path = Path(path)
    if format is None:
        format = {".ply": "ascii-ply", ".off": "off-mesh"}.get(path.suffix.lower(), "xyz-text")
    lines = path.read_text().splitlines()
    if not any(l.strip() for l in lines):
        raise ParseError("empty file", 1)
    if format == "xyz-text":
        return _read_xyz(lines)
    if format == "ascii-ply":
        return _read_ply(lines)
    if format == "off-mesh":
        verts, tris = _read_off(lines)
        if len(tris) == 0:
            raise DegenerateError("mesh has no faces")
        return PointCloud(sample_mesh_surface(verts, tris, count, seed))
    raise ConfigError(f"unknown format {format!r}")


def normalize(cloud: PointCloud) -> PointCloud:
    """Center at the centroid and scale so the farthest point has norm 1."""
    if len(cloud) == 0:
        raise SizeError("cannot normalize an empty cloud")
    centered = cloud.points - cloud.points.mean(axis=0)
    scale = np.linalg.norm(centered, axis=1).max()
    if not scale > 1e-12:
        raise DegenerateError("all points coincide; cloud has no scale")
    out = centered / scale
    # re-center once more so the centroid is exact to rounding
    out -= out.mean(axis=0)
    return PointCloud(out, None if cloud.labels is None else cloud.labels.copy())


# --------------------------------------------------------------------------
# synthetic shapes


def _rect(rng, n, origin, u, v):
    s, t = rng.random((2, n, 1))
    return origin + s * u + t * v


def _allocate(rng, count, areas):
    """Split ``count`` samples over parts proportional to area, each part >= 1."""
    areas = np.asarray(areas, dtype=float)
    counts = np.maximum(1, np.floor(count * areas / areas.sum()).astype(int))
    while counts.sum() > count:
        counts[np.argmax(counts)] -= 1
    while counts.sum() < count:
        counts[np.argmax(areas / counts)] += 1
    return counts


def _box_surface(rng, n, half):
    hx, hy, hz = half
    faces = [  # (origin, u, v) for the six faces
        ((-hx, -hy, -hz), (2 * hx, 0, 0), (0, 2 * hy, 0)),
        ((-hx, -hy, hz), (2 * hx, 0, 0), (0, 2 * hy, 0)),
        ((-hx, -hy, -hz), (2 * hx, 0, 0), (0, 0, 2 * hz)),
        ((-hx, hy, -hz), (2 * hx, 0, 0), (0, 0, 2 * hz)),
        ((-hx, -hy, -hz), (0, 2 * hy, 0), (0, 0, 2 * hz)),
        ((hx, -hy, -hz), (0, 2 * hy, 0), (0, 0, 2 * hz)),
    ]
    areas = [np.linalg.norm(np.cross(u, v)) for _, u, v in faces]
    counts = _allocate(rng, n, areas)
    return np.concatenate([_rect(rng, c, np.array(o, float), np.array(u, float), np.array(v, float))
                           for c, (o, u, v) in zip(counts, faces)])


def _cylinder_surface(rng, n, radius, height, center=(0.0, 0.0, 0.0), caps=True):
    areas = [2 * np.pi * radius * height]
    if caps:
        areas += [np.pi * radius ** 2] * 2
    counts = _allocate(rng, n, areas)
    theta = rng.random(counts[0]) * 2 * np.pi
    y = (rng.random(counts[0]) - 0.5) * height
    parts = [np.stack([radius * np.cos(theta), y, radius * np.sin(theta)], axis=1)]
    if caps:
        for c, y0 in zip(counts[1:], (-height / 2, height / 2)):
            r = radius * np.sqrt(rng.random(c))
            t = rng.random(c) * 2 * np.pi
            parts.append(np.stack([r * np.cos(t), np.full(c, y0), r * np.sin(t)], axis=1))
    return np.concatenate(parts) + np.asarray(center)


SHAPE_DEFAULTS = {
    "sphere": {"radius": 1.0},
    "box": {"size": (1.0, 0.6, 0.8)},
    "cylinder": {"radius": 0.5, "height": 1.5},
    "plane": {"width": 1.0, "depth": 1.0},
    "two-part-chair": {"width": 0.5, "depth": 0.5, "back_height": 1.0},
    "two-part-table": {"width": 1.0, "depth": 0.6, "height": 0.7, "leg_radius": 0.04},
}


def synth_shape(kind, params=None, count=256, seed=0, jitter=0.0) -> PointCloud:
    """Sample ``count`` points on a parametric surface.

    Multi-part kinds ("two-part-chair", "two-part-table") carry part labels
    0 and 1. Output is deterministic in ``seed``; ``jitter`` adds isotropic
    Gaussian noise after sampling.
    """
    if kind not in SHAPE_DEFAULTS:
        raise ConfigError(f"unknown shape kind {kind!r}")
    if count < 8:
        raise SizeError("synthetic shapes need at least 8 points")
    p = dict(SHAPE_DEFAULTS[kind])
    p.update(params or {})
    rng = np.random.default_rng(seed)
    labels = None
    if kind == "sphere":
        d = rng.normal(size=(count, 3))
        pts = p["radius"] * d / np.linalg.norm(d, axis=1, keepdims=True)
    elif kind == "box":
        pts = _box_surface(rng, count, 0.5 * np.asarray(p["size"], float))
    elif kind == "cylinder":
        pts = _cylinder_surface(rng, count, p["radius"], p["height"])
    elif kind == "plane":
        w, d = p["width"], p["depth"]
        pts = _rect(rng, count, np.array([-w / 2, 0, -d / 2]), np.array([w, 0, 0]), np.array([0, 0, d]))
    elif kind == "two-part-chair":
        w, d, h = p["width"], p["depth"], p["back_height"]
        n_seat, n_back = _allocate(rng, count, [w * d, w * h])
        seat = _rect(rng, n_seat, np.array([-w / 2, 0, -d / 2]), np.array([w, 0, 0]), np.array([0, 0, d]))
        back = _rect(rng, n_back, np.array([-w / 2, 0, -d / 2]), np.array([w, 0, 0]), np.array([0, h, 0]))
        pts = np.concatenate([seat, back])
        labels = np.repeat([0, 1], [n_seat, n_back])
    else:  # two-part-table
        w, d, h, r = p["width"], p["depth"], p["height"], p["leg_radius"]
        n_top, n_legs = _allocate(rng, count, [w * d, 4 * 2 * np.pi * r * h])
        top = _rect(rng, n_top, np.array([-w / 2, h, -d / 2]), np.array([w, 0, 0]), np.array([0, 0, d]))
        per_leg = _allocate(rng, n_legs, [1, 1, 1, 1])
        corners = [(sx * (w / 2 - r), h / 2, sz * (d / 2 - r)) for sx in (-1, 1) for sz in (-1, 1)]
        legs = [_cylinder_surface(rng, c, r, h, center=cen, caps=False) for c, cen in zip(per_leg, corners)]
        pts = np.concatenate([top] + legs)
        labels = np.repeat([0, 1], [n_top, n_legs])
    if jitter > 0:
        pts = pts + rng.normal(scale=jitter, size=pts.shape)
    return PointCloud(pts, labels)


# --------------------------------------------------------------------------
# kNN graph and geodesics


@dataclass
class NeighborGraph:
    n: int
    neighbors: list = field(repr=False)  # per-vertex int arrays, sorted ascending
    weights: list = field(repr=False)    # matching Euclidean edge lengths

    def edges(self):
        for a in range(self.n):
            for b, w in zip(self.neighbors[a], self.weights[a]):
                yield a, int(b), float(w)

    def is_connected(self) -> bool:
        return bool(np.all(np.isfinite(geodesic_distances(self, 0))))


def pairwise_distances(a, b):
    diff = a[:, None, :] - b[None, :, :]
    return np.sqrt(np.einsum("ijk,ijk->ij", diff, diff))


def build_knn_graph(cloud: PointCloud, k: int = 10) -> NeighborGraph:
    """Symmetrized (union) k-nearest-neighbour graph with Euclidean weights.

    Neighbour ties are broken by the smaller point index.
    """
    pts = cloud.points
    n = len(pts)
    if not 1 <= k < n:
        raise ConfigError(f"k must satisfy 1 <= k < {n}, got {k}")
    dist = pairwise_distances(pts, pts)
    np.fill_diagonal(dist, np.inf)
    order = np.argsort(dist, axis=1, kind="stable")[:, :k]
    adj = [set() for _ in range(n)]
    for a in range(n):
        for b in order[a]:
            adj[a].add(int(b))
            adj[int(b)].add(a)
    neighbors = [np.array(sorted(s), dtype=np.int64) for s in adj]
    weights = [dist[a, nb] for a, nb in enumerate(neighbors)]
    return NeighborGraph(n, neighbors, weights)


def geodesic_distances(graph: NeighborGraph, source: int) -> np.ndarray:
    """Dijkstra shortest-path lengths from ``source``; unreachable -> inf."""
    if not 0 <= source < graph.n:
        raise IndexError(f"source {source} out of range for {graph.n} vertices")
    dist = np.full(graph.n, np.inf)
    dist[source] = 0.0
    done = np.zeros(graph.n, dtype=bool)
    heap = [(0.0, source)]
    while heap:
        d, a = heapq.heappop(heap)
        if done[a]:
            continue
        done[a] = True
        for b, w in zip(graph.neighbors[a], graph.weights[a]):
            nd = d + w
            if nd < dist[b]:
                dist[b] = nd
                heapq.heappush(heap, (nd, int(b)))
    return dist


# --------------------------------------------------------------------------
# viewpoints and splitting

_AXES = {"x": (1.0, 0.0, 0.0), "y": (0.0, 1.0, 0.0), "z": (0.0, 0.0, 1.0)}


@dataclass(frozen=True)
class Viewpoint:
    position: tuple
    index: int  # 1-based angle index v


def _plane_basis(axis):
    axis = np.asarray(_AXES.get(axis, axis) if isinstance(axis, str) else axis, float)
    axis = axis / np.linalg.norm(axis)
    cands = np.eye(3)
    ref = cands[np.argmin(np.abs(cands @ axis))]
    e1 = ref - (ref @ axis) * axis
    e1 /= np.linalg.norm(e1)
    e2 = np.cross(axis, e1)
    return axis, e1, e2


def viewpoints(cloud: PointCloud, V: int = 12, axis="y", radius_scale: float = 2.0):
    """``V`` viewpoints equally spaced on a circle around the cloud.

    The circle lies in the plane orthogonal to ``axis`` through the centroid;
    its radius is ``radius_scale`` times the cloud radius. Angle 1 sits on the
    reference direction and indices advance clockwise when looking along +axis.
    """
    if V < 1:
        raise ConfigError("V must be >= 1")
    if not radius_scale > 1:
        raise ConfigError("radius_scale must exceed 1")
    center = cloud.points.mean(axis=0)
    radius = radius_scale * np.linalg.norm(cloud.points - center, axis=1).max()
    _, e1, e2 = _plane_basis(axis)
    out = []
    for v in range(V):
        # right-handed rotation about +axis reads clockwise when viewed along +axis
        theta = 2 * np.pi * v / V
        pos = center + radius * (np.cos(theta) * e1 + np.sin(theta) * e2)
        out.append(Viewpoint(tuple(pos), v + 1))
    return out


@dataclass
class HalfPair:
    cloud: PointCloud = field(repr=False)
    front_indices: np.ndarray
    back_indices: np.ndarray
    angle: int

    @property
    def front(self) -> PointCloud:
        return self.cloud.subset(self.front_indices)

    @property
    def back(self) -> PointCloud:
        return self.cloud.subset(self.back_indices)


def split_half(cloud: PointCloud, viewpoint: Viewpoint, N: int, mode="geodesic",
               graph: Optional[NeighborGraph] = None, k: int = 10) -> HalfPair:
    """Split a 2N-point cloud into the N points nearest to / farthest from a viewpoint.

    ``mode="geodesic"`` ranks points by graph distance from the point closest
    to the viewpoint; unreachable points go last, ordered by Euclidean
    distance to that point. All ties fall to the smaller index.
    """
    n = len(cloud)
    if n % 2 or n != 2 * N:
        raise SizeError(f"split needs exactly 2N={2 * N} points, cloud has {n}")
    pts = cloud.points
    idx = np.arange(n)
    to_view = np.linalg.norm(pts - np.asarray(viewpoint.position), axis=1)
    if mode == "euclidean":
        order = np.lexsort((idx, to_view))
    elif mode == "geodesic":
        if graph is None:
            graph = build_knn_graph(cloud, min(k, n - 1))
        u = int(np.argmin(to_view))
        geo = geodesic_distances(graph, u)
        reach = np.isfinite(geo)
        to_u = np.linalg.norm(pts - pts[u], axis=1)
        key = np.where(reach, geo, to_u)
        rank_u = (idx != u).astype(int)
        order = np.lexsort((idx, key, ~reach, rank_u))
    else:
        raise ConfigError(f"unknown split mode {mode!r}")
    return HalfPair(cloud, order[:N].copy(), order[N:].copy(), viewpoint.index)


def split_all_angles(cloud: PointCloud, V: int, N: int, mode="geodesic", k: int = 10,
                     axis="y", radius_scale: float = 2.0):
    graph = build_knn_graph(cloud, min(k, len(cloud) - 1)) if mode == "geodesic" else None
    return [split_half(cloud, vp, N, mode, graph=graph)
            for vp in viewpoints(cloud, V, axis, radius_scale)]


# --------------------------------------------------------------------------
# half-to-half sequence pairs

SCHEMES = ("uniform", "contiguous", "random")


def select_angles(V: int, W: int, scheme: str, start: int, rng=None) -> tuple:
    """1-based angle indices for the sample starting at angle ``start``."""
    if not 1 <= W <= V:
        raise ConfigError(f"W must lie in [1, V={V}], got {W}")
    s = start - 1
    if scheme == "uniform":
        if V % W:
            raise ConfigError(f"uniform scheme needs W | V, got V={V}, W={W}")
        step = V // W
        offsets = [j * step for j in range(W)]
    elif scheme == "contiguous":
        offsets = list(range(W))
    elif scheme == "random":
        if rng is None:
            raise ConfigError("random scheme needs an rng")
        rest = np.sort(rng.choice(np.arange(1, V), size=W - 1, replace=False))
        offsets = [0] + [int(o) for o in rest]
    else:
        raise ConfigError(f"unknown scheme {scheme!r}")
    return tuple((s + o) % V + 1 for o in offsets)


@dataclass
class TrainingSample:
    cloud: PointCloud = field(repr=False)
    halves: list = field(repr=False)  # W HalfPairs in selection order
    start: int

    @property
    def angles(self):
        return tuple(h.angle for h in self.halves)

    @property
    def front_sequence(self):
        return [h.front for h in self.halves]

    @property
    def back_sequence(self):
        return [h.back for h in self.halves]


def build_sequence_pairs(cloud: PointCloud, V: int = 12, W: int = 6, N: Optional[int] = None,
                         mode="geodesic", scheme="uniform", seed: int = 0, k: int = 10,
                         axis="y", radius_scale: float = 2.0,
                         halves: Optional[Sequence[HalfPair]] = None):
    """All V training samples of one cloud.

    ``halves`` may carry precomputed splits for every angle.
    """
    if N is None:
        N = len(cloud) // 2
    if scheme == "uniform" and V % W:
        raise ConfigError(f"uniform scheme needs W | V, got V={V}, W={W}")
    if halves is None:
        halves = split_all_angles(cloud, V, N, mode, k, axis, radius_scale)
    rng = np.random.default_rng(seed) if scheme == "random" else None
    out = []
    for i in range(1, V + 1):
        angles = select_angles(V, W, scheme, i, rng)
        out.append(TrainingSample(cloud, [halves[a - 1] for a in angles], i))
    return out
