"""Point clouds, k-NN graphs, regular test grids, mesh sampling, synthetic data.

All containers are frozen after construction (arrays are marked read-only)
and safe to share across threads.
"""

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

SYNTH_CLASSES = ("sphere", "cube", "torus", "cylinder", "cone")


def _freeze(arr):
    arr = np.ascontiguousarray(arr)
    arr.flags.writeable = False
    return arr


@dataclass(frozen=True)
class PointCloud:
    """Positions (N,3) with optional per-vertex features and labels."""

    positions: np.ndarray
    features: Optional[np.ndarray] = None
    label: Optional[int] = None
    point_labels: Optional[np.ndarray] = None

    def __post_init__(self):
        pos = np.asarray(self.positions, dtype=np.float64)
        if pos.ndim != 2 or pos.shape[1] != 3 or pos.shape[0] < 1:
            raise ValueError("positions must be a non-empty (N,3) array")
        if not np.all(np.isfinite(pos)):
            raise ValueError("positions must be finite")
        object.__setattr__(self, "positions", _freeze(pos))
        if self.features is not None:
            feats = np.asarray(self.features, dtype=np.float64)
            if feats.ndim != 2 or feats.shape[0] != pos.shape[0]:
                raise ValueError("features row count must equal N")
            object.__setattr__(self, "features", _freeze(feats))
        if self.point_labels is not None:
            pl = np.asarray(self.point_labels, dtype=np.int64)
            if pl.shape != (pos.shape[0],):
                raise ValueError("point_labels must be shape (N,)")
            object.__setattr__(self, "point_labels", _freeze(pl))

    @property
    def num_points(self):
        return self.positions.shape[0]


@dataclass(frozen=True)
class Graph:
    """Undirected graph: each edge stored once with lower index first,
    plus a CSR map from vertex to incident edge ids."""

    num_vertices: int
    edges: np.ndarray  # (E,2) int64, edges[:,0] < edges[:,1], lexsorted
    incidence_ptr: np.ndarray = field(repr=False, default=None)
    incidence_edges: np.ndarray = field(repr=False, default=None)
    degrees: np.ndarray = field(repr=False, default=None)

    @classmethod
    def build(cls, num_vertices, pairs):
        """Canonicalize an edge list: orient (min,max), drop duplicates."""
        pairs = np.asarray(pairs, dtype=np.int64).reshape(-1, 2)
        if pairs.size:
            if pairs.min() < 0 or pairs.max() >= num_vertices:
                raise ValueError("edge endpoint out of range")
            if np.any(pairs[:, 0] == pairs[:, 1]):
                raise ValueError("self-loops are not allowed")
            lo = np.minimum(pairs[:, 0], pairs[:, 1])
            hi = np.maximum(pairs[:, 0], pairs[:, 1])
            edges = np.unique(np.stack([lo, hi], axis=1), axis=0)
        else:
            edges = np.zeros((0, 2), dtype=np.int64)
        n_edges = edges.shape[0]
        both = np.concatenate([edges[:, 0], edges[:, 1]])
        eids = np.concatenate([np.arange(n_edges), np.arange(n_edges)])
        order = np.lexsort((eids, both))
        incidence_edges = eids[order]
        counts = np.bincount(both, minlength=num_vertices)
        ptr = np.zeros(num_vertices + 1, dtype=np.int64)
        np.cumsum(counts, out=ptr[1:])
        return cls(
            num_vertices=int(num_vertices),
            edges=_freeze(edges),
            incidence_ptr=_freeze(ptr),
            incidence_edges=_freeze(incidence_edges.astype(np.int64)),
            degrees=_freeze(counts.astype(np.int64)),
        )

    @property
    def num_edges(self):
        return self.edges.shape[0]

    def incident_edges(self, v):
        return self.incidence_edges[self.incidence_ptr[v] : self.incidence_ptr[v + 1]]

    def adjacency(self, edge_weights=None):
        """Symmetric sparse adjacency (scipy CSR), zero diagonal."""
        from scipy import sparse

        if edge_weights is None:
            vals = np.ones(self.num_edges)
        else:
            vals = np.asarray(edge_weights, dtype=np.float64)
            if vals.shape != (self.num_edges,):
                raise ValueError("edge_weights must have one value per edge")
        rows = np.concatenate([self.edges[:, 0], self.edges[:, 1]])
        cols = np.concatenate([self.edges[:, 1], self.edges[:, 0]])
        a = sparse.coo_matrix(
            (np.concatenate([vals, vals]), (rows, cols)),
            shape=(self.num_vertices, self.num_vertices),
        )
        return a.tocsr()


@dataclass(frozen=True)
class Mesh:
    """Triangle mesh; degenerate (zero-area) faces are dropped on build."""

    vertices: np.ndarray
    faces: np.ndarray

    def __post_init__(self):
        verts = np.asarray(self.vertices, dtype=np.float64).reshape(-1, 3)
        faces = np.asarray(self.faces, dtype=np.int64).reshape(-1, 3)
        if faces.size:
            if faces.min() < 0 or faces.max() >= verts.shape[0]:
                raise ValueError("face index out of range")
            areas = _face_areas(verts, faces)
            faces = faces[areas > 0.0]
        object.__setattr__(self, "vertices", _freeze(verts))
        object.__setattr__(self, "faces", _freeze(faces))


def _face_areas(vertices, faces):
    a = vertices[faces[:, 0]]
    b = vertices[faces[:, 1]]
    c = vertices[faces[:, 2]]
    cross = np.cross(b - a, c - a)
    return 0.5 * np.sqrt(np.sum(cross * cross, axis=1))


def _knn_pairs(points, k):
    n = points.shape[0]
    if k < 1:
        raise ValueError("K must be >= 1")
    if k >= n:
        raise ValueError(f"K={k} must be smaller than the number of points {n}")
    # Brute-force all-pairs; stable argsort breaks distance ties by index.
    sq = np.sum(points * points, axis=1)
    d2 = sq[:, None] + sq[None, :] - 2.0 * points @ points.T
    np.fill_diagonal(d2, np.inf)
    picks = np.argsort(d2, axis=1, kind="stable")[:, :k]
    src = np.repeat(np.arange(n), k)
    return np.stack([src, picks.reshape(-1)], axis=1)


def knn_graph(positions, k):
    """k-NN graph on Euclidean positions; directed picks are symmetrized
    by union into undirected edges."""
    positions = np.asarray(positions, dtype=np.float64).reshape(-1, 3)
    if not np.all(np.isfinite(positions)):
        raise ValueError("positions must be finite")
    pairs = _knn_pairs(positions, k)
    return Graph.build(positions.shape[0], pairs)


def feature_knn_graph(features, k):
    """k-NN graph in c-dimensional feature space (same rules as knn_graph)."""
    features = np.asarray(features, dtype=np.float64)
    if features.ndim == 1:
        features = features[:, None]
    if not np.all(np.isfinite(features)):
        raise ValueError("features must be finite")
    pairs = _knn_pairs(features, k)
    return Graph.build(features.shape[0], pairs)


def zero_length_edges(graph, positions):
    """Edge ids whose endpoints coincide (flagged for the epsilon guard)."""
    positions = np.asarray(positions, dtype=np.float64)
    dvec = positions[graph.edges[:, 0]] - positions[graph.edges[:, 1]]
    return np.nonzero(np.sum(dvec * dvec, axis=1) == 0.0)[0]


def regular_grid(nx, ny, nz, h):
    """Axis-aligned lattice with 4-neighbor (2D) / 6-neighbor (3D)
    connectivity. Vertex index is ix + nx*(iy + ny*iz)."""
    if nx < 1 or ny < 1 or nz < 1:
        raise ValueError("grid dimensions must be >= 1")
    if h <= 0:
        raise ValueError("spacing h must be positive")
    iz, iy, ix = np.meshgrid(np.arange(nz), np.arange(ny), np.arange(nx), indexing="ij")
    positions = np.stack([ix, iy, iz], axis=-1).reshape(-1, 3).astype(np.float64) * h
    grid = np.arange(nx * ny * nz, dtype=np.int64).reshape(nz, ny, nx)
    pairs = []
    if nx > 1:
        a = grid[:, :, :-1].reshape(-1)
        pairs.append(np.stack([a, a + 1], axis=1))
    if ny > 1:
        a = grid[:, :-1, :].reshape(-1)
        pairs.append(np.stack([a, a + nx], axis=1))
    if nz > 1:
        a = grid[:-1, :, :].reshape(-1)
        pairs.append(np.stack([a, a + nx * ny], axis=1))
    pairs = np.concatenate(pairs) if pairs else np.zeros((0, 2), dtype=np.int64)
    cloud = PointCloud(positions=positions)
    return cloud, Graph.build(nx * ny * nz, pairs)


def grid_interior_mask(nx, ny, nz):
    """True for vertices with both neighbors present along every active axis."""
    mask = np.ones((nz, ny, nx), dtype=bool)
    if nx > 1:
        mask[:, :, 0] = False
        mask[:, :, -1] = False
    if ny > 1:
        mask[:, 0, :] = False
        mask[:, -1, :] = False
    if nz > 1:
        mask[0, :, :] = False
        mask[-1, :, :] = False
    return mask.reshape(-1)


def sample_mesh(mesh, n, seed):
    """Sample n points area-proportionally over faces, uniform per triangle."""
    if mesh.faces.shape[0] == 0:
        raise ValueError("mesh has no faces")
    rng = np.random.default_rng(seed)
    areas = _face_areas(mesh.vertices, mesh.faces)
    probs = areas / areas.sum()
    face_ids = rng.choice(mesh.faces.shape[0], size=n, p=probs)
    u = rng.random(n)
    v = rng.random(n)
    flip = u + v > 1.0
    u[flip] = 1.0 - u[flip]
    v[flip] = 1.0 - v[flip]
    tri = mesh.vertices[mesh.faces[face_ids]]
    pts = tri[:, 0] + u[:, None] * (tri[:, 1] - tri[:, 0]) + v[:, None] * (
        tri[:, 2] - tri[:, 0]
    )
    return PointCloud(positions=pts)


def normalize_unit_cube(positions):
    """Translate/scale into [0,1]^3 preserving aspect ratio; a degenerate
    cloud (all points equal) maps to the origin."""
    positions = np.asarray(positions, dtype=np.float64)
    if not np.all(np.isfinite(positions)):
        raise ValueError("positions must be finite")
    lo = positions.min(axis=0)
    extent = float((positions.max(axis=0) - lo).max())
    if extent == 0.0:
        return np.zeros_like(positions)
    return (positions - lo) / extent


def augment(positions, scale_range=(0.8, 1.2), rotate=False, seed=None):
    """Random uniform scale in scale_range, optional random rotation about
    the z axis. Draw order (scale, then angle) is part of the contract."""
    lo, hi = float(scale_range[0]), float(scale_range[1])
    if lo > hi:
        raise ValueError("scale_range must satisfy lo <= hi")
    positions = np.asarray(positions, dtype=np.float64)
    rng = np.random.default_rng(seed)
    s = rng.uniform(lo, hi)
    out = positions * s
    if rotate:
        phi = rng.uniform(0.0, 2.0 * np.pi)
        c, sn = np.cos(phi), np.sin(phi)
        rot = np.array([[c, -sn, 0.0], [sn, c, 0.0], [0.0, 0.0, 1.0]])
        out = out @ rot.T
    return out


def _sample_sphere(rng, n, r=0.5):
    pts = rng.normal(size=(n, 3))
    pts /= np.linalg.norm(pts, axis=1, keepdims=True)
    pts *= r
    # Pin the six axis extremes so the bounding box is exactly the full
    # sphere and unit-cube normalization is exact.
    if n >= 6:
        poles = np.array(
            [
                [r, 0, 0],
                [-r, 0, 0],
                [0, r, 0],
                [0, -r, 0],
                [0, 0, r],
                [0, 0, -r],
            ]
        )
        pts[:6] = poles
    return pts


def _sample_cube(rng, n, half=0.5):
    face = rng.integers(0, 6, size=n)
    uv = rng.uniform(-half, half, size=(n, 2))
    pts = np.zeros((n, 3))
    axis = face // 2
    sign = np.where(face % 2 == 0, half, -half)
    for a in range(3):
        sel = axis == a
        others = [b for b in range(3) if b != a]
        pts[sel, a] = sign[sel]
        pts[sel, others[0]] = uv[sel, 0]
        pts[sel, others[1]] = uv[sel, 1]
    return pts


def _sample_torus(rng, n, big=0.35, small=0.15):
    theta = rng.uniform(0.0, 2.0 * np.pi, size=n)
    phi = np.empty(n)
    got = 0
    while got < n:  # rejection sampling for area-uniform phi
        cand = rng.uniform(0.0, 2.0 * np.pi, size=2 * (n - got))
        acc = rng.uniform(0.0, 1.0, size=cand.size) < (
            (big + small * np.cos(cand)) / (big + small)
        )
        take = cand[acc][: n - got]
        phi[got : got + take.size] = take
        got += take.size
    rad = big + small * np.cos(phi)
    return np.stack([rad * np.cos(theta), rad * np.sin(theta), small * np.sin(phi)], axis=1)


def _sample_cylinder(rng, n, r=0.35, h=0.9):
    side_area = 2.0 * np.pi * r * h
    cap_area = np.pi * r * r
    total = side_area + 2.0 * cap_area
    part = rng.uniform(0.0, total, size=n)
    theta = rng.uniform(0.0, 2.0 * np.pi, size=n)
    pts = np.zeros((n, 3))
    on_side = part < side_area
    z = rng.uniform(-h / 2.0, h / 2.0, size=n)
    pts[on_side] = np.stack(
        [r * np.cos(theta[on_side]), r * np.sin(theta[on_side]), z[on_side]], axis=1
    )
    caps = ~on_side
    rr = r * np.sqrt(rng.uniform(0.0, 1.0, size=n))
    top = part >= side_area + cap_area
    zcap = np.where(top, h / 2.0, -h / 2.0)
    pts[caps] = np.stack(
        [rr[caps] * np.cos(theta[caps]), rr[caps] * np.sin(theta[caps]), zcap[caps]],
        axis=1,
    )
    return pts


def _sample_cone(rng, n, r=0.45, h=0.9):
    slant = np.sqrt(r * r + h * h)
    lateral = np.pi * r * slant
    base = np.pi * r * r
    part = rng.uniform(0.0, lateral + base, size=n)
    theta = rng.uniform(0.0, 2.0 * np.pi, size=n)
    t = np.sqrt(rng.uniform(0.0, 1.0, size=n))  # area density grows with radius
    pts = np.zeros((n, 3))
    on_lat = part < lateral
    pts[on_lat] = np.stack(
        [
            r * t[on_lat] * np.cos(theta[on_lat]),
            r * t[on_lat] * np.sin(theta[on_lat]),
            h * (1.0 - t[on_lat]) - h / 2.0,
        ],
        axis=1,
    )
    on_base = ~on_lat
    pts[on_base] = np.stack(
        [
            r * t[on_base] * np.cos(theta[on_base]),
            r * t[on_base] * np.sin(theta[on_base]),
            np.full(int(on_base.sum()), -h / 2.0),
        ],
        axis=1,
    )
    return pts


_SAMPLERS = {
    "sphere": _sample_sphere,
    "cube": _sample_cube,
    "torus": _sample_torus,
    "cylinder": _sample_cylinder,
    "cone": _sample_cone,
}


def synth_dataset(classes, n_per_class, points_per_cloud, noise_sd=0.0, seed=0):
    """Labeled clouds from analytic surfaces plus Gaussian jitter, normalized
    to the unit cube. Deterministic per seed."""
    for name in classes:
        if name not in _SAMPLERS:
            raise ValueError(
                f"unknown class {name!r}; choose from {sorted(_SAMPLERS)}"
            )
    rng = np.random.default_rng(seed)
    clouds = []
    for label, name in enumerate(classes):
        sampler = _SAMPLERS[name]
        for _ in range(n_per_class):
            pts = sampler(rng, points_per_cloud)
            if noise_sd > 0.0:
                pts = pts + rng.normal(scale=noise_sd, size=pts.shape)
            clouds.append(
                PointCloud(positions=normalize_unit_cube(pts), label=label)
            )
    return clouds
