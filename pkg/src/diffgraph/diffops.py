"""Differential operators on point-cloud graphs.

Conventions used throughout (these fix all signs and scales):

* Each undirected edge e=(i,j), i<j, carries three per-axis coefficients
  w_b = (b_i - b_j) / (2 d), with d the edge length clamped to 1e-12.
* Edge gradient of a feature column f:  g_e,b = w_b (f_i - f_j).  This is
  half the projected directional derivative; the pointwise map that follows
  absorbs any constant positive scale.
* Gradient features on vertices: mean of incident edge gradients.
* Second-derivative features: mean over incident edges of s_v,b * g_e,b,
  where s_v,b = -w_b at the lower-index endpoint and +w_b at the higher.
  On a unit 1-D path this composes to (f0 - 2 f1 + f2) / 8 at the middle
  vertex. The mean denominator counts every incident edge, including
  zero-length ones.
"""

import warnings
from dataclasses import dataclass

import numpy as np
from scipy import sparse

from . import _kernels
from .geometry import Graph

EPS_LENGTH = _kernels.EPS_LENGTH

TERMS = ("mass", "gradx", "grady", "gradz", "lapx", "lapy", "lapz")
TERM_INDEX = {name: t for t, name in enumerate(TERMS)}


class ZeroLengthEdgeWarning(UserWarning):
    """Raised (as a warning) when assembly clamps zero-length edges."""


@dataclass(frozen=True)
class SparseOperator:
    """Sorted-coordinate sparse real matrix backed by scipy CSR."""

    matrix: sparse.csr_matrix

    def __post_init__(self):
        m = self.matrix.tocsr().copy()
        m.sum_duplicates()
        m.sort_indices()
        m.eliminate_zeros()
        if m.nnz and not np.all(np.isfinite(m.data)):
            raise ValueError("operator values must be finite")
        object.__setattr__(self, "matrix", m)

    @classmethod
    def from_coo(cls, rows, cols, vals, shape):
        rows = np.asarray(rows, dtype=np.int64)
        cols = np.asarray(cols, dtype=np.int64)
        vals = np.asarray(vals, dtype=np.float64)
        if rows.size:
            if rows.min() < 0 or rows.max() >= shape[0]:
                raise ValueError("row index out of range")
            if cols.min() < 0 or cols.max() >= shape[1]:
                raise ValueError("column index out of range")
            key = rows * shape[1] + cols
            if np.unique(key).size != key.size:
                raise ValueError("duplicate (row, col) entries")
        return cls(sparse.coo_matrix((vals, (rows, cols)), shape=shape).tocsr())

    @property
    def shape(self):
        return self.matrix.shape

    @property
    def n_rows(self):
        return self.matrix.shape[0]

    @property
    def n_cols(self):
        return self.matrix.shape[1]

    @property
    def nnz(self):
        return self.matrix.nnz

    def __matmul__(self, other):
        if isinstance(other, SparseOperator):
            return SparseOperator(self.matrix @ other.matrix)
        return self.matrix @ np.asarray(other, dtype=np.float64)

    @property
    def T(self):
        return SparseOperator(self.matrix.T.tocsr())

    def to_dense(self):
        return self.matrix.toarray()

    def coo_triples(self):
        """(row, col, value) arrays in sorted row-major order."""
        coo = self.matrix.tocoo()
        order = np.lexsort((coo.col, coo.row))
        return coo.row[order], coo.col[order], coo.data[order]


@dataclass(frozen=True)
class AuxiliaryGraph:
    """Graph augmented with one dummy vertex per edge midpoint; dummy ids
    follow the original ids (edge e becomes vertex |V| + e)."""

    num_original: int
    num_edges: int
    midpoints: np.ndarray  # (E,3)
    arcs: np.ndarray  # (2E,2) directed (vertex -> midpoint id)
    arcs_transposed: np.ndarray  # flipped copy

    @property
    def num_vertices(self):
        return self.num_original + self.num_edges


@dataclass(frozen=True)
class DiffFeatures:
    """Per-vertex concatenation [mass|gx|gy|gz|lx|ly|lz], each c_in wide."""

    data: np.ndarray
    c_in: int

    def __post_init__(self):
        if self.data.shape[1] != 7 * self.c_in:
            raise ValueError("data width must be 7*c_in")

    def block(self, t):
        if isinstance(t, str):
            t = TERM_INDEX[t]
        return self.data[:, t * self.c_in : (t + 1) * self.c_in]


def block_slice(t, c_in):
    if isinstance(t, str):
        t = TERM_INDEX[t]
    return slice(t * c_in, (t + 1) * c_in)


def edge_geometry(graph, positions):
    """Per-edge difference vectors, clamped lengths, and the count of
    zero-length edges."""
    positions = np.asarray(positions, dtype=np.float64)
    e = graph.edges
    dvec = positions[e[:, 0]] - positions[e[:, 1]]
    d_raw = np.sqrt(np.sum(dvec * dvec, axis=1))
    n_zero = int(np.count_nonzero(d_raw == 0.0))
    return dvec, np.maximum(d_raw, EPS_LENGTH), n_zero


def _warn_zero_length(n_zero, where):
    if n_zero:
        warnings.warn(
            f"{where}: clamped {n_zero} zero-length edge(s) to {EPS_LENGTH}",
            ZeroLengthEdgeWarning,
            stacklevel=3,
        )


def build_auxiliary_graph(graph, positions):
    """Directed auxiliary graph with a dummy vertex at each edge midpoint
    and arcs from both endpoints to it; used for reference/inspection, the
    production path is the fused sweep."""
    positions = np.asarray(positions, dtype=np.float64)
    e = graph.edges
    n, m = graph.num_vertices, graph.num_edges
    mids = 0.5 * (positions[e[:, 0]] + positions[e[:, 1]]) if m else np.zeros((0, 3))
    dummy = n + np.arange(m, dtype=np.int64)
    arcs = np.concatenate(
        [np.stack([e[:, 0], dummy], axis=1), np.stack([e[:, 1], dummy], axis=1)]
    ) if m else np.zeros((0, 2), dtype=np.int64)
    return AuxiliaryGraph(
        num_original=n,
        num_edges=m,
        midpoints=mids,
        arcs=arcs,
        arcs_transposed=arcs[:, ::-1].copy() if m else arcs,
    )


def assemble_gradient(graph, positions):
    """Per-axis first-derivative operator, shape (3|E|, |V|); row b|E|+e
    holds +w_b at the lower-index endpoint of edge e and -w_b at the higher."""
    dvec, d, n_zero = edge_geometry(graph, positions)
    _warn_zero_length(n_zero, "assemble_gradient")
    m, n = graph.num_edges, graph.num_vertices
    w = dvec / (2.0 * d)[:, None] if m else np.zeros((0, 3))
    rows = []
    cols = []
    vals = []
    eids = np.arange(m)
    for b in range(3):
        rows.append(b * m + eids)
        cols.append(graph.edges[:, 0])
        vals.append(w[:, b])
        rows.append(b * m + eids)
        cols.append(graph.edges[:, 1])
        vals.append(-w[:, b])
    return SparseOperator.from_coo(
        np.concatenate(rows) if m else [],
        np.concatenate(cols) if m else [],
        np.concatenate(vals) if m else [],
        (3 * m, n),
    )


def _incidence_coo(graph):
    """(vertex, edge) pairs for every incidence, in CSR order."""
    verts = np.repeat(
        np.arange(graph.num_vertices), np.diff(graph.incidence_ptr)
    )
    return verts, graph.incidence_edges


def assemble_edge_average(graph):
    """Mean aggregation from edges back to vertices, block-diagonal per
    axis; shape (3|V|, 3|E|). Isolated vertices get zero rows."""
    n, m = graph.num_vertices, graph.num_edges
    verts, eids = _incidence_coo(graph)
    inv_deg = np.zeros(n)
    nz = graph.degrees > 0
    inv_deg[nz] = 1.0 / graph.degrees[nz]
    vals = inv_deg[verts]
    rows = []
    cols = []
    data = []
    for b in range(3):
        rows.append(b * n + verts)
        cols.append(b * m + eids)
        data.append(vals)
    return SparseOperator.from_coo(
        np.concatenate(rows) if verts.size else [],
        np.concatenate(cols) if verts.size else [],
        np.concatenate(data) if verts.size else [],
        (3 * n, 3 * m),
    )


def assemble_transposed_derivative(graph, positions):
    """Differentiates edge gradients back onto vertices (mean-normalized),
    block-diagonal per axis; shape (3|V|, 3|E|). Composed with the gradient
    it yields the per-axis second-derivative features."""
    dvec, d, n_zero = edge_geometry(graph, positions)
    _warn_zero_length(n_zero, "assemble_transposed_derivative")
    n, m = graph.num_vertices, graph.num_edges
    w = dvec / (2.0 * d)[:, None] if m else np.zeros((0, 3))
    verts, eids = _incidence_coo(graph)
    inv_deg = np.zeros(n)
    nz = graph.degrees > 0
    inv_deg[nz] = 1.0 / graph.degrees[nz]
    # Sign: -w_b at the lower-index endpoint, +w_b at the higher (this is
    # (b(midpoint) - b(vertex)) / (2 dist(vertex, midpoint))).
    is_lower = verts == graph.edges[eids, 0]
    sign = np.where(is_lower, -1.0, 1.0)
    rows = []
    cols = []
    data = []
    for b in range(3):
        rows.append(b * n + verts)
        cols.append(b * m + eids)
        data.append(sign * w[eids, b] * inv_deg[verts])
    return SparseOperator.from_coo(
        np.concatenate(rows) if verts.size else [],
        np.concatenate(cols) if verts.size else [],
        np.concatenate(data) if verts.size else [],
        (3 * n, 3 * m),
    )


def _validate_features(graph, feats):
    feats = np.asarray(feats, dtype=np.float64)
    if feats.ndim == 1:
        feats = feats[:, None]
    if feats.shape[0] != graph.num_vertices:
        raise ValueError(
            f"feature rows {feats.shape[0]} != vertices {graph.num_vertices}"
        )
    if not np.all(np.isfinite(feats)):
        raise ValueError("features must be finite")
    return feats


def inverse_degrees(graph):
    inv = np.zeros(graph.num_vertices)
    nz = graph.degrees > 0
    inv[nz] = 1.0 / graph.degrees[nz]
    return inv


def diff_features(graph, positions, feats):
    """Fused single-sweep evaluation of the 7*c_in differential feature map.

    Returns DiffFeatures with data (N, 7*c_in); the mass block is a verbatim
    copy of the input features.
    """
    positions = np.asarray(positions, dtype=np.float64)
    feats = _validate_features(graph, feats)
    n, c = feats.shape
    grad, lap = _kernels.sweep_forward(
        positions,
        np.ascontiguousarray(graph.edges[:, 0]),
        np.ascontiguousarray(graph.edges[:, 1]),
        inverse_degrees(graph),
        np.ascontiguousarray(feats),
    )
    out = np.empty((n, 7 * c))
    out[:, :c] = feats
    out[:, c : 4 * c] = grad.reshape(n, 3 * c)
    out[:, 4 * c :] = lap.reshape(n, 3 * c)
    return DiffFeatures(data=out, c_in=c)


def diff_features_adjoint(graph, positions, g_grad, g_lap):
    """Adjoint of the grad/lap part of diff_features: (N,3,C) upstream
    gradients per block -> (N,C) gradient on the input features."""
    positions = np.asarray(positions, dtype=np.float64)
    return _kernels.sweep_adjoint(
        positions,
        np.ascontiguousarray(graph.edges[:, 0]),
        np.ascontiguousarray(graph.edges[:, 1]),
        inverse_degrees(graph),
        np.ascontiguousarray(g_grad),
        np.ascontiguousarray(g_lap),
    )


def diff_features_reference(graph, positions, feats):
    """Oracle path: explicit sparse-operator products (gradient, edge
    average, transposed derivative). Test use only; mathematically identical
    to diff_features."""
    feats = _validate_features(graph, feats)
    n, c = feats.shape
    m = graph.num_edges
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", ZeroLengthEdgeWarning)
        grad_op = assemble_gradient(graph, positions)
        avg_op = assemble_edge_average(graph)
        trans_op = assemble_transposed_derivative(graph, positions)
    edge_grads = grad_op @ feats  # (3|E|, c)
    grad_v = avg_op @ edge_grads  # (3|V|, c)
    lap_v = trans_op @ edge_grads
    out = np.empty((n, 7 * c))
    out[:, :c] = feats
    for b in range(3):
        out[:, (1 + b) * c : (2 + b) * c] = grad_v[b * n : (b + 1) * n]
        out[:, (4 + b) * c : (5 + b) * c] = lap_v[b * n : (b + 1) * n]
    return DiffFeatures(data=out, c_in=c)


@dataclass(frozen=True)
class Stencil:
    """Coefficients of one differential-feature block around a grid vertex,
    keyed by integer lattice offsets (dx, dy, dz)."""

    term: str
    vertex: int
    coeffs: dict
    boundary: bool

    def coefficient(self, offset):
        return self.coeffs.get(tuple(offset), 0.0)


def extract_stencil(grid_cloud, grid_graph, term, vertex, tol=0.0):
    """Apply the fused pipeline to indicator features and read off the
    coefficients of one feature block as a map from neighbor offsets.

    Boundary vertices are allowed; the returned stencil is flagged.
    """
    if term not in TERM_INDEX:
        raise ValueError(f"unknown term {term!r}; choose from {TERMS}")
    n = grid_graph.num_vertices
    if not (0 <= vertex < n):
        raise ValueError("vertex out of range")
    pos = grid_cloud.positions
    _, d, _ = edge_geometry(grid_graph, pos)
    if d.size == 0:
        raise ValueError("grid graph has no edges")
    h = float(d.min())
    feats = np.eye(n)
    dfeat = diff_features(grid_graph, pos, feats)
    row = dfeat.block(term)[vertex]
    coeffs = {}
    for u in np.nonzero(np.abs(row) > tol)[0]:
        off = (pos[u] - pos[vertex]) / h
        key = tuple(int(round(x)) for x in off)
        if np.max(np.abs(off - np.array(key))) > 1e-9:
            raise ValueError("vertex positions are not on a regular lattice")
        coeffs[key] = float(row[u])
    # Interior <=> both axis neighbors exist along every active axis.
    active = [
        b
        for b in range(3)
        if np.ptp(pos[:, b]) > 0.0
    ]
    neighbor_offsets = set()
    for e in grid_graph.incident_edges(vertex):
        i, j = grid_graph.edges[e]
        u = j if i == vertex else i
        off = (pos[u] - pos[vertex]) / h
        neighbor_offsets.add(tuple(int(round(x)) for x in off))
    boundary = False
    for b in active:
        plus = tuple(1 if k == b else 0 for k in range(3))
        minus = tuple(-1 if k == b else 0 for k in range(3))
        if plus not in neighbor_offsets or minus not in neighbor_offsets:
            boundary = True
    return Stencil(term=term, vertex=vertex, coeffs=coeffs, boundary=boundary)
