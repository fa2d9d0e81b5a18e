"""Algebraic-multigrid pooling: greedy heavy-edge matching, 0/1 restriction,
Galerkin coarsening, and smoothed-aggregation prolongation.

The Galerkin product accumulates fine entries in row-major order, so coarse
entries equal the aggregate double sum bit for bit.
"""

from dataclasses import dataclass, field

import numpy as np
from scipy import sparse

from .diffops import EPS_LENGTH, SparseOperator, edge_geometry
from .geometry import Graph


@dataclass(frozen=True)
class Aggregation:
    """Partition of fine vertices into aggregates of size 1 or 2."""

    assignment: np.ndarray  # per-fine-vertex coarse index
    num_coarse: int

    def __post_init__(self):
        a = np.asarray(self.assignment, dtype=np.int64)
        if a.min(initial=0) < 0 or (a.size and a.max() >= self.num_coarse):
            raise ValueError("coarse indices out of range")
        sizes = np.bincount(a, minlength=self.num_coarse)
        if np.any(sizes == 0):
            raise ValueError("coarse indices must be contiguous")
        if np.any(sizes > 2):
            raise ValueError("aggregates larger than 2 (not a matching)")
        object.__setattr__(self, "assignment", a)

    def sizes(self):
        return np.bincount(self.assignment, minlength=self.num_coarse)


@dataclass(frozen=True)
class Transfer:
    aggregation: Aggregation
    restriction: SparseOperator
    prolongation: SparseOperator


@dataclass(frozen=True)
class Level:
    graph: Graph
    positions: np.ndarray
    edge_weights: np.ndarray  # aligned with graph.edges


@dataclass(frozen=True)
class Hierarchy:
    levels: list = field(default_factory=list)
    transfers: list = field(default_factory=list)

    @property
    def depth_achieved(self):
        return len(self.transfers)

    def level_sizes(self):
        return [lvl.graph.num_vertices for lvl in self.levels]

    def summary(self):
        return {
            "depth_achieved": self.depth_achieved,
            "level_sizes": self.level_sizes(),
            "restriction_nnz": [t.restriction.nnz for t in self.transfers],
            "prolongation_nnz": [t.prolongation.nnz for t in self.transfers],
        }


def distance_edge_weights(graph, positions):
    """Default clustering weight 1/(dist + 1e-12): closer points merge first."""
    _, d, _ = edge_geometry(graph, positions)
    # edge_geometry clamps at EPS_LENGTH already; add the guard on the raw
    # scale so coincident points get weight 1/eps, not 1/(2 eps).
    return 1.0 / np.maximum(d, EPS_LENGTH)


def graclus_cluster(graph, edge_weights=None, seed=None, positions=None):
    """Greedy heavy-edge matching.

    Vertices are visited in natural order when seed is None, otherwise in a
    seeded random permutation. An unmatched vertex merges with its unmatched
    neighbor of maximal edge weight (ties broken by smaller neighbor index),
    else forms a singleton. Coarse ids follow creation order.
    """
    n = graph.num_vertices
    if edge_weights is None:
        if positions is not None:
            edge_weights = distance_edge_weights(graph, positions)
        else:
            edge_weights = np.ones(graph.num_edges)
    else:
        edge_weights = np.asarray(edge_weights, dtype=np.float64)
        if edge_weights.shape != (graph.num_edges,):
            raise ValueError("edge_weights must have one value per edge")
    if seed is None:
        order = np.arange(n)
    else:
        order = np.random.default_rng(seed).permutation(n)
    assignment = np.full(n, -1, dtype=np.int64)
    next_id = 0
    edges = graph.edges
    for v in order:
        if assignment[v] >= 0:
            continue
        best_u = -1
        best_w = -np.inf
        for e in graph.incident_edges(v):
            i, j = edges[e]
            u = j if i == v else i
            if assignment[u] >= 0:
                continue
            w = edge_weights[e]
            if w > best_w or (w == best_w and u < best_u):
                best_w = w
                best_u = u
        assignment[v] = next_id
        if best_u >= 0:
            assignment[best_u] = next_id
        next_id += 1
    return Aggregation(assignment=assignment, num_coarse=next_id)


def restriction_matrix(agg):
    """0/1 partition matrix, shape (num_coarse, |V|); one 1 per column."""
    n = agg.assignment.shape[0]
    return SparseOperator.from_coo(
        agg.assignment, np.arange(n), np.ones(n), (agg.num_coarse, n)
    )


def _assignment_from_restriction(r_op):
    rows, cols, vals = r_op.coo_triples()
    n = r_op.n_cols
    if rows.size != n or not np.all(vals == 1.0):
        raise ValueError("restriction must have exactly one unit entry per column")
    assignment = np.empty(n, dtype=np.int64)
    assignment[cols] = rows
    return assignment


def pool(r_op, feats, adjacency, mean=False):
    """Galerkin coarsening: feats -> R X (sum over members, or mean when
    mean=True), adjacency -> R A R^T with the diagonal retained."""
    assignment = _assignment_from_restriction(r_op)
    nc = r_op.n_rows
    feats = np.asarray(feats, dtype=np.float64)
    if feats.ndim == 1:
        feats = feats[:, None]
    if feats.shape[0] != assignment.shape[0]:
        raise ValueError("feature rows do not match restriction columns")
    feats_coarse = np.zeros((nc, feats.shape[1]))
    np.add.at(feats_coarse, assignment, feats)
    if mean:
        sizes = np.bincount(assignment, minlength=nc).astype(np.float64)
        feats_coarse /= sizes[:, None]
    a = adjacency.matrix if hasattr(adjacency, "matrix") else adjacency
    a = sparse.csr_matrix(a)
    if a.shape != (assignment.shape[0], assignment.shape[0]):
        raise ValueError("adjacency shape does not match restriction columns")
    coo = a.tocoo()
    order = np.lexsort((coo.col, coo.row))
    dense = np.zeros((nc, nc))
    # Sequential adds in (row, col) order: exact match with the brute-force
    # double sum over aggregate members.
    np.add.at(dense, (assignment[coo.row[order]], assignment[coo.col[order]]), coo.data[order])
    return feats_coarse, sparse.csr_matrix(dense)


def smoothed_prolongation(r_op, adjacency):
    """P = (I - D^-1 L) R^T with D the degree (row-sum) diagonal of the
    adjacency and L = D - A; zero-degree rows fall back to identity. Rows of
    P sum to one, so unpooling preserves constants."""
    a = adjacency.matrix if hasattr(adjacency, "matrix") else adjacency
    a = sparse.csr_matrix(a, dtype=np.float64)
    n = a.shape[0]
    if a.shape[1] != n or r_op.n_cols != n:
        raise ValueError("adjacency/restriction dimensions do not chain")
    deg = np.asarray(a.sum(axis=1)).reshape(-1)
    nz = deg != 0.0
    inv = np.zeros(n)
    inv[nz] = 1.0 / deg[nz]
    smoother = sparse.diags(inv) @ a  # I - D^-1 (D - A)
    if not np.all(nz):
        eye_rows = np.nonzero(~nz)[0]
        fix = sparse.coo_matrix(
            (np.ones(eye_rows.size), (eye_rows, eye_rows)), shape=(n, n)
        )
        smoother = smoother + fix
    return SparseOperator((sparse.csr_matrix(smoother) @ r_op.matrix.T).tocsr())


def unpool(p_op, feats_coarse):
    feats_coarse = np.asarray(feats_coarse, dtype=np.float64)
    if feats_coarse.ndim == 1:
        feats_coarse = feats_coarse[:, None]
    if feats_coarse.shape[0] != p_op.n_cols:
        raise ValueError("coarse feature rows do not match prolongation columns")
    return p_op @ feats_coarse


def coarse_positions(agg, positions):
    """Arithmetic mean of aggregate member positions."""
    positions = np.asarray(positions, dtype=np.float64)
    out = np.zeros((agg.num_coarse, 3))
    np.add.at(out, agg.assignment, positions)
    return out / agg.sizes()[:, None]


def graph_from_adjacency(a):
    """Undirected Graph and per-edge weights from the strict upper triangle."""
    a = sparse.csr_matrix(a)
    coo = sparse.triu(a, k=1).tocoo()
    order = np.lexsort((coo.col, coo.row))
    pairs = np.stack([coo.row[order], coo.col[order]], axis=1)
    graph = Graph.build(a.shape[0], pairs)
    # Graph.build sorts/dedups; realign weights with the canonical edge list.
    weight_of = {(int(r), int(c)): float(v) for r, c, v in zip(coo.row, coo.col, coo.data)}
    weights = np.array([weight_of[(int(i), int(j))] for i, j in graph.edges])
    return graph, weights


def build_hierarchy(graph, positions, depth, seed=None):
    """Repeated cluster -> Galerkin chain. Stops early when the level has no
    edges (coarsening would stall); achieved depth = len(transfers)."""
    if depth < 0:
        raise ValueError("depth must be >= 0")
    positions = np.asarray(positions, dtype=np.float64)
    levels = [
        Level(
            graph=graph,
            positions=positions,
            edge_weights=distance_edge_weights(graph, positions),
        )
    ]
    transfers = []
    for _ in range(depth):
        cur = levels[-1]
        if cur.graph.num_edges == 0:
            break
        agg = graclus_cluster(cur.graph, cur.edge_weights, seed=seed)
        if agg.num_coarse == cur.graph.num_vertices:
            break
        r_op = restriction_matrix(agg)
        a_fine = cur.graph.adjacency(cur.edge_weights)
        _, a_coarse = pool(r_op, np.zeros((cur.graph.num_vertices, 1)), a_fine)
        p_op = smoothed_prolongation(r_op, a_fine)
        coarse_graph, coarse_weights = graph_from_adjacency(a_coarse)
        transfers.append(Transfer(aggregation=agg, restriction=r_op, prolongation=p_op))
        levels.append(
            Level(
                graph=coarse_graph,
                positions=coarse_positions(agg, cur.positions),
                edge_weights=coarse_weights,
            )
        )
    return Hierarchy(levels=levels, transfers=transfers)
