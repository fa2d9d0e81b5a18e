"""Analytic FLOP model for convolution families plus a latency micro-harness.

FLOPs are multiply-accumulates of the dominant linear maps; activations and
batch norm are excluded. For the differential-operator convolution the
pointwise map costs N*(7*c_in)*c_out independent of the neighborhood size K,
and message construction adds 6*c_in multiplies per directed edge (N*K of
them); the two are reported separately because published totals do not state
their accounting.
"""

import time
from dataclasses import dataclass

import numpy as np

from . import _kernels
from .diffops import diff_features, inverse_degrees
from .geometry import knn_graph

# Published single-convolution figures (MFLOPs / milliseconds) for the
# standard comparison point: N=1024, K=10, c_in=64, c_out=128; the voxel
# method uses a 12^3 input with a 27-point kernel. Latencies are
# hardware-specific and used for context only, never as targets.
REFERENCE_MFLOPS = {
    "voxel": 382.2,
    "pointwise_mlp": 8.4,
    "edge_mlp": 167.8,
    "diffgcn": 61.3,
}
REFERENCE_LABELS = {
    "voxel": "VoxNet-style voxel conv",
    "pointwise_mlp": "PointNet-style pointwise MLP",
    "edge_mlp": "DGCNN-style edge MLP",
    "diffgcn": "diffgcn (ours)",
}

DIFFGCN_MESSAGE_WIDTH = 6  # grad + lap components per input channel


@dataclass(frozen=True)
class CostSpec:
    method: str
    n_points: int = 1024
    k: int = 10
    c_in: int = 64
    c_out: int = 128
    kernel_volume: int = 27
    grid_side: int = 12
    f_width: int = 2  # per-edge feature multiplier of the edge MLP

    def __post_init__(self):
        for name in ("n_points", "k", "c_in", "c_out", "kernel_volume", "grid_side", "f_width"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")


def flop_count(spec):
    """Multiply-accumulate count for one convolution application."""
    if spec.method == "edge_mlp":
        return spec.n_points * spec.k * spec.f_width * spec.c_in * spec.c_out
    if spec.method == "voxel":
        return spec.grid_side**3 * spec.kernel_volume * spec.c_in * spec.c_out
    if spec.method == "pointwise_mlp":
        return spec.n_points * spec.c_in * spec.c_out
    if spec.method == "diffgcn":
        return diffgcn_flop_breakdown(spec)["total"]
    raise ValueError(f"unknown method {spec.method!r}")


def diffgcn_flop_breakdown(spec):
    mlp = spec.n_points * 7 * spec.c_in * spec.c_out
    messages = DIFFGCN_MESSAGE_WIDTH * spec.c_in * spec.n_points * spec.k
    return {"mlp": mlp, "messages": messages, "total": mlp + messages}


def table1_specs():
    return [
        CostSpec(method="voxel"),
        CostSpec(method="pointwise_mlp"),
        CostSpec(method="edge_mlp"),
        CostSpec(method="diffgcn"),
    ]


def make_edge_mlp_conv(positions, k, c_out, seed=0):
    """DGCNN-style baseline: per directed neighbor, a dense map on
    [x_i | x_i - x_j] followed by a max over the neighborhood."""
    positions = np.asarray(positions, dtype=np.float64)
    n = positions.shape[0]
    sq = np.sum(positions * positions, axis=1)
    d2 = sq[:, None] + sq[None, :] - 2.0 * positions @ positions.T
    np.fill_diagonal(d2, np.inf)
    neighbors = np.argsort(d2, axis=1, kind="stable")[:, :k]

    def apply(feats, weight):
        gathered = feats[neighbors]  # (N, K, c_in)
        center = feats[:, None, :]
        msg = np.concatenate(
            [np.broadcast_to(center, gathered.shape), center - gathered], axis=2
        )
        out = msg.reshape(n * k, -1) @ weight.T
        return out.reshape(n, k, c_out).max(axis=1)

    return apply


def make_diffgcn_conv(positions, k, c_out, seed=0):
    positions = np.asarray(positions, dtype=np.float64)
    graph = knn_graph(positions, k)

    def apply(feats, weight):
        dfeat = diff_features(graph, positions, feats)
        return dfeat.data @ weight.T

    return apply


def make_conv_impls(spec, seed=0):
    """Prepared zero-argument closures applying one convolution of each
    family (ours and the edge-MLP baseline) at the given spec."""
    rng = np.random.default_rng(seed)
    positions = rng.random((spec.n_points, 3))
    feats = rng.standard_normal((spec.n_points, spec.c_in))
    w_edge = rng.standard_normal((spec.c_out, 2 * spec.c_in)) * 0.1
    w_diff = rng.standard_normal((spec.c_out, 7 * spec.c_in)) * 0.1
    edge = make_edge_mlp_conv(positions, spec.k, spec.c_out, seed=seed)
    diff = make_diffgcn_conv(positions, spec.k, spec.c_out, seed=seed)
    return {
        "edge_mlp": lambda: edge(feats, w_edge),
        "diffgcn": lambda: diff(feats, w_diff),
    }


def make_table1_impls(seed=0):
    """Closures at the reference comparison spec."""
    return make_conv_impls(CostSpec(method="diffgcn"), seed=seed)


def _time_callable(fn, repetitions, warmup):
    for _ in range(warmup):
        fn()
    samples = []
    for _ in range(repetitions):
        t0 = time.perf_counter()
        fn()
        samples.append((time.perf_counter() - t0) * 1e3)
    samples = np.array(samples)
    q1, med, q3 = np.percentile(samples, [25, 50, 75])
    return {
        "median_ms": float(med),
        "iqr_ms": float(q3 - q1),
        "min_ms": float(samples.min()),
        "max_ms": float(samples.max()),
        "repetitions": int(repetitions),
    }


def latency_bench(impls, repetitions=25, warmup=3):
    """Median and interquartile wall-clock per application, warmup excluded."""
    if repetitions < 10:
        raise ValueError("need at least 10 repetitions")
    return {name: _time_callable(fn, repetitions, warmup) for name, fn in impls.items()}


def kernel_bench(n_points=2048, k=10, c=64, repetitions=25, seed=0):
    """Compare the numba and numpy builds of the fused sweep on one input.

    Returns timings plus the max absolute discrepancy between the two paths;
    the numba entry is None when numba is unavailable.
    """
    rng = np.random.default_rng(seed)
    positions = rng.random((n_points, 3))
    graph = knn_graph(positions, k)
    feats = rng.standard_normal((n_points, c))
    ei = np.ascontiguousarray(graph.edges[:, 0])
    ej = np.ascontiguousarray(graph.edges[:, 1])
    inv_deg = inverse_degrees(graph)

    def run_numpy():
        return _kernels.sweep_forward_numpy(positions, ei, ej, inv_deg, feats)

    out = {
        "n_points": n_points,
        "k": k,
        "channels": c,
        "numpy": _time_callable(run_numpy, repetitions, warmup=1),
        "numba": None,
        "max_abs_diff": None,
    }
    if _kernels.HAVE_NUMBA:

        def run_numba():
            return _kernels.sweep_forward_numba(positions, ei, ej, inv_deg, feats)

        out["numba"] = _time_callable(run_numba, repetitions, warmup=2)
        g0, l0 = run_numpy()
        g1, l1 = run_numba()
        out["max_abs_diff"] = float(
            max(np.max(np.abs(g0 - g1)), np.max(np.abs(l0 - l1)))
        )
    return out


def cost_table(specs, latencies=None):
    """Table-shaped comparison of the model against the published figures.

    Returns a dict with a deterministic "rows" part (FLOPs, deviations) and,
    when measurements are supplied, a "latency_ms" part that is inherently
    run-dependent and belongs in metadata files.
    """
    rows = []
    for spec in specs:
        flops = flop_count(spec)
        row = {
            "method": spec.method,
            "label": REFERENCE_LABELS.get(spec.method, spec.method),
            "flops": int(flops),
            "mflops_model": round(flops / 1e6, 1),
        }
        ref = REFERENCE_MFLOPS.get(spec.method)
        if ref is not None:
            row["mflops_reference"] = ref
            row["deviation_pct"] = round(100.0 * (flops / 1e6 - ref) / ref, 2)
        if spec.method == "diffgcn":
            br = diffgcn_flop_breakdown(spec)
            row["mflops_mlp"] = round(br["mlp"] / 1e6, 1)
            row["mflops_messages"] = round(br["messages"] / 1e6, 1)
        rows.append(row)
    table = {"rows": rows}
    if latencies:
        table["latency_ms"] = latencies
    return table


def cost_table_text(table):
    lines = []
    header = f"{'method':<30}{'model MFLOPs':>14}{'reference':>12}{'dev %':>8}"
    lines.append(header)
    lines.append("-" * len(header))
    for row in table["rows"]:
        ref = row.get("mflops_reference")
        dev = row.get("deviation_pct")
        lines.append(
            f"{row['label']:<30}{row['mflops_model']:>14.1f}"
            f"{ref if ref is not None else '-':>12}"
            f"{dev if dev is not None else '-':>8}"
        )
    lat = table.get("latency_ms")
    if lat:
        lines.append("")
        lines.append(f"{'latency (median ms)':<30}")
        for name, stats in lat.items():
            lines.append(
                f"{name:<30}{stats['median_ms']:>14.3f}  (iqr {stats['iqr_ms']:.3f})"
            )
    return "\n".join(lines)
