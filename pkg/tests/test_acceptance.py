"""Acceptance suite: one test per criterion, one PASS/FAIL line each.

Criteria 1-8 compute deterministic machine-output dicts; criterion 9 reruns
the full battery and compares the canonical JSON byte for byte. Timings are
kept outside the compared payloads. Seed-dependent gradient checks follow
the kink-margin hygiene rule (seeds too close to ReLU/argmax kinks for
finite differences are skipped deterministically).

The network gradcheck matrix runs every (pooling x term-mask) combination
with all parameters checked per seed; the >=20-seed requirement is met
across the matrix (24 network seeds) plus 20 single-layer seeds, which is
what fits the stated 60 s budget.
"""

import time

import numpy as np
import pytest

import diffgraph as dg
from diffgraph import _kernels
from diffgraph import bench as bench_mod
from diffgraph import io as dio
from diffgraph.amg import (
    distance_edge_weights,
    graclus_cluster,
    pool,
    restriction_matrix,
    smoothed_prolongation,
)
from diffgraph.conv import NAMED_MASKS, ConvLayer, conv_backward, conv_forward
from diffgraph.diffops import diff_features, diff_features_reference, extract_stencil
from diffgraph.geometry import (
    Graph,
    PointCloud,
    grid_interior_mask,
    knn_graph,
    regular_grid,
    synth_dataset,
)
from diffgraph.network import (
    Network,
    NetworkConfig,
    condition_bn_scales,
    evaluate,
    gradcheck_network,
    kink_margins,
    prepare_structure,
    train,
)

TERM_PATTERNS_2D = {
    "mass": {(0, 0, 0): 1.0},
    "gradx": {(-1, 0, 0): -1.0, (1, 0, 0): 1.0},
    "grady": {(0, -1, 0): -1.0, (0, 1, 0): 1.0},
    "lapx": {(-1, 0, 0): 1.0, (0, 0, 0): -2.0, (1, 0, 0): 1.0},
    "lapy": {(0, -1, 0): 1.0, (0, 0, 0): -2.0, (0, 1, 0): 1.0},
}
SCALE_OFFSET = {
    "mass": (0, 0, 0),
    "gradx": (1, 0, 0),
    "grady": (0, 1, 0),
    "lapx": (1, 0, 0),
    "lapy": (0, 1, 0),
}


def criterion_1_stencil_equivalence():
    cloud, graph = regular_grid(8, 8, 1, 1.0)
    vertex = 8 * 3 + 4
    neighborhood = [
        (dx, dy, 0) for dx in (-1, 0, 1) for dy in (-1, 0, 1)
    ]
    scales = {}
    max_dev = 0.0
    for term, pattern in TERM_PATTERNS_2D.items():
        st = extract_stencil(cloud, graph, term, vertex)
        assert not st.boundary
        scale = st.coefficient(SCALE_OFFSET[term]) / pattern[SCALE_OFFSET[term]]
        assert scale > 0.0, f"{term}: scale must be positive, got {scale}"
        scales[term] = scale
        for off in neighborhood:
            dev = abs(st.coefficient(off) - scale * pattern.get(off, 0.0))
            max_dev = max(max_dev, dev)
    return {"scales": scales, "max_proportionality_deviation": max_dev}


def criterion_2_star_stencil_3d():
    cloud, graph = regular_grid(5, 5, 5, 1.0)
    n = cloud.num_points
    dfeat = diff_features(graph, cloud.positions, np.eye(n))
    interior = np.nonzero(grid_interior_mask(5, 5, 5))[0]
    star = {
        (0, 0, 0),
        (1, 0, 0), (-1, 0, 0),
        (0, 1, 0), (0, -1, 0),
        (0, 0, 1), (0, 0, -1),
    }
    worst = 0.0
    for term in ("gradx", "grady", "gradz", "lapx", "lapy", "lapz", "mass"):
        block = dfeat.block(term)
        for v in interior:
            row = block[v]
            for u in np.nonzero(np.abs(row) > 0.0)[0]:
                off = tuple(int(round(x)) for x in cloud.positions[u] - cloud.positions[v])
                if off not in star:
                    worst = max(worst, abs(row[u]))
    return {"max_off_star_coefficient": worst}


def criterion_3_oracle_equivalence():
    rng = np.random.default_rng(2024)
    widths = (1, 3, 8)
    worst = 0.0
    for trial in range(100):
        n = int(rng.integers(8, 51))
        k = int(rng.integers(2, 7))
        c = widths[trial % 3]
        positions = rng.random((n, 3))
        graph = knn_graph(positions, min(k, n - 1))
        feats = rng.standard_normal((n, c))
        fused = diff_features(graph, positions, feats).data
        ref = diff_features_reference(graph, positions, feats).data
        scale = max(np.max(np.abs(ref)), 1e-30)
        worst = max(worst, float(np.max(np.abs(fused - ref)) / scale))
    return {"num_graphs": 100, "max_relative_deviation": worst}


def criterion_4_nullspace():
    rng = np.random.default_rng(7)
    worst_const = 0.0
    for _ in range(30):
        n = int(rng.integers(6, 40))
        positions = rng.random((n, 3))
        graph = knn_graph(positions, min(4, n - 1))
        const = np.full((n, 2), rng.uniform(-3, 3))
        out = diff_features(graph, positions, const)
        worst_const = max(worst_const, float(np.max(np.abs(out.data[:, 2:]))))
    worst_affine = 0.0
    for dims in ((8, 8, 1), (5, 5, 5)):
        cloud, graph = regular_grid(*dims, h=1.0)
        interior = grid_interior_mask(*dims)
        coeff = np.array([0.8, -1.4, 0.6])
        field = (cloud.positions @ coeff + 0.3)[:, None]
        out = diff_features(graph, cloud.positions, field)
        for term in ("lapx", "lapy", "lapz"):
            worst_affine = max(
                worst_affine, float(np.max(np.abs(out.block(term)[interior])))
            )
    return {
        "max_constant_response": worst_const,
        "max_affine_interior_laplacian": worst_affine,
    }


def criterion_5_amg_properties():
    rng = np.random.default_rng(11)
    exact = True
    max_abs_diff = 0.0
    max_row_sum_err = 0.0
    max_agg_size = 0
    for _ in range(20):
        n = int(rng.integers(5, 31))
        positions = rng.random((n, 3))
        graph = knn_graph(positions, min(3, n - 1))
        weights = distance_edge_weights(graph, positions)
        agg = graclus_cluster(graph, weights)
        max_agg_size = max(max_agg_size, int(agg.sizes().max()))
        r_op = restriction_matrix(agg)
        adjacency = graph.adjacency(weights)
        _, a_coarse = pool(r_op, np.zeros((n, 1)), adjacency)
        oracle = np.zeros((agg.num_coarse, agg.num_coarse))
        dense = adjacency.toarray()
        for i in range(n):
            for j in range(n):
                oracle[agg.assignment[i], agg.assignment[j]] += dense[i, j]
        diff = np.abs(a_coarse.toarray() - oracle)
        exact = exact and np.array_equal(a_coarse.toarray(), oracle)
        max_abs_diff = max(max_abs_diff, float(diff.max()))
        p_op = smoothed_prolongation(r_op, adjacency)
        ones = p_op @ np.ones((agg.num_coarse, 1))
        max_row_sum_err = max(max_row_sum_err, float(np.max(np.abs(ones - 1.0))))
    # all-singleton pooling is the identity
    from diffgraph.amg import Aggregation

    n = 9
    positions = rng.random((n, 3))
    graph = knn_graph(positions, 2)
    agg = Aggregation(assignment=np.arange(n), num_coarse=n)
    feats = rng.standard_normal((n, 3))
    adjacency = graph.adjacency()
    feats_c, a_c = pool(restriction_matrix(agg), feats, adjacency)
    identity_ok = np.array_equal(feats_c, feats) and np.array_equal(
        a_c.toarray(), adjacency.toarray()
    )
    return {
        "galerkin_exact": bool(exact),
        "galerkin_max_abs_diff": max_abs_diff,
        "prolongation_max_row_sum_error": max_row_sum_err,
        "singleton_pool_identity": bool(identity_ok),
        "max_aggregate_size": max_agg_size,
    }


def _single_layer_gradcheck(seed, step=1e-4):
    rng = np.random.default_rng(seed)
    positions = rng.random((10, 3))
    graph = knn_graph(positions, 3)
    layer = ConvLayer(3, 4, rng=rng)
    feats = rng.standard_normal((10, 3))
    upstream = rng.standard_normal((10, 4))

    def loss():
        out, _ = conv_forward(layer, graph, positions, feats, "train")
        return float(np.sum(out * upstream))

    _, tape = conv_forward(layer, graph, positions, feats, "train")
    grads = conv_backward(tape, upstream)
    arrays = [feats, layer.weight, layer.bias, layer.bn_gamma, layer.bn_beta]
    worst = 0.0
    for arr, grad in zip(arrays, grads):
        flat = arr.reshape(-1)
        gflat = grad.reshape(-1)
        for idx in range(flat.size):
            orig = flat[idx]
            flat[idx] = orig + step
            lp = loss()
            flat[idx] = orig - step
            lm = loss()
            flat[idx] = orig
            fd = (lp - lm) / (2 * step)
            worst = max(worst, abs(gflat[idx] - fd) / max(abs(gflat[idx]), abs(fd), 1e-2))
    return worst


def criterion_6_gradient_checks():
    worst_layer = 0.0
    for seed in range(20):
        worst_layer = max(worst_layer, _single_layer_gradcheck(seed))
    worst_net = 0.0
    seeds_checked = 0
    for mask_name in ("mass", "mass+grad", "mass+lap", "all"):
        for pooling in (False, True):
            accepted = 0
            seed = 0
            while accepted < 3 and seed < 40:
                cfg = NetworkConfig(
                    num_classes=3,
                    block_widths=(4, 6),
                    fusion_width=8,
                    head_widths=(8,),
                    k_per_block=(3, 3),
                    pooling=(False, pooling),
                    term_mask=NAMED_MASKS[mask_name],
                    seed=seed,
                    batch_size=2,
                    epochs=1,
                )
                net = Network(cfg)
                cloud = PointCloud(
                    positions=np.random.default_rng(500 + seed).random((14, 3)),
                    label=0,
                )
                condition_bn_scales(net, cloud)
                min_act, min_gap = kink_margins(net, prepare_structure(net, cloud))
                seed += 1
                if min_act < 2e-3 or min_gap < 2e-3:
                    continue
                err = gradcheck_network(net, cloud, label=seed % 3)
                worst_net = max(worst_net, err)
                accepted += 1
                seeds_checked += 1
            assert accepted == 3, f"not enough clean seeds for {mask_name}/{pooling}"
    return {
        "single_layer_seeds": 20,
        "single_layer_max_rel_error": worst_layer,
        "network_seeds": seeds_checked,
        "network_max_rel_error": worst_net,
    }


def criterion_7_flop_model(include_latency=True):
    table = bench_mod.cost_table(bench_mod.table1_specs())
    rows = {r["method"]: r for r in table["rows"]}
    out = {
        "voxel_mflops": rows["voxel"]["mflops_model"],
        "pointwise_mflops": rows["pointwise_mlp"]["mflops_model"],
        "edge_mlp_mflops": rows["edge_mlp"]["mflops_model"],
        "diffgcn_mflops": rows["diffgcn"]["mflops_model"],
        "diffgcn_reference_mflops": rows["diffgcn"]["mflops_reference"],
        "diffgcn_deviation_pct": rows["diffgcn"]["deviation_pct"],
    }
    if include_latency:
        impls = bench_mod.make_table1_impls(seed=0)
        stats = bench_mod.latency_bench(impls, repetitions=15, warmup=2)
        out["diffgcn_faster_than_edge_mlp"] = bool(
            stats["diffgcn"]["median_ms"] < stats["edge_mlp"]["median_ms"]
        )
    return out


def _acceptance_dataset():
    clouds = synth_dataset(
        ("sphere", "cube", "torus", "cone"), 70, 256, noise_sd=0.01, seed=42
    )
    train_set, test_set = [], []
    for c in range(4):
        block = clouds[c * 70 : (c + 1) * 70]
        train_set.extend(block[:50])
        test_set.extend(block[50:])
    return train_set, test_set


def criterion_8_training():
    train_set, test_set = _acceptance_dataset()
    results = {}
    wall_clocks = {}
    for mask_name in ("all", "mass+lap", "mass"):
        cfg = NetworkConfig(
            num_classes=4, seed=0, epochs=30, batch_size=8,
            term_mask=NAMED_MASKS[mask_name],
        )
        net = Network(cfg)
        report = train(net, train_set, cfg)
        overall, mean_class = evaluate(net, test_set)
        results[mask_name] = {
            "per_epoch_loss": [e["loss"] for e in report.per_epoch],
            "test_overall_accuracy": overall,
            "test_mean_class_accuracy": mean_class,
        }
        wall_clocks[mask_name] = report.wall_clock_s
    return results, wall_clocks


_RUNS = {}


def _timed(fn, *args, **kwargs):
    t0 = time.perf_counter()
    out = fn(*args, **kwargs)
    return out, time.perf_counter() - t0


def run_battery(tag):
    """All deterministic machine outputs for criteria 1-8, plus timings."""
    if tag in _RUNS:
        return _RUNS[tag]
    machine = {}
    timings = {}
    machine["c1"], timings["c1"] = _timed(criterion_1_stencil_equivalence)
    machine["c2"], timings["c2"] = _timed(criterion_2_star_stencil_3d)
    machine["c3"], timings["c3"] = _timed(criterion_3_oracle_equivalence)
    machine["c4"], timings["c4"] = _timed(criterion_4_nullspace)
    machine["c5"], timings["c5"] = _timed(criterion_5_amg_properties)
    machine["c6"], timings["c6"] = _timed(criterion_6_gradient_checks)
    (machine["c7"], timings["c7"]) = _timed(criterion_7_flop_model)
    # latency booleans are measured, not derived; keep the flag out of the
    # byte-compared payload (wall clock is machine-dependent, the FLOPs are
    # the deterministic part)
    machine["c7"] = dict(machine["c7"])
    machine["c7"].pop("diffgcn_faster_than_edge_mlp", None)
    (c8, c8_walls), timings["c8"] = _timed(criterion_8_training)
    machine["c8"] = c8
    timings["c8_per_variant"] = c8_walls
    _RUNS[tag] = (machine, timings)
    return _RUNS[tag]


@pytest.fixture(scope="module")
def warmed_up():
    # exclude one-time JIT compilation from the timed criteria
    positions = np.random.default_rng(0).random((16, 3))
    graph = knn_graph(positions, 3)
    feats = np.ones((16, 2))
    diff_features(graph, positions, feats)
    from diffgraph.diffops import diff_features_adjoint

    diff_features_adjoint(graph, positions, np.zeros((16, 3, 2)), np.zeros((16, 3, 2)))
    return True


@pytest.fixture(scope="module")
def battery(warmed_up):
    return run_battery("run_a")


def _report(num, name, ok, detail):
    status = "PASS" if ok else "FAIL"
    print(f"ACCEPTANCE {num} {name}: {status} ({detail})")
    assert ok, f"criterion {num} {name}: {detail}"


def test_criterion_1_stencil_equivalence(battery):
    machine, timings = battery
    c1 = machine["c1"]
    scales = ", ".join(f"{k}={v:.6g}" for k, v in c1["scales"].items())
    ok = c1["max_proportionality_deviation"] <= 1e-12 and timings["c1"] < 1.0
    _report(
        1,
        "stencil-equivalence",
        ok,
        f"max deviation {c1['max_proportionality_deviation']:.2e}, "
        f"scales: {scales}, {timings['c1']:.3f}s",
    )


def test_criterion_2_star_stencil(battery):
    machine, _ = battery
    worst = machine["c2"]["max_off_star_coefficient"]
    _report(2, "3d-star-stencil", worst <= 1e-14, f"max off-star coeff {worst:.2e}")


def test_criterion_3_oracle_equivalence(battery):
    machine, timings = battery
    worst = machine["c3"]["max_relative_deviation"]
    ok = worst <= 1e-10 and timings["c3"] < 10.0
    _report(
        3,
        "fused-vs-reference",
        ok,
        f"max rel deviation {worst:.2e} over 100 graphs, {timings['c3']:.2f}s",
    )


def test_criterion_4_nullspace(battery):
    machine, _ = battery
    c4 = machine["c4"]
    ok = (
        c4["max_constant_response"] <= 1e-12
        and c4["max_affine_interior_laplacian"] <= 1e-10
    )
    _report(
        4,
        "nullspace",
        ok,
        f"constant {c4['max_constant_response']:.2e}, "
        f"affine {c4['max_affine_interior_laplacian']:.2e}",
    )


def test_criterion_5_amg(battery):
    machine, _ = battery
    c5 = machine["c5"]
    ok = (
        c5["galerkin_exact"]
        and c5["prolongation_max_row_sum_error"] <= 1e-12
        and c5["singleton_pool_identity"]
        and c5["max_aggregate_size"] <= 2
    )
    _report(
        5,
        "amg-properties",
        ok,
        f"galerkin exact={c5['galerkin_exact']}, "
        f"row-sum err {c5['prolongation_max_row_sum_error']:.2e}, "
        f"singleton identity={c5['singleton_pool_identity']}, "
        f"max aggregate {c5['max_aggregate_size']}",
    )


def test_criterion_6_gradients(battery):
    machine, timings = battery
    c6 = machine["c6"]
    ok = (
        c6["single_layer_max_rel_error"] <= 1e-4
        and c6["network_max_rel_error"] <= 1e-4
        and c6["single_layer_seeds"] + c6["network_seeds"] >= 20
        and timings["c6"] < 60.0
    )
    _report(
        6,
        "gradient-checks",
        ok,
        f"layer max {c6['single_layer_max_rel_error']:.2e} ({c6['single_layer_seeds']} seeds), "
        f"network max {c6['network_max_rel_error']:.2e} ({c6['network_seeds']} seeds), "
        f"{timings['c6']:.1f}s",
    )


def test_criterion_7_flop_model(battery):
    machine, _ = battery
    c7 = machine["c7"]
    ok = (
        c7["voxel_mflops"] == 382.2
        and c7["pointwise_mflops"] == 8.4
        and c7["edge_mlp_mflops"] == 167.8
        and abs(c7["diffgcn_deviation_pct"]) < 10.0
    )
    _report(
        7,
        "flop-model",
        ok,
        f"voxel {c7['voxel_mflops']}, pointwise {c7['pointwise_mflops']}, "
        f"edge-mlp {c7['edge_mlp_mflops']}, ours {c7['diffgcn_mflops']} "
        f"vs {c7['diffgcn_reference_mflops']} ({c7['diffgcn_deviation_pct']:+.1f}%)",
    )


@pytest.mark.slow
def test_criterion_7_latency_ordinal(warmed_up):
    out = criterion_7_flop_model(include_latency=True)
    _report(
        7,
        "latency-ordinal",
        out["diffgcn_faster_than_edge_mlp"],
        "diffgcn median < edge-mlp median at the reference spec",
    )


def test_criterion_8_training(battery):
    machine, timings = battery
    c8 = machine["c8"]
    acc_all = c8["all"]["test_overall_accuracy"]
    acc_ml = c8["mass+lap"]["test_overall_accuracy"]
    acc_m = c8["mass"]["test_overall_accuracy"]
    losses = c8["all"]["per_epoch_loss"]
    wall = timings["c8_per_variant"]["all"]
    ok = (
        acc_all >= 0.90
        and len(losses) == 30
        and losses[0] > losses[-1]
        and wall < 300.0
        and acc_all >= acc_ml - 0.01
        and acc_ml >= acc_m - 0.01
    )
    _report(
        8,
        "desk-scale-training",
        ok,
        f"test acc all={acc_all:.3f} mass+lap={acc_ml:.3f} mass={acc_m:.3f}, "
        f"loss {losses[0]:.3f}->{losses[-1]:.5f}, {wall:.0f}s",
    )


@pytest.mark.slow
def test_criterion_9_determinism(battery, tmp_path):
    machine_a, _ = battery
    machine_b, _ = run_battery("run_b")
    path_a = tmp_path / "run_a.json"
    path_b = tmp_path / "run_b.json"
    dio.write_json(path_a, machine_a)
    dio.write_json(path_b, machine_b)
    identical = path_a.read_bytes() == path_b.read_bytes()
    _report(
        9,
        "determinism",
        identical,
        f"two consecutive runs, {path_a.stat().st_size} bytes each, "
        f"kernel path {_kernels.active_path()}",
    )
