"""Command-line surface.

Subcommands: gen-data, stencil, assemble, pool, train, eval, bench.

Every run writes resolved_config.json (the effective parameters) into the
output directory; wall-clock and host details go to run_metadata.json so the
remaining machine outputs are byte-identical across reruns with the same
seed. Exit codes: 0 success, 1 I/O failure, 2 usage or config error.
"""

import argparse
import os
import sys
import time

import numpy as np

from . import _kernels, bench as bench_mod, io as dio
from .amg import build_hierarchy, unpool
from .conv import NAMED_MASKS
from .diffops import (
    TERMS,
    assemble_edge_average,
    assemble_gradient,
    assemble_transposed_derivative,
    extract_stencil,
)
from .geometry import (
    SYNTH_CLASSES,
    grid_interior_mask,
    knn_graph,
    regular_grid,
    synth_dataset,
)
from .network import Network, NetworkConfig, evaluate, load_checkpoint, save_checkpoint, train

EXIT_OK = 0
EXIT_IO = 1
EXIT_USAGE = 2


class UsageError(Exception):
    pass


def _load_config_overrides(args, defaults):
    """defaults < config file < explicit command-line flags."""
    merged = dict(defaults)
    if getattr(args, "config", None):
        cfg = dio.read_json(args.config)
        unknown = sorted(set(cfg) - set(defaults))
        if unknown:
            raise UsageError(f"unknown config keys: {', '.join(unknown)}")
        merged.update(cfg)
    for key in defaults:
        val = getattr(args, key.replace("-", "_"), None)
        if val is not None:
            merged[key] = val
    return merged


def _start_run(outdir, resolved):
    os.makedirs(outdir, exist_ok=True)
    dio.write_json(os.path.join(outdir, "resolved_config.json"), resolved)
    return time.perf_counter()


def _finish_run(outdir, t0, extra=None):
    meta = {
        "timestamp": time.strftime("%Y-%m-%dT%H:%M:%S"),
        "duration_s": time.perf_counter() - t0,
        "kernel_path": _kernels.active_path(),
    }
    if extra:
        meta.update(extra)
    dio.write_json(os.path.join(outdir, "run_metadata.json"), meta)


def _read_cloud_file(path):
    """Cloud files that are missing, empty, or unparseable are I/O failures
    (exit 1), not usage errors."""
    try:
        return dio.read_cloud(path)
    except ValueError as exc:
        raise OSError(str(exc)) from exc


def _parse_grid(text):
    parts = text.lower().split("x")
    if len(parts) not in (2, 3):
        raise UsageError(f"bad grid spec {text!r}; use NXxNY or NXxNYxNZ")
    dims = [int(p) for p in parts]
    if len(dims) == 2:
        dims.append(1)
    return dims


GEN_DEFAULTS = {
    "classes": "sphere,cube,torus,cone",
    "n": 50,
    "points": 256,
    "noise": 0.01,
    "test_fraction": 0.0,
    "seed": 0,
}


def cmd_gen_data(args):
    cfg = _load_config_overrides(args, GEN_DEFAULTS)
    classes = [c.strip() for c in cfg["classes"].split(",") if c.strip()]
    for name in classes:
        if name not in SYNTH_CLASSES:
            raise UsageError(f"unknown class {name!r}; choose from {SYNTH_CLASSES}")
    t0 = _start_run(args.out, cfg)
    clouds = synth_dataset(
        classes, cfg["n"], cfg["points"], noise_sd=cfg["noise"], seed=cfg["seed"]
    )
    n_train = cfg["n"] - int(round(cfg["n"] * cfg["test_fraction"]))
    entries = []
    for idx, cloud in enumerate(clouds):
        fname = f"cloud_{idx:04d}.csv"
        dio.write_cloud(os.path.join(args.out, fname), cloud)
        within = idx % cfg["n"]
        entries.append(
            {
                "file": fname,
                "class": classes[cloud.label],
                "label": cloud.label,
                "split": "train" if within < n_train else "test",
            }
        )
    dio.write_json(
        os.path.join(args.out, "index.json"),
        {"classes": classes, "points_per_cloud": cfg["points"], "files": entries},
    )
    print(f"wrote {len(entries)} clouds to {args.out}")
    _finish_run(args.out, t0)
    return EXIT_OK


STENCIL_DEFAULTS = {"grid": "8x8", "h": 1.0, "term": "lapx", "vertex": -1}


def cmd_stencil(args):
    cfg = _load_config_overrides(args, STENCIL_DEFAULTS)
    if cfg["term"] not in TERMS:
        raise UsageError(f"unknown term {cfg['term']!r}; choose from {TERMS}")
    nx, ny, nz = _parse_grid(cfg["grid"])
    t0 = _start_run(args.out, cfg)
    cloud, graph = regular_grid(nx, ny, nz, cfg["h"])
    vertex = cfg["vertex"]
    explicit = vertex >= 0
    if not explicit:
        interior = np.nonzero(grid_interior_mask(nx, ny, nz))[0]
        if interior.size == 0:
            raise UsageError(f"grid {cfg['grid']} has no interior vertex")
        vertex = int(interior[interior.size // 2])
    st = extract_stencil(cloud, graph, cfg["term"], vertex)
    scale = None
    axis = {"gradx": 0, "lapx": 0, "grady": 1, "lapy": 1, "gradz": 2, "lapz": 2}.get(
        cfg["term"]
    )
    if not st.boundary:
        if cfg["term"] == "mass":
            scale = st.coefficient((0, 0, 0))
        else:
            offset = tuple(1 if b == axis else 0 for b in range(3))
            scale = st.coefficient(offset)
    coeff_rows = [
        [int(o[0]), int(o[1]), int(o[2]), v] for o, v in sorted(st.coeffs.items())
    ]
    dio.write_json(
        os.path.join(args.out, "stencil.json"),
        {
            "term": cfg["term"],
            "vertex": int(vertex),
            "boundary": st.boundary,
            "scale": scale,
            "coefficients": coeff_rows,
        },
    )
    print(f"term {cfg['term']} at vertex {vertex}" + (" (boundary)" if st.boundary else ""))
    for dx, dy, dz, v in coeff_rows:
        print(f"  offset ({dx:+d},{dy:+d},{dz:+d}) -> {v:+.6g}")
    if scale is not None:
        print(f"  measured scale constant: {scale:.6g}")
    _finish_run(args.out, t0)
    return EXIT_OK


ASSEMBLE_DEFAULTS = {"k": 3}


def cmd_assemble(args):
    cfg = _load_config_overrides(args, ASSEMBLE_DEFAULTS)
    cloud = _read_cloud_file(args.cloud)
    t0 = _start_run(args.out, {**cfg, "cloud": args.cloud})
    graph = knn_graph(cloud.positions, cfg["k"])
    ops = {
        "gradient": assemble_gradient(graph, cloud.positions),
        "edge_average": assemble_edge_average(graph),
        "transposed_derivative": assemble_transposed_derivative(graph, cloud.positions),
    }
    manifest = {"num_vertices": graph.num_vertices, "num_edges": graph.num_edges}
    for name, op in ops.items():
        path = os.path.join(args.out, f"{name}.mtx")
        dio.write_matrix_market(path, op)
        manifest[name] = {"shape": list(op.shape), "nnz": int(op.nnz)}
    dio.write_json(os.path.join(args.out, "manifest.json"), manifest)
    print(
        f"assembled operators for {graph.num_vertices} vertices / "
        f"{graph.num_edges} edges into {args.out}"
    )
    _finish_run(args.out, t0)
    return EXIT_OK


POOL_DEFAULTS = {"k": 3, "depth": 2}


def cmd_pool(args):
    cfg = _load_config_overrides(args, POOL_DEFAULTS)
    cloud = _read_cloud_file(args.cloud)
    t0 = _start_run(args.out, {**cfg, "cloud": args.cloud})
    graph = knn_graph(cloud.positions, cfg["k"])
    hierarchy = build_hierarchy(graph, cloud.positions, cfg["depth"])
    for lvl, transfer in enumerate(hierarchy.transfers):
        dio.write_matrix_market(
            os.path.join(args.out, f"restriction_{lvl}.mtx"), transfer.restriction
        )
        dio.write_matrix_market(
            os.path.join(args.out, f"prolongation_{lvl}.mtx"), transfer.prolongation
        )
        # Post-write check: rows of the re-read prolongation sum to one.
        p_back = dio.read_matrix_market(os.path.join(args.out, f"prolongation_{lvl}.mtx"))
        ones = np.ones((p_back.n_cols, 1))
        if np.max(np.abs(unpool(p_back, ones) - 1.0)) > 1e-12:
            raise RuntimeError(f"prolongation_{lvl}.mtx failed the row-sum check")
    dio.write_json(os.path.join(args.out, "summary.json"), hierarchy.summary())
    print(f"hierarchy level sizes: {hierarchy.level_sizes()}")
    _finish_run(args.out, t0)
    return EXIT_OK


TRAIN_DEFAULTS = {
    "epochs": 30,
    "batch_size": 8,
    "learning_rate": 1e-3,
    "seed": 0,
    "k": 10,
    "mask": "all",
    "pooling": "default",
    "dynamic_graph": False,
    "block_widths": "32,64",
    "fusion_width": 256,
}


def _network_config_from(cfg, num_classes):
    widths = tuple(int(w) for w in str(cfg["block_widths"]).split(","))
    nb = len(widths)
    if cfg["pooling"] == "default":
        pooling = tuple(b > 0 for b in range(nb))
    elif cfg["pooling"] in ("on", "true", "1"):
        pooling = (False,) + (True,) * (nb - 1) if nb > 1 else (True,)
    elif cfg["pooling"] in ("off", "false", "0"):
        pooling = (False,) * nb
    else:
        raise UsageError("pooling must be one of default/on/off")
    if cfg["mask"] not in NAMED_MASKS:
        raise UsageError(f"mask must be one of {sorted(NAMED_MASKS)}")
    return NetworkConfig(
        num_classes=num_classes,
        block_widths=widths,
        fusion_width=int(cfg["fusion_width"]),
        k_per_block=(int(cfg["k"]),) * nb,
        pooling=pooling,
        term_mask=NAMED_MASKS[cfg["mask"]],
        dynamic_graph=bool(cfg["dynamic_graph"]),
        seed=int(cfg["seed"]),
        learning_rate=float(cfg["learning_rate"]),
        batch_size=int(cfg["batch_size"]),
        epochs=int(cfg["epochs"]),
    )


def _load_dataset(data_dir):
    index = dio.read_json(os.path.join(data_dir, "index.json"))
    train_clouds, test_clouds = [], []
    from .geometry import PointCloud

    for entry in index["files"]:
        cloud = dio.read_cloud(os.path.join(data_dir, entry["file"]))
        cloud = PointCloud(positions=cloud.positions, label=int(entry["label"]))
        (train_clouds if entry.get("split", "train") == "train" else test_clouds).append(
            cloud
        )
    return index, train_clouds, test_clouds


def cmd_train(args):
    cfg = _load_config_overrides(args, TRAIN_DEFAULTS)
    index, train_clouds, test_clouds = _load_dataset(args.data)
    if not train_clouds:
        raise UsageError(f"no training clouds in {args.data}")
    num_classes = len(index["classes"])
    t0 = _start_run(args.out, {**cfg, "data": args.data})
    net_config = _network_config_from(cfg, num_classes)
    net = Network(net_config)
    epochs_path = os.path.join(args.out, "epochs.jsonl")
    with open(epochs_path, "w") as fh:

        def on_epoch(entry):
            fh.write(dio.canonical_json(entry) + "\n")
            fh.flush()
            msg = f"epoch {entry['epoch']:3d}  loss {entry['loss']:.4f}"
            if "overall_accuracy" in entry:
                msg += f"  acc {entry['overall_accuracy']:.3f}"
            print(msg)

        report = train(
            net,
            train_clouds,
            net_config,
            eval_dataset=test_clouds or None,
            epoch_callback=on_epoch,
        )
    dio.write_json(
        os.path.join(args.out, "report.json"), report.to_dict(include_wall_clock=False)
    )
    save_checkpoint(
        net,
        os.path.join(args.out, "model.tensors"),
        os.path.join(args.out, "model_config.json"),
    )
    print(
        f"final accuracy: overall {report.overall_accuracy:.3f} "
        f"mean-class {report.mean_class_accuracy:.3f}"
    )
    _finish_run(args.out, t0, extra={"train_wall_clock_s": report.wall_clock_s})
    return EXIT_OK


def cmd_eval(args):
    cfg = _load_config_overrides(args, {})
    _, train_clouds, test_clouds = _load_dataset(args.data)
    clouds = test_clouds or train_clouds
    t0 = _start_run(args.out, {**cfg, "data": args.data, "model": args.model})
    net = load_checkpoint(
        os.path.join(args.model, "model.tensors"),
        os.path.join(args.model, "model_config.json"),
    )
    overall, mean_class = evaluate(net, clouds)
    dio.write_json(
        os.path.join(args.out, "eval.json"),
        {
            "num_clouds": len(clouds),
            "overall_accuracy": overall,
            "mean_class_accuracy": mean_class,
        },
    )
    print(f"overall {overall:.3f}  mean-class {mean_class:.3f}")
    _finish_run(args.out, t0)
    return EXIT_OK


BENCH_DEFAULTS = {"repetitions": 25, "latency": True, "kernels": False, "seed": 0}


def _load_specs(path):
    raw = dio.read_json(path)
    if not isinstance(raw, list):
        raise UsageError("spec file must hold a JSON list of cost specs")
    try:
        return [bench_mod.CostSpec(**entry) for entry in raw]
    except TypeError as exc:
        raise UsageError(f"bad cost spec: {exc}")


def cmd_bench(args):
    cfg = _load_config_overrides(args, BENCH_DEFAULTS)
    t0 = _start_run(args.out, {**cfg, "specs": args.specs})
    specs = _load_specs(args.specs) if args.specs else bench_mod.table1_specs()
    table = bench_mod.cost_table(specs)
    dio.write_json(os.path.join(args.out, "table.json"), table)
    meta_extra = {}
    if cfg["latency"]:
        impls = bench_mod.make_table1_impls(seed=cfg["seed"])
        latencies = bench_mod.latency_bench(impls, repetitions=cfg["repetitions"])
        meta_extra["latency_ms"] = latencies
        table = bench_mod.cost_table(specs, latencies)
    if cfg["kernels"]:
        meta_extra["kernel_bench"] = bench_mod.kernel_bench(
            repetitions=cfg["repetitions"], seed=cfg["seed"]
        )
    print(bench_mod.cost_table_text(table))
    if cfg["kernels"]:
        kb = meta_extra["kernel_bench"]
        print()
        numba_ms = kb["numba"]["median_ms"] if kb["numba"] else None
        print(
            f"fused sweep ({kb['n_points']} pts, c={kb['channels']}): "
            f"numpy {kb['numpy']['median_ms']:.3f} ms, "
            + (f"numba {numba_ms:.3f} ms" if numba_ms is not None else "numba unavailable")
        )
    # Timings are run-dependent; they live in metadata, not table.json.
    _finish_run(args.out, t0, extra=meta_extra)
    return EXIT_OK


def build_parser():
    parser = argparse.ArgumentParser(
        prog="diffgraph",
        description="Differential-operator graph convolutions on point clouds",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def add_common(p):
        p.add_argument("--out", default=".", help="output directory")
        p.add_argument("--config", default=None, help="JSON config file")

    p = sub.add_parser("gen-data", help="generate a labeled synthetic dataset")
    add_common(p)
    p.add_argument("--classes", default=None)
    p.add_argument("--n", type=int, default=None, help="clouds per class")
    p.add_argument("--points", type=int, default=None)
    p.add_argument("--noise", type=float, default=None)
    p.add_argument("--test-fraction", type=float, default=None)
    p.add_argument("--seed", type=int, default=None)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("stencil", help="print an interior grid stencil")
    add_common(p)
    p.add_argument("--grid", default=None, help="e.g. 8x8 or 5x5x5")
    p.add_argument("--h", type=float, default=None)
    p.add_argument("--term", default=None, choices=list(TERMS))
    p.add_argument("--vertex", type=int, default=None)
    p.set_defaults(func=cmd_stencil)

    p = sub.add_parser("assemble", help="export sparse operators for a cloud")
    add_common(p)
    p.add_argument("--cloud", required=True)
    p.add_argument("--k", type=int, default=None)
    p.set_defaults(func=cmd_assemble)

    p = sub.add_parser("pool", help="build and export a coarsening hierarchy")
    add_common(p)
    p.add_argument("--cloud", required=True)
    p.add_argument("--k", type=int, default=None)
    p.add_argument("--depth", type=int, default=None)
    p.set_defaults(func=cmd_pool)

    p = sub.add_parser("train", help="train a classifier on a generated dataset")
    add_common(p)
    p.add_argument("--data", required=True, help="gen-data output directory")
    p.add_argument("--epochs", type=int, default=None)
    p.add_argument("--batch-size", type=int, default=None)
    p.add_argument("--learning-rate", type=float, default=None)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--k", type=int, default=None)
    p.add_argument("--mask", default=None, choices=sorted(NAMED_MASKS))
    p.add_argument("--pooling", default=None, choices=["default", "on", "off"])
    p.add_argument("--dynamic-graph", action="store_const", const=True, default=None)
    p.add_argument("--block-widths", default=None)
    p.add_argument("--fusion-width", type=int, default=None)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint")
    add_common(p)
    p.add_argument("--data", required=True)
    p.add_argument("--model", required=True, help="train output directory")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("bench", help="FLOP model table and latency harness")
    add_common(p)
    p.add_argument("--table1", action="store_true", help="included for symmetry; the table is always produced")
    p.add_argument("--specs", default=None, help="JSON file with a list of cost specs")
    p.add_argument("--repetitions", type=int, default=None)
    p.add_argument("--latency", dest="latency", action="store_const", const=True, default=None)
    p.add_argument("--no-latency", dest="latency", action="store_const", const=False)
    p.add_argument("--kernels", action="store_const", const=True, default=None)
    p.add_argument("--seed", type=int, default=None)
    p.set_defaults(func=cmd_bench)

    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
