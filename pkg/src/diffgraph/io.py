"""File formats: XYZ/CSV clouds, ASCII OFF meshes, Matrix Market operators,
canonical JSON, and the flat named-tensor checkpoint container.

Named-tensor container layout (little-endian throughout):

    magic   4 bytes  b"DGT1"
    version u32      currently 1
    count   u32      number of tensors
    table   count *  [u16 name length, utf-8 name, u8 ndim, u32 dims[ndim]]
    data    concatenated float64 payloads, row-major, in table order
"""

import json
import struct

import numpy as np
from scipy import io as scipy_io
from scipy import sparse

from .geometry import Mesh, PointCloud

MAGIC = b"DGT1"
CONTAINER_VERSION = 1


def fmt_float(x):
    """17 significant digits: exact round-trip for 64-bit floats."""
    return format(float(x), ".17g")


def _canonical(obj, out):
    if obj is None:
        out.append("null")
    elif obj is True:
        out.append("true")
    elif obj is False:
        out.append("false")
    elif isinstance(obj, (int, np.integer)):
        out.append(str(int(obj)))
    elif isinstance(obj, (float, np.floating)):
        out.append(fmt_float(obj))
    elif isinstance(obj, str):
        out.append(json.dumps(obj))
    elif isinstance(obj, dict):
        out.append("{")
        for k, key in enumerate(sorted(obj)):
            if k:
                out.append(",")
            out.append(json.dumps(str(key)))
            out.append(":")
            _canonical(obj[key], out)
        out.append("}")
    elif isinstance(obj, (list, tuple, np.ndarray)):
        seq = obj.tolist() if isinstance(obj, np.ndarray) else obj
        out.append("[")
        for k, item in enumerate(seq):
            if k:
                out.append(",")
            _canonical(item, out)
        out.append("]")
    else:
        raise TypeError(f"cannot serialize {type(obj).__name__}")


def canonical_json(obj):
    """Deterministic JSON: sorted keys, floats at 17 significant digits."""
    out = []
    _canonical(obj, out)
    return "".join(out)


def write_json(path, obj):
    with open(path, "w") as fh:
        fh.write(canonical_json(obj))
        fh.write("\n")


def read_json(path):
    with open(path) as fh:
        return json.load(fh)


def write_cloud(path, cloud):
    """One "x,y,z[,label]" row per point. Per-point labels win over the
    cloud label; a cloud label is repeated on every row."""
    labels = None
    if cloud.point_labels is not None:
        labels = cloud.point_labels
    elif cloud.label is not None:
        labels = np.full(cloud.num_points, int(cloud.label), dtype=np.int64)
    with open(path, "w") as fh:
        for k in range(cloud.num_points):
            row = ",".join(fmt_float(v) for v in cloud.positions[k])
            if labels is not None:
                row += f",{int(labels[k])}"
            fh.write(row + "\n")


def read_cloud(path):
    """Reads comma- or whitespace-separated "x y z [label]" rows."""
    positions = []
    labels = []
    with open(path) as fh:
        for line in fh:
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            parts = line.replace(",", " ").split()
            if len(parts) not in (3, 4):
                raise ValueError(f"bad cloud row in {path}: {line!r}")
            positions.append([float(v) for v in parts[:3]])
            if len(parts) == 4:
                labels.append(int(float(parts[3])))
    if not positions:
        raise ValueError(f"no points in {path}")
    if labels and len(labels) != len(positions):
        raise ValueError(f"inconsistent label column in {path}")
    point_labels = np.asarray(labels, dtype=np.int64) if labels else None
    label = None
    if point_labels is not None and np.all(point_labels == point_labels[0]):
        label = int(point_labels[0])
    return PointCloud(
        positions=np.asarray(positions), label=label, point_labels=point_labels
    )


def read_off(path):
    """ASCII OFF mesh; polygon faces are fan-triangulated."""
    with open(path) as fh:
        tokens = []
        for line in fh:
            stripped = line.split("#", 1)[0].strip()
            if stripped:
                tokens.extend(stripped.split())
    if not tokens or tokens[0] != "OFF":
        raise ValueError(f"{path} is not an ASCII OFF file")
    pos = 1
    nv, nf = int(tokens[pos]), int(tokens[pos + 1])
    pos += 3  # vertex, face, edge counts
    verts = np.array(
        [float(t) for t in tokens[pos : pos + 3 * nv]], dtype=np.float64
    ).reshape(nv, 3)
    pos += 3 * nv
    faces = []
    for _ in range(nf):
        k = int(tokens[pos])
        idx = [int(t) for t in tokens[pos + 1 : pos + 1 + k]]
        pos += 1 + k
        for t in range(1, k - 1):
            faces.append([idx[0], idx[t], idx[t + 1]])
    return Mesh(vertices=verts, faces=np.asarray(faces, dtype=np.int64).reshape(-1, 3))


def write_matrix_market(path, op):
    """Coordinate Matrix Market export (17 significant digits)."""
    matrix = op.matrix if hasattr(op, "matrix") else op
    scipy_io.mmwrite(str(path), sparse.coo_matrix(matrix), precision=17)


def read_matrix_market(path):
    from .diffops import SparseOperator

    return SparseOperator(sparse.csr_matrix(scipy_io.mmread(str(path))))


def write_matrix_csv(path, array):
    array = np.atleast_2d(np.asarray(array, dtype=np.float64))
    with open(path, "w") as fh:
        for row in array:
            fh.write(",".join(fmt_float(v) for v in row) + "\n")


def save_tensors(path, tensors):
    """Write a name -> float64 array mapping in the container format."""
    names = list(tensors)
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<II", CONTAINER_VERSION, len(names)))
        for name in names:
            arr = np.asarray(tensors[name], dtype=np.float64)
            raw = name.encode("utf-8")
            if len(raw) > 0xFFFF:
                raise ValueError("tensor name too long")
            fh.write(struct.pack("<H", len(raw)))
            fh.write(raw)
            fh.write(struct.pack("<B", arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        for name in names:
            arr = np.ascontiguousarray(tensors[name], dtype=np.float64)
            fh.write(arr.astype("<f8").tobytes())


def load_tensors(path):
    with open(path, "rb") as fh:
        if fh.read(4) != MAGIC:
            raise ValueError(f"{path}: bad magic")
        version, count = struct.unpack("<II", fh.read(8))
        if version != CONTAINER_VERSION:
            raise ValueError(f"{path}: unsupported container version {version}")
        table = []
        for _ in range(count):
            (name_len,) = struct.unpack("<H", fh.read(2))
            name = fh.read(name_len).decode("utf-8")
            (ndim,) = struct.unpack("<B", fh.read(1))
            shape = struct.unpack(f"<{ndim}I", fh.read(4 * ndim)) if ndim else ()
            table.append((name, shape))
        out = {}
        for name, shape in table:
            n_items = int(np.prod(shape)) if shape else 1
            buf = fh.read(8 * n_items)
            if len(buf) != 8 * n_items:
                raise ValueError(f"{path}: truncated payload for {name}")
            out[name] = np.frombuffer(buf, dtype="<f8").reshape(shape).copy()
        return out
