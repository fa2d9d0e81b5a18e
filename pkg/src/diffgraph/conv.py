"""The differential-operator graph convolution layer.

Forward: F' = ReLU(BN(W . masked_diff_features(F) + bias)). The feature map
is linear in F, so the backward pass applies the transposed edge sweeps.
Batch normalization treats the N vertices of one cloud as the batch.
"""

from dataclasses import dataclass

import numpy as np

from .diffops import DiffFeatures, block_slice, diff_features, diff_features_adjoint

BN_EPS = 1e-5
BN_MOMENTUM = 0.1

MASK_ALL = (True,) * 7
MASK_MASS = (True, False, False, False, False, False, False)
MASK_MASS_GRAD = (True, True, True, True, False, False, False)
MASK_MASS_LAP = (True, False, False, False, True, True, True)
NAMED_MASKS = {
    "all": MASK_ALL,
    "mass": MASK_MASS,
    "mass+grad": MASK_MASS_GRAD,
    "mass+lap": MASK_MASS_LAP,
}


class ConvLayer:
    """Learnable pointwise map over the 7*c_in differential features, with
    batch-norm parameters and a per-term on/off mask."""

    def __init__(self, c_in, c_out, term_mask=MASK_ALL, rng=None):
        if rng is None:
            rng = np.random.default_rng(0)
        self.c_in = int(c_in)
        self.c_out = int(c_out)
        self.term_mask = tuple(bool(b) for b in term_mask)
        if len(self.term_mask) != 7:
            raise ValueError("term_mask must have 7 entries")
        fan_in = 7 * self.c_in
        bound = 1.0 / np.sqrt(fan_in)
        self.weight = rng.uniform(-bound, bound, size=(self.c_out, fan_in))
        self.bias = np.zeros(self.c_out)
        self.bn_gamma = np.ones(self.c_out)
        self.bn_beta = np.zeros(self.c_out)
        self.bn_running_mean = np.zeros(self.c_out)
        self.bn_running_var = np.ones(self.c_out)
        self.bn_eps = BN_EPS
        self.bn_momentum = BN_MOMENTUM

    def needs_sweep(self):
        return any(self.term_mask[1:])

    def apply_mask(self, dfeat_data):
        out = dfeat_data.copy()
        for t, on in enumerate(self.term_mask):
            if not on:
                out[:, block_slice(t, self.c_in)] = 0.0
        return out

    def param_items(self):
        return [
            ("weight", self.weight),
            ("bias", self.bias),
            ("bn_gamma", self.bn_gamma),
            ("bn_beta", self.bn_beta),
        ]

    def state_items(self):
        return self.param_items() + [
            ("bn_running_mean", self.bn_running_mean),
            ("bn_running_var", self.bn_running_var),
        ]


@dataclass
class BNCache:
    mode: str  # "batch" or "running"
    mean: np.ndarray
    inv_std: np.ndarray
    xhat: np.ndarray
    degenerate: bool = False


@dataclass
class TapeNode:
    """Forward caches sufficient for exact reverse-mode gradients."""

    layer: ConvLayer
    graph: object
    positions: np.ndarray
    masked_feats: np.ndarray  # X: (N, 7*c_in) after masking
    pre_bn: np.ndarray  # Z = X W^T + b
    bn: BNCache
    relu_mask: np.ndarray
    output: np.ndarray

    @property
    def degenerate_batch(self):
        return self.bn.degenerate

    def replay(self):
        """Recompute the stored output from the caches (bitwise)."""
        y = self.layer.bn_gamma * self.bn.xhat + self.layer.bn_beta
        return np.where(y > 0.0, y, 0.0)


def bn_forward(layer, z, mode):
    """Batch normalization over the row (vertex) axis. `layer` provides the
    bn_* attributes; a single-row train batch falls back to running stats."""
    n = z.shape[0]
    degenerate = False
    if mode == "train" and n > 1:
        mean = z.mean(axis=0)
        var = z.var(axis=0)  # biased, consistent with the backward pass
        inv_std = 1.0 / np.sqrt(var + layer.bn_eps)
        xhat = (z - mean) * inv_std
        m = layer.bn_momentum
        layer.bn_running_mean = (1.0 - m) * layer.bn_running_mean + m * mean
        layer.bn_running_var = (1.0 - m) * layer.bn_running_var + m * var
        bn_mode = "batch"
    else:
        if mode == "train":
            degenerate = True
        mean = layer.bn_running_mean
        inv_std = 1.0 / np.sqrt(layer.bn_running_var + layer.bn_eps)
        xhat = (z - mean) * inv_std
        bn_mode = "running"
    y = layer.bn_gamma * xhat + layer.bn_beta
    return y, BNCache(mode=bn_mode, mean=mean, inv_std=inv_std, xhat=xhat, degenerate=degenerate)


def conv_forward(layer, graph, positions, feats, mode="train"):
    """Returns (output, tape). mode is "train" or "eval"; a single-vertex
    train batch falls back to running statistics (flagged on the tape)."""
    if mode not in ("train", "eval"):
        raise ValueError("mode must be 'train' or 'eval'")
    feats = np.asarray(feats, dtype=np.float64)
    if feats.ndim == 1:
        feats = feats[:, None]
    if feats.shape[1] != layer.c_in:
        raise ValueError(f"expected {layer.c_in} input channels, got {feats.shape[1]}")
    if layer.needs_sweep():
        dfeat = diff_features(graph, positions, feats)
    else:
        data = np.zeros((feats.shape[0], 7 * layer.c_in))
        data[:, : layer.c_in] = feats
        dfeat = DiffFeatures(data=data, c_in=layer.c_in)
    x = layer.apply_mask(dfeat.data)
    z = x @ layer.weight.T + layer.bias
    y, bn = bn_forward(layer, z, mode)
    relu_mask = y > 0.0
    out = np.where(relu_mask, y, 0.0)
    tape = TapeNode(
        layer=layer,
        graph=graph,
        positions=np.asarray(positions, dtype=np.float64),
        masked_feats=x,
        pre_bn=z,
        bn=bn,
        relu_mask=relu_mask,
        output=out,
    )
    return out, tape


def bn_backward(layer, bn, dy):
    dgamma = np.sum(dy * bn.xhat, axis=0)
    dbeta = np.sum(dy, axis=0)
    dxhat = dy * layer.bn_gamma
    if bn.mode == "running":
        dz = dxhat * bn.inv_std
    else:
        n = dy.shape[0]
        dz = (
            bn.inv_std
            / n
            * (
                n * dxhat
                - np.sum(dxhat, axis=0)
                - bn.xhat * np.sum(dxhat * bn.xhat, axis=0)
            )
        )
    return dz, dgamma, dbeta


def conv_backward(tape, d_out):
    """Exact analytic gradients: (dF, dW, dbias, dgamma, dbeta)."""
    d_out = np.asarray(d_out, dtype=np.float64)
    if d_out.shape != tape.output.shape:
        raise ValueError(
            f"upstream gradient shape {d_out.shape} != output shape {tape.output.shape}"
        )
    layer = tape.layer
    dy = d_out * tape.relu_mask
    dz, dgamma, dbeta = bn_backward(layer, tape.bn, dy)
    dw = dz.T @ tape.masked_feats
    dbias = np.sum(dz, axis=0)
    dx = dz @ layer.weight
    for t, on in enumerate(layer.term_mask):
        if not on:
            dx[:, block_slice(t, layer.c_in)] = 0.0
    n, c = dx.shape[0], layer.c_in
    d_feats = dx[:, :c].copy()
    if layer.needs_sweep():
        g_grad = np.ascontiguousarray(dx[:, c : 4 * c].reshape(n, 3, c))
        g_lap = np.ascontiguousarray(dx[:, 4 * c :].reshape(n, 3, c))
        d_feats += diff_features_adjoint(tape.graph, tape.positions, g_grad, g_lap)
    return d_feats, dw, dbias, dgamma, dbeta


# 3x3 stencils are indexed [row, col] with row 0 the +y neighbor and col 0
# the -x neighbor: offset (dx, dy) = (col - 1, 1 - row).
_STENCILS_2D = np.array(
    [
        [[0, 0, 0], [0, 1, 0], [0, 0, 0]],  # mass
        [[0, 0, 0], [-1, 0, 1], [0, 0, 0]],  # d/dx
        [[0, 0, 0], [1, -2, 1], [0, 0, 0]],  # d2/dx2
        [[0, 1, 0], [0, 0, 0], [0, -1, 0]],  # d/dy
        [[0, 1, 0], [0, -2, 0], [0, 1, 0]],  # d2/dy2
    ],
    dtype=np.float64,
)


def structured_kernel_2d(theta):
    """Weighted sum of the five elementary 3x3 stencils
    (mass, d/dx, d2/dx2, d/dy, d2/dy2)."""
    theta = np.asarray(theta, dtype=np.float64)
    if theta.shape != (5,):
        raise ValueError("theta must have 5 entries")
    return np.tensordot(theta, _STENCILS_2D, axes=1)


def cross_correlate_2d(field, kernel3x3):
    """Apply a 3x3 stencil to a (ny, nx) field; interior values only, the
    border is NaN."""
    ny, nx = field.shape
    inner = np.zeros((ny - 2, nx - 2))
    for row in range(3):
        for col in range(3):
            c = kernel3x3[row, col]
            if c == 0.0:
                continue
            dx, dy = col - 1, 1 - row
            inner = inner + c * field[1 + dy : ny - 1 + dy, 1 + dx : nx - 1 + dx]
    out = np.full((ny, nx), np.nan)
    out[1:-1, 1:-1] = inner
    return out


def measure_grid_scales(grid_cloud, grid_graph, nx, ny):
    """Positive per-term constants of the pipeline on a regular 2D grid,
    read off an interior vertex (mass, gradx, grady, lapx, lapy)."""
    from .diffops import extract_stencil

    vertex = (ny // 2) * nx + nx // 2
    scales = {}
    for term, offset in (
        ("mass", (0, 0, 0)),
        ("gradx", (1, 0, 0)),
        ("grady", (0, 1, 0)),
        ("lapx", (1, 0, 0)),
        ("lapy", (0, 1, 0)),
    ):
        st = extract_stencil(grid_cloud, grid_graph, term, vertex)
        if st.boundary:
            raise ValueError("measurement vertex is not interior")
        scales[term] = st.coefficient(offset)
    return scales


def grid_equivalence_check(theta, grid, field=None, seed=0):
    """Max interior deviation between a single-channel layer (weights set
    from theta with per-term scale compensation, no BN/ReLU) and the direct
    3x3 cross-correlation of structured_kernel_2d(theta)."""
    cloud, graph = grid
    xs = np.unique(cloud.positions[:, 0])
    ys = np.unique(cloud.positions[:, 1])
    nx, ny = xs.size, ys.size
    if np.unique(cloud.positions[:, 2]).size != 1:
        raise ValueError("grid must be 2D (single z layer)")
    if nx < 3 or ny < 3:
        raise ValueError("grid must be at least 3x3 to have interior vertices")
    theta = np.asarray(theta, dtype=np.float64)
    if field is None:
        field = np.random.default_rng(seed).standard_normal(nx * ny)
    field = np.asarray(field, dtype=np.float64).reshape(-1)
    scales = measure_grid_scales(cloud, graph, nx, ny)
    w = np.array(
        [
            theta[0] / scales["mass"],
            theta[1] / scales["gradx"],
            theta[3] / scales["grady"],
            0.0,
            theta[2] / scales["lapx"],
            theta[4] / scales["lapy"],
            0.0,
        ]
    )
    dfeat = diff_features(graph, cloud.positions, field[:, None])
    layer_out = dfeat.data @ w
    direct = cross_correlate_2d(
        field.reshape(ny, nx), structured_kernel_2d(theta)
    ).reshape(-1)
    interior = ~np.isnan(direct)
    if not interior.any():
        raise ValueError("no interior vertices")
    return float(np.max(np.abs(layer_out[interior] - direct[interior])))


def layer_to_tensors(layer, prefix=""):
    out = {prefix + name: np.array(value, dtype=np.float64) for name, value in layer.state_items()}
    out[prefix + "term_mask"] = np.array(layer.term_mask, dtype=np.float64)
    return out


def layer_from_tensors(tensors, prefix=""):
    mask = tuple(bool(v) for v in tensors[prefix + "term_mask"])
    weight = tensors[prefix + "weight"]
    c_out, fan_in = weight.shape
    layer = ConvLayer(fan_in // 7, c_out, term_mask=mask)
    layer.weight = weight.copy()
    layer.bias = tensors[prefix + "bias"].copy()
    layer.bn_gamma = tensors[prefix + "bn_gamma"].copy()
    layer.bn_beta = tensors[prefix + "bn_beta"].copy()
    layer.bn_running_mean = tensors[prefix + "bn_running_mean"].copy()
    layer.bn_running_var = tensors[prefix + "bn_running_var"].copy()
    return layer
