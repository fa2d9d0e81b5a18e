"""Hot numeric kernels: the fused per-edge sweeps behind diff_features.

Every kernel comes in two builds: a numba @njit version and a pure-numpy
fallback. Selection is controlled by the DIFFGRAPH_USE_NUMBA environment
variable ("0"/"false"/"off" forces the numpy path, "1"/"true"/"on" requires
numba; unset means use numba when importable). Both builds accumulate edge
contributions in the same fixed order, single-threaded, so results are
run-to-run identical per path and agree across paths to rounding (numba may
fuse multiply-adds).
"""

import os

import numpy as np

# Guard for zero-length edges (coincident points): d <- max(d, EPS_LENGTH).
EPS_LENGTH = 1e-12


def _numba_preference():
    val = os.environ.get("DIFFGRAPH_USE_NUMBA", "").strip().lower()
    if val in ("0", "false", "off", "no"):
        return False
    if val in ("1", "true", "on", "yes"):
        return True
    return None


_PREF = _numba_preference()
HAVE_NUMBA = False
if _PREF is not False:
    try:
        from numba import njit

        HAVE_NUMBA = True
    except ImportError:
        if _PREF is True:
            raise ImportError(
                "DIFFGRAPH_USE_NUMBA requested numba but it is not installed"
            )

USE_NUMBA = HAVE_NUMBA and _PREF is not False


def sweep_forward_numpy(positions, ei, ej, inv_deg, feats):
    """Accumulate per-vertex gradient and second-derivative features.

    positions: (N,3) float64; ei, ej: (E,) endpoint indices with ei < ej;
    inv_deg: (N,) 1/degree (0 for isolated vertices); feats: (N,C).
    Returns (grad, lap), each (N,3,C), already mean-normalized.
    """
    n, c = feats.shape
    grad = np.zeros((n, 3, c))
    lap = np.zeros((n, 3, c))
    if ei.shape[0]:
        dvec = positions[ei] - positions[ej]
        d = np.sqrt(np.sum(dvec * dvec, axis=1))
        d = np.maximum(d, EPS_LENGTH)
        w = dvec / (2.0 * d)[:, None]
        df = feats[ei] - feats[ej]
        g = w[:, :, None] * df[:, None, :]
        # np.add.at applies additions sequentially in index order, matching
        # the numba loop's accumulation order.
        np.add.at(grad, ei, g)
        np.add.at(grad, ej, g)
        sg = w[:, :, None] * g
        np.add.at(lap, ei, -sg)
        np.add.at(lap, ej, sg)
    grad *= inv_deg[:, None, None]
    lap *= inv_deg[:, None, None]
    return grad, lap


def sweep_adjoint_numpy(positions, ei, ej, inv_deg, g_grad, g_lap):
    """Adjoint of sweep_forward: maps upstream (N,3,C) gradients on the
    grad/lap blocks back to a (N,C) gradient on the input features."""
    n = positions.shape[0]
    c = g_grad.shape[2]
    out = np.zeros((n, c))
    if ei.shape[0]:
        dvec = positions[ei] - positions[ej]
        d = np.sqrt(np.sum(dvec * dvec, axis=1))
        d = np.maximum(d, EPS_LENGTH)
        w = (dvec / (2.0 * d)[:, None])[:, :, None]
        gi = inv_deg[ei][:, None, None]
        gj = inv_deg[ej][:, None, None]
        dg = gi * (g_grad[ei] - w * g_lap[ei]) + gj * (g_grad[ej] + w * g_lap[ej])
        s = np.sum(w * dg, axis=1)
        np.add.at(out, ei, s)
        np.add.at(out, ej, -s)
    return out


if HAVE_NUMBA:

    @njit(cache=True)
    def _sweep_forward_nb(positions, ei, ej, inv_deg, feats, grad, lap):
        n_edges = ei.shape[0]
        c = feats.shape[1]
        for e in range(n_edges):
            i = ei[e]
            j = ej[e]
            dx = positions[i, 0] - positions[j, 0]
            dy = positions[i, 1] - positions[j, 1]
            dz = positions[i, 2] - positions[j, 2]
            d = np.sqrt(dx * dx + dy * dy + dz * dz)
            if d < EPS_LENGTH:
                d = EPS_LENGTH
            wx = dx / (2.0 * d)
            wy = dy / (2.0 * d)
            wz = dz / (2.0 * d)
            for k in range(c):
                df = feats[i, k] - feats[j, k]
                gx = wx * df
                gy = wy * df
                gz = wz * df
                grad[i, 0, k] += gx
                grad[i, 1, k] += gy
                grad[i, 2, k] += gz
                grad[j, 0, k] += gx
                grad[j, 1, k] += gy
                grad[j, 2, k] += gz
                lap[i, 0, k] -= wx * gx
                lap[i, 1, k] -= wy * gy
                lap[i, 2, k] -= wz * gz
                lap[j, 0, k] += wx * gx
                lap[j, 1, k] += wy * gy
                lap[j, 2, k] += wz * gz

    @njit(cache=True)
    def _sweep_adjoint_nb(positions, ei, ej, inv_deg, g_grad, g_lap, out):
        n_edges = ei.shape[0]
        c = g_grad.shape[2]
        for e in range(n_edges):
            i = ei[e]
            j = ej[e]
            dx = positions[i, 0] - positions[j, 0]
            dy = positions[i, 1] - positions[j, 1]
            dz = positions[i, 2] - positions[j, 2]
            d = np.sqrt(dx * dx + dy * dy + dz * dz)
            if d < EPS_LENGTH:
                d = EPS_LENGTH
            wx = dx / (2.0 * d)
            wy = dy / (2.0 * d)
            wz = dz / (2.0 * d)
            gi = inv_deg[i]
            gj = inv_deg[j]
            for k in range(c):
                dgx = gi * (g_grad[i, 0, k] - wx * g_lap[i, 0, k]) + gj * (
                    g_grad[j, 0, k] + wx * g_lap[j, 0, k]
                )
                dgy = gi * (g_grad[i, 1, k] - wy * g_lap[i, 1, k]) + gj * (
                    g_grad[j, 1, k] + wy * g_lap[j, 1, k]
                )
                dgz = gi * (g_grad[i, 2, k] - wz * g_lap[i, 2, k]) + gj * (
                    g_grad[j, 2, k] + wz * g_lap[j, 2, k]
                )
                s = wx * dgx + wy * dgy + wz * dgz
                out[i, k] += s
                out[j, k] -= s

    def sweep_forward_numba(positions, ei, ej, inv_deg, feats):
        n, c = feats.shape
        grad = np.zeros((n, 3, c))
        lap = np.zeros((n, 3, c))
        if ei.shape[0]:
            _sweep_forward_nb(positions, ei, ej, inv_deg, feats, grad, lap)
        grad *= inv_deg[:, None, None]
        lap *= inv_deg[:, None, None]
        return grad, lap

    def sweep_adjoint_numba(positions, ei, ej, inv_deg, g_grad, g_lap):
        n = positions.shape[0]
        out = np.zeros((n, g_grad.shape[2]))
        if ei.shape[0]:
            _sweep_adjoint_nb(positions, ei, ej, inv_deg, g_grad, g_lap, out)
        return out

else:
    sweep_forward_numba = None
    sweep_adjoint_numba = None


if USE_NUMBA:
    sweep_forward = sweep_forward_numba
    sweep_adjoint = sweep_adjoint_numba
else:
    sweep_forward = sweep_forward_numpy
    sweep_adjoint = sweep_adjoint_numpy


def active_path():
    """Name of the kernel build selected at import time."""
    return "numba" if USE_NUMBA else "numpy"
