"""Harmonic (discrete Laplace) hole filling."""
import numpy as np
from scipy import ndimage, sparse
from scipy.sparse.linalg import splu

from .errors import InpaintError

DEFAULT_TOL = 0.1 / 255
DEFAULT_MAX_ITER = 5000

_FOUR = np.array([[0, 1, 0], [1, 1, 1], [0, 1, 0]], dtype=bool)
_OFFSETS = ((-1, 0), (1, 0), (0, -1), (0, 1))


def _neighbours(mask):
    """For each masked pixel, its in-image 4-neighbours as (rows, cols, valid)."""
    h, w = mask.shape
    rr, cc = np.nonzero(mask)
    nbrs = []
    for dr, dc in _OFFSETS:
        r, c = rr + dr, cc + dc
        ok = (r >= 0) & (r < h) & (c >= 0) & (c < w)
        nbrs.append((np.clip(r, 0, h - 1), np.clip(c, 0, w - 1), ok))
    return rr, cc, nbrs


def _check_anchored(mask):
    """Every connected hole must touch at least one known pixel."""
    labels, count = ndimage.label(mask, structure=_FOUR)
    if count == 0:
        return
    known_near = ndimage.binary_dilation(~mask, structure=_FOUR) & mask
    anchored = np.zeros(count + 1, dtype=bool)
    anchored[np.unique(labels[known_near])] = True
    floating = np.flatnonzero(~anchored[1:]) + 1
    if floating.size:
        rr, cc = np.nonzero(labels == floating[0])
        touches = rr.min() == 0 or cc.min() == 0 or rr.max() == mask.shape[0] - 1 or cc.max() == mask.shape[1] - 1
        where = "touches the image border and " if touches else ""
        raise InpaintError(f"masked region at row {rr[0]}, col {cc[0]} {where}has no known neighbour")


def _solve_direct(values, mask):
    """Exact equilibrium: each hole pixel equals the mean of its in-image 4-neighbours."""
    rr, cc, nbrs = _neighbours(mask)
    n = len(rr)
    index = -np.ones(mask.shape, dtype=np.int64)
    index[rr, cc] = np.arange(n)
    degree = np.zeros(n)
    rows, cols = [], []
    rhs = np.zeros((n, values.shape[2]))
    for r, c, ok in nbrs:
        degree += ok
        inner = ok & mask[r, c]
        rows.append(np.flatnonzero(inner))
        cols.append(index[r[inner], c[inner]])
        outer = ok & ~mask[r, c]
        rhs[outer] += values[r[outer], c[outer]]
    rows = np.concatenate(rows)
    cols = np.concatenate(cols)
    a = sparse.coo_matrix((-np.ones(len(rows)), (rows, cols)), shape=(n, n)).tocsc()
    a = a + sparse.diags(degree, format="csc")
    sol = splu(a).solve(rhs)
    out = values.copy()
    out[rr, cc] = sol
    return out


def _jacobi(values, mask, tol, max_iter, start=None):
    rr, cc, nbrs = _neighbours(mask)
    out = values.copy() if start is None else start.copy()
    degree = sum(ok.astype(np.float64) for _, _, ok in nbrs)[:, None]
    delta = np.inf
    it = 0
    for it in range(1, max_iter + 1):
        acc = np.zeros((len(rr), values.shape[2]))
        for r, c, ok in nbrs:
            acc += out[r, c] * ok[:, None]
        new = acc / degree
        delta = float(np.abs(new - out[rr, cc]).max())
        out[rr, cc] = new
        if delta < tol:
            break
    return out, it, delta


def inpaint(image, mask, tol=DEFAULT_TOL, max_iter=DEFAULT_MAX_ITER, method="direct"):
    """Replace masked pixels with the discrete-Laplace equilibrium of their surroundings.

    ``method="direct"`` solves the linear system with a sparse LU factorization
    and then runs Jacobi sweeps (at most ``max_iter``) until the largest change
    per channel drops below ``tol`` (in 0..1 units); starting from the exact
    solution that is normally a single sweep. ``method="jacobi"`` iterates from
    the unfilled image. Unmasked pixels are returned bit-exactly.
    """
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != image.shape[:2]:
        raise InpaintError(f"mask {mask.shape} does not match image {image.shape[:2]}")
    if not mask.any():
        return image.copy()
    _check_anchored(mask)
    values = image.astype(np.float64) / 255.0
    if method == "direct":
        start = _solve_direct(values, mask)
    elif method == "jacobi":
        start = None
    else:
        raise ValueError(f"unknown inpaint method '{method}'")
    filled, _, _ = _jacobi(values, mask, tol, max_iter, start)
    out = image.copy()
    out[mask] = np.clip(np.floor(filled[mask] * 255.0 + 0.5), 0, 255).astype(np.uint8)
    return out
