"""Pure numpy implementations of the hot kernels.

This is the fallback backend. The compiled backend (`latentfluid._kernels`,
Cython) implements the same functions with the same accumulation order, so
results agree bitwise; tests assert that. Keep the arithmetic expressions here
literally in sync with the .pyx file: inclusion tests compare squared
distances, squared distances are computed as dx*dx + dy*dy + dz*dz, and
per-row reductions accumulate in pair order.
"""

from __future__ import annotations

import numpy as np

NAME = "numpy"


def scatter_add_rows(idx: np.ndarray, src: np.ndarray, nrows: int) -> np.ndarray:
    """Sum rows of src into a fresh (nrows, C) array at positions idx.

    idx: (P,) int64, src: (P, C) float64. Accumulation order per output row is
    the order of appearance in idx (bincount semantics).
    """
    out = np.zeros((nrows, src.shape[1]), dtype=np.float64)
    if src.shape[0] == 0:
        return out
    for c in range(src.shape[1]):
        out[:, c] = np.bincount(idx, weights=src[:, c], minlength=nrows)
    return out


def grid_query(
    sorted_keys: np.ndarray,
    order: np.ndarray,
    points: np.ndarray,
    origin: np.ndarray,
    dims: np.ndarray,
    cell_size: float,
    queries: np.ndarray,
    radius: float,
    cap: int,
    exclude_self: bool,
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Fixed-radius neighbor query against a prebuilt hash grid.

    Returns (offsets, indices, distances) in CSR form over the queries.
    Neighbors of one query are ordered by (distance, point index) ascending;
    with cap > 0 only the first cap survive. Inclusion is d2 <= radius*radius.
    exclude_self drops pairs whose point index equals the query index.
    """
    q = np.ascontiguousarray(queries, dtype=np.float64)
    nq = q.shape[0]
    if nq == 0 or points.shape[0] == 0:
        empty = np.zeros(0, dtype=np.int64)
        return np.zeros(nq + 1, dtype=np.int64), empty, np.zeros(0, dtype=np.float64)

    qcell = np.floor(q / cell_size).astype(np.int64) - origin[None, :]
    r2 = radius * radius

    cand_q_parts: list[np.ndarray] = []
    cand_p_parts: list[np.ndarray] = []
    for dx in (-1, 0, 1):
        for dy in (-1, 0, 1):
            for dz in (-1, 0, 1):
                cx = qcell[:, 0] + dx
                cy = qcell[:, 1] + dy
                cz = qcell[:, 2] + dz
                valid = (
                    (cx >= 0)
                    & (cx < dims[0])
                    & (cy >= 0)
                    & (cy < dims[1])
                    & (cz >= 0)
                    & (cz < dims[2])
                )
                if not valid.any():
                    continue
                keys = (cx * dims[1] + cy) * dims[2] + cz
                lo = np.searchsorted(sorted_keys, keys, side="left")
                hi = np.searchsorted(sorted_keys, keys, side="right")
                lo = np.where(valid, lo, 0)
                hi = np.where(valid, hi, 0)
                counts = hi - lo
                total = int(counts.sum())
                if total == 0:
                    continue
                qs = np.repeat(np.arange(nq, dtype=np.int64), counts)
                seg_start = np.concatenate(([0], np.cumsum(counts)[:-1]))
                pos = np.arange(total, dtype=np.int64) - np.repeat(seg_start, counts) + np.repeat(lo, counts)
                cand_q_parts.append(qs)
                cand_p_parts.append(order[pos])

    if not cand_q_parts:
        empty = np.zeros(0, dtype=np.int64)
        return np.zeros(nq + 1, dtype=np.int64), empty, np.zeros(0, dtype=np.float64)

    cand_q = np.concatenate(cand_q_parts)
    cand_p = np.concatenate(cand_p_parts)

    dxv = points[cand_p, 0] - q[cand_q, 0]
    dyv = points[cand_p, 1] - q[cand_q, 1]
    dzv = points[cand_p, 2] - q[cand_q, 2]
    d2 = dxv * dxv + dyv * dyv + dzv * dzv
    keep = d2 <= r2
    if exclude_self:
        keep &= cand_p != cand_q
    cand_q = cand_q[keep]
    cand_p = cand_p[keep]
    dist = np.sqrt(d2[keep])

    srt = np.lexsort((cand_p, dist, cand_q))
    cand_q = cand_q[srt]
    cand_p = cand_p[srt]
    dist = dist[srt]

    counts = np.bincount(cand_q, minlength=nq)
    if cap > 0:
        seg_start = np.concatenate(([0], np.cumsum(counts)[:-1]))
        rank = np.arange(cand_q.shape[0], dtype=np.int64) - np.repeat(seg_start, counts)
        keep = rank < cap
        cand_p = cand_p[keep]
        dist = dist[keep]
        counts = np.minimum(counts, cap)

    offsets = np.zeros(nq + 1, dtype=np.int64)
    np.cumsum(counts, out=offsets[1:])
    return offsets, cand_p.astype(np.int64, copy=False), dist


def sph_density(
    pos: np.ndarray,
    mass: np.ndarray,
    pair_i: np.ndarray,
    pair_j: np.ndarray,
    h: float,
) -> np.ndarray:
    """Summation density with a cubic spline kernel of support 2h.

    Includes the self term mass_i * W(0). Pairs are directed (both (i,j) and
    (j,i) present).
    """
    sigma = 1.0 / (np.pi * h * h * h)
    rho = mass * (sigma * 1.0)  # W(0) = sigma * (1 - 0 + 0)
    if pair_i.shape[0]:
        dx = pos[pair_j, 0] - pos[pair_i, 0]
        dy = pos[pair_j, 1] - pos[pair_i, 1]
        dz = pos[pair_j, 2] - pos[pair_i, 2]
        d = np.sqrt(dx * dx + dy * dy + dz * dz)
        w = _cubic_w(d / h, sigma)
        contrib = mass[pair_j] * w
        rho = rho + np.bincount(pair_i, weights=contrib, minlength=pos.shape[0])
    return rho


def sph_accel(
    pos: np.ndarray,
    vel: np.ndarray,
    mass: np.ndarray,
    rho: np.ndarray,
    pres: np.ndarray,
    pair_i: np.ndarray,
    pair_j: np.ndarray,
    h: float,
    xsph_eps: np.ndarray,
) -> tuple[np.ndarray, np.ndarray]:
    """Pressure acceleration and XSPH velocity correction from directed pairs.

    acc_i  = -sum_j m_j (P_i/rho_i^2 + P_j/rho_j^2) gradW_ij
    dvel_i =  eps_i * sum_j (2 m_j / (rho_i + rho_j)) (v_j - v_i) W_ij
    """
    n = pos.shape[0]
    acc = np.zeros((n, 3), dtype=np.float64)
    dvel = np.zeros((n, 3), dtype=np.float64)
    if pair_i.shape[0] == 0:
        return acc, dvel
    sigma = 1.0 / (np.pi * h * h * h)
    dx = pos[pair_i, 0] - pos[pair_j, 0]
    dy = pos[pair_i, 1] - pos[pair_j, 1]
    dz = pos[pair_i, 2] - pos[pair_j, 2]
    d = np.sqrt(dx * dx + dy * dy + dz * dz)
    q = d / h
    dwdq = _cubic_dw(q, sigma)
    # grad_i W = dW/dq * (1/h) * (r_i - r_j)/d ; guard coincident pairs
    safe = np.where(d > 0.0, d, 1.0)
    gw = dwdq / (h * safe)
    coef = -(mass[pair_j] * (pres[pair_i] / (rho[pair_i] * rho[pair_i]) + pres[pair_j] / (rho[pair_j] * rho[pair_j]))) * gw
    ax = coef * dx
    ay = coef * dy
    az = coef * dz
    w = _cubic_w(q, sigma)
    vcoef = xsph_eps[pair_i] * (2.0 * mass[pair_j] / (rho[pair_i] + rho[pair_j])) * w
    vx = vcoef * (vel[pair_j, 0] - vel[pair_i, 0])
    vy = vcoef * (vel[pair_j, 1] - vel[pair_i, 1])
    vz = vcoef * (vel[pair_j, 2] - vel[pair_i, 2])
    acc[:, 0] = np.bincount(pair_i, weights=ax, minlength=n)
    acc[:, 1] = np.bincount(pair_i, weights=ay, minlength=n)
    acc[:, 2] = np.bincount(pair_i, weights=az, minlength=n)
    dvel[:, 0] = np.bincount(pair_i, weights=vx, minlength=n)
    dvel[:, 1] = np.bincount(pair_i, weights=vy, minlength=n)
    dvel[:, 2] = np.bincount(pair_i, weights=vz, minlength=n)
    return acc, dvel


def _cubic_w(q: np.ndarray, sigma: float) -> np.ndarray:
    w = np.zeros_like(q)
    near = q <= 1.0
    w = np.where(near, sigma * (1.0 - 1.5 * q * q + 0.75 * q * q * q), w)
    mid = (q > 1.0) & (q < 2.0)
    t = 2.0 - q
    w = np.where(mid, sigma * 0.25 * t * t * t, w)
    return w


def _cubic_dw(q: np.ndarray, sigma: float) -> np.ndarray:
    dw = np.zeros_like(q)
    near = q <= 1.0
    dw = np.where(near, sigma * (-3.0 * q + 2.25 * q * q), dw)
    mid = (q > 1.0) & (q < 2.0)
    t = 2.0 - q
    dw = np.where(mid, sigma * (-0.75) * t * t, dw)
    return dw
