# cython: boundscheck=False, wraparound=False, cdivision=True, language_level=3
"""Compiled implementations of the hot kernels.

Keep arithmetic expressions literally in sync with _kernels_np.py: inclusion
tests compare squared distances, squared distances are dx*dx + dy*dy + dz*dz,
and per-row reductions accumulate in pair order starting from zero, so both
backends agree bitwise.
"""

import numpy as np

cimport numpy as cnp
from libc.math cimport floor as c_floor
from libc.math cimport sqrt as c_sqrt

cnp.import_array()

NAME = "compiled"


def scatter_add_rows(cnp.int64_t[::1] idx, cnp.float64_t[:, ::1] src, Py_ssize_t nrows):
    cdef Py_ssize_t p, c, np_ = src.shape[0], nc = src.shape[1]
    out_arr = np.zeros((nrows, nc), dtype=np.float64)
    cdef cnp.float64_t[:, ::1] out = out_arr
    for p in range(np_):
        for c in range(nc):
            out[idx[p], c] += src[p, c]
    return out_arr


cdef Py_ssize_t _lower_bound(cnp.int64_t[::1] a, cnp.int64_t key) noexcept nogil:
    cdef Py_ssize_t lo = 0, hi = a.shape[0], mid
    while lo < hi:
        mid = (lo + hi) // 2
        if a[mid] < key:
            lo = mid + 1
        else:
            hi = mid
    return lo


cdef Py_ssize_t _upper_bound(cnp.int64_t[::1] a, cnp.int64_t key) noexcept nogil:
    cdef Py_ssize_t lo = 0, hi = a.shape[0], mid
    while lo < hi:
        mid = (lo + hi) // 2
        if a[mid] <= key:
            lo = mid + 1
        else:
            hi = mid
    return lo


def grid_query(
    cnp.int64_t[::1] sorted_keys,
    cnp.int64_t[::1] order,
    cnp.float64_t[:, ::1] points,
    cnp.int64_t[::1] origin,
    cnp.int64_t[::1] dims,
    double cell_size,
    cnp.float64_t[:, ::1] queries,
    double radius,
    Py_ssize_t cap,
    bint exclude_self,
):
    cdef Py_ssize_t nq = queries.shape[0]
    offsets_arr = np.zeros(nq + 1, dtype=np.int64)
    if nq == 0 or points.shape[0] == 0:
        return offsets_arr, np.zeros(0, dtype=np.int64), np.zeros(0, dtype=np.float64)

    cdef cnp.int64_t[::1] offsets = offsets_arr
    cdef double r2 = radius * radius
    cdef Py_ssize_t qi, s, lo, hi, m, k, ins, nkeep, total = 0
    cdef Py_ssize_t dx, dy, dz
    cdef cnp.int64_t cx, cy, cz, key
    cdef double qx, qy, qz, ddx, ddy, ddz, d2, dcur
    cdef Py_ssize_t icur

    # generous per-query scratch; grown on demand
    cdef Py_ssize_t cap_scratch = 256
    buf_d_arr = np.empty(cap_scratch, dtype=np.float64)
    buf_i_arr = np.empty(cap_scratch, dtype=np.int64)
    cdef cnp.float64_t[::1] buf_d = buf_d_arr
    cdef cnp.int64_t[::1] buf_i = buf_i_arr

    out_i_list = []
    out_d_list = []

    for qi in range(nq):
        qx = queries[qi, 0]
        qy = queries[qi, 1]
        qz = queries[qi, 2]
        cx = <cnp.int64_t> c_floor(qx / cell_size) - origin[0]
        cy = <cnp.int64_t> c_floor(qy / cell_size) - origin[1]
        cz = <cnp.int64_t> c_floor(qz / cell_size) - origin[2]
        nkeep = 0
        for dx in range(-1, 2):
            if cx + dx < 0 or cx + dx >= dims[0]:
                continue
            for dy in range(-1, 2):
                if cy + dy < 0 or cy + dy >= dims[1]:
                    continue
                for dz in range(-1, 2):
                    if cz + dz < 0 or cz + dz >= dims[2]:
                        continue
                    key = ((cx + dx) * dims[1] + (cy + dy)) * dims[2] + (cz + dz)
                    lo = _lower_bound(sorted_keys, key)
                    hi = _upper_bound(sorted_keys, key)
                    for s in range(lo, hi):
                        m = order[s]
                        if exclude_self and m == qi:
                            continue
                        ddx = points[m, 0] - qx
                        ddy = points[m, 1] - qy
                        ddz = points[m, 2] - qz
                        d2 = ddx * ddx + ddy * ddy + ddz * ddz
                        if d2 <= r2:
                            if nkeep == cap_scratch:
                                cap_scratch *= 2
                                buf_d_arr = np.resize(buf_d_arr, cap_scratch)
                                buf_i_arr = np.resize(buf_i_arr, cap_scratch)
                                buf_d = buf_d_arr
                                buf_i = buf_i_arr
                            buf_d[nkeep] = c_sqrt(d2)
                            buf_i[nkeep] = m
                            nkeep += 1
        # insertion sort by (distance, index)
        for k in range(1, nkeep):
            dcur = buf_d[k]
            icur = buf_i[k]
            ins = k
            while ins > 0 and (buf_d[ins - 1] > dcur or (buf_d[ins - 1] == dcur and buf_i[ins - 1] > icur)):
                buf_d[ins] = buf_d[ins - 1]
                buf_i[ins] = buf_i[ins - 1]
                ins -= 1
            buf_d[ins] = dcur
            buf_i[ins] = icur
        if cap > 0 and nkeep > cap:
            nkeep = cap
        out_i_list.append(np.asarray(buf_i_arr[:nkeep]).copy())
        out_d_list.append(np.asarray(buf_d_arr[:nkeep]).copy())
        total += nkeep
        offsets[qi + 1] = total

    if total == 0:
        return offsets_arr, np.zeros(0, dtype=np.int64), np.zeros(0, dtype=np.float64)
    return offsets_arr, np.concatenate(out_i_list), np.concatenate(out_d_list)


cdef inline double _cubic_w1(double q, double sigma) noexcept nogil:
    cdef double t
    if q <= 1.0:
        return sigma * (1.0 - 1.5 * q * q + 0.75 * q * q * q)
    elif q < 2.0:
        t = 2.0 - q
        return sigma * 0.25 * t * t * t
    return 0.0


cdef inline double _cubic_dw1(double q, double sigma) noexcept nogil:
    cdef double t
    if q <= 1.0:
        return sigma * (-3.0 * q + 2.25 * q * q)
    elif q < 2.0:
        t = 2.0 - q
        return sigma * (-0.75) * t * t
    return 0.0


def sph_density(
    cnp.float64_t[:, ::1] pos,
    cnp.float64_t[::1] mass,
    cnp.int64_t[::1] pair_i,
    cnp.int64_t[::1] pair_j,
    double h,
):
    cdef Py_ssize_t n = pos.shape[0], npair = pair_i.shape[0], p, i, j
    cdef double sigma = 1.0 / (np.pi * h * h * h)
    part_arr = np.zeros(n, dtype=np.float64)
    cdef cnp.float64_t[::1] part = part_arr
    cdef double dx, dy, dz, d, w
    for p in range(npair):
        i = pair_i[p]
        j = pair_j[p]
        dx = pos[j, 0] - pos[i, 0]
        dy = pos[j, 1] - pos[i, 1]
        dz = pos[j, 2] - pos[i, 2]
        d = c_sqrt(dx * dx + dy * dy + dz * dz)
        w = _cubic_w1(d / h, sigma)
        part[i] += mass[j] * w
    rho_arr = np.empty(n, dtype=np.float64)
    cdef cnp.float64_t[::1] rho = rho_arr
    for i in range(n):
        rho[i] = mass[i] * sigma + part[i]
    return rho_arr


def sph_accel(
    cnp.float64_t[:, ::1] pos,
    cnp.float64_t[:, ::1] vel,
    cnp.float64_t[::1] mass,
    cnp.float64_t[::1] rho,
    cnp.float64_t[::1] pres,
    cnp.int64_t[::1] pair_i,
    cnp.int64_t[::1] pair_j,
    double h,
    cnp.float64_t[::1] xsph_eps,
):
    cdef Py_ssize_t n = pos.shape[0], npair = pair_i.shape[0], p, i, j
    cdef double sigma = 1.0 / (np.pi * h * h * h)
    acc_arr = np.zeros((n, 3), dtype=np.float64)
    dvel_arr = np.zeros((n, 3), dtype=np.float64)
    cdef cnp.float64_t[:, ::1] acc = acc_arr
    cdef cnp.float64_t[:, ::1] dvel = dvel_arr
    cdef double dx, dy, dz, d, q, dwdq, safe, gw, coef, w, vcoef
    for p in range(npair):
        i = pair_i[p]
        j = pair_j[p]
        dx = pos[i, 0] - pos[j, 0]
        dy = pos[i, 1] - pos[j, 1]
        dz = pos[i, 2] - pos[j, 2]
        d = c_sqrt(dx * dx + dy * dy + dz * dz)
        q = d / h
        dwdq = _cubic_dw1(q, sigma)
        safe = d if d > 0.0 else 1.0
        gw = dwdq / (h * safe)
        coef = -(mass[j] * (pres[i] / (rho[i] * rho[i]) + pres[j] / (rho[j] * rho[j]))) * gw
        acc[i, 0] += coef * dx
        acc[i, 1] += coef * dy
        acc[i, 2] += coef * dz
        w = _cubic_w1(q, sigma)
        vcoef = xsph_eps[i] * (2.0 * mass[j] / (rho[i] + rho[j])) * w
        dvel[i, 0] += vcoef * (vel[j, 0] - vel[i, 0])
        dvel[i, 1] += vcoef * (vel[j, 1] - vel[i, 1])
        dvel[i, 2] += vcoef * (vel[j, 2] - vel[i, 2])
    return acc_arr, dvel_arr
