# cython: language_level=3
"""Compiled inner loops.  Signatures mirror ``_fallback.py`` exactly."""

import numpy as np
cimport numpy as cnp
from libc.math cimport sqrt, fabs

cnp.import_array()


def greedy_select(const cnp.int64_t[::1] indptr, const cnp.int64_t[::1] indices, Py_ssize_t m):
    cdef cnp.uint8_t[::1] blocked = np.zeros(m, dtype=np.uint8)
    cdef cnp.uint8_t[::1] chosen = np.zeros(m, dtype=np.uint8)
    cdef Py_ssize_t i, k
    for i in range(m):
        if blocked[i]:
            continue
        chosen[i] = 1
        for k in range(indptr[i], indptr[i + 1]):
            blocked[indices[k]] = 1
    return np.asarray(chosen).astype(bool)


def greedy_coloring(const cnp.int64_t[::1] indptr, const cnp.int64_t[::1] indices, Py_ssize_t m,
                    Py_ssize_t max_colors):
    cdef cnp.int32_t[::1] color = np.zeros(m, dtype=np.int32)
    cdef cnp.int32_t[::1] stamp = np.zeros(m, dtype=np.int32)
    cdef Py_ssize_t i, k, left = m
    cdef int c = 0
    while left > 0:
        c += 1
        if c > max_colors:
            return np.asarray(color), c
        for i in range(m):
            if color[i] != 0 or stamp[i] == c:
                continue
            color[i] = c
            left -= 1
            for k in range(indptr[i], indptr[i + 1]):
                stamp[indices[k]] = c
    return np.asarray(color), c


def mcshane(const double[:, ::1] sites, const double[:, ::1] values, double L,
            const double[:, ::1] queries):
    cdef Py_ssize_t ns = sites.shape[0], d = sites.shape[1], nc = values.shape[1]
    cdef Py_ssize_t nq = queries.shape[0]
    cdef cnp.ndarray[cnp.float64_t, ndim=2] out = np.empty((nq, nc))
    cdef double[:, ::1] o = out
    cdef double[::1] lo = np.empty(nc), hi = np.empty(nc)
    cdef Py_ssize_t q, s, t, c
    cdef double dist, diff, v
    for q in range(nq):
        for c in range(nc):
            hi[c] = 1e300
            lo[c] = -1e300
        for s in range(ns):
            dist = 0.0
            for t in range(d):
                diff = queries[q, t] - sites[s, t]
                dist += diff * diff
            dist = L * sqrt(dist)
            for c in range(nc):
                v = values[s, c]
                if v + dist < hi[c]:
                    hi[c] = v + dist
                if v - dist > lo[c]:
                    lo[c] = v - dist
        for c in range(nc):
            o[q, c] = 0.5 * (hi[c] + lo[c])
    return out


def pair_ratio_max(const double[:, ::1] tang, const double[:, ::1] norm,
                   const cnp.uint8_t[::1] is_new, double tiny_t, double tiny_n):
    """Max of |dN|/|dT| over pairs with at least one flagged point."""
    cdef Py_ssize_t k = tang.shape[0], d = tang.shape[1], c = norm.shape[1]
    cdef Py_ssize_t i, j, t
    cdef double dt, dn, diff, ratio, best = 0.0
    cdef Py_ssize_t bi = -1, bj = -1, vi = -1, vj = -1, nvert = 0, ndup = 0
    for i in range(k):
        for j in range(i + 1, k):
            if not (is_new[i] or is_new[j]):
                continue
            dt = 0.0
            for t in range(d):
                diff = tang[i, t] - tang[j, t]
                dt += diff * diff
            dn = 0.0
            for t in range(c):
                diff = norm[i, t] - norm[j, t]
                dn += diff * diff
            dt = sqrt(dt)
            dn = sqrt(dn)
            if dt < tiny_t:
                if dn > tiny_n:
                    if nvert == 0:
                        vi = i
                        vj = j
                    nvert += 1
                else:
                    ndup += 1
                continue
            ratio = dn / dt
            if ratio > best:
                best = ratio
                bi = i
                bj = j
    return best, bi, bj, nvert, vi, vj, ndup


def flood_label(const cnp.uint8_t[::1] free, cnp.int64_t[::1] shape):
    """Face-connected labels of ``free`` cells (C order); -1 elsewhere.

    Labels are numbered by their first cell in C order.  Returns the labels,
    their count, the cell count of each label and its first cell.
    """
    cdef Py_ssize_t ncell = free.shape[0], nd = shape.shape[0]
    cdef cnp.ndarray[cnp.int32_t, ndim=1] lab_arr = np.full(ncell, -1, dtype=np.int32)
    cdef cnp.int32_t[::1] lab = lab_arr
    # breadth-first frontier in a ring buffer, doubled when full
    cdef Py_ssize_t cap = 1024
    cdef cnp.int64_t[::1] queue = np.empty(cap, dtype=np.int64)
    cdef cnp.int64_t[::1] stride = np.empty(nd, dtype=np.int64)
    cdef Py_ssize_t ax, start, head, size, cur, nb, coord, side, size_total
    cdef int count = 0
    vols = []
    reps = []
    stride[nd - 1] = 1
    for ax in range(nd - 2, -1, -1):
        stride[ax] = stride[ax + 1] * shape[ax + 1]
    for start in range(ncell):
        if not free[start] or lab[start] >= 0:
            continue
        lab[start] = count
        head = 0
        size = 1
        size_total = 1
        queue[0] = start
        while size > 0:
            cur = queue[head]
            head += 1
            if head == cap:
                head = 0
            size -= 1
            for ax in range(nd):
                coord = (cur // stride[ax]) % shape[ax]
                for side in range(2):
                    if side == 0:
                        if coord == 0:
                            continue
                        nb = cur - stride[ax]
                    else:
                        if coord == shape[ax] - 1:
                            continue
                        nb = cur + stride[ax]
                    if free[nb] and lab[nb] < 0:
                        lab[nb] = count
                        if size == cap:
                            queue = _grow(queue, head, size)
                            head = 0
                            cap = queue.shape[0]
                        queue[(head + size) % cap] = nb
                        size += 1
                        size_total += 1
        vols.append(size_total)
        reps.append(start)
        count += 1
    return lab_arr, count, np.asarray(vols, dtype=np.int64), np.asarray(reps, dtype=np.int64)


cdef cnp.int64_t[::1] _grow(cnp.int64_t[::1] queue, Py_ssize_t head, Py_ssize_t size):
    cdef Py_ssize_t cap = queue.shape[0], i
    cdef cnp.int64_t[::1] out = np.empty(2 * cap, dtype=np.int64)
    for i in range(size):
        out[i] = queue[(head + i) % cap]
    return out


def nearest_dist_brute(const double[:, ::1] A, const double[:, ::1] B):
    """Exhaustive nearest distance from every row of A to the rows of B."""
    cdef Py_ssize_t na = A.shape[0], nb = B.shape[0], n = A.shape[1]
    cdef cnp.ndarray[cnp.float64_t, ndim=1] dist_arr = np.empty(na)
    cdef cnp.ndarray[cnp.int64_t, ndim=1] arg_arr = np.empty(na, dtype=np.int64)
    cdef double[::1] dist = dist_arr
    cdef cnp.int64_t[::1] arg = arg_arr
    cdef Py_ssize_t i, j, t, bj
    cdef double best, s, diff
    for i in range(na):
        best = 1e300
        bj = -1
        for j in range(nb):
            s = 0.0
            for t in range(n):
                diff = A[i, t] - B[j, t]
                s += diff * diff
                if s >= best:
                    break
            if s < best:
                best = s
                bj = j
        dist[i] = sqrt(best)
        arg[i] = bj
    return dist_arr, arg_arr


def ball_ratio_local(const double[:, ::1] pts, const cnp.uint8_t[::1] is_new,
                     const double[:, ::1] centers, const double[:, :, ::1] frames,
                     const double[:, :, ::1] nframes, double radius, double tiny_t, double tiny_n):
    """Per-ball max of |dN|/|dT| over pairs of ``pts`` inside B(center, radius)
    with at least one new point.

    Coordinates are taken relative to each center in its frames ``frames[b]``
    (d, n) and ``nframes[b]`` (c, n).  Witness columns: ratio pair, first
    vertical pair (local indices, -1 if none).
    """
    cdef Py_ssize_t m = pts.shape[0], nb = centers.shape[0], n = pts.shape[1]
    cdef Py_ssize_t d = frames.shape[1], c = nframes.shape[1]
    cdef cnp.ndarray[cnp.float64_t, ndim=1] best_arr = np.zeros(nb)
    cdef cnp.ndarray[cnp.int64_t, ndim=2] wit_arr = np.full((nb, 4), -1, dtype=np.int64)
    cdef cnp.ndarray[cnp.int64_t, ndim=1] nvert_arr = np.zeros(nb, dtype=np.int64)
    cdef double[::1] best = best_arr
    cdef cnp.int64_t[:, ::1] wit = wit_arr
    cdef cnp.int64_t[::1] nvert = nvert_arr
    cdef double[:, ::1] T = np.empty((max(m, 1), d))
    cdef double[:, ::1] N = np.empty((max(m, 1), c))
    cdef cnp.int64_t[::1] mem = np.empty(max(m, 1), dtype=np.int64)
    cdef Py_ssize_t b, i, j, t, s, k, gi, gj
    cdef double v, dt, dn, diff, ratio, r2 = radius * radius
    for b in range(nb):
        k = 0
        for i in range(m):
            v = 0.0
            for s in range(n):
                diff = pts[i, s] - centers[b, s]
                v += diff * diff
            if v < r2:
                mem[k] = i
                for t in range(d):
                    v = 0.0
                    for s in range(n):
                        v += (pts[i, s] - centers[b, s]) * frames[b, t, s]
                    T[k, t] = v
                for t in range(c):
                    v = 0.0
                    for s in range(n):
                        v += (pts[i, s] - centers[b, s]) * nframes[b, t, s]
                    N[k, t] = v
                k += 1
        for i in range(k):
            gi = mem[i]
            for j in range(i + 1, k):
                gj = mem[j]
                if not (is_new[gi] or is_new[gj]):
                    continue
                dt = 0.0
                for t in range(d):
                    diff = T[i, t] - T[j, t]
                    dt += diff * diff
                dn = 0.0
                for t in range(c):
                    diff = N[i, t] - N[j, t]
                    dn += diff * diff
                dt = sqrt(dt)
                dn = sqrt(dn)
                if dt < tiny_t:
                    if dn > tiny_n:
                        if nvert[b] == 0:
                            wit[b, 2] = gi
                            wit[b, 3] = gj
                        nvert[b] += 1
                    continue
                ratio = dn / dt
                if ratio > best[b]:
                    best[b] = ratio
                    wit[b, 0] = gi
                    wit[b, 1] = gj
    return best_arr, wit_arr, nvert_arr
