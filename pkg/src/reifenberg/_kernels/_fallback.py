"""Pure numpy/scipy versions of the compiled kernels (same signatures)."""

import numpy as np
from scipy import ndimage


def greedy_select(indptr, indices, m):
    blocked = np.zeros(m, dtype=bool)
    chosen = np.zeros(m, dtype=bool)
    for i in range(m):
        if blocked[i]:
            continue
        chosen[i] = True
        blocked[indices[indptr[i]:indptr[i + 1]]] = True
    return chosen


def greedy_coloring(indptr, indices, m, max_colors):
    color = np.zeros(m, dtype=np.int32)
    stamp = np.zeros(m, dtype=np.int32)
    left = m
    c = 0
    while left > 0:
        c += 1
        if c > max_colors:
            return color, c
        for i in range(m):
            if color[i] != 0 or stamp[i] == c:
                continue
            color[i] = c
            left -= 1
            stamp[indices[indptr[i]:indptr[i + 1]]] = c
    return color, c


def mcshane(sites, values, L, queries, chunk=2048):
    out = np.empty((queries.shape[0], values.shape[1]))
    for s in range(0, queries.shape[0], chunk):
        q = queries[s:s + chunk]
        dist = L * np.sqrt(((q[:, None, :] - sites[None, :, :]) ** 2).sum(-1))
        hi = (values[None, :, :] + dist[:, :, None]).min(axis=1)
        lo = (values[None, :, :] - dist[:, :, None]).max(axis=1)
        out[s:s + chunk] = 0.5 * (hi + lo)
    return out


def pair_ratio_max(tang, norm, is_new, tiny_t, tiny_n):
    k = tang.shape[0]
    iu, ju = np.triu_indices(k, 1)
    keep = (is_new[iu] != 0) | (is_new[ju] != 0)
    iu, ju = iu[keep], ju[keep]
    dt = np.sqrt(((tang[iu] - tang[ju]) ** 2).sum(-1))
    dn = np.sqrt(((norm[iu] - norm[ju]) ** 2).sum(-1))
    small = dt < tiny_t
    vert = small & (dn > tiny_n)
    nvert = int(vert.sum())
    ndup = int((small & ~vert).sum())
    vi = vj = -1
    if nvert:
        w = np.flatnonzero(vert)[0]
        vi, vj = int(iu[w]), int(ju[w])
    ok = ~small
    if not ok.any():
        return 0.0, -1, -1, nvert, vi, vj, ndup
    ratio = np.where(ok, dn / np.where(ok, dt, 1.0), -1.0)
    w = int(np.argmax(ratio))
    best = float(ratio[w])
    if best <= 0.0:
        return 0.0, -1, -1, nvert, vi, vj, ndup
    return best, int(iu[w]), int(ju[w]), nvert, vi, vj, ndup


def flood_label(free, shape):
    grid = np.asarray(free, dtype=bool).reshape(tuple(int(s) for s in shape))
    structure = ndimage.generate_binary_structure(grid.ndim, 1)
    lab, count = ndimage.label(grid, structure=structure)
    vols = np.bincount(lab.ravel(), minlength=count + 1)[1:].astype(np.int64)
    # first cell in C order sits in the first slab of the bounding box
    reps = np.empty(count, dtype=np.int64)
    for k, sl in enumerate(ndimage.find_objects(lab)):
        slab = lab[(slice(sl[0].start, sl[0].start + 1),) + sl[1:]]
        loc = np.unravel_index(int(np.argmax(slab.ravel() == k + 1)), slab.shape)
        reps[k] = np.ravel_multi_index(tuple(s.start + i for s, i in zip(sl, loc)), lab.shape)
    return lab.ravel().astype(np.int32) - 1, int(count), vols, reps


def nearest_dist_brute(A, B, chunk=1024):
    dist = np.empty(A.shape[0])
    arg = np.empty(A.shape[0], dtype=np.int64)
    for s in range(0, A.shape[0], chunk):
        d2 = ((A[s:s + chunk, None, :] - B[None, :, :]) ** 2).sum(-1)
        j = d2.argmin(axis=1)
        arg[s:s + chunk] = j
        dist[s:s + chunk] = np.sqrt(d2[np.arange(j.size), j])
    return dist, arg


def ball_ratio_local(pts, is_new, centers, frames, nframes, radius, tiny_t, tiny_n):
    nb = centers.shape[0]
    best = np.zeros(nb)
    wit = np.full((nb, 4), -1, dtype=np.int64)
    nvert = np.zeros(nb, dtype=np.int64)
    for b in range(nb):
        rel = pts - centers[b]
        members = np.flatnonzero((rel ** 2).sum(1) < radius * radius)
        if members.size < 2:
            continue
        rel = rel[members]
        r, i, j, nv, vi, vj, _ = pair_ratio_max(
            rel @ frames[b].T, rel @ nframes[b].T, is_new[members], tiny_t, tiny_n
        )
        best[b] = r
        nvert[b] = nv
        if i >= 0:
            wit[b, 0], wit[b, 1] = members[i], members[j]
        if vi >= 0:
            wit[b, 2], wit[b, 3] = members[vi], members[vj]
    return best, wit, nvert
