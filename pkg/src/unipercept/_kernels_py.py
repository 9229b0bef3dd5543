"""Pure-Python reference kernels.

Same signatures as the compiled ``_kernels`` extension. Used when the
extension is not built or when ``UNIPERCEPT_PURE_PYTHON=1``.
"""
import math

import numpy as np


def rle_encode(mask):
    """Column-major, background-first run lengths of a 2-D 0/1 array."""
    flat = np.asarray(mask, dtype=np.uint8).ravel(order="F")
    counts = []
    current = 0
    run = 0
    for value in flat.tolist():
        if value != current:
            counts.append(run)
            run = 0
            current = value
        run += 1
    counts.append(run)
    return counts


def rle_decode(counts, height, width):
    flat = np.zeros(height * width, dtype=np.uint8)
    pos = 0
    value = 0
    for run in counts:
        if value:
            flat[pos:pos + run] = 1
        pos += run
        value ^= 1
    return flat.reshape((height, width), order="F")


def rle_area(counts):
    return sum(counts[1::2])


def rle_intersection(counts_a, counts_b):
    """Foreground overlap of two run-length sequences over the same canvas."""
    ia = ib = 0
    na, nb = len(counts_a), len(counts_b)
    # remaining length of the current run in each sequence
    ra = counts_a[0] if na else 0
    rb = counts_b[0] if nb else 0
    va = vb = 0
    inter = 0
    while ia < na and ib < nb:
        step = ra if ra < rb else rb
        if va and vb:
            inter += step
        ra -= step
        rb -= step
        while ra == 0 and ia < na:
            ia += 1
            va ^= 1
            if ia < na:
                ra = counts_a[ia]
        while rb == 0 and ib < nb:
            ib += 1
            vb ^= 1
            if ib < nb:
                rb = counts_b[ib]
    return inter


def linear_assignment(cost):
    """Min-cost assignment of every row of ``cost`` (n x m, n <= m) to a distinct column.

    Shortest augmenting path with potentials, O(n^2 m). Columns are scanned
    in increasing order and only a strictly smaller slack replaces the
    current minimum, so ties resolve toward the lowest index.

    Returns a list ``col_of_row`` of length n.
    """
    cost = np.asarray(cost, dtype=np.float64)
    n, m = cost.shape
    if n > m:
        raise ValueError("more rows than columns")
    rows = cost.tolist()
    inf = math.inf
    u = [0.0] * (n + 1)
    v = [0.0] * (m + 1)
    p = [0] * (m + 1)
    way = [0] * (m + 1)
    for i in range(1, n + 1):
        p[0] = i
        j0 = 0
        minv = [inf] * (m + 1)
        used = [False] * (m + 1)
        while True:
            used[j0] = True
            i0 = p[j0]
            row = rows[i0 - 1]
            ui0 = u[i0]
            delta = inf
            j1 = 0
            for j in range(1, m + 1):
                if not used[j]:
                    cur = row[j - 1] - ui0 - v[j]
                    if cur < minv[j]:
                        minv[j] = cur
                        way[j] = j0
                    if minv[j] < delta:
                        delta = minv[j]
                        j1 = j
            for j in range(m + 1):
                if used[j]:
                    u[p[j]] += delta
                    v[j] -= delta
                else:
                    minv[j] -= delta
            j0 = j1
            if p[j0] == 0:
                break
        while True:
            j1 = way[j0]
            p[j0] = p[j1]
            j0 = j1
            if j0 == 0:
                break
    col_of_row = [0] * n
    for j in range(1, m + 1):
        if p[j]:
            col_of_row[p[j] - 1] = j - 1
    return col_of_row
