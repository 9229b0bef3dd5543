# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled kernels: run-length mask coding and linear assignment.

Mirrors ``_kernels_py`` exactly, including tie-breaking.
"""
import numpy as np
cimport numpy as cnp
from libc.math cimport INFINITY

cnp.import_array()


def rle_encode(mask):
    cdef cnp.uint8_t[::1] flat = np.ascontiguousarray(
        np.asarray(mask, dtype=np.uint8).ravel(order="F"))
    cdef Py_ssize_t n = flat.shape[0]
    cdef Py_ssize_t i
    cdef long run = 0
    cdef cnp.uint8_t current = 0
    counts = []
    for i in range(n):
        if flat[i] != current:
            counts.append(run)
            run = 0
            current = flat[i]
        run += 1
    counts.append(run)
    return counts


def rle_decode(counts, int height, int width):
    out = np.zeros(height * width, dtype=np.uint8)
    cdef cnp.uint8_t[::1] flat = out
    cdef long pos = 0
    cdef long run, k
    cdef int value = 0
    for run in counts:
        if value:
            for k in range(pos, pos + run):
                flat[k] = 1
        pos += run
        value ^= 1
    return out.reshape((height, width), order="F")


def rle_area(counts):
    cdef long total = 0
    cdef Py_ssize_t i
    cdef Py_ssize_t n = len(counts)
    for i in range(1, n, 2):
        total += <long>counts[i]
    return total


def rle_intersection(counts_a, counts_b):
    cdef long[::1] a = np.asarray(counts_a, dtype=np.int_)
    cdef long[::1] b = np.asarray(counts_b, dtype=np.int_)
    cdef Py_ssize_t na = a.shape[0], nb = b.shape[0]
    cdef Py_ssize_t ia = 0, ib = 0
    cdef long ra = a[0] if na else 0
    cdef long rb = b[0] if nb else 0
    cdef long step, inter = 0
    cdef int va = 0, vb = 0
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
                ra = a[ia]
        while rb == 0 and ib < nb:
            ib += 1
            vb ^= 1
            if ib < nb:
                rb = b[ib]
    return inter


def linear_assignment(cost):
    cdef double[:, ::1] c = np.ascontiguousarray(cost, dtype=np.float64)
    cdef Py_ssize_t n = c.shape[0], m = c.shape[1]
    if n > m:
        raise ValueError("more rows than columns")
    cdef double[::1] u = np.zeros(n + 1)
    cdef double[::1] v = np.zeros(m + 1)
    cdef double[::1] minv = np.empty(m + 1)
    cdef Py_ssize_t[::1] p = np.zeros(m + 1, dtype=np.intp)
    cdef Py_ssize_t[::1] way = np.zeros(m + 1, dtype=np.intp)
    cdef cnp.uint8_t[::1] used = np.zeros(m + 1, dtype=np.uint8)
    cdef Py_ssize_t i, j, j0, j1, i0
    cdef double delta, cur, ui0
    for i in range(1, n + 1):
        p[0] = i
        j0 = 0
        for j in range(m + 1):
            minv[j] = INFINITY
            used[j] = 0
        while True:
            used[j0] = 1
            i0 = p[j0]
            ui0 = u[i0]
            delta = INFINITY
            j1 = 0
            for j in range(1, m + 1):
                if not used[j]:
                    cur = c[i0 - 1, j - 1] - ui0 - v[j]
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
