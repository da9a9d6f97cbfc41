# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled Levenshtein kernels over Unicode scalar values."""

from libc.stdlib cimport malloc, free


cdef Py_ssize_t _distance(Py_UCS4* a, Py_ssize_t n, Py_UCS4* b, Py_ssize_t m) nogil:
    cdef Py_ssize_t* row = <Py_ssize_t*> malloc((m + 1) * sizeof(Py_ssize_t))
    cdef Py_ssize_t i, j, diag, up, best
    for j in range(m + 1):
        row[j] = j
    for i in range(1, n + 1):
        diag = row[0]
        row[0] = i
        for j in range(1, m + 1):
            up = row[j]
            best = diag if a[i - 1] == b[j - 1] else diag + 1
            if up + 1 < best:
                best = up + 1
            if row[j - 1] + 1 < best:
                best = row[j - 1] + 1
            row[j] = best
            diag = up
    best = row[m]
    free(row)
    return best


cdef Py_UCS4* _scalars(str s):
    cdef Py_ssize_t n = len(s), i = 0
    cdef Py_UCS4* out = <Py_UCS4*> malloc((n + 1) * sizeof(Py_UCS4))
    cdef Py_UCS4 ch
    for ch in s:
        out[i] = ch
        i += 1
    return out


def levenshtein(str a, str b):
    """Unit-cost edit distance between ``a`` and ``b``."""
    cdef Py_ssize_t n = len(a), m = len(b), d
    if n == 0:
        return m
    if m == 0:
        return n
    # keep the shorter string on the row axis
    if m > n:
        a, b = b, a
        n, m = m, n
    cdef Py_UCS4* pa = _scalars(a)
    cdef Py_UCS4* pb = _scalars(b)
    with nogil:
        d = _distance(pa, n, pb, m)
    free(pa)
    free(pb)
    return d


def levenshtein_many(list pairs):
    """Distances for a list of ``(a, b)`` string pairs."""
    return [levenshtein(a, b) for a, b in pairs]
