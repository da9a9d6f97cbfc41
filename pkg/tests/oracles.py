"""Independent reference implementations used only by the tests."""

from __future__ import annotations


def naive_edit_distance(a: str, b: str) -> int:
    """Full (len(a)+1) x (len(b)+1) Levenshtein table."""
    table = [[0] * (len(b) + 1) for _ in range(len(a) + 1)]
    for i in range(len(a) + 1):
        table[i][0] = i
    for j in range(len(b) + 1):
        table[0][j] = j
    for i in range(1, len(a) + 1):
        for j in range(1, len(b) + 1):
            table[i][j] = min(
                table[i - 1][j] + 1,
                table[i][j - 1] + 1,
                table[i - 1][j - 1] + (a[i - 1] != b[j - 1]),
            )
    return table[len(a)][len(b)]


def fullsort_topk(values, k: int) -> list[int]:
    order = sorted(range(len(values)), key=lambda i: (-values[i], i))
    return sorted(order[:k])


def scalar_deltas(base: list[float], expert: list[float]) -> list[float]:
    out = []
    for x, y in zip(base, expert):
        d = y - x
        out.append(d if d >= 0 else -d)
    return out


def central_difference(f, x: float, h: float) -> float:
    return (f(x + h) - f(x - h)) / (2 * h)


def table_edit_distance(a: str, b: str) -> int:
    """The same full quadratic table, filled one row at a time with numpy.

    Each row takes substitution/deletion moves elementwise, then resolves
    insertions with a running minimum of ``row[j] - j``.
    """
    import numpy as np

    bs = np.array([ord(c) for c in b], dtype=np.int64)
    cols = np.arange(len(b) + 1)
    prev = cols.copy()
    for i, ch in enumerate(a, 1):
        cur = np.empty_like(prev)
        cur[0] = i
        cur[1:] = np.minimum(prev[1:] + 1, prev[:-1] + (bs != ord(ch)))
        cur = np.minimum.accumulate(cur - cols) + cols
        prev = cur
    return int(prev[-1])
