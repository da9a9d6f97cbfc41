"""Compare the compiled edit-distance kernel with the pure-Python fallback.

    python3 benchmarks/bench_kernels.py [--pairs 300] [--repeat 3]
"""

import argparse
import random
import timeit

from lwaft import _editdist_py

try:
    from lwaft import _editdist
except ImportError:
    _editdist = None


def make_pairs(n, length, seed=0):
    rng = random.Random(seed)
    alphabet = "abcdefghij 0123456789;:=|"
    return [
        ("".join(rng.choice(alphabet) for _ in range(length)), "".join(rng.choice(alphabet) for _ in range(length)))
        for _ in range(n)
    ]


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--pairs", type=int, default=300)
    ap.add_argument("--repeat", type=int, default=3)
    args = ap.parse_args()
    backends = {"python": _editdist_py.levenshtein_many}
    if _editdist is not None:
        backends["cython"] = _editdist.levenshtein_many
    else:
        print("compiled kernel not built; timing the fallback only")
    print(f"{'length':>6} {'backend':>8} {'us/pair':>10}")
    for length in (16, 64, 200):
        pairs = make_pairs(args.pairs, length)
        ref = None
        for name, fn in backends.items():
            out = fn(pairs)
            assert ref is None or out == ref, "backends disagree"
            ref = out
            best = min(timeit.repeat(lambda: fn(pairs), number=1, repeat=args.repeat))
            print(f"{length:>6} {name:>8} {best / len(pairs) * 1e6:>10.1f}")


if __name__ == "__main__":
    main()
