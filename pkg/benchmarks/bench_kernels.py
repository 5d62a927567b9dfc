"""Time the compiled kernels against the numpy fallback.

Run with ``python3 benchmarks/bench_kernels.py``. Each kernel is also checked
for identical output across backends before it is timed.
"""
import argparse
import timeit

import numpy as np

from mwuf.kernels import available_backends, get_backend


def _scatter_case(rng, rows, k, batch):
    dst = np.zeros((rows, k), dtype=np.float32)
    index = rng.integers(0, rows, size=batch).astype(np.int64)
    src = rng.normal(size=(batch, k)).astype(np.float32)
    return lambda be: be.scatter_add_rows(dst.copy(), index, src), (dst, index, src)


def _adam_case(rng, rows, k, batch):
    param = rng.normal(size=(rows, k)).astype(np.float32)
    grad = rng.normal(size=(rows, k)).astype(np.float32)
    touched = np.unique(rng.integers(0, rows, size=batch)).astype(np.int64)

    def run(be):
        p, m, v = param.copy(), np.zeros_like(param), np.zeros_like(param)
        be.sparse_adam_rows(p, grad, m, v, touched, 1e-3, 0.9, 0.999, 1e-8, 0.1, 0.001)
        return p
    return run


def _auc_case(rng, n):
    scores = np.sort(np.round(rng.random(n), 3))
    labels = (rng.random(n) < 0.3).astype(np.int8)
    return lambda be: be.rank_auc_sorted(scores, labels)


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--repeat", type=int, default=5)
    ap.add_argument("--number", type=int, default=20)
    args = ap.parse_args(argv)

    backends = {name: get_backend(name) for name in available_backends()}
    if len(backends) == 1:
        print("compiled backend not built; timing the numpy fallback only")
    rng = np.random.default_rng(0)
    scatter_run, (dst, index, src) = _scatter_case(rng, 6000, 16, 256)

    def scatter_out(be):
        out = dst.copy()
        be.scatter_add_rows(out, index, src)
        return out

    cases = {
        "scatter_add_rows (6000x16, batch 256)": (scatter_run, scatter_out),
        "sparse_adam_rows (6000x16, ~250 rows)": (_adam_case(rng, 6000, 16, 256),) * 2,
        "rank_auc_sorted (n=100000)": (_auc_case(rng, 100_000),) * 2,
    }
    print(f"{'kernel':42s}" + "".join(f"{n:>14s}" for n in backends) + "   speedup")
    for label, (run, check) in cases.items():
        outputs = [np.asarray(check(be)) for be in backends.values()]
        for other in outputs[1:]:
            if not np.array_equal(outputs[0], other):
                raise SystemExit(f"{label}: backends disagree")
        times = {name: min(timeit.repeat(lambda: run(be), repeat=args.repeat,
                                         number=args.number)) / args.number
                 for name, be in backends.items()}
        line = f"{label:42s}" + "".join(f"{t * 1e6:12.1f}us" for t in times.values())
        if "cython" in times:
            line += f"   {times['python'] / times['cython']:6.1f}x"
        print(line)


if __name__ == "__main__":
    main()
