"""Compare the compiled chunk-digest kernel with the numpy fallback.

    python benchmarks/bench_kernels.py [--sizes 4096,65536,1048576] [--repeat 20]
"""

import argparse
import os
import sys
import timeit

from woss import kernels


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--sizes", default="4096,65536,1048576,8388608")
    ap.add_argument("--repeat", type=int, default=20)
    args = ap.parse_args(argv)

    impls = {"python": kernels.python_kernels.chunk_digest}
    if kernels.compiled_kernels is not None:
        impls["cython"] = kernels.compiled_kernels.chunk_digest
    else:
        print("compiled extension not built; timing the fallback only", file=sys.stderr)

    print(f"{'bytes':>10} " + " ".join(f"{n + ' MB/s':>14}" for n in impls) + "   speedup")
    for size in (int(s) for s in args.sizes.split(",")):
        data = os.urandom(size)
        digests = {fn(data) for fn in impls.values()}
        assert len(digests) == 1, "kernels disagree"
        rates = {}
        for name, fn in impls.items():
            fn(data)  # warm caches
            best = min(timeit.repeat(lambda: fn(data), number=1, repeat=args.repeat))
            rates[name] = size / best / 1e6
        speed = rates["cython"] / rates["python"] if "cython" in rates else float("nan")
        print(f"{size:>10} " + " ".join(f"{r:>14.1f}" for r in rates.values()) + f"   {speed:7.2f}x")


if __name__ == "__main__":
    main()
