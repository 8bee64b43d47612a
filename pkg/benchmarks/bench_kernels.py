"""Compare the compiled and pure-numpy convolution kernels.

Run with ``python benchmarks/bench_kernels.py``; the same table is printed
by ``ldarecon bench``.
"""
import argparse

from ldarecon import _backend
from ldarecon.harness import bench


def main():
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--repeat", type=int, default=5)
    args = parser.parse_args()
    print(f"active backend: {_backend.BACKEND}; available: {sorted(_backend.BACKENDS)}")
    print(bench.format_rows(bench.run(repeat=args.repeat)))


if __name__ == "__main__":
    main()
