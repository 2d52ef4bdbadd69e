"""Forward-time scaling of single-head attention against the Mamba scan.

Pins BLAS to one thread. Expect a few minutes at the default lengths.
"""

import argparse

from mambasip.bench import KINDS, bench_scaling, stepwise_memory, write_bench


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--kinds", nargs="+", choices=KINDS, default=list(KINDS))
    ap.add_argument("--lengths", type=int, nargs="+", default=[256, 512, 1024, 2048, 4096, 8192])
    ap.add_argument("--d", type=int, default=384)
    ap.add_argument("--reps", type=int, default=5)
    ap.add_argument("--out", default="bench.csv")
    a = ap.parse_args()

    reports = []
    for kind in a.kinds:
        r = bench_scaling(kind, a.lengths, a.d, a.reps)
        reports.append(r)
        for n, s, sp in zip(r.lengths, r.seconds, r.spread):
            mark = "  (below timer resolution)" if n in r.flagged else ""
            print(f"{kind:15s} T={n:5d}  {s * 1e3:10.2f} ms  spread {sp:5.1%}{mark}")
        print(f"{kind:15s} fitted exponent {r.exponent:.3f}")
    write_bench(a.out, reports)

    for row in stepwise_memory([256, 1024, 4096], a.d):
        print(f"stepwise T={row['length']:5d}  state {row['state_bytes']} B  peak {row['peak_bytes']} B")
    print(f"-> {a.out}")


if __name__ == "__main__":
    main()
