"""Convergence rates for the manufactured unit-square solution.

Runs three dyadic levels with k = 0 and k = 1 and prints the error table.
Usage: python demos/example1_rates.py
"""

from ddconvect.verify import convergence_study, rows_of

for k in (0, 1):
    print(f"k = {k}")
    print(f"{'h':>8} {'N':>7}  " + "  ".join(f"{n:>14}" for n in ("t", "sigma", "u", "phi", "p")))
    for row in rows_of(convergence_study(1, k, 3, coarse=4)):
        cells = []
        for e, r in zip(row.errors(), row.rates()):
            cells.append(f"{e:8.2e} " + ("  -- " if r is None else f"{r:5.2f}"))
        print(f"{row.h:8.4f} {row.N:7d}  " + "  ".join(cells))
