"""Convergence sweeps for k = 1 (levels 2-5) and k = 2 (levels 2-4).

Writes ``convergence_k{k}.csv`` and ``.svg`` into the output directory and
prints the observed rates.
"""

import argparse
import logging
from dataclasses import dataclass
from pathlib import Path

from hdivbiot.verification import NORMS, convergence_study, plot_convergence


@dataclass(frozen=True)
class Sweep:
    k: int
    levels: tuple[int, ...]
    theta: float = 0.501
    lam: float = 1.0


SWEEPS = (Sweep(1, (2, 3, 4, 5)), Sweep(2, (2, 3, 4)))


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--out", type=Path, default=Path("results"))
    ap.add_argument("--lam", type=float, default=1.0, help="Lame parameter lambda")
    ap.add_argument("--deep", action="store_true", help="extend to level 6 (k=1) / 5 (k=2)")
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(message)s")
    args.out.mkdir(parents=True, exist_ok=True)
    for sw in SWEEPS:
        levels = sw.levels + ((sw.levels[-1] + 1,) if args.deep else ())
        table = convergence_study(sw.k, levels, theta=sw.theta, lam=args.lam)
        table.to_csv(args.out / f"convergence_k{sw.k}.csv")
        plot_convergence(table, args.out / f"convergence_k{sw.k}.svg")
        print(f"k={sw.k}")
        for n in NORMS:
            print(f"  {n:6s} " + " ".join(f"{r:6.3f}" for r in table.rates(n)))


if __name__ == "__main__":
    main()
