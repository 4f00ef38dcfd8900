"""Mass-balance ledger for the reference parameter sets, plus a time-step sweep.

The defect ``||Delta m(0.5)||`` should sit at round-off level for every
parameter set and every step size.
"""

import argparse
from dataclasses import dataclass
from pathlib import Path

from hdivbiot.verification import TABLE3, mass_balance_csv, mass_balance_study


@dataclass(frozen=True)
class Setting:
    level: int = 3
    dt: float = 0.1
    theta: float = 0.501
    T: float = 0.5


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--out", type=Path, default=Path("results"))
    ap.add_argument("--sweep", action="store_true", help="also vary dt and theta")
    args = ap.parse_args()
    args.out.mkdir(parents=True, exist_ok=True)

    base = Setting()
    rows = mass_balance_study(tuple(TABLE3), base.level, base.dt, base.theta, base.T)
    print(mass_balance_csv(rows, args.out / "mass_balance.csv"), end="")

    if args.sweep:
        print("\ndt,theta,worst_defect")
        for dt in (0.1, 0.05, 0.01):
            for theta in (0.501, 1.0):
                r = mass_balance_study(tuple(TABLE3), base.level, dt, theta, base.T)
                print(f"{dt},{theta},{max(x.defect for x in r):.3e}")


if __name__ == "__main__":
    main()
