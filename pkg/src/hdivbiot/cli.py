"""Command-line entry point: ``hdivbiot {solve,convergence,conserve,check}``."""

from __future__ import annotations

import argparse
import logging
import sys
import warnings
from dataclasses import dataclass, fields, replace
from pathlib import Path

from .fespace import MAX_DEGREE
from .linalg import SingularSystemError, SolveError, write_matrix_market
from .mesh import MAX_LEVEL, build_cartesian_mesh
from .stepper import TimeStepper, build_spaces, export_state, steps_for
from .verification import (
    TABLE1_DT,
    TABLE3,
    compute_errors,
    convergence_study,
    exact_solution,
    mass_balance_csv,
    mass_balance_problem,
    mass_balance_study,
    plot_convergence,
)

log = logging.getLogger("hdivbiot")

COMMANDS = ("solve", "convergence", "conserve", "check")
FORMATS = ("csv", "svg", "mtx")


class ConfigError(ValueError):
    """A run configuration violates a precondition."""


@dataclass
class RunConfig:
    command: str
    k: int = 1
    level: int = 3
    levels: tuple[int, ...] = (2, 3, 4, 5)
    dt: float | None = None
    theta: float = 0.501
    T: float = 0.5
    c_s: float = 0.0
    alpha: float = 1.0
    lam: float = 1.0
    mu: float = 1.0
    gamma: float | None = None
    out: Path = Path("results")
    formats: tuple[str, ...] = ("csv",)
    quick: bool = False

    def validate(self) -> "RunConfig":
        if self.command not in COMMANDS:
            raise ConfigError(f"unknown command {self.command!r}; choose from {', '.join(COMMANDS)}")
        if not 1 <= self.k <= MAX_DEGREE:
            raise ConfigError(f"k={self.k}: polynomial degree must lie in 1..{MAX_DEGREE}")
        if not 0 <= self.level <= MAX_LEVEL:
            raise ConfigError(f"level={self.level}: must lie in 0..{MAX_LEVEL}")
        if not self.levels or any(b <= a for a, b in zip(self.levels, self.levels[1:])):
            raise ConfigError(f"levels={self.levels}: must be a strictly increasing list")
        if self.command == "convergence" and (self.levels[0] < 2 or self.levels[-1] > 7):
            raise ConfigError(f"levels={self.levels}: convergence runs need levels within 2..7")
        if self.dt is not None and not self.dt > 0:
            raise ConfigError(f"dt={self.dt}: time step must be positive")
        if not 0 < self.theta <= 1:
            raise ConfigError(f"theta={self.theta}: must lie in (0, 1]")
        if not self.T > 0:
            raise ConfigError(f"T={self.T}: final time must be positive")
        if self.c_s < 0:
            raise ConfigError(f"c_s={self.c_s}: storage coefficient must be nonnegative")
        if not 0 < self.alpha <= 1:
            raise ConfigError(f"alpha={self.alpha}: Biot-Willis constant must lie in (0, 1]")
        if self.lam < 0:
            raise ConfigError(f"lambda={self.lam}: must be nonnegative")
        if not self.mu > 0:
            raise ConfigError(f"mu={self.mu}: shear modulus must be positive")
        if self.gamma is not None and not self.gamma > 0:
            raise ConfigError(f"gamma={self.gamma}: penalty must be positive")
        bad = set(self.formats) - set(FORMATS)
        if bad:
            raise ConfigError(f"unknown output format(s) {sorted(bad)}; choose from {FORMATS}")
        if self.command in ("solve", "convergence") and (self.c_s != 0 or self.alpha != 1):
            raise ConfigError("the manufactured solution requires c_s = 0 and alpha = 1")
        return self

    def time_step(self, level: int) -> float:
        if self.dt is not None:
            return self.dt
        try:
            return TABLE1_DT[self.k][level]
        except KeyError:
            raise ConfigError(f"no default time step for k={self.k}, level={level}; pass --dt") from None


# -- config parsing ---------------------------------------------------------------

_ALIASES = {"lambda": "lam", "cs": "c_s", "c-s": "c_s", "degree": "k", "final_time": "T", "t_final": "T"}


def _coerce(name: str, raw: str):
    if name in ("k", "level"):
        return int(raw)
    if name == "levels":
        return _parse_levels(raw)
    if name in ("dt", "gamma"):
        return None if raw.lower() in ("", "none", "default") else float(raw)
    if name in ("theta", "T", "c_s", "alpha", "lam", "mu"):
        return float(raw)
    if name == "out":
        return Path(raw)
    if name == "formats":
        return tuple(f.strip() for f in raw.split(",") if f.strip())
    if name == "quick":
        return raw.lower() in ("1", "true", "yes", "on")
    raise ConfigError(f"unknown configuration key {name!r}")


def _parse_levels(raw: str) -> tuple[int, ...]:
    raw = raw.strip()
    if ".." in raw:
        a, b = raw.split("..")
        return tuple(range(int(a), int(b) + 1))
    return tuple(int(v) for v in raw.replace(",", " ").split())


def read_config_file(path: str | Path) -> dict:
    """``key = value`` lines; ``#`` starts a comment."""
    out = {}
    for n, line in enumerate(Path(path).read_text().splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{n}: expected key = value")
        key, val = (s.strip() for s in line.split("=", 1))
        key = _ALIASES.get(key, key)
        try:
            out[key] = _coerce(key, val)
        except ValueError as exc:
            raise ConfigError(f"{path}:{n}: bad value for {key}: {exc}") from None
    return out


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="key = value file; command-line flags take precedence")
    common.add_argument("-k", "--degree", dest="k", type=int)
    common.add_argument("--level", type=int, help="refinement level, h = 2^-level")
    common.add_argument("--levels", type=_parse_levels, help="e.g. 2..5 or 2,3,4")
    common.add_argument("--dt", type=float, help="time step (default: per-level table value)")
    common.add_argument("--theta", type=float)
    common.add_argument("--T", dest="T", type=float, help="final time")
    common.add_argument("--c-s", dest="c_s", type=float)
    common.add_argument("--alpha", type=float)
    common.add_argument("--lambda", dest="lam", type=float)
    common.add_argument("--mu", type=float)
    common.add_argument("--gamma", type=float, help="interior penalty (default 4(k+1)(k+2))")
    common.add_argument("--out", type=Path, help="output directory")
    common.add_argument("--formats", type=lambda s: tuple(f for f in s.split(",") if f), help="csv,svg,mtx")
    common.add_argument("--quick", action="store_true", default=None, help="smaller check sweep")
    common.add_argument("-v", "--verbose", action="count", default=0)

    parser = argparse.ArgumentParser(prog="hdivbiot", description="H(div) finite elements for Biot consolidation")
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("solve", parents=[common], help="one run of the manufactured problem; writes final errors")
    sub.add_parser("convergence", parents=[common], help="error table over refinement levels")
    sub.add_parser("conserve", parents=[common], help="mass-balance ledger for the reference parameter sets")
    sub.add_parser("check", parents=[common], help="property checks (div-compat, coercivity, oracle, pencil)")
    return parser


def config_from_args(argv: list[str] | None = None) -> tuple[RunConfig, int]:
    ns = build_parser().parse_args(argv)
    values = read_config_file(ns.config) if ns.config else {}
    names = {f.name for f in fields(RunConfig)}
    for name in names - {"command"}:
        v = getattr(ns, name, None)
        if v is not None:
            values[name] = v
    unknown = set(values) - names
    if unknown:
        raise ConfigError(f"unknown configuration key(s) {sorted(unknown)}")
    cfg = replace(RunConfig(ns.command), **values)
    return cfg.validate(), ns.verbose


# -- commands ----------------------------------------------------------------------


def _problem_for(cfg: RunConfig) -> tuple:
    exact = exact_solution(lam=cfg.lam, mu=cfg.mu, alpha=cfg.alpha, c_s=cfg.c_s)
    return exact, exact.problem(gamma=cfg.gamma)


def _dump_matrix(cfg: RunConfig, stepper: TimeStepper, tag: str) -> None:
    if "mtx" in cfg.formats:
        path = write_matrix_market(cfg.out / f"system_{tag}.mtx", stepper.system.matrix,
                                   comment=f"block order p|w|u, offsets {stepper.system.offsets}")
        print(f"wrote {path}")


def cmd_solve(cfg: RunConfig) -> int:
    exact, problem = _problem_for(cfg)
    nsteps, dt = steps_for(cfg.T, cfg.time_step(cfg.level))
    spaces = build_spaces(build_cartesian_mesh(cfg.level), cfg.k, problem)
    stepper = TimeStepper(problem, spaces, dt, cfg.theta)
    _dump_matrix(cfg, stepper, f"k{cfg.k}_l{cfg.level}")
    state = stepper.initial_state()
    for _ in range(nsteps):
        state = stepper.step(state)
    err = compute_errors(state, exact, spaces, problem)
    lines = ["quantity,value", f"level,{cfg.level}", f"dofs,{spaces.n_dofs}", f"dt,{dt:.16e}", f"steps,{nsteps}"]
    for name in ("p", "w", "w_K", "u", "u_1h", "div_u", "p_proj"):
        lines.append(f"err_{name},{getattr(err, name):.16e}")
    worst = max((r.relative for r in stepper.conservation), default=0.0)
    lines.append(f"max_conservation_residual,{worst:.16e}")
    text = "\n".join(lines) + "\n"
    print(text, end="")
    if "csv" in cfg.formats:
        path = cfg.out / f"solve_k{cfg.k}_l{cfg.level}.csv"
        path.write_text(text)
        export_state(state, cfg.out / f"state_k{cfg.k}_l{cfg.level}.txt")
        print(f"wrote {path}")
    return 0


def cmd_convergence(cfg: RunConfig) -> int:
    dts = {lv: cfg.time_step(lv) for lv in cfg.levels}
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always")
        table = convergence_study(cfg.k, cfg.levels, dts, theta=cfg.theta, lam=cfg.lam, T=cfg.T, gamma=cfg.gamma)
    for w in caught:
        print(f"warning: {w.message}", file=sys.stderr)
    text = table.to_csv()
    print(text, end="")
    stem = f"convergence_k{cfg.k}"
    if "csv" in cfg.formats:
        (cfg.out / f"{stem}.csv").write_text(text)
        print(f"wrote {cfg.out / f'{stem}.csv'}")
    if "svg" in cfg.formats:
        print(f"wrote {plot_convergence(table, cfg.out / f'{stem}.svg')}")
    return 0


def cmd_conserve(cfg: RunConfig) -> int:
    dt = cfg.dt if cfg.dt is not None else 0.1
    defaults = RunConfig("conserve")
    custom = (cfg.c_s, cfg.alpha, cfg.lam) != (defaults.c_s, defaults.alpha, defaults.lam)
    params = [(cfg.c_s, cfg.alpha, cfg.lam)] if custom else list(TABLE3)
    rows = mass_balance_study(params, level=cfg.level, dt=dt, theta=cfg.theta, T=cfg.T, k=cfg.k)
    text = mass_balance_csv(rows)
    print(text, end="")
    if "csv" in cfg.formats:
        (cfg.out / "mass_balance.csv").write_text(text)
        print(f"wrote {cfg.out / 'mass_balance.csv'}")
    if "mtx" in cfg.formats:
        problem = mass_balance_problem(*params[0])
        spaces = build_spaces(build_cartesian_mesh(cfg.level), cfg.k, problem)
        _dump_matrix(cfg, TimeStepper(problem, spaces, dt, cfg.theta), f"mass_k{cfg.k}_l{cfg.level}")
    worst = max(r.defect for r in rows)
    if worst > 1e-11:
        print(f"mass defect {worst:.3e} exceeds 1e-11", file=sys.stderr)
        return 1
    return 0


def cmd_check(cfg: RunConfig) -> int:
    from .checks import run_all

    results = run_all(quick=cfg.quick)
    for r in results:
        print(r.line())
    if "csv" in cfg.formats:
        lines = ["check,passed"] + [f"{r.name},{int(r.passed)}" for r in results]
        (cfg.out / "checks.csv").write_text("\n".join(lines) + "\n")
    return 0 if all(r.passed for r in results) else 1


HANDLERS = {"solve": cmd_solve, "convergence": cmd_convergence, "conserve": cmd_conserve, "check": cmd_check}


def run(cfg: RunConfig) -> int:
    cfg.validate()
    cfg.out.mkdir(parents=True, exist_ok=True)
    return HANDLERS[cfg.command](cfg)


def main(argv: list[str] | None = None) -> int:
    try:
        cfg, verbose = config_from_args(argv)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    logging.basicConfig(level=logging.WARNING - 10 * min(verbose, 2), format="%(levelname)s %(name)s: %(message)s")
    try:
        return run(cfg)
    except (ConfigError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (SingularSystemError, SolveError) as exc:
        print(f"solver failure: {exc}", file=sys.stderr)
        return 3

