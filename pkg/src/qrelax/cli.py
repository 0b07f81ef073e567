"""Command-line entry point.

Settings come from built-in defaults, then an optional JSON config file,
then flags (``--kebab-case`` versions of the config keys). The seed falls
back to ``$QRELAX_SEED`` and then the package default. Exit codes: 0 on
success, 1 on a runtime failure or a failed validation, 2 on a bad
configuration.
"""

from __future__ import annotations

import argparse
import csv
import json
import math
import sys
from dataclasses import asdict, dataclass, fields
from pathlib import Path

import numpy as np

from . import adiabatic as ad
from .ensemble import checkpoint_times, default_tau, run_ensemble
from .filtering import SdeConfig, basis_matrix, simulate_trajectory, wavefunction
from .output import fmt, write_csv, write_ensemble, write_gnuplot, write_manifest
from .relaxation import empirical_relaxation_time, tau_r, tau_r_bound
from .sde import strong_convergence_study
from .spectrum import WellModel, conservation_residual, transition_row
from .streams import resolve_seed

COMMANDS = ("spectrum", "trajectory", "ensemble", "density", "relax-time", "adiabatic", "validate", "crosscheck")
PI_COLUMNS = 8


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    alpha: float = 2.5
    n: int = 1
    sigma: float = 1.0
    truncation: int = 50
    mass: float = 1.0
    width: float = 1.0
    unit_mode: str = "dimensionless"
    M: int = 1000
    seed: int | None = None
    outcome: int | None = None
    t_end: float | None = None
    x_points: int = 512
    density: bool = False
    keep_paths: bool = False
    threads: int = 1
    output_dir: str | None = None
    plots: bool = False
    rate: float = 0.05
    dt: float = 1e-4
    paths: int = 1
    initial: int | None = None
    levels: str = "1,2,3"
    tol_energy: float = 1e-3
    quick: bool = False

    def validate(self) -> None:
        checks = [
            ("alpha", self.alpha >= 1, "must be >= 1"),
            ("n", self.n >= 1, "must be >= 1"),
            ("sigma", self.sigma > 0, "must be > 0"),
            ("truncation", self.truncation >= 2, "must be >= 2"),
            ("mass", self.mass > 0, "must be > 0"),
            ("width", self.width > 0, "must be > 0"),
            ("unit_mode", self.unit_mode in ("dimensionless", "physical"), "must be 'dimensionless' or 'physical'"),
            ("M", self.M >= 1, "must be >= 1"),
            ("outcome", self.outcome is None or 1 <= self.outcome <= self.truncation, "must lie in 1..truncation"),
            ("t_end", self.t_end is None or self.t_end > 0, "must be > 0"),
            ("x_points", self.x_points >= 2, "must be >= 2"),
            ("threads", self.threads >= 0, "must be >= 0 (0 = all cores)"),
            ("rate", self.rate >= 0, "must be >= 0"),
            ("dt", self.dt > 0, "must be > 0"),
            ("paths", self.paths >= 1, "must be >= 1"),
            ("initial", self.initial is None or 1 <= self.initial <= self.truncation, "must lie in 1..truncation"),
            ("tol_energy", self.tol_energy > 0, "must be > 0"),
        ]
        for name, ok, why in checks:
            if not ok:
                raise ConfigError(f"invalid {name}={getattr(self, name)!r}: {why}")
        try:
            self.level_list()
        except ValueError:
            raise ConfigError(f"invalid levels={self.levels!r}: expected comma-separated integers >= 1") from None

    def level_list(self) -> list[int]:
        out = [int(s) for s in str(self.levels).split(",") if s.strip()]
        if not out or min(out) < 1:
            raise ValueError(self.levels)
        return out

    def model(self) -> WellModel:
        return WellModel(mass=self.mass, width=self.width, alpha=self.alpha,
                         truncation=self.truncation, unit_mode=self.unit_mode)


_TYPES = {f.name: f.type for f in fields(RunConfig)}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    g = common.add_argument_group("configuration")
    g.add_argument("--config", type=Path, help="JSON file with any of the keys below (snake_case)")
    S = argparse.SUPPRESS
    g.add_argument("--alpha", type=float, default=S, help="expansion factor, >= 1 (default 2.5)")
    g.add_argument("--n", type=int, default=S, help="initial eigenstate of the original well (default 1)")
    g.add_argument("--sigma", type=float, default=S, help="reduction rate parameter (default 1)")
    g.add_argument("--truncation", "--N", dest="truncation", type=int, default=S,
                   help="number of post-expansion levels (default 50)")
    g.add_argument("--mass", type=float, default=S)
    g.add_argument("--width", type=float, default=S)
    g.add_argument("--unit-mode", dest="unit_mode", choices=("dimensionless", "physical"), default=S)
    g.add_argument("--M", type=int, default=S, help="ensemble size (default 1000)")
    g.add_argument("--seed", type=int, default=S, help="base seed (else $QRELAX_SEED, else built-in)")
    g.add_argument("--outcome", type=int, default=S, help="condition on terminal level j (default: sample)")
    g.add_argument("--t-end", dest="t_end", type=float, default=S, help="horizon (default 10 relaxation times)")
    g.add_argument("--x-points", dest="x_points", type=int, default=S)
    g.add_argument("--density", action="store_true", default=S, help="accumulate the mean density surface")
    g.add_argument("--keep-paths", dest="keep_paths", action="store_true", default=S)
    g.add_argument("--threads", type=int, default=S, help="worker processes, 0 = all cores (default 1)")
    g.add_argument("--output-dir", "-o", dest="output_dir", default=S)
    g.add_argument("--plots", action="store_true", default=S, help="write gnuplot scripts next to CSVs")
    g.add_argument("--rate", type=float, default=S, help="relative expansion speed v (adiabatic)")
    g.add_argument("--dt", type=float, default=S, help="time step (adiabatic)")
    g.add_argument("--paths", type=int, default=S, help="number of paths (adiabatic, crosscheck)")
    g.add_argument("--initial", type=int, default=S, help="initial eigenstate k (adiabatic; default: quench row)")
    g.add_argument("--levels", default=S, help="comma-separated levels j (relax-time)")
    g.add_argument("--tol-energy", dest="tol_energy", type=float, default=S)
    g.add_argument("--quick", action="store_true", default=S, help="smaller ensembles (validate)")

    p = argparse.ArgumentParser(prog="qrelax", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True, metavar="COMMAND")
    helps = {
        "spectrum": "transition table and conservation residual",
        "trajectory": "one filtering trajectory as CSV",
        "ensemble": "ensemble statistics, CSVs and manifest",
        "density": "position density series along one trajectory",
        "relax-time": "analytic and empirical relaxation times",
        "adiabatic": "occupation process under a slowly expanding well",
        "validate": "run the invariant suite; nonzero exit on failure",
        "crosscheck": "Euler-Maruyama vs filtering convergence study",
    }
    for name in COMMANDS:
        sub.add_parser(name, parents=[common], help=helps[name])
    return p


def parse_config(argv=None) -> tuple[str, RunConfig]:
    args = vars(build_parser().parse_args(argv))
    command = args.pop("command")
    path = args.pop("config", None)
    values: dict = {}
    if path is not None:
        try:
            data = json.loads(Path(path).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from None
        if not isinstance(data, dict):
            raise ConfigError("config file must hold a JSON object")
        unknown = set(data) - set(_TYPES)
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        values.update(data)
    values.update(args)
    cfg = RunConfig(**values)
    for f in fields(RunConfig):
        v = getattr(cfg, f.name)
        if v is None:
            continue
        want = {"float": (int, float), "int": (int,), "bool": (bool,), "str": (str,)}
        base = f.type.split(" ")[0] if isinstance(f.type, str) else f.type.__name__
        if base in want and (not isinstance(v, want[base]) or (base != "bool" and isinstance(v, bool))):
            raise ConfigError(f"invalid {f.name}={v!r}: expected {base}")
    cfg.seed = resolve_seed(cfg.seed)
    cfg.validate()
    return command, cfg


def _outdir(cfg: RunConfig, default: str) -> Path:
    return Path(cfg.output_dir or default)


def _manifest(cfg: RunConfig, command: str, outdir: Path, outputs) -> None:
    write_manifest(outdir / "manifest.json", command, cfg.seed, asdict(cfg), outputs)


def cmd_spectrum(cfg: RunConfig) -> int:
    model = cfg.model()
    row = transition_row(cfg.n, cfg.alpha, cfg.truncation)
    E = model.energies()
    rows = list(zip(range(1, cfg.truncation + 1), E, row.amplitudes, row.probs))
    header = ["m", "E_m", "amplitude", "pi"]
    residual = conservation_residual(cfg.n, cfg.alpha, cfg.truncation)
    if cfg.output_dir:
        out = Path(cfg.output_dir)
        write_csv(out / "spectrum.csv", header, rows)
        _manifest(cfg, "spectrum", out, ["spectrum.csv"])
    else:
        w = csv.writer(sys.stdout)
        w.writerow(header)
        for r in rows:
            w.writerow([fmt(v) for v in r])
    print(f"conservation_residual={residual:.6e} truncation_deficit={row.deficit:.6e}", file=sys.stderr)
    return 0


def _trajectory_grid(cfg: RunConfig, model: WellModel) -> np.ndarray:
    tau = default_tau(model, cfg.sigma, cfg.outcome)
    if cfg.t_end is None:
        return checkpoint_times(tau)
    return np.concatenate(([0.0], np.geomspace(min(tau / 100.0, cfg.t_end / 100.0), cfg.t_end, 64)))


def cmd_trajectory(cfg: RunConfig) -> int:
    model = cfg.model()
    row = transition_row(cfg.n, cfg.alpha, cfg.truncation)
    t = _trajectory_grid(cfg, model)
    tr = simulate_trajectory(row, SdeConfig(cfg.sigma, t, cfg.seed, cfg.outcome), model.energies())
    k = min(PI_COLUMNS, cfg.truncation)
    header = ["t", "B", "xi", "H", "V", "W"] + [f"P{m}" for m in range(1, k + 1)]
    rows = (list(r[:6]) + list(r[6]) for r in zip(t, tr.B_path, tr.xi_path, tr.H_path, tr.V_path, tr.W_path,
                                                   tr.posterior[:, :k]))
    out = _outdir(cfg, "qrelax-trajectory")
    write_csv(out / "trajectory.csv", header, rows)
    names = ["trajectory.csv"]
    if cfg.plots:
        write_gnuplot(out / "trajectory.gp", "trajectory.csv", 1, [(4, "H")], "t", "H", logx=True)
        names.append("trajectory.gp")
    _manifest(cfg, "trajectory", out, names)
    print(f"outcome j={tr.outcome_j}, H(t_end)={tr.H_path[-1]:.10g}, E_j={tr.E_j:.10g}; wrote {out}")
    return 0


def cmd_ensemble(cfg: RunConfig) -> int:
    s = run_ensemble(cfg.model(), cfg.sigma, cfg.M, cfg.outcome, cfg.seed, n=cfg.n, times=_trajectory_grid(cfg, cfg.model()),
                     density=cfg.density, x_points=cfg.x_points, keep_paths=cfg.keep_paths, threads=cfg.threads)
    out = _outdir(cfg, "qrelax-ensemble")
    names = write_ensemble(s, out, plots=cfg.plots)
    if s.H_paths is not None:
        write_csv(out / "H_paths.csv", ["t"] + [f"run{i}" for i in range(s.run_count)],
                  (np.concatenate(([tk], s.H_paths[:, k])) for k, tk in enumerate(s.checkpoint_times)))
        names.append("H_paths.csv")
    _manifest(cfg, "ensemble", out, names)
    print(f"M={s.run_count} mode={s.mode}: mean H {s.mean_H[0]:.6g} -> {s.mean_H[-1]:.6g}, "
          f"mean V {s.mean_V[0]:.6g} -> {s.mean_V[-1]:.6g}; wrote {out}")
    return 0


def cmd_density(cfg: RunConfig) -> int:
    model = cfg.model()
    row = transition_row(cfg.n, cfg.alpha, cfg.truncation)
    E = model.energies()
    t = _trajectory_grid(cfg, model)
    tr = simulate_trajectory(row, SdeConfig(cfg.sigma, t, cfg.seed, cfg.outcome), E)
    x = np.linspace(0.0, model.post_width, cfg.x_points)
    chi = basis_matrix(x, model)
    amps = row.normalised_amplitudes()
    rows = []
    for k, tk in enumerate(t):
        a = wavefunction(tr.xi_path[k], tk, cfg.sigma, amps, E).amplitudes
        rho = (a.real @ chi) ** 2 + (a.imag @ chi) ** 2
        rows.extend(zip(np.full(x.size, tk), x, rho))
    out = _outdir(cfg, "qrelax-density")
    write_csv(out / "density.csv", ["t", "x", "value"], rows)
    _manifest(cfg, "density", out, ["density.csv"])
    print(f"outcome j={tr.outcome_j}; {t.size} snapshots x {x.size} points; wrote {out}")
    return 0


def cmd_relax_time(cfg: RunConfig) -> int:
    model = cfg.model()
    row = transition_row(cfg.n, cfg.alpha, cfg.truncation)
    E = model.energies()
    header = ["j", "tau_r", "tau_r_bound", "empirical_median", "empirical_p95", "fraction_relaxed_by_tau",
              "censored_count"]
    rows = []
    for j in cfg.level_list():
        if j > cfg.truncation:
            raise ConfigError(f"invalid levels: {j} exceeds truncation {cfg.truncation}")
        closed, bound = tau_r(cfg.alpha, j, cfg.sigma), tau_r_bound(cfg.alpha, j, cfg.sigma)
        if cfg.alpha == 1.0 and row.probs[j - 1] == 0:
            rows.append([j, closed, bound, math.nan, math.nan, math.nan, 0])
            continue
        t = checkpoint_times(bound if bound > 0 else 1.0)
        conf = SdeConfig(cfg.sigma, t, cfg.seed, j)
        stats = empirical_relaxation_time((simulate_trajectory(row, conf, E, index=i) for i in range(cfg.M)),
                                          cfg.tol_energy, bound)
        rows.append([j, closed, bound, stats.median, stats.p95, stats.fraction_relaxed_by_tau, stats.censored_count])
    if cfg.output_dir:
        out = Path(cfg.output_dir)
        write_csv(out / "relax_time.csv", header, rows)
        _manifest(cfg, "relax-time", out, ["relax_time.csv"])
    print(",".join(header))
    for r in rows:
        print(",".join(f"{v:.6g}" if isinstance(v, float) else str(v) for v in r))
    return 0


def cmd_adiabatic(cfg: RunConfig) -> int:
    well = ad.TimeDependentWell(rate=cfg.rate, truncation=cfg.truncation)
    if cfg.initial is not None:
        p0 = np.zeros(cfg.truncation)
        p0[cfg.initial - 1] = 1.0
    else:
        p0 = transition_row(cfg.n, cfg.alpha, cfg.truncation).normalised()
    T = cfg.t_end if cfg.t_end is not None else 1.0
    n = int(round(T / cfg.dt))
    proc = ad.run_pi_process(well, p0, cfg.sigma, T, cfg.dt, paths=cfg.paths, seed=cfg.seed,
                             record_every=max(1, n // 1000))
    k = min(PI_COLUMNS, cfg.truncation)
    header = ["t", "L"] + [f"Pi{m}" for m in range(1, k + 1)] + ["H", "V", "condition_lhs", "condition_rhs", "holds"]
    # holds is false both when the condition fails and once reduced (then lhs is nan)
    rows = ([tk, L, *vals[0, :k], H[0], V[0], lhs, rhs, st == "holds"]
            for tk, L, vals, H, V, lhs, rhs, st in zip(proc.t, proc.widths, proc.values, proc.H, proc.V,
                                                       proc.condition_lhs, proc.condition_rhs, proc.status))
    out = _outdir(cfg, "qrelax-adiabatic")
    write_csv(out / "adiabatic.csv", header, rows)
    _manifest(cfg, "adiabatic", out, ["adiabatic.csv"])
    msg = f"clamp events {proc.clamp_events}; terminal Pi (path 0) {np.array2string(proc.values[-1, 0, :k], precision=4)}"
    if np.max(p0) < 1:
        msg += f"; threshold rate at t=0 {ad.threshold_rate(p0, cfg.sigma):.6g}"
    print(msg + f"; wrote {out}")
    return 0


def cmd_validate(cfg: RunConfig) -> int:
    from .validation import run_all

    results = run_all(quick=cfg.quick, threads=cfg.threads, seed=cfg.seed)
    for r in results:
        print(r.line())
    failed = sum(not r.passed for r in results)
    print(f"{len(results) - failed}/{len(results)} checks passed")
    return 1 if failed else 0


def cmd_crosscheck(cfg: RunConfig) -> int:
    study = strong_convergence_study(alpha=cfg.alpha, n=cfg.n, sigma=cfg.sigma, paths=cfg.paths if cfg.paths > 1 else 10,
                                     seed=cfg.seed)
    header = ["dt", "mean_max_error", "ratio_to_next", "order_to_next"]
    ratios = np.append(study.ratios, math.nan)
    orders = np.append(study.orders, math.nan)
    rows = list(zip(study.dts, study.mean_errors, ratios, orders))
    if cfg.output_dir:
        out = Path(cfg.output_dir)
        write_csv(out / "crosscheck.csv", header, rows)
        _manifest(cfg, "crosscheck", out, ["crosscheck.csv"])
    print(",".join(header))
    for r in rows:
        print(",".join(f"{v:.6g}" for v in r))
    return 0


HANDLERS = {
    "spectrum": cmd_spectrum,
    "trajectory": cmd_trajectory,
    "ensemble": cmd_ensemble,
    "density": cmd_density,
    "relax-time": cmd_relax_time,
    "adiabatic": cmd_adiabatic,
    "validate": cmd_validate,
    "crosscheck": cmd_crosscheck,
}


def main(argv=None) -> int:
    try:
        command, cfg = parse_config(argv)
    except ValueError as exc:  # ConfigError and model validation
        print(f"qrelax: configuration error: {exc}", file=sys.stderr)
        return 2
    try:
        return HANDLERS[command](cfg)
    except ConfigError as exc:
        print(f"qrelax: configuration error: {exc}", file=sys.stderr)
        return 2
    except (ValueError, OSError, ArithmeticError) as exc:
        print(f"qrelax: {command} failed: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
