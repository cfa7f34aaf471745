"""Experiment runner: config parsing, subcommand dispatch, deterministic output.

Outputs are plain CSV/JSON.  Every CSV starts with a comment line carrying
the config hash, then a header row; re-running with an identical config and
seed reproduces the experiment files byte for byte (the manifest carries the
wall clock and is exempt).  The output directory comes from --out, the
KGLATTICE_OUTDIR environment variable, or the current directory.
"""

from __future__ import annotations

import argparse
import dataclasses
import hashlib
import json
import math
import os
import sys
import time
from dataclasses import dataclass, field

import numpy as np

import kglattice
from kglattice import cocycle, dispersion, evolve, kam, model, operator, spectral


class ValidationError(ValueError):
    pass


class NumericalFailure(RuntimeError):
    pass


@dataclass
class ExperimentConfig:
    # potential: list of [k, coeff] pairs; if empty, a single cosine mode
    # with strip norm eps0 is used (eps0 = 0 means the zero potential)
    eps0: float = 0.0
    radius: float = 0.05
    potential_modes: list = field(default_factory=list)
    # frequency
    omega: list = field(default_factory=lambda: [model.GOLDEN_MEAN])
    gamma: float = 0.25
    tau: float = 1.2
    # lattice
    sites: int = 512
    theta0: list = field(default_factory=lambda: [0.0])
    offset: int | None = None
    # reducibility schedule
    sigma: float = 1.0 / 200.0
    schedule_eps0: float | None = None  # override for strip_norm-derived eps0
    j_max: int = 4
    n_min: int = 20
    # evolution
    t_max: float = 100.0
    dt: float = 0.01
    lam: float = 0.0
    kappa: int = 6
    zeta: float = 0.32
    # grids
    egrid: str = "-2:2:101"
    tlist: list = field(default_factory=lambda: [10.0, 100.0, 1000.0])
    mlist: list = field(default_factory=lambda: [0.0])
    n_iter: int = 100_000
    window: int = 32
    fit_window: str = "10:1000"
    # bookkeeping
    seed: int = 0
    out_dir: str = "."

    def validate(self):
        checks = [
            (self.radius > 0, "radius must be positive"),
            (0 <= self.eps0 < 1, "eps0 must lie in [0, 1) (V must stay positive)"),
            (self.gamma > 0, "gamma must be positive"),
            (self.tau > len(self.omega) - 1, "tau must exceed d-1"),
            (self.sites >= 3, "sites must be >= 3"),
            (self.sigma > 0, "sigma must be positive"),
            (self.j_max >= 0, "j_max must be >= 0"),
            (self.n_min >= 1, "n_min must be >= 1"),
            (self.dt > 0, "dt must be positive"),
            (self.t_max > 0, "t_max must be positive"),
            (self.kappa >= 1 and int(self.kappa) == self.kappa, "kappa must be a positive integer"),
            (self.n_iter >= 1000, "n_iter must be >= 1000"),
            (self.window >= 4, "window must be >= 4"),
            (len(self.omega) == len(self.theta0), "omega and theta0 must share a dimension"),
        ]
        for ok, msg in checks:
            if not ok:
                raise ValidationError(msg)
        if self.lam != 0.0 and self.kappa > 5:
            if not (1.0 / (self.kappa - 2.0) < self.zeta < 1.0 / 3.0):
                raise ValidationError(
                    f"zeta={self.zeta} violates (kappa-2)^-1 < zeta < 1/3 for kappa={self.kappa}"
                )
        if self.kappa > 2 and not (1.0 / (self.kappa - 2.0) < self.zeta < 1.0 / 3.0):
            raise ValidationError(
                f"zeta={self.zeta} violates (kappa-2)^-1 < zeta < 1/3 for kappa={self.kappa}"
            )

    # derived objects ------------------------------------------------------
    def frequency(self) -> model.FrequencyVector:
        return model.FrequencyVector(tuple(self.omega), gamma=self.gamma, tau=self.tau)

    def potential(self) -> model.QuasiPeriodicPotential:
        if self.potential_modes:
            coeffs = {tuple(np.atleast_1d(k).astype(int)): float(c) for k, c in self.potential_modes}
            return model.QuasiPeriodicPotential(coeffs, radius_r=self.radius, d=len(self.omega))
        return model.cosine_potential(self.eps0, radius_r=self.radius, d=len(self.omega))

    def lattice(self) -> model.LatticeConfig:
        return model.LatticeConfig(
            n_sites=self.sites, theta0=tuple(self.theta0), offset=self.offset
        )

    def schedule(self) -> kam.KamSchedule:
        eps = self.schedule_eps0
        if eps is None:
            eps = model.strip_norm(self.potential())
        if eps <= 0:
            eps = 1e-8  # zero potential: schedule is formal
        return kam.make_schedule(eps, sigma=self.sigma, j_max=self.j_max, n_min=self.n_min)

    def hash(self) -> str:
        payload = json.dumps(dataclasses.asdict(self), sort_keys=True)
        return hashlib.sha256(payload.encode()).hexdigest()[:16]


_FIELD_TYPES = {f.name: f for f in dataclasses.fields(ExperimentConfig)}


def parse_config(path: str) -> ExperimentConfig:
    """Read a config file: a JSON object, or key = value lines (# comments).

    Unknown keys are rejected; an empty file yields all defaults.
    """
    with open(path) as fh:
        text = fh.read()
    data: dict = {}
    stripped = text.strip()
    if stripped:
        if stripped.startswith("{"):
            data = json.loads(text)
        else:
            for lineno, raw in enumerate(text.splitlines(), start=1):
                line = raw.strip()
                if not line or line.startswith("#"):
                    continue
                if "=" not in line:
                    raise ValidationError(f"{path}:{lineno}: expected key = value")
                key, _, value = line.partition("=")
                key = key.strip()
                try:
                    data[key] = json.loads(value.strip())
                except json.JSONDecodeError as exc:
                    raise ValidationError(f"{path}:{lineno}: bad value for {key!r}: {exc}") from exc
    cfg_kwargs = {}
    for key, value in data.items():
        if key not in _FIELD_TYPES:
            raise ValidationError(f"unknown config key {key!r}")
        cfg_kwargs[key] = value
    cfg = ExperimentConfig(**cfg_kwargs)
    cfg.validate()
    return cfg


def parse_range(spec: str, what: str = "grid") -> np.ndarray:
    try:
        lo, hi, count = spec.split(":")
        lo, hi, count = float(lo), float(hi), int(count)
    except ValueError as exc:
        raise ValidationError(f"bad {what} spec {spec!r}; expected lo:hi:count") from exc
    if count < 1 or hi < lo:
        raise ValidationError(f"bad {what} spec {spec!r}")
    return np.linspace(lo, hi, count)


def _fmt(x) -> str:
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    return format(float(x), ".17g")


class OutputWriter:
    def __init__(self, cfg: ExperimentConfig, command: str):
        self.cfg = cfg
        self.command = command
        self.out_dir = os.environ.get("KGLATTICE_OUTDIR", "") or cfg.out_dir
        os.makedirs(self.out_dir, exist_ok=True)
        self.files: list[str] = []
        self.t0 = time.time()

    def path(self, name: str) -> str:
        return os.path.join(self.out_dir, name)

    def csv(self, name: str, header: list[str], rows) -> str:
        p = self.path(name)
        with open(p, "w") as fh:
            fh.write(f"# config_hash={self.cfg.hash()}\n")
            fh.write(",".join(header) + "\n")
            for row in rows:
                fh.write(",".join(_fmt(x) for x in row) + "\n")
        self.files.append(name)
        return p

    def json(self, name: str, payload: dict) -> str:
        p = self.path(name)
        payload = {"config_hash": self.cfg.hash(), **payload}
        with open(p, "w") as fh:
            json.dump(payload, fh, indent=2, sort_keys=True)
            fh.write("\n")
        self.files.append(name)
        return p

    def manifest(self):
        p = self.path(f"manifest_{self.command}.json")
        with open(p, "w") as fh:
            json.dump(
                {
                    "command": self.command,
                    "config_hash": self.cfg.hash(),
                    "config": dataclasses.asdict(self.cfg),
                    "code_version": kglattice.__version__,
                    "wall_clock_s": time.time() - self.t0,
                    "outputs": self.files,
                },
                fh,
                indent=2,
                sort_keys=True,
            )
            fh.write("\n")


# -- subcommands ---------------------------------------------------------------


def run_spectrum(cfg: ExperimentConfig, out: OutputWriter) -> int:
    D = operator.eigendecompose(
        operator.build_finite_section(cfg.potential(), cfg.frequency(), cfg.lattice())
    )
    out.csv(
        "spectrum.csv",
        ["index", "eigenvalue"],
        ((k, v) for k, v in enumerate(D.eigenvalues)),
    )
    return 0


def _delta_state(cfg: ExperimentConfig) -> evolve.RealState:
    u = np.zeros(cfg.sites)
    u[cfg.sites // 2] = 1.0
    return evolve.RealState(u=u, v=np.zeros(cfg.sites))


def run_evolve(cfg: ExperimentConfig, out: OutputWriter) -> int:
    P, omega, lattice = cfg.potential(), cfg.frequency(), cfg.lattice()
    D = operator.eigendecompose(operator.build_finite_section(P, omega, lattice))
    s0 = _delta_state(cfg)
    n_samples = 201
    times = np.linspace(0.0, cfg.t_max, n_samples)
    if cfg.lam == 0.0:
        states = evolve.propagate_times(D, s0, times)
        aborted, abort_time = False, None
    else:
        traj = evolve.nonlinear_evolve(
            D, P, s0, cfg.lam, int(cfg.kappa), cfg.t_max, cfg.dt, sample_times=times
        )
        states, aborted, abort_time = traj.states, traj.aborted, traj.abort_time
    profile = evolve.decay_profile(states)
    out.csv(
        "evolve_profile.csv",
        ["t", "linf", "l2", "l1"],
        zip(profile.times, profile.linf, profile.l2, profile.l1),
    )
    out.json(
        "evolve_summary.json",
        {
            "aborted": aborted,
            "abort_time": abort_time,
            "final_energy": evolve.energy(
                states[-1], P, omega, lattice, cfg.lam, int(cfg.kappa)
            ).total,
        },
    )
    return 0


def run_rotation(cfg: ExperimentConfig, out: OutputWriter) -> int:
    E = parse_range(cfg.egrid, "egrid")
    P, omega = cfg.potential(), cfg.frequency()
    theta0 = tuple(cfg.theta0)
    rho = cocycle.rotation_number(E, P, omega, theta0, n_iter=cfg.n_iter)
    lyap = cocycle.lyapunov_exponent_grid(E, P, omega, theta0, n_iter=cfg.n_iter)
    out.csv("rotation.csv", ["E", "rho", "lyapunov"], zip(E, rho, lyap))
    return 0


def run_kam(cfg: ExperimentConfig, out: OutputWriter, energy: float) -> int:
    P, omega = cfg.potential(), cfg.frequency()
    if model.strip_norm(P) <= 0:
        raise ValidationError("the kam subcommand needs a nonzero potential")
    report = kam.reduce(energy, P, omega, cfg.schedule(), defect_samples=256)
    out.json(
        "kam_report.json",
        {
            "E": report.E,
            "steps": [
                {
                    "j": s.j,
                    "xi": s.xi,
                    "k": list(s.k) if s.k is not None else None,
                    "residual": s.residual,
                    "defect": s.defect,
                }
                for s in report.steps
            ],
            "rho_J": report.rho,
            "stratum": report.stratum,
            "converged": report.converged,
        },
    )
    return 0


def run_spectral(cfg: ExperimentConfig, out: OutputWriter, rng: np.random.Generator) -> int:
    P, omega = cfg.potential(), cfg.frequency()
    if P.is_zero():
        grid = spectral.build_free_grid()
    else:
        grid = spectral.build_grid(P, omega, cfg.schedule())
    sites = np.arange(-cfg.window, cfg.window + 1)
    kj = spectral.kj_tables(grid, P, tuple(cfg.theta0), sites)
    i0 = cfg.window
    probes = {}
    q = np.zeros(len(sites))
    q[i0] = 1.0
    probes["delta0"] = q
    q2 = q.copy()
    q2[i0 + 5] = 1.0
    probes["delta0_plus_delta5"] = q2
    qr = rng.normal(size=len(sites))
    qr /= np.abs(qr).sum()
    probes["random_l1"] = qr
    summary = {}
    for name, probe in probes.items():
        summary[name] = {
            "plancherel_defect": spectral.plancherel_defect(probe, grid, kj),
            "inverse_error": spectral.inverse_check(probe, grid, kj),
        }
    out.csv(
        "spectral_grid.csv",
        ["E", "rho", "drho", "stratum", "included"],
        zip(grid.energies, grid.rho, grid.drho, grid.stratum, grid.included.astype(int)),
    )
    out.json(
        "spectral_summary.json",
        {"probes": summary, "excised_measure": grid.excised_measure},
    )
    return 0


def run_dispersion(cfg: ExperimentConfig, out: OutputWriter) -> int:
    P, omega = cfg.potential(), cfg.frequency()
    if P.is_zero():
        grid = spectral.build_free_grid()
    else:
        grid = spectral.build_grid(P, omega, cfg.schedule())
    sweep = dispersion.dispersive_bound_sweep(
        cfg.tlist, cfg.mlist, None, grid, eps0=cfg.eps0, sigma=cfg.sigma
    )
    out.csv(
        "dispersion.csv",
        ["t", "M", "re", "im", "abs", "bound", "ratio"],
        ((r.t, r.M, r.re, r.im, r.absval, r.bound, r.ratio) for r in sweep.rows),
    )
    out.json(
        "dispersion_summary.json",
        {
            "max_scaled": sweep.max_scaled,
            "fitted_constant": sweep.fitted_constant,
            "j_star": [
                {"t": t, "formula": v, "cap": cap} for (t, v, cap) in sweep.j_star_rows
            ],
        },
    )
    return 0


def run_decay(cfg: ExperimentConfig, out: OutputWriter) -> int:
    needed = int(math.ceil(2.2 * cfg.t_max + 100))
    sites = max(cfg.sites, needed)
    lattice = model.LatticeConfig(n_sites=sites, theta0=tuple(cfg.theta0))
    P, omega = cfg.potential(), cfg.frequency()
    D = operator.eigendecompose(operator.build_finite_section(P, omega, lattice))
    u = np.zeros(sites)
    u[sites // 2] = 1.0
    s0 = evolve.RealState(u=u, v=np.zeros(sites))
    lo, hi = (float(x) for x in cfg.fit_window.split(":"))
    times = np.unique(np.concatenate([[0.0], np.geomspace(max(lo, 1.0) / 2, cfg.t_max, 60)]))
    states = evolve.propagate_times(D, s0, times)
    profile = evolve.decay_profile(states)
    fit = dispersion.fit_decay_exponent(profile, (lo, min(hi, cfg.t_max)))
    out.csv(
        "decay_profile.csv",
        ["t", "linf", "l2", "l1"],
        zip(profile.times, profile.linf, profile.l2, profile.l1),
    )
    out.json(
        "decay_fit.json",
        {
            "exponent": fit.exponent,
            "intercept": fit.intercept,
            "fit_window": list(fit.fit_window),
            "rms_residual": fit.rms_residual,
            "n_samples": fit.n_samples,
            "sites": sites,
        },
    )
    return 0


# -- dispatch -------------------------------------------------------------------


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise ValidationError(message)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="kglattice", description=__doc__)
    parser.add_argument("--config", help="config file (JSON or key = value lines)")
    parser.add_argument("--out", help="output directory")
    parser.add_argument("--seed", type=int, help="rng seed")
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name, **flags):
        p = sub.add_parser(name)
        p.add_argument("--eps", type=float, help="strip norm of the single-cosine potential")
        for flag, kwargs in flags.items():
            p.add_argument(flag, **kwargs)
        return p

    add("spectrum", **{"--sites": dict(type=int), "--theta0": dict(type=float)})
    add(
        "evolve",
        **{
            "--sites": dict(type=int),
            "--tmax": dict(type=float),
            "--dt": dict(type=float),
            "--lam": dict(type=float),
            "--kappa": dict(type=int),
        },
    )
    add("rotation", **{"--egrid": dict(), "--iters": dict(type=int)})
    add(
        "kam",
        **{
            "--energy": dict(type=float, required=True),
            "--jmax": dict(type=int),
            "--sigma": dict(type=float),
            "--nmin": dict(type=int),
        },
    )
    add("spectral", **{"--window": dict(type=int)})
    add("dispersion", **{"--tlist": dict(), "--mlist": dict()})
    add("decay", **{"--tmax": dict(type=float), "--window": dict(dest="fit_window")})
    return parser


def _apply_flags(cfg: ExperimentConfig, args: argparse.Namespace) -> ExperimentConfig:
    mapping = {
        "eps": "eps0",
        "sites": "sites",
        "theta0": None,  # scalar convenience below
        "tmax": "t_max",
        "dt": "dt",
        "lam": "lam",
        "kappa": "kappa",
        "egrid": "egrid",
        "iters": "n_iter",
        "jmax": "j_max",
        "sigma": "sigma",
        "nmin": "n_min",
        "window": "window",
        "fit_window": "fit_window",
        "out": "out_dir",
        "seed": "seed",
    }
    for flag, field_name in mapping.items():
        value = getattr(args, flag, None)
        if value is None:
            continue
        if flag == "theta0":
            cfg.theta0 = [float(value)] * len(cfg.omega)
        else:
            setattr(cfg, field_name, value)
    for flag in ("tlist", "mlist"):
        value = getattr(args, flag, None)
        if value is not None:
            setattr(cfg, flag, [float(x) for x in str(value).split(",")])
    return cfg


_VALUE_FLAGS = {"--egrid", "--tlist", "--mlist", "--window"}


def _merge_dash_values(argv):
    """Join value flags with arguments that look like options (e.g. -2:2:101)."""
    out = []
    skip = False
    for i, tok in enumerate(argv):
        if skip:
            skip = False
            continue
        nxt = argv[i + 1] if i + 1 < len(argv) else None
        if tok in _VALUE_FLAGS and nxt is not None and nxt.startswith("-") and len(nxt) > 1:
            out.append(f"{tok}={nxt}")
            skip = True
        else:
            out.append(tok)
    return out


def dispatch(argv) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(_merge_dash_values(list(argv)))
        cfg = parse_config(args.config) if args.config else ExperimentConfig()
        cfg = _apply_flags(cfg, args)
        cfg.validate()
    except ValidationError as exc:
        print(f"error: {exc}", file=sys.stderr)
        print(parser.format_usage(), file=sys.stderr, end="")
        return 1
    rng = np.random.default_rng(cfg.seed)
    out = OutputWriter(cfg, args.command)
    try:
        if args.command == "spectrum":
            code = run_spectrum(cfg, out)
        elif args.command == "evolve":
            code = run_evolve(cfg, out)
        elif args.command == "rotation":
            code = run_rotation(cfg, out)
        elif args.command == "kam":
            code = run_kam(cfg, out, args.energy)
        elif args.command == "spectral":
            code = run_spectral(cfg, out, rng)
        elif args.command == "dispersion":
            code = run_dispersion(cfg, out)
        elif args.command == "decay":
            code = run_decay(cfg, out)
        else:  # pragma: no cover - argparse guards this
            raise ValidationError(f"unknown command {args.command!r}")
    except ValidationError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except (kam.KamError, NumericalFailure, FloatingPointError, MemoryError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return 2
    out.manifest()
    return code


def main() -> None:
    sys.exit(dispatch(sys.argv[1:]))


if __name__ == "__main__":
    main()
