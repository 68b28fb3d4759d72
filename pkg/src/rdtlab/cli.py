"""Command-line front end: ``rdtlab {curvature,flow,kernel,gromov,constants}``.

Parameters come from built-in defaults, then an optional ``--config`` file,
then explicit flags.  Everything is validated before computing.  Results
are written only after the computation succeeds and ``verdict.txt`` is
written last, so a directory without it holds no finished run.

Exit status: 0 success (or PASS), 1 completed with a FAIL verdict, 2 invalid
configuration, 3 runtime failure.
"""

from __future__ import annotations

import argparse
import logging
import os
import sys
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import io
from .curvature import compute_curvature
from .families import FAMILY_KINDS, make_family, smooth_cutoff
from .flow import FlowConfig, evolve
from .grid import Grid, MetricField

log = logging.getLogger("rdtlab")

EXIT_OK, EXIT_FAIL, EXIT_CONFIG, EXIT_RUNTIME = 0, 1, 2, 3
METRICS = ("flat", "conformal-sine", "conformal-bump", "spike")


class ConfigError(ValueError):
    """A parameter violates the precondition of the operation it feeds."""


COMMON = {"dim": 2, "points": 64, "length": 6.0, "dx": None, "output_dir": None, "seed": 0}

DEFAULTS = {
    "curvature": {"metric": "conformal-sine", "amplitude": 0.1, "tolerance": 1e-3, "member": 1, "kappa": -1.5},
    "flow": {"metric": "conformal-bump", "amplitude": 0.04, "t_end": 0.05, "cfl_fraction": 0.2, "dt": None,
             "record_times": [], "epsilon": 0.1, "member": 1, "kappa": -1.5},
    "kernel": {"metric": "conformal-bump", "amplitude": 0.04, "frozen": False, "t": None, "s": 0.0,
               "snapshots": 10, "cfl_fraction": 0.2, "supersolution_trials": 3, "member": 1, "kappa": -1.5},
    "gromov": {"family": "conformal-spike", "count": 3, "kappa": -1.5, "kappa_lo": -1.7, "kappa_hi": -1.5,
               "delta": 0.1, "theta": 0.19, "cfl_fraction": 0.2},
    "constants": {"theta": 0.19, "d": 4.5, "c2": 1.0, "c3": 1.0, "delta": 0.1, "dx": None},
}


@dataclass
class ExperimentConfig:
    command: str
    params: dict

    def __getattr__(self, name):
        try:
            return self.params[name]
        except KeyError:
            raise AttributeError(name) from None

    def grid(self) -> Grid:
        if self.dx is not None:
            return Grid(int(self.dim), int(self.points), float(self.dx))
        return Grid.from_length(int(self.dim), int(self.points), float(self.length))


def _require(cond: bool, message: str):
    if not cond:
        raise ConfigError(message)


def validate(cfg: ExperimentConfig) -> None:
    """Check every parameter against the precondition of the operation it feeds."""
    p = cfg.params
    if cfg.command == "constants":
        _require(0 < p["theta"] < 0.5, "theta must lie in (0, 1/2)")
        _require(p["d"] > 4, "D must exceed 4")
        _require(p["c2"] > 0 and p["c3"] > 0, "C2 and C3 must be positive")
        _require(p["delta"] > 0, "delta must be positive")
        _require(p["dx"] is None or p["dx"] > 0, "dx must be positive")
        return
    _require(p["dim"] in (2, 3), "dim must be 2 or 3")
    _require(isinstance(p["points"], int) and p["points"] >= 16, "points must be an integer >= 16")
    _require(p["dx"] is None or p["dx"] > 0, "dx must be positive")
    _require(p["length"] > 0, "length must be positive")
    _require(p["output_dir"] is not None, "output_dir is required")
    _require(isinstance(p["seed"], int), "seed must be an integer")
    grid = cfg.grid()
    if "metric" in p:
        _require(p["metric"] in METRICS, f"metric must be one of {METRICS}")
        if p["metric"] == "spike":
            _require(p["dim"] == 2, "spike metrics are two-dimensional")
            _require(p["kappa"] < 0, "spike metrics need kappa < 0")
            _require(isinstance(p["member"], int) and p["member"] >= 1, "member must be a positive integer")
            _require(grid.length / 4 > 1.45, "spike metrics need L > 5.8")
        if p["metric"] == "conformal-bump":
            _require(grid.length / 4 > 1.0, "the bump needs L > 4")
        _require(abs(p["amplitude"]) < 0.5, "amplitude must be below 0.5")
    if cfg.command == "curvature":
        _require(p["tolerance"] > 0, "tolerance must be positive")
    elif cfg.command == "flow":
        _require(0 < p["t_end"] < 1, "t_end must lie in (0, 1)")
        _require(0 < p["cfl_fraction"] <= 0.5, "cfl_fraction must lie in (0, 0.5]")
        _require(p["dt"] is None or p["dt"] > 0, "dt must be positive")
        _require(all(0 <= t <= p["t_end"] for t in p["record_times"]), "record times must lie in [0, t_end]")
    elif cfg.command == "kernel":
        t, s = p["t"], p["s"]
        _require(t is not None, "t is required")
        _require(0 <= s < t < 1, "need 0 <= s < t < 1")
        _require(t - s >= 10 * grid.dx**2,
                 f"t - s = {t - s:.4g} is below 10 dx² = {10 * grid.dx**2:.4g}; the kernel is not resolvable")
        _require(isinstance(p["snapshots"], int) and p["snapshots"] >= 10, "snapshots must be an integer >= 10")
        _require(min(t - s, grid.length**2 / 100) >= 4 * 10 * grid.dx**2,
                 "min(t - s, L²/100) must be at least 40 dx² so fitted snapshots span a factor 4 in t - s")
        _require(0 < p["cfl_fraction"] <= 0.5, "cfl_fraction must lie in (0, 0.5]")
        _require(isinstance(p["supersolution_trials"], int) and p["supersolution_trials"] >= 0,
                 "supersolution_trials must be a nonnegative integer")
    elif cfg.command == "gromov":
        _require(p["dim"] == 2, "the witness families are two-dimensional")
        _require(p["family"] in FAMILY_KINDS, f"family must be one of {FAMILY_KINDS}")
        _require(isinstance(p["count"], int) and p["count"] >= 3, "count must be an integer >= 3")
        _require(p["kappa"] < 0, "kappa must be negative")
        _require(p["kappa_lo"] < p["kappa_hi"], "need kappa_lo < kappa_hi")
        _require(p["delta"] > 0, "delta must be positive")
        _require(0 < p["theta"] < 0.5, "theta must lie in (0, 1/2)")
        _require(0 < p["cfl_fraction"] <= 0.5, "cfl_fraction must lie in (0, 0.5]")
        _require(grid.length / 4 > 1.45, "families need L > 5.8")


def build_metric(cfg: ExperimentConfig, grid: Grid) -> tuple[MetricField, np.ndarray | None]:
    """The configured initial metric and, when known in closed form, its scalar curvature."""
    kind, amp = cfg.metric, float(cfg.amplitude)
    n = grid.dim
    if kind == "flat":
        return MetricField.euclidean(grid), np.zeros(grid.shape)
    if kind == "conformal-sine":
        k = 2 * np.pi / grid.length
        s = np.sin(k * grid.coords)
        c = np.cos(k * grid.coords)
        u = amp * np.prod(s, axis=0)
        lap = -n * k * k * u
        grad = np.stack([amp * k * c[a] * np.prod(np.delete(s, a, axis=0), axis=0) for a in range(n)])
        grad2 = np.sum(grad**2, axis=0)
        scalar = -np.exp(-2 * u) * (2 * (n - 1) * lap + (n - 2) * (n - 1) * grad2)
        return MetricField.conformal(grid, u), scalar
    if kind == "conformal-bump":
        u = amp * smooth_cutoff(grid.distance(), 0.0, 1.0)
        return MetricField.conformal(grid, u), None
    fam = make_family("conformal-spike", grid, float(cfg.kappa), max(3, int(cfg.member)))
    return fam.members[int(cfg.member) - 1], fam.analytic_scalar[int(cfg.member) - 1]


def _verdict_text(fields: dict) -> str:
    return "".join(f"{k}={io.format_number(v) if not isinstance(v, str) else v}\n" for k, v in fields.items())


def cmd_curvature(cfg: ExperimentConfig) -> int:
    grid = cfg.grid()
    g, analytic = build_metric(cfg, grid)
    b = compute_curvature(g)
    err = float(np.abs(b.scalar - analytic).max()) if analytic is not None else float("nan")
    out = Path(cfg.output_dir)
    io.write_tfs(out / "R.tfs", b.scalar, grid, "scalar")
    io.write_tfs(out / "Ric.tfs", b.ricci, grid, "dd")
    io.write_tfs(out / "Rm.tfs", b.riemann, grid, "dddd")
    io.write_csv(out / "curvature_summary.csv", ["minR", "maxR", "maxRm", "sup_R_error"],
                 [(b.scalar.min(), b.scalar.max(), b.riemann_norm.max(), err)])
    ok = analytic is None or err <= cfg.tolerance
    io.write_text(out / "verdict.txt", _verdict_text({"command": "curvature", "verdict": "PASS" if ok else "FAIL",
                                                     "sup_R_error": err}))
    return EXIT_OK if ok else EXIT_FAIL


FLOW_COLUMNS = ["t", "bilipschitz", "sup_h", "sup_d1g", "sup_d2g", "sup_d3g", "minR", "maxR", "maxRm"]


def cmd_flow(cfg: ExperimentConfig) -> int:
    grid = cfg.grid()
    g0, _ = build_metric(cfg, grid)
    traj = evolve(g0, FlowConfig(t_end=cfg.t_end, cfl_fraction=cfg.cfl_fraction, epsilon=cfg.epsilon,
                                 record_times=list(cfg.record_times), dt=cfg.dt))
    if not traj.ok:
        log.error("flow failed: %s", traj.failure)
        return EXIT_RUNTIME
    out = Path(cfg.output_dir)
    rows = [[s.t] + [s.diagnostics[c] for c in FLOW_COLUMNS[1:]] for s in traj.states]
    io.write_csv(out / "flow_diagnostics.csv", FLOW_COLUMNS, rows)
    for j, s in enumerate(traj.states):
        io.write_tfs(out / f"metric_{j:03d}.tfs", s.metric.values, grid, "dd", t=s.t)
    io.write_text(out / "verdict.txt", _verdict_text({
        "command": "flow", "verdict": "PASS" if not traj.violations else "FAIL",
        "steps": len(traj.step_times), "dt": traj.dt, "violations": len(traj.violations)}))
    return EXIT_OK if not traj.violations else EXIT_FAIL


KERNEL_COLUMNS = ["tminus_s", "distance", "K_value", "gauss_bound", "tail_r", "tail_mass", "tail_bound"]


def cmd_kernel(cfg: ExperimentConfig) -> int:
    from .heat_kernel import fit_gaussian_bound, frozen_trajectory, source_kernel, supersolution_bound, tail_mass

    grid = cfg.grid()
    g0, _ = build_metric(cfg, grid)
    t, s = float(cfg.t), float(cfg.s)
    if cfg.frozen:
        traj = frozen_trajectory(g0, t)
    else:
        traj = evolve(g0, FlowConfig(t_end=t, cfl_fraction=cfg.cfl_fraction, keep_dense=True, diagnostic_orders=()))
        if not traj.ok:
            log.error("flow failed: %s", traj.failure)
            return EXIT_RUNTIME
    # beyond L²/100 periodic images distort the tail, so the fit stops there
    lo, hi = 10 * grid.dx**2, min(t - s, grid.length**2 / 100)
    record = list(t - np.geomspace(lo, hi, cfg.snapshots))
    center = np.zeros(grid.dim)
    snaps = source_kernel(traj, center, t, s, record_times=record, cfl_fraction=cfg.cfl_fraction)
    fitted = [sn for sn in snaps if sn.elapsed <= hi * (1 + 1e-12)]
    fit = fit_gaussian_bound(fitted, traj)
    rng = np.random.default_rng(cfg.seed)
    trials = []
    for _ in range(cfg.supersolution_trials):
        x = (rng.integers(0, grid.points, grid.dim) - np.asarray(grid.origin_index)) * grid.dx
        ss = rng.uniform(s, t - 10 * grid.dx**2)
        tt = rng.uniform(ss + 10 * grid.dx**2, t)
        lhs, rhs = supersolution_bound(traj, x, ss, tt, cfl_fraction=cfg.cfl_fraction)
        trials.append((*x, ss, tt, lhs, rhs, lhs - rhs))

    n = grid.dim
    ray = grid.coords[0] >= 0
    for a in range(1, n):
        ray &= grid.coords[a] == 0
    dist = grid.coords[0][ray]
    order = np.argsort(dist)
    rows = []
    for snap in fitted:
        tau = snap.elapsed
        vals = snap.values[ray][order]
        for d, k in zip(dist[order], vals):
            tm = tail_mass(snap, traj, float(d))
            rows.append((tau, d, k, fit.c2 * tau ** (-n / 2) * np.exp(-d * d / (fit.d * tau)),
                         d, tm, fit.c2_tail * np.exp(-d * d / (fit.d * tau))))
    out = Path(cfg.output_dir)
    io.write_csv(out / "kernel.csv", KERNEL_COLUMNS, rows)
    io.write_csv(out / "kernel_mass.csv", ["tminus_s", "mass"], [(sn.elapsed, sn.mass) for sn in snaps])
    cols = [f"x{a}" for a in range(n)] + ["s", "t", "lhs", "rhs", "slack"]
    io.write_csv(out / "supersolution.csv", cols, trials)
    mass_ok = all(abs(sn.mass - 1) <= 1e-3 for sn in snaps)
    super_ok = all(tr[-1] >= -1e-4 * (1 + abs(tr[-2])) for tr in trials)
    ok = mass_ok and super_ok
    io.write_text(out / "verdict.txt", _verdict_text({
        "command": "kernel", "verdict": "PASS" if ok else "FAIL", "C2": fit.c2, "D": fit.d,
        "C2_tail": fit.c2_tail, "valid_pairs": fit.valid_pairs, "mass_ok": str(mass_ok),
        "supersolution_ok": str(super_ok)}))
    return EXIT_OK if ok else EXIT_FAIL


def cmd_gromov(cfg: ExperimentConfig) -> int:
    from .gromov import verify_theorem

    grid = cfg.grid()
    fam = make_family(cfg.family, grid, float(cfg.kappa), int(cfg.count))
    result = verify_theorem(fam, float(cfg.kappa_lo), float(cfg.kappa_hi), float(cfg.delta), theta=float(cfg.theta),
                            cfl_fraction=float(cfg.cfl_fraction))
    out = Path(cfg.output_dir)
    if "constants" in result.details:
        io.write_csv(out / "constants.csv", ["name", "value"], list(result.details["constants"].items()))
    for i, rep in enumerate(result.reports, start=1):
        io.write_csv(out / f"ladder_member{i}.csv", ["k", "t_k", "r_k", "a_k", "slack"], rep.rows())
    fields = {"command": "gromov", "family": fam.kind, "verdict": "PASS" if result.passed else "FAIL",
              "stage": result.stage or "none"}
    fields.update({f"stage_{k}": "ok" if v else "fail" for k, v in result.stages.items()})
    for key in ("c0_extrapolated", "extrapolated_R0", "extrapolation_spread", "limit_R0_direct"):
        if key in result.details:
            fields[key] = result.details[key]
    io.write_text(out / "verdict.txt", _verdict_text(fields))
    return EXIT_OK if result.passed else EXIT_FAIL


def cmd_constants(cfg: ExperimentConfig) -> int:
    from .gromov import ResolutionError, derive_constants

    try:
        c = derive_constants(cfg.theta, (cfg.c2, cfg.d), cfg.c3, cfg.delta, dx=cfg.dx)
    except ResolutionError as exc:
        print(f"rdtlab constants: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    width = max(len(name) for name, _ in c.as_rows())
    for name, value in c.as_rows():
        print(f"{name:<{width}}  {io.format_number(value)}")
    for name, ok in c.invariants().items():
        print(f"{name:<{width}}  {'ok' if ok else 'VIOLATED'}")
    return EXIT_OK


COMMANDS = {"curvature": cmd_curvature, "flow": cmd_flow, "kernel": cmd_kernel, "gromov": cmd_gromov,
            "constants": cmd_constants}


def _parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="rdtlab", description="Ricci DeTurck flow laboratory")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, defaults in DEFAULTS.items():
        p = sub.add_parser(name)
        p.add_argument("--config", type=Path, help="key=value or JSON file")
        keys = dict(defaults) if name == "constants" else {**COMMON, **defaults}
        for key in keys:
            flag = "--" + key.replace("_", "-")
            if key == "frozen":
                p.add_argument(flag, action="store_const", const=True, default=argparse.SUPPRESS)
            else:
                p.add_argument(flag, dest=key, type=str, default=argparse.SUPPRESS)
    return parser


def _coerce(value, like):
    if isinstance(value, str):
        value = io._parse_value(value)
    if isinstance(like, list) and not isinstance(value, list):
        value = [value]
    if isinstance(like, float) and isinstance(value, int) and not isinstance(value, bool):
        value = float(value)
    return value


def resolve_config(args: argparse.Namespace) -> ExperimentConfig:
    defaults = dict(DEFAULTS[args.command]) if args.command == "constants" else {**COMMON, **DEFAULTS[args.command]}
    params = dict(defaults)
    if getattr(args, "config", None) is not None:
        loaded = io.load_config(args.config)
        unknown = set(loaded) - set(defaults)
        if unknown:
            raise ConfigError(f"unknown configuration keys: {sorted(unknown)}")
        params.update(loaded)
    for key in defaults:
        if hasattr(args, key):
            params[key] = getattr(args, key)
    params = {k: _coerce(v, defaults[k]) for k, v in params.items()}
    cfg = ExperimentConfig(args.command, params)
    validate(cfg)
    return cfg


def thread_cap() -> int:
    """Worker cap from ``RDT_LAB_THREADS`` (default 1)."""
    raw = os.environ.get("RDT_LAB_THREADS", "1")
    try:
        value = int(raw)
    except ValueError:
        raise ConfigError(f"RDT_LAB_THREADS must be a positive integer, got {raw!r}") from None
    if value < 1:
        raise ConfigError(f"RDT_LAB_THREADS must be a positive integer, got {raw!r}")
    return value


def main(argv=None) -> int:
    args = _parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        thread_cap()
        cfg = resolve_config(args)
    except (ConfigError, OSError, ValueError) as exc:
        print(f"rdtlab {args.command}: invalid configuration: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    if cfg.command != "constants":
        verdict = Path(cfg.output_dir) / "verdict.txt"
        if verdict.exists():
            verdict.unlink()
    try:
        return COMMANDS[cfg.command](cfg)
    except Exception as exc:  # report and fail without leaving a verdict
        log.debug("traceback", exc_info=True)
        print(f"rdtlab {cfg.command}: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
