"""Command-line pipeline: equilibrium, kernels, gains, simulation, report.

Exit codes: 0 success, 1 configuration or input error, 2 numerical blow-up,
3 admissibility violation under ``--strict-admissibility``.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
import warnings
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from .config import ConfigError, Scenario, dump_scenario, parse_config
from .kernels import make_routing_gain, verify_kernel_residuals
from .model import admissible_bounds
from .simulator import AdmissibilityError, Plant, RunResult, init_scenario, run_simulation
from .grid import Grid

log = logging.getLogger("arzctl")

EXIT_OK, EXIT_CONFIG, EXIT_BLOWUP, EXIT_ADMISSIBILITY = 0, 1, 2, 3
MODES = ("open", "closed", "both", "kernels-only")
FLOAT_FMT = "%.17g"


@dataclass
class Artifacts:
    """Everything a run produced, ready to be written out."""

    scenario: Scenario
    mode: str
    equilibrium: dict
    admissibility: dict
    kernels: object | None = None
    gains: object | None = None
    residuals: dict | None = None
    runs: dict[str, RunResult] = field(default_factory=dict)
    errors: list[str] = field(default_factory=list)


# ---------------------------------------------------------------------------
# export
# ---------------------------------------------------------------------------


def _write_csv(path: Path, header: str, columns) -> None:
    data = np.column_stack([np.asarray(c, dtype=float) for c in columns])
    np.savetxt(path, data, fmt=FLOAT_FMT, delimiter=",", header=header, comments="")


def _triangle(path: Path, grid: Grid, kernel: np.ndarray, lower: bool) -> None:
    i, j = np.tril_indices(grid.N + 1) if lower else np.triu_indices(grid.N + 1)
    _write_csv(path, "x,y,value", (grid.x[i], grid.x[j], kernel[i, j]))


def _jsonable(obj):
    if isinstance(obj, dict):
        return {k: _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, (np.floating, float)):
        x = float(obj)
        return x if np.isfinite(x) else ("inf" if x > 0 else "-inf" if x < 0 else "nan")
    if isinstance(obj, np.integer):
        return int(obj)
    if isinstance(obj, np.bool_):
        return bool(obj)
    return obj


def export_results(art: Artifacts, out_dir) -> list[str]:
    """Write the run's files and return their names in write order."""
    out = Path(out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise OSError(f"cannot create output directory {out}: {exc}") from exc
    manifest: list[str] = []

    def emit(name):
        manifest.append(name)
        return out / name

    ks = art.kernels
    if ks is not None:
        _triangle(emit("kernels_k.csv"), ks.grid, ks.k, lower=True)
        _triangle(emit("kernels_l.csv"), ks.grid, ks.l, lower=True)
        _triangle(emit("kernels_m.csv"), ks.grid, ks.m, lower=False)
        _write_csv(emit("kernel_n.csv"), "x,n", (ks.grid.x, ks.n))
    if art.gains is not None:
        g = art.gains
        _write_csv(emit("gains.csv"), "y,F_v,F_w,routing_tail", (g.grid.x, g.F_v, g.F_w, g.routing_tail))

    suffix = len(art.runs) > 1
    for label, result in art.runs.items():
        tr, rep = result.trajectory, result.report
        tag = f"_{label}" if suffix else ""
        n_rec, n_x = tr.v.shape
        _write_csv(emit(f"trajectory{tag}.csv"), "t,x,v,w,u_ramp,u_rout",
                   (np.repeat(tr.t, n_x), np.tile(tr.x, n_rec), tr.v.ravel(), tr.w.ravel(),
                    np.repeat(tr.u_ramp, n_x), np.repeat(tr.u_rout, n_x)))
        _write_csv(emit(f"norms{tag}.csv"), "t,l2,h1,linf,lyapunov", (rep.t, rep.l2, rep.h1, rep.linf, rep.lyapunov))

    sc = art.scenario
    summary = {
        "mode": art.mode,
        "scenario": dump_scenario(sc).splitlines(),
        "equilibrium": art.equilibrium,
        "admissibility": art.admissibility,
        "errors": art.errors,
    }
    if ks is not None:
        summary["kernels"] = {"picard_iterations": ks.picard_iterations, "residuals": art.residuals}
    if art.gains is not None:
        summary["gains"] = {"k2": art.gains.k2, "k3": art.gains.k3}
    summary["runs"] = {}
    for label, result in art.runs.items():
        tr = result.trajectory
        entry = result.report.summary()
        entry.update(steps=tr.steps, dt=tr.dt, records=len(tr.t), blowup=tr.blowup)
        summary["runs"][label] = entry
    manifest.append("summary.json")
    summary["files"] = manifest
    with open(out / "summary.json", "w", encoding="utf-8") as fh:
        json.dump(_jsonable(summary), fh, indent=2, sort_keys=True)
        fh.write("\n")
    return manifest


# ---------------------------------------------------------------------------
# pipeline
# ---------------------------------------------------------------------------


def build_artifacts(sc: Scenario, mode: str) -> tuple[Artifacts, int]:
    if mode not in MODES:
        raise ValueError(f"mode must be one of {MODES}, got {mode!r}")
    eq = sc.equilibrium()
    adm = admissible_bounds(eq)
    art = Artifacts(
        scenario=sc, mode=mode,
        equilibrium={"v_star": eq.v_star, "q_star": eq.q_star, "rho_star": eq.rho_star, "p_star": eq.p_star,
                     "k1": eq.k1, "k2": eq.k2, "mu_star": eq.mu_star, "lambda_w": eq.lambda_w,
                     "lambda_v": eq.lambda_v, "beta": eq.beta, "settling_time_target": sc.params.L / eq.lambda_w
                     + sc.params.L / eq.lambda_v},
        admissibility=asdict(adm),
    )
    grid = Grid(sc.params.L, sc.sim.N)
    gain = make_routing_gain(sc.routing.family, grid, eq, **sc.routing.kwargs())
    need_controller = mode != "open"
    plant = Plant.build(eq, gain, k3=sc.sim.k3, with_controller=need_controller)
    if need_controller:
        art.kernels = plant.kernels
        art.residuals = verify_kernel_residuals(plant.kernels, eq, gain)
    if mode == "kernels-only":
        return art, EXIT_OK
    art.gains = plant.gains

    amplitude = sc.initial.amplitude if sc.initial.amplitude is not None else 0.5 * adm.eps
    state0 = init_scenario(sc.initial.profile, amplitude, eq, adm, grid, plant if need_controller else None,
                           strict=sc.strict)
    labels = {"open": ["open"], "closed": ["closed"], "both": ["open", "closed"]}[mode]
    code = EXIT_OK
    for label in labels:
        closed = label == "closed"
        cfg = replace(sc.sim, controller_on=closed)
        s0 = state0 if closed else replace(state0, alpha=0.0)
        result = run_simulation(cfg, plant, s0, sc.lyapunov, control_method=sc.control, raise_on_blowup=False)
        art.runs[label] = result
        if result.trajectory.blowup:
            art.errors.append(f"{label}: {result.trajectory.blowup}")
            code = max(code, EXIT_BLOWUP)
        viol = result.report.first_violation_time
        if viol is not None:
            msg = f"{label}: state left the admissible set at t = {viol:.4g} s"
            if sc.strict:
                art.errors.append(msg)
                code = EXIT_ADMISSIBILITY if code == EXIT_OK else code
            else:
                warnings.warn(msg, stacklevel=2)
    return art, code


def run_command(sc: Scenario, mode: str, out_dir=None) -> int:
    """Run the pipeline for one scenario, export its files and return the exit code."""
    try:
        art, code = build_artifacts(sc, mode)
    except AdmissibilityError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_ADMISSIBILITY
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    try:
        export_results(art, out_dir if out_dir is not None else sc.out_dir)
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    for msg in art.errors:
        print(f"error: {msg}", file=sys.stderr)
    return code


# ---------------------------------------------------------------------------
# argument handling
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="arzctl", description="Backstepping ramp-metering controller for a linearized "
                                "ARZ road segment with upstream routing feedback.")
    src = p.add_mutually_exclusive_group(required=True)
    src.add_argument("--config", help="scenario file")
    src.add_argument("--sweep", help="file listing scenario files, one per line")
    p.add_argument("--mode", choices=MODES, default="closed")
    p.add_argument("--grid-n", type=int, help="number of grid cells (overrides [sim] N)")
    p.add_argument("--cfl", type=float, help="Courant number (overrides [sim] cfl)")
    p.add_argument("--t-final", type=float, help="simulation horizon in seconds")
    p.add_argument("--out-dir", help="output directory (overrides [output] dir)")
    p.add_argument("--strict-admissibility", action="store_true",
                   help="exit with code 3 when the state leaves the admissible set")
    p.add_argument("--jobs", type=int, default=1, help="concurrent scenarios for --sweep")
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def apply_overrides(sc: Scenario, args) -> Scenario:
    sim = {}
    if args.grid_n is not None:
        sim["N"] = args.grid_n
    if args.cfl is not None:
        sim["cfl"] = args.cfl
    if args.t_final is not None:
        sim["t_final"] = args.t_final
    try:
        sc = replace(sc, sim=replace(sc.sim, **sim))
    except ValueError as exc:
        raise ConfigError(f"invalid command-line override: {exc}") from None
    if args.out_dir is not None:
        sc = replace(sc, out_dir=args.out_dir)
    if args.strict_admissibility:
        sc = replace(sc, strict=True)
    return sc


def read_sweep(path) -> list[Path]:
    base = Path(path).parent
    try:
        lines = Path(path).read_text(encoding="utf-8").splitlines()
    except OSError as exc:
        raise ConfigError(f"cannot read sweep file: {exc}") from None
    entries = [ln.split("#", 1)[0].strip() for ln in lines]
    return [base / e for e in entries if e]


def _sweep_job(job) -> int:
    sc, mode = job
    return run_command(sc, mode)


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        if args.config:
            scenarios = [apply_overrides(parse_config(args.config), args)]
        else:
            scenarios = []
            for path in read_sweep(args.sweep):
                sc = apply_overrides(parse_config(path), args)
                # isolate each sweep member under its own directory
                scenarios.append(replace(sc, out_dir=str(Path(sc.out_dir) / path.stem)))
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    if args.jobs < 1:
        print("error: --jobs must be at least 1", file=sys.stderr)
        return EXIT_CONFIG
    jobs = [(sc, args.mode) for sc in scenarios]
    if args.jobs == 1 or len(jobs) == 1:
        codes = [_sweep_job(j) for j in jobs]
    else:
        with ProcessPoolExecutor(max_workers=args.jobs) as pool:
            codes = list(pool.map(_sweep_job, jobs))
    for sc, code in zip(scenarios, codes):
        log.info("%s -> exit %d", sc.out_dir, code)
    return max(codes)


if __name__ == "__main__":
    sys.exit(main())
