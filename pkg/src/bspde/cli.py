"""Config-driven command line front end.

Subcommands: simulate-drivers, solve, finance-validate, emit-surfaces.
Every run is driven by a config file plus a mandatory master seed; outputs
are CSV (RFC-4180 style, header row), JSON-lines diagnostics and a manifest
listing every artifact with its content hash.  Exit codes: 0 success,
1 usage/config/runtime error, 2 numerical non-convergence.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import sys
import warnings
from pathlib import Path

import numpy as np

from . import __version__, config as cfgmod
from .config import ConfigError, RunConfig, parse_config, serialize_config
from .drivers import paths_to_csv_rows, simulate_drivers
from .fields import ConfigurationError, ModelDims, make_grid
from .operators import OperatorPair, build_linear_operator, zero_operator
from .picard import TerminalCondition, picard_solve, reconstruct_forward

EXIT_OK = 0
EXIT_ERROR = 1
EXIT_NOT_CONVERGED = 2


# ---------------------------------------------------------------------------
# artifact plumbing
# ---------------------------------------------------------------------------

class RunWriter:
    """Collects output files and finalizes the run manifest."""

    def __init__(self, out_dir: Path, cfg: RunConfig, command: str):
        self.out_dir = Path(out_dir)
        self.out_dir.mkdir(parents=True, exist_ok=True)
        self.cfg = cfg
        self.command = command
        self.outputs: list[dict] = []

    def write_csv(self, name: str, header: list[str], rows) -> Path:
        path = self.out_dir / name
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(header)
            for row in rows:
                writer.writerow([_fmt(v) for v in row])
        self._register(path)
        return path

    def write_jsonl(self, name: str, records) -> Path:
        path = self.out_dir / name
        with open(path, "w") as fh:
            for rec in records:
                fh.write(json.dumps(rec, sort_keys=True) + "\n")
        self._register(path)
        return path

    def write_json(self, name: str, payload: dict) -> Path:
        path = self.out_dir / name
        with open(path, "w") as fh:
            json.dump(payload, fh, indent=2, sort_keys=True)
            fh.write("\n")
        self._register(path)
        return path

    def _register(self, path: Path) -> None:
        digest = hashlib.sha256(path.read_bytes()).hexdigest()
        self.outputs.append({"path": path.name, "sha256": digest})

    def finalize(self) -> Path:
        manifest = {
            "command": self.command,
            "config_hash": self.cfg.content_hash(),
            "seed": int(self.cfg.get("run", "seed")),
            "versions": {"package": __version__, "numpy": np.__version__},
            "outputs": sorted(self.outputs, key=lambda o: o["path"]),
        }
        path = self.out_dir / "manifest.json"
        with open(path, "w") as fh:
            json.dump(manifest, fh, indent=2, sort_keys=True)
            fh.write("\n")
        return path


def _fmt(v):
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    if isinstance(v, (int, np.integer)):
        return int(v)
    return v


# ---------------------------------------------------------------------------
# shared assembly
# ---------------------------------------------------------------------------

def _load_config(args) -> RunConfig:
    text = Path(args.config).read_text()
    cfg = parse_config(text)
    overrides = {}
    if args.seed is not None:
        overrides[("run", "seed")] = str(args.seed)
    if args.paths is not None:
        overrides[("run", "n_paths")] = str(args.paths)
    if args.threads is not None:
        overrides[("run", "threads")] = str(args.threads)
    if args.out is not None:
        overrides[("run", "out_dir")] = str(args.out)
    if overrides:
        sections = cfg.sections()
        for (sec, key), val in overrides.items():
            sections[sec][key] = val
        cfg = RunConfig.from_dict(sections)
    return cfg


def _build_operator(cfg: RunConfig, dims: ModelDims, grid) -> OperatorPair:
    kind = cfg.typed("operator", "type")
    if kind == "linear":
        coeffs = cfgmod.build_linear_coefficients(cfg)
        op = build_linear_operator(coeffs, dims, grid)
    elif kind == "custom":
        from . import exprs

        drift_fn = exprs.compile_expression(cfg.get("operator", "drift_expr"), ("x", "v"))
        diff_fn = exprs.compile_expression(cfg.get("operator", "diffusion_expr"), ("x", "v"))
        x_nodes = grid.nodes[:, 0]

        def drift(view):
            v = view.V()
            return np.broadcast_to(np.asarray(drift_fn(x=x_nodes[:, None], v=v), dtype=float),
                                   v.shape).copy()

        def diffusion(view):
            v = view.V()
            col = np.broadcast_to(np.asarray(diff_fn(x=x_nodes[:, None], v=v), dtype=float),
                                  v.shape).copy()
            return np.repeat(col[..., None], dims.d, axis=-1)

        op = OperatorPair(drift=drift, diffusion=diffusion, k=0, m=0, K_D=1.0, name="custom")
    else:
        raise ConfigError(["[operator] type=finance is driven by `finance-validate`"])
    k_d_raw = cfg.get("operator", "k_d")
    if k_d_raw != "auto":
        op = OperatorPair(drift=op.drift, diffusion=op.diffusion, k=op.k, m=op.m,
                          K_D=float(k_d_raw), adaptedness_tag=op.adaptedness_tag, name=op.name)
    return op


def _solve_from_config(cfg: RunConfig):
    dims = cfgmod.build_dims(cfg)
    grid = make_grid(cfgmod.build_domain(cfg))
    tgrid = cfgmod.build_time(cfg)
    levy = cfgmod.build_levy(cfg)
    if levy.h != dims.h:
        raise ConfigError([f"[levy] declares {levy.h} channels, dims.h = {dims.h}"])
    seed = int(cfg.get("run", "seed"))
    n_paths = cfg.typed("run", "n_paths")
    drivers = simulate_drivers(dims, tgrid, levy, seed, n_paths)
    op = _build_operator(cfg, dims, grid)
    pcfg = cfgmod.build_picard_config(cfg, op.K_D, tgrid.T)
    from . import exprs

    h_fn = exprs.coefficient_of_x(cfg.get("terminal", "h_expr"), dims.p)
    H = TerminalCondition.deterministic(lambda x: np.repeat(h_fn(x)[:, None], dims.q, axis=1))
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        sol, diag = picard_solve(op, H, drivers, pcfg, grid, dims, levy=levy)
    return sol, diag, op, drivers, grid, dims, tgrid


def _write_solution(writer: RunWriter, cfg: RunConfig, sol, diag, grid, tgrid) -> None:
    writer.write_jsonl("diagnostics.jsonl", diag.records())
    surface = sol.mean_surface()  # (n_t+1, n_nodes, q)
    p = grid.p
    q = surface.shape[-1]
    if cfg.typed("output", "long_format"):
        header = ["t"] + [f"x{i + 1}" for i in range(p)] + [f"v{r + 1}" for r in range(q)]
        rows = []
        for j, t in enumerate(tgrid.times):
            for node in range(grid.n_nodes):
                rows.append([t] + list(grid.nodes[node]) + list(surface[j, node]))
        writer.write_csv("fields.csv", header, rows)
    if cfg.typed("output", "per_step_files"):
        header = [f"x{i + 1}" for i in range(p)] + [f"v{r + 1}" for r in range(q)]
        for j, t in enumerate(tgrid.times):
            rows = [list(grid.nodes[node]) + list(surface[j, node]) for node in range(grid.n_nodes)]
            writer.write_csv(f"fields_step{j:04d}.csv", header, rows)


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------

def cmd_simulate_drivers(cfg: RunConfig) -> int:
    dims = cfgmod.build_dims(cfg)
    tgrid = cfgmod.build_time(cfg)
    levy = cfgmod.build_levy(cfg)
    drivers = simulate_drivers(dims, tgrid, levy, int(cfg.get("run", "seed")),
                               cfg.typed("run", "n_paths"))
    writer = RunWriter(Path(cfg.get("run", "out_dir")), cfg, "simulate-drivers")
    header, rows = paths_to_csv_rows(drivers)
    writer.write_csv("drivers.csv", header, rows)
    writer.finalize()
    print(f"simulate-drivers: {drivers.n_paths} paths, {tgrid.n_steps} steps -> "
          f"{writer.out_dir / 'drivers.csv'}")
    return EXIT_OK


def cmd_solve(cfg: RunConfig) -> int:
    sol, diag, op, drivers, grid, dims, tgrid = _solve_from_config(cfg)
    writer = RunWriter(Path(cfg.get("run", "out_dir")), cfg, "solve")
    _write_solution(writer, cfg, sol, diag, grid, tgrid)
    _, rms = reconstruct_forward(sol, op, drivers)
    summary = {
        "converged": diag.converged,
        "diverged": diag.diverged,
        "iterations": diag.iterations,
        "deltas": diag.deltas,
        "ratios": diag.ratios,
        "cauchy_tail": diag.cauchy_tail if diag.cauchy_tail != float("inf") else None,
        "forward_rms": rms,
        "gamma": diag.gamma,
        "gamma_hat": diag.gamma_hat,
    }
    writer.write_json("solve_report.json", summary)
    if cfg.typed("environment", "evaluate"):
        _write_environment(writer, cfg, sol, tgrid)
    writer.finalize()
    state = "converged" if diag.converged else "NOT converged"
    print(f"solve: {state} after {diag.iterations} iteration(s); "
          f"forward RMS residual {rms:.3e}; outputs in {writer.out_dir}")
    return EXIT_OK if diag.converged else EXIT_NOT_CONVERGED


def _write_environment(writer: RunWriter, cfg: RunConfig, sol, tgrid) -> None:
    from .domains import evaluate_along_path, simulate_environment

    env = cfgmod.build_environment(cfg)
    n_raw = cfg.get("environment", "n_paths")
    n_env = cfg.typed("run", "n_paths") if n_raw == "run" else int(n_raw)
    seed = int(cfg.get("run", "seed"))
    paths = simulate_environment(env, tgrid, seed, n_env)
    values = evaluate_along_path(sol, paths,
                                 derivative_orders=cfg.typed("environment", "derivative_orders"))
    header = (["path", "t"] + [f"x{i + 1}" for i in range(env.p)]
              + [f"v{r + 1}" for r in range(values.values.shape[-1])] + ["stopped"])
    rows = []
    for i in range(paths.n_paths):
        for j, t in enumerate(tgrid.times):
            stopped = int(j >= paths.tau_index[i])
            vals = values.values[i, j]
            vals = ["" if not np.isfinite(v) else v for v in vals]
            rows.append([i, t] + list(paths.X[i, j]) + vals + [stopped])
    writer.write_csv("environment_paths.csv", header, rows)


def cmd_finance_validate(cfg: RunConfig) -> int:
    from .finance import ValidationConfig, optimal_portfolio, validate_finance

    model = cfgmod.build_finance_model(cfg)
    sec = cfg.sections()["finance"]
    vcfg = ValidationConfig(
        n_steps=cfg.typed("time", "n_steps"),
        dx=float(sec["dx"]),
        n_paths=cfg.typed("run", "n_paths"),
        seed=int(cfg.get("run", "seed")),
        eval_x_max=None if sec["eval_x_max"] == "auto" else float(sec["eval_x_max"]),
        basis_degree=cfg.typed("picard", "basis_degree"),
        max_iters=cfg.typed("picard", "max_iters"),
        rel_tol=cfg.typed("picard", "rel_tol"),
        x_filter_degree=int(sec["x_filter_degree"]),
        norm_k_max=cfg.typed("picard", "norm_k_max"),
        n_y=int(sec["n_y"]),
        tau_paths=int(sec["tau_paths"]),
    )
    report, sol, closed = validate_finance(model, vcfg)
    writer = RunWriter(Path(cfg.get("run", "out_dir")), cfg, "finance-validate")
    writer.write_json("finance_report.json", report.to_dict())

    # surfaces: V(t, x) at the spot factor level, f(t, y), policy pi
    times = closed.times
    yi = int(np.argmin(np.abs(closed.ygrid - model.y0)))
    rows = [[t, x, closed.V[j, i, yi]] for j, t in enumerate(times)
            for i, x in enumerate(closed.xgrid)]
    writer.write_csv("value_surface.csv", ["t", "x", "V"], rows)
    numeric = sol.mean_surface()
    rows = [[t, x, numeric[j, i, 0]] for j, t in enumerate(times)
            for i, x in enumerate(closed.xgrid)]
    writer.write_csv("value_surface_numeric.csv", ["t", "x", "V"], rows)
    policy = optimal_portfolio(times, closed.xgrid, closed.V[:, :, yi], model,
                               Vbar1=closed.Vbar[:, :, yi, 0], y_of_t=model.y0)
    rows = [[t, x, policy.pi[j, i, 0], policy.pi[j, i, 1]] for j, t in enumerate(times)
            for i, x in enumerate(closed.xgrid)]
    writer.write_csv("policy_surface.csv", ["t", "x", "pi0", "pi1"], rows)
    writer.finalize()

    tol_v = float(sec["tol_v"])
    ok = report.converged and not report.diverged and report.max_rel_err_V <= tol_v
    print("finance-validate summary")
    print(f"  max relative V error : {report.max_rel_err_V:.6f} (tolerance {tol_v})")
    print(f"  max abs Vbar error   : {report.max_abs_err_Vbar[0]:.3e}, {report.max_abs_err_Vbar[1]:.3e}")
    print(f"  contraction ratios   : {['%.3f' % r if r is not None else '-' for r in report.ratios]}")
    print(f"  converged            : {report.converged} in {report.iterations} iteration(s)")
    print(f"  forward RMS residual : {report.forward_rms:.3e}")
    print(f"  bankruptcy tau       : mean {report.tau_mean:.4f}, stopped fraction "
          f"{report.tau_stopped_fraction:.4f}")
    print(f"  outcome              : {'PASS' if ok else 'FAIL'}")
    return EXIT_OK if ok else EXIT_NOT_CONVERGED


def cmd_emit_surfaces(cfg: RunConfig) -> int:
    sol, diag, op, drivers, grid, dims, tgrid = _solve_from_config(cfg)
    writer = RunWriter(Path(cfg.get("run", "out_dir")), cfg, "emit-surfaces")
    _write_solution(writer, cfg, sol, diag, grid, tgrid)
    _write_environment(writer, cfg, sol, tgrid)
    writer.finalize()
    print(f"emit-surfaces: surface and path CSVs in {writer.out_dir}")
    return EXIT_OK if diag.converged else EXIT_NOT_CONVERGED


# ---------------------------------------------------------------------------
# entry point
# ---------------------------------------------------------------------------

def make_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="bspde",
        description="Backward stochastic PDE solver kit: drivers, Picard solve, "
                    "finance validation, surface emission.",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    for name, fn in COMMANDS.items():
        p = sub.add_parser(name, help=fn.__doc__)
        p.add_argument("--config", required=True, help="path to the run config")
        p.add_argument("--out", default=None, help="output directory (overrides config)")
        p.add_argument("--seed", type=int, default=None, help="master seed override")
        p.add_argument("--paths", type=int, default=None, help="path count override")
        p.add_argument("--threads", type=int, default=None,
                       help="worker hint; results are bitwise identical for any value")
    return parser


COMMANDS = {
    "simulate-drivers": cmd_simulate_drivers,
    "solve": cmd_solve,
    "finance-validate": cmd_finance_validate,
    "emit-surfaces": cmd_emit_surfaces,
}


def main(argv: list[str] | None = None) -> int:
    parser = make_parser()
    args = parser.parse_args(argv)
    try:
        cfg = _load_config(args)
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_ERROR
    except ConfigError as exc:
        print("configuration errors:", file=sys.stderr)
        for err in exc.errors:
            print(f"  - {err}", file=sys.stderr)
        return EXIT_ERROR
    try:
        return COMMANDS[args.command](cfg)
    except ConfigError as exc:
        for err in exc.errors:
            print(f"error: {err}", file=sys.stderr)
        return EXIT_ERROR
    except (ConfigurationError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
