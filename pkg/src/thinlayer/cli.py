"""Command-line entry point.

Subcommands: mesh, check-transform, run-micro, run-macro, converge, mms,
unfold-check.  Configuration lives in a TOML file with sections [geometry],
[transform], [problem], [numerics], [output]; --set section.key=value
overrides apply after the file.  Exit codes: 0 success, 1 numerical failure,
2 configuration error.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

import numpy as np

try:  # Python >= 3.11
    import tomllib
except ModuleNotFoundError:  # pragma: no cover
    import tomli as tomllib

from . import fem, geometry, harness, micro, problems, transform, unfolding
from .errors import ConfigError, ThinLayerError
from .harness import ExperimentConfig
from .macro import MacroSolver

#: section -> key -> (config attribute, description with units/default)
CONFIG_SCHEMA = {
    "geometry": {
        "width": ("width", "channel width registry key, e.g. straight(0.5) "
                           "[cell units; default straight(0.5)]"),
        "center": ("center", "channel centerline abscissa in (0,1) [default 0.5]"),
        "margin": ("margin", "minimal wall distance to the lateral cell "
                             "boundary [default 0.05]"),
        "H": ("H", "bulk half height [length; default 1.0]"),
    },
    "transform": {
        "kind": ("transform", "evolution kind: static | pinch [default pinch]"),
        "amplitude": ("amplitude", "pinch amplitude [dimensionless; default 0.3]"),
        "band": ("band", "identity band around the cell boundary [default 0.08]"),
        "macro_modulation": ("macro_modulation",
                             "amplitude of the sin(2 pi x') modulation "
                             "[default 0.5]"),
    },
    "problem": {
        "species": ("species", "number of species m [default 1]"),
        "d_plus": ("d_plus", "bulk+ diffusion coefficient [length^2/time; "
                             "default 1.0]"),
        "d_minus": ("d_minus", "bulk- diffusion coefficient [default 1.0]"),
        "d_layer": ("d_layer", "layer diffusion registry key: constant(d) | "
                               "x_modulated(d0, amp) [default constant(1.0)]"),
        "q_plus": ("q_plus", "bulk+ advection velocity [length/time; "
                             "default (0,0)]"),
        "q_minus": ("q_minus", "bulk- advection velocity [default (0,0)]"),
        "q_layer": ("q_layer", "layer advection (cell frame) [default (0,0)]"),
        "f": ("reaction_f", "bulk reaction key: zero | linear_decay(k) | "
                            "logistic_clipped(r,K,cap) | "
                            "langmuir_clipped(ka,kd,cap) [default zero]"),
        "g": ("reaction_g", "layer reaction key [default zero]"),
        "h": ("reaction_h", "wall exchange key [default zero]"),
        "initial": ("initial", "initial data key: constant(c) | "
                               "two_reservoir(a,b) | gaussian_bump(x0,y0,s) "
                               "[default two_reservoir(1,0)]"),
        "source": ("source", "manufactured source: none | mms_cos "
                             "[default none]"),
    },
    "numerics": {
        "eps": ("eps_list", "decreasing list of scales, each 1/eps integer "
                            "[default [0.25, 0.125]]"),
        "resolution": ("resolution", "segments per channel wall per cell r "
                                     "[default 4]"),
        "dt": ("dt", "time step [time; default 0.01]"),
        "T": ("T", "horizon [time; default 0.5]"),
        "solver_tol": ("solver_tol", "linear solve relative residual "
                                     "[default 1e-12]"),
        "macro_nx": ("macro_nx", "macro interface node count [default 33]"),
        "macro_ny": ("macro_ny", "macro bulk rows [default 32]"),
    },
    "output": {
        "dir": ("outdir", "output directory [default out]"),
        "plot": ("plot", "write convergence.svg [default false]"),
        "seed": ("seed", "random seed for sampled checks [default 0]"),
        "timings": ("timings", "write wall-clock seconds into CSV; off keeps "
                               "outputs bit-reproducible [default false]"),
    },
}


def parse_config(path, overrides=()) -> ExperimentConfig:
    """Load and validate a TOML config; unknown keys are rejected."""
    values = {}
    if path is not None:
        p = Path(path)
        if not p.exists():
            raise ConfigError("config", f"file not found: {p}")
        try:
            with open(p, "rb") as fh:
                raw = tomllib.load(fh)
        except tomllib.TOMLDecodeError as exc:
            raise ConfigError("config", f"malformed TOML: {exc}") from None
        for section, entries in raw.items():
            if section not in CONFIG_SCHEMA:
                raise ConfigError(section, "unknown section")
            if not isinstance(entries, dict):
                raise ConfigError(section, "expected a table")
            for key, value in entries.items():
                if key not in CONFIG_SCHEMA[section]:
                    raise ConfigError(f"{section}.{key}", "unknown key")
                values[CONFIG_SCHEMA[section][key][0]] = value
    for item in overrides:
        if "=" not in item:
            raise ConfigError(item, "override must look like section.key=value")
        lhs, rhs = item.split("=", 1)
        lhs = lhs.strip()
        if "." not in lhs:
            raise ConfigError(lhs, "override key must be section.key")
        section, key = lhs.split(".", 1)
        if section not in CONFIG_SCHEMA or key not in CONFIG_SCHEMA[section]:
            raise ConfigError(lhs, "unknown config key")
        try:
            parsed = tomllib.loads(f"v = {rhs}")["v"]
        except tomllib.TOMLDecodeError:
            parsed = rhs
        values[CONFIG_SCHEMA[section][key][0]] = parsed

    config = ExperimentConfig()
    for attr, value in values.items():
        if attr in ("eps_list", "q_plus", "q_minus", "q_layer"):
            value = tuple(float(v) for v in np.atleast_1d(value))
        setattr(config, attr, value)
    return config.validate()


def _config_help() -> str:
    lines = ["configuration keys:"]
    for section, entries in CONFIG_SCHEMA.items():
        lines.append(f"  [{section}]")
        for key, (_, desc) in entries.items():
            lines.append(f"    {key}: {desc}")
    return "\n".join(lines)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="thinlayer",
        description="Reaction-diffusion-advection through an evolving thin "
                    "channel layer: resolved and homogenized solvers plus "
                    "the verification workbench.",
        epilog=_config_help(),
        formatter_class=argparse.RawDescriptionHelpFormatter,
    )
    sub = parser.add_subparsers(dest="command")
    for name, help_ in (
        ("mesh", "build the resolved mesh and dump it as text"),
        ("check-transform", "audit the evolution assumptions (never fails)"),
        ("run-micro", "time-step the resolved problem at the first eps"),
        ("run-macro", "time-step the homogenized problem"),
        ("converge", "full eps sweep against the homogenized limit"),
        ("mms", "manufactured-solution order study"),
        ("unfold-check", "verify the unfolding operator identities"),
    ):
        p = sub.add_parser(name, help=help_)
        p.add_argument("--config", default=None, help="TOML config path")
        p.add_argument("--set", action="append", default=[], metavar="K=V",
                       dest="overrides", help="override section.key=value")
        p.add_argument("--outdir", default=None, help="output directory")
        p.add_argument("--plot", action="store_true", help="write SVG plots")
    return parser


def dispatch(args) -> int:
    config = parse_config(args.config, args.overrides)
    if args.outdir:
        config.outdir = args.outdir
    if args.plot:
        config.plot = True
    out = Path(config.outdir)

    if args.command == "mesh":
        geom = config.build_geometry()
        eps = config.eps_list[0]
        mesh = fem.mesh_micro(geom, geometry.tile_layer(geom, eps),
                              config.resolution)
        out.mkdir(parents=True, exist_ok=True)
        fem.write_mesh_text(mesh, out / "mesh.txt")
        print(f"mesh: eps={eps} r={config.resolution} "
              f"vertices={mesh.ndof} triangles={len(mesh.triangles)} "
              f"facets={len(mesh.facets)}")
        print(f"wrote {out / 'mesh.txt'}")
        return 0

    if args.command == "check-transform":
        spec = config.build_spec()
        report = transform.check_assumptions(spec, config.eps_list)
        print(f"evolution audit for '{spec.name}':")
        for row in report.summary_rows():
            print(
                f"  eps={row['eps']:<8g} |psi-id|/eps={row['sup_psi_dev']:.4f} "
                f"|dt psi|/eps={row['sup_psi_dot']:.4f} |F|={row['sup_F']:.4f} "
                f"J in [{row['J_min']:.4f}, {row['J_max']:.4f}]"
            )
        for flag in report.flags:
            print(f"  FLAG: {flag}")
        if not report.flags:
            print("  no violations flagged")
        return 0

    if args.command == "run-micro":
        geom = config.build_geometry()
        spec = config.build_spec()
        eps = config.eps_list[0]
        mesh = fem.mesh_micro(geom, geometry.tile_layer(geom, eps),
                              config.resolution)
        data = config.build_data(geom=geom, eps=eps)
        data.validate(horizon=config.T)
        solver = micro.MicroSolver(mesh, data, spec, eps,
                                   tol=config.solver_tol)
        traj, diags = solver.solve(config.dt, config.T)
        out.mkdir(parents=True, exist_ok=True)
        harness._write_csv(out / "micro_diagnostics.csv",
                           ("t", "species", "mass", "norm_L", "norm_H"), diags)
        with open(out / "micro_snapshots.csv", "w") as fh:
            fh.write("t,dof_id,species,value\n")
            for st in (traj[0], traj[-1]):
                for s in range(data.m):
                    for d, v in enumerate(st.u[s]):
                        fh.write(f"{st.t!r},{d},{s},{v!r}\n")
        d0, d1 = diags[0], diags[-1]
        print(f"resolved run: eps={eps} steps={len(traj) - 1} dofs={mesh.ndof}")
        print(f"  mass {d0['mass']:.8f} -> {d1['mass']:.8f} "
              f"(drift {abs(d1['mass'] - d0['mass']) / abs(d0['mass']):.2e})")
        print(f"  norms at T: L={d1['norm_L']:.6f} H={d1['norm_H']:.6f}")
        print(f"wrote {out / 'micro_diagnostics.csv'}, "
              f"{out / 'micro_snapshots.csv'}")
        return 0

    if args.command == "run-macro":
        spec = config.build_spec()
        limit = transform.limit_transform(spec)
        data = config.build_data()
        data.validate(horizon=config.T)
        bp, bm = fem.mesh_bulk_pair(config.H, config.macro_x_nodes(),
                                    config.macro_ny)
        cell = fem.mesh_cell(config.build_channel(), config.resolution)
        solver = MacroSolver(bp, bm, cell, limit, data, tol=config.solver_tol)
        traj, diags = solver.solve(config.dt, config.T)
        rows = solver.flux_jump_residual(traj[-1])
        out.mkdir(parents=True, exist_ok=True)
        harness._write_csv(out / "macro_diagnostics.csv",
                           ("t", "species", "mass"), diags)
        harness._write_csv(
            out / "fluxjump.csv", harness.ExperimentReport.FLUX_COLUMNS,
            [
                {
                    "t": r["t"], "node": r["node"], "species": r["species"],
                    "flux_plus": r["flux_plus"], "flux_minus": r["flux_minus"],
                    "jump": r["jump"],
                    "residual": max(r["residual_plus"], r["residual_minus"]),
                }
                for r in rows
            ],
        )
        d0, d1 = diags[0], diags[-1]
        print(f"homogenized run: nodes={solver.n_nodes} "
              f"reduced dofs={solver.n_red} steps={len(traj) - 1}")
        print(f"  mass {d0['mass']:.8f} -> {d1['mass']:.8f} "
              f"(drift {abs(d1['mass'] - d0['mass']) / abs(d0['mass']):.2e})")
        print(f"  max flux-jump residual: "
              f"{max(max(r['residual_plus'], r['residual_minus']) for r in rows):.3e}")
        print(f"wrote {out / 'macro_diagnostics.csv'}, {out / 'fluxjump.csv'}")
        return 0

    if args.command == "converge":
        report = harness.run_convergence_study(config)
        write_dir = harness.write_report(report, config.outdir,
                                         plot=config.plot,
                                         timings=config.timings)
        print("convergence study:")
        print("  eps       err_b+      err_b-      err_layer   mass_drift  trace_C")
        for row in report.rows:
            print(f"  {row['eps']:<8g}  {row['err_bulk_plus']:.4e}  "
                  f"{row['err_bulk_minus']:.4e}  {row['err_layer_2s']:.4e}  "
                  f"{row['mass_drift']:.2e}    {row['trace_C']:.4f}")
        for rate in report.rates:
            print(f"  rate {rate['eps_coarse']:g}->{rate['eps_fine']:g}: "
                  f"b+ {rate['rate_bulk_plus']:.2f} "
                  f"b- {rate['rate_bulk_minus']:.2f} "
                  f"layer {rate['rate_layer_2s']:.2f} {rate['flag']}")
        flagged = [a for a in report.audit if a["flags"]]
        print(f"  audit flags: {len(flagged)} "
              f"({'; '.join(a['flags'] for a in flagged) if flagged else 'none'})")
        print(f"wrote report to {write_dir}")
        return 0

    if args.command == "mms":
        result = harness.run_mms_study(config)
        path = harness.write_mms_csv(result, config.outdir)
        print("manufactured-solution study:")
        print(f"  spatial errors  {result['spatial_errors']}")
        print(f"  temporal errors {result['temporal_errors']}")
        print(f"  observed orders: spatial {result['spatial_order']:.3f}, "
              f"temporal {result['temporal_order']:.3f}")
        print(f"wrote {path}")
        return 0

    if args.command == "unfold-check":
        geom = config.build_geometry()
        rng = np.random.default_rng(config.seed)
        print("unfolding operator identities (random P1 fields):")
        for eps in config.eps_list:
            mesh = fem.mesh_micro(geom, geometry.tile_layer(geom, eps),
                                  config.resolution)
            v = rng.standard_normal(mesh.ndof)
            unf = unfolding.unfold(mesh, v, eps)
            M = fem.assemble_weighted_mass(mesh, 1.0, {"channel": 1.0})
            lhs = unfolding.unfolded_norm(unf)
            rhs = float(np.sqrt(v @ M @ v / eps))
            phi = unfolding.UnfoldedField(
                rng.standard_normal(unf.values.shape), unf.cell_mesh, eps
            )
            u_avg = unfolding.average(phi, mesh)
            adj = abs(
                unfolding.layer_inner(mesh, u_avg, v)
                - eps * unfolding.unfolded_inner(phi, unf)
            )
            defect = unfolding.gradient_commutation_check(mesh, v, eps)
            print(f"  eps={eps:<8g} norm identity {abs(lhs - rhs) / rhs:.2e}  "
                  f"adjointness {adj:.2e}  grad commutation {defect:.2e}")
        return 0

    raise ConfigError("command", f"unknown subcommand '{args.command}'")


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.command is None:
        parser.print_usage()
        return 2
    try:
        return dispatch(args)
    except ConfigError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return 2
    except ThinLayerError as exc:
        print(f"numerical failure: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
