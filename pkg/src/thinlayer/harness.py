"""Experiment orchestration: sweeps, order studies, report persistence.

A convergence study runs the homogenized solver once and the resolved solver
per eps, accumulates time-integrated comparison errors, per-eps diagnostics
(mass drift, weighted norms, trace constants) and the evolution audit, and
persists everything as CSV with full-precision (round-trip exact) number
formatting.  eps-runs are independent and may execute on a small thread pool
capped by THINLAYER_THREADS; results are keyed by eps so scheduling cannot
change the output.
"""

from __future__ import annotations

import os
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import fem, geometry, micro, problems, transform, unfolding
from .errors import ConfigError, IoError
from .macro import MacroSolver


@dataclass
class ExperimentConfig:
    """Everything a study needs, with the documented defaults."""

    # geometry
    width: str = "straight(0.5)"
    center: float = 0.5
    margin: float = 0.05
    H: float = 1.0
    # transform
    transform: str = "pinch"
    amplitude: float = 0.3
    band: float = 0.08
    macro_modulation: float = 0.5
    # problem
    species: int = 1
    d_plus: float = 1.0
    d_minus: float = 1.0
    d_layer: str = "constant(1.0)"
    q_plus: tuple = (0.0, 0.0)
    q_minus: tuple = (0.0, 0.0)
    q_layer: tuple = (0.0, 0.0)
    reaction_f: str = "zero"
    reaction_g: str = "zero"
    reaction_h: str = "zero"
    initial: str = "two_reservoir(1.0, 0.0)"
    source: str = "none"
    # numerics
    eps_list: tuple = (0.25, 0.125)
    resolution: int = 4
    dt: float = 1e-2
    T: float = 0.5
    solver_tol: float = 1e-12
    macro_nx: int = 33
    macro_ny: int = 32
    # output
    outdir: str = "out"
    plot: bool = False
    seed: int = 0
    timings: bool = False

    def validate(self):
        eps = list(self.eps_list)
        if not eps:
            raise ConfigError("eps", "at least one scale required")
        if any(e2 >= e1 for e1, e2 in zip(eps, eps[1:])):
            raise ConfigError("eps", "scales must be strictly decreasing")
        for e in eps:
            if not geometry.admissible_scale(e):
                raise ConfigError("eps", f"1/eps must be an integer, got {e}")
            if e >= self.H:
                raise ConfigError("eps", f"eps = {e} must be below H = {self.H}")
        if self.T <= 0:
            raise ConfigError("T", "horizon must be positive")
        if self.dt > self.T:
            raise ConfigError("dt", "time step exceeds the horizon")
        if self.resolution < 2:
            raise ConfigError("resolution", "mesh resolution r must be >= 2")
        if self.transform not in transform.TRANSFORM_REGISTRY:
            raise ConfigError("transform",
                              f"unknown kind '{self.transform}'")
        if self.source not in ("none", "mms_cos"):
            raise ConfigError("source", f"unknown source '{self.source}'")
        return self

    # -- builders -------------------------------------------------------------

    def build_channel(self) -> geometry.ChannelSpec:
        base = problems.parse_registry_key(
            self.width, geometry.WIDTH_REGISTRY, "width"
        )
        return replace(base, center=self.center, boundary_margin=self.margin)

    def build_geometry(self) -> geometry.ReferenceGeometry:
        return geometry.build_reference_geometry(self.build_channel(), self.H)

    def build_spec(self) -> transform.TransformSpec:
        channel = self.build_channel()
        if self.transform == "static":
            return transform.static_spec(self.T)
        return transform.pinch_spec(
            channel,
            amplitude=self.amplitude,
            horizon=self.T,
            band=self.band,
            macro_modulation=self.macro_modulation,
        )

    def build_data(self, geom=None, eps=None) -> problems.ProblemData:
        species = [
            problems.make_species(
                d_plus=self.d_plus,
                d_minus=self.d_minus,
                d_layer=self.d_layer,
                q_plus=self.q_plus,
                q_minus=self.q_minus,
                q_layer=self.q_layer,
                f=self.reaction_f,
                g=self.reaction_g,
                h=self.reaction_h,
                initial=self.initial,
            )
            for _ in range(self.species)
        ]
        data = problems.ProblemData(species=species, seed=self.seed)
        if self.source == "mms_cos":
            if eps is None or geom is None:
                raise ConfigError("source", "manufactured case needs geometry and eps")
            problems.attach_mms_cos(data, geom, eps)
        return data

    def macro_x_nodes(self) -> np.ndarray:
        return np.linspace(0.0, 1.0, self.macro_nx)


def _n_workers(n_tasks: int) -> int:
    cap = os.environ.get("THINLAYER_THREADS")
    if cap is not None:
        try:
            return max(1, min(int(cap), n_tasks))
        except ValueError:
            raise ConfigError("THINLAYER_THREADS", "must be an integer") from None
    return 1


@dataclass
class ExperimentReport:
    """Study results: one row per eps plus rates, flux jumps, audit."""

    rows: list = field(default_factory=list)
    rates: list = field(default_factory=list)
    fluxjump: list = field(default_factory=list)
    audit: list = field(default_factory=list)
    timings: dict = field(default_factory=dict)
    final_errors: dict = field(default_factory=dict)

    CONVERGENCE_COLUMNS = (
        "eps", "err_bulk_plus", "err_bulk_minus", "err_layer_2s",
        "mass_drift", "norm_L_sup", "norm_H_l2", "trace_C", "seconds",
    )
    RATE_COLUMNS = (
        "eps_coarse", "eps_fine", "rate_bulk_plus", "rate_bulk_minus",
        "rate_layer_2s", "flag",
    )
    FLUX_COLUMNS = (
        "t", "node", "species", "flux_plus", "flux_minus", "jump", "residual",
    )
    AUDIT_COLUMNS = (
        "eps", "sup_psi_dev", "sup_psi_dot", "sup_F", "J_min", "J_max",
        "sup_dtJ_pointwise", "shift_ratio_1", "shift_ratio_2", "flags",
    )

    def compute_rates(self):
        self.rates = []
        keys = ("err_bulk_plus", "err_bulk_minus", "err_layer_2s")
        for a, b in zip(self.rows, self.rows[1:]):
            entry = {"eps_coarse": a["eps"], "eps_fine": b["eps"], "flag": ""}
            for key in keys:
                rk = "rate_" + key.replace("err_", "")
                if a[key] > 0.0 and b[key] > 0.0:
                    entry[rk] = float(np.log2(a[key] / b[key]))
                else:
                    entry[rk] = float("nan")
                    entry["flag"] = "undefined"
            self.rates.append(entry)
        return self.rates


def _write_csv(path: Path, columns, rows):
    try:
        with open(path, "w") as fh:
            fh.write(",".join(columns) + "\n")
            for row in rows:
                cells = []
                for c in columns:
                    v = row.get(c, "")
                    cells.append(repr(v) if isinstance(v, float) else str(v))
                fh.write(",".join(cells) + "\n")
    except OSError as exc:
        raise IoError(f"cannot write {path}: {exc}") from None


def read_csv(path):
    """Round-trip reader: returns a list of dicts with floats re-parsed."""
    with open(path) as fh:
        header = fh.readline().strip().split(",")
        rows = []
        for line in fh:
            cells = line.rstrip("\n").split(",")
            row = {}
            for key, cell in zip(header, cells):
                try:
                    row[key] = float(cell)
                except ValueError:
                    row[key] = cell
            rows.append(row)
    return rows


def write_report(report: ExperimentReport, outdir, plot: bool = False,
                 timings: bool = False):
    """Persist the report as the documented CSV set (+ optional SVG)."""
    out = Path(outdir)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise IoError(f"cannot create {out}: {exc}") from None
    rows = []
    for row in report.rows:
        r = dict(row)
        r["seconds"] = report.timings.get(row["eps"], 0.0) if timings else 0.0
        rows.append(r)
    _write_csv(out / "convergence.csv", ExperimentReport.CONVERGENCE_COLUMNS, rows)
    _write_csv(out / "rates.csv", ExperimentReport.RATE_COLUMNS, report.rates)
    _write_csv(out / "fluxjump.csv", ExperimentReport.FLUX_COLUMNS, report.fluxjump)
    _write_csv(out / "audit.csv", ExperimentReport.AUDIT_COLUMNS, report.audit)
    if plot and report.rows:
        _plot_convergence(report, out / "convergence.svg")
    return out


def _plot_convergence(report, path):
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    eps = [r["eps"] for r in report.rows]
    fig, ax = plt.subplots(figsize=(5, 4))
    for key, label in (
        ("err_bulk_plus", "bulk+"),
        ("err_bulk_minus", "bulk-"),
        ("err_layer_2s", "layer (two-scale)"),
    ):
        vals = [r[key] for r in report.rows]
        if all(v > 0 for v in vals):
            ax.loglog(eps, vals, "o-", label=label)
    ax.set_xlabel("eps")
    ax.set_ylabel("L2(0,T) error vs homogenized limit")
    ax.legend()
    ax.grid(True, which="both", alpha=0.3)
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)


# -- studies --------------------------------------------------------------------

def _run_one_eps(config, geom, spec, msol, mtraj, eps):
    t0 = time.perf_counter()
    tiling = geometry.tile_layer(geom, eps)
    mesh = fem.mesh_micro(geom, tiling, config.resolution)
    data = config.build_data(geom=geom, eps=eps)
    data.validate(horizon=config.T)
    solver = micro.MicroSolver(mesh, data, spec, eps, tol=config.solver_tol)
    traj, diags = solver.solve(config.dt, config.T)

    acc = {"err_bulk_plus": 0.0, "err_bulk_minus": 0.0, "err_layer": 0.0}
    for sm, sM in zip(traj, mtraj):
        e = unfolding.two_scale_error(mesh, sm, msol, sM, eps)
        for k in acc:
            acc[k] += config.dt * float(e[k][0]) ** 2
    final = unfolding.two_scale_error(mesh, traj[-1], msol, mtraj[-1], eps)

    mass0 = [d["mass"] for d in diags if d["t"] == 0.0][0]
    drift = max(
        abs(d["mass"] - mass0) / max(abs(mass0), 1e-300)
        for d in diags
        if d["species"] == 0
    )
    norm_L_sup = max(d["norm_L"] for d in diags if d["species"] == 0)
    norm_H_l2 = float(
        np.sqrt(
            sum(
                config.dt * d["norm_H"] ** 2
                for d in diags
                if d["species"] == 0 and d["t"] > 0.0
            )
        )
    )
    trace = micro.verify_trace_inequality(mesh, eps, [1.0], seed=config.seed)
    row = {
        "eps": eps,
        "err_bulk_plus": float(np.sqrt(acc["err_bulk_plus"])),
        "err_bulk_minus": float(np.sqrt(acc["err_bulk_minus"])),
        "err_layer_2s": float(np.sqrt(acc["err_layer"])),
        "mass_drift": float(drift),
        "norm_L_sup": float(norm_L_sup),
        "norm_H_l2": norm_H_l2,
        "trace_C": float(trace[1.0]),
    }
    final_err = {k: float(v[0]) for k, v in final.items()}
    return row, final_err, time.perf_counter() - t0


def run_convergence_study(config: ExperimentConfig) -> ExperimentReport:
    """Macro once, micro per eps, two-scale errors, rates, audit, flux rows.

    On failure the partial report is flushed to the output directory before
    the exception propagates.
    """
    config.validate()
    geom = config.build_geometry()
    spec = config.build_spec()
    spec.validate()
    limit = transform.limit_transform(spec)

    report = ExperimentReport()
    audit = transform.check_assumptions(spec, config.eps_list)
    for arow in audit.summary_rows():
        arow = dict(arow)
        arow["flags"] = ";".join(f for f in audit.flags if f"eps={arow['eps']}" in f)
        report.audit.append(arow)

    try:
        t0 = time.perf_counter()
        data = config.build_data()
        data.validate(horizon=config.T)
        bp, bm = fem.mesh_bulk_pair(config.H, config.macro_x_nodes(), config.macro_ny)
        cell = fem.mesh_cell(config.build_channel(), config.resolution)
        msol = MacroSolver(bp, bm, cell, limit, data, tol=config.solver_tol)
        mtraj, _ = msol.solve(config.dt, config.T)
        report.timings["macro"] = time.perf_counter() - t0

        workers = _n_workers(len(config.eps_list))
        results = {}
        if workers > 1:
            with ThreadPoolExecutor(max_workers=workers) as pool:
                futs = {
                    eps: pool.submit(
                        _run_one_eps, config, geom, spec, msol, mtraj, eps
                    )
                    for eps in config.eps_list
                }
                for eps, fut in futs.items():
                    results[eps] = fut.result()
        else:
            for eps in config.eps_list:
                results[eps] = _run_one_eps(config, geom, spec, msol, mtraj, eps)
        for eps in config.eps_list:
            row, final_err, secs = results[eps]
            report.rows.append(row)
            report.final_errors[eps] = final_err
            report.timings[eps] = secs

        report.compute_rates()
        report.fluxjump = [
            {
                "t": r["t"],
                "node": r["node"],
                "species": r["species"],
                "flux_plus": r["flux_plus"],
                "flux_minus": r["flux_minus"],
                "jump": r["jump"],
                "residual": max(r["residual_plus"], r["residual_minus"]),
            }
            for r in msol.flux_jump_residual(mtraj[-1])
        ]
    except Exception:
        if config.outdir:
            write_report(report, config.outdir, plot=False,
                         timings=config.timings)
        raise
    return report


def run_mms_study(config: ExperimentConfig):
    """Observed spatial/temporal orders for the manufactured case.

    Orders come from Richardson ratios of error differences across three
    levels, which cancels any level-independent error floor.  The study runs
    on the coarsest configured eps.
    """
    config.validate()
    if config.source != "mms_cos":
        raise ConfigError("source", "manufactured study needs source = 'mms_cos'")
    geom = config.build_geometry()
    eps = config.eps_list[0]
    tiling = geometry.tile_layer(geom, eps)

    def run(r, dt, T):
        spec = transform.static_spec(T)
        mesh = fem.mesh_micro(geom, tiling, r)
        data = config.build_data(geom=geom, eps=eps)
        data.validate(horizon=T)
        solver = micro.MicroSolver(mesh, data, spec, eps, tol=config.solver_tol)
        traj, _ = solver.solve(dt, T)
        u = traj[-1].u[0]
        exact = data.species[0].exact_bulk(T, mesh.vertices)
        d = u - exact
        err2 = 0.0
        for region in ("bulk+", "bulk-"):
            M = fem.assemble_weighted_mass(mesh, 1.0, {region: 1.0})
            mask = M.diagonal() > 0
            dv = np.where(mask, d, 0.0)
            err2 += dv @ M @ dv
        return float(np.sqrt(err2))

    r0 = max(2, config.resolution // 2)
    r_levels = [r0, 2 * r0, 4 * r0]
    dt_space = config.T / 250.0
    e_space = [run(r, dt_space, config.T) for r in r_levels]
    # the temporal levels only tile an integer number of steps on T = 1
    dt_levels = [1.0 / 25.0, 1.0 / 50.0, 1.0 / 100.0]
    T_time = 1.0
    e_time = [run(2 * r0, dt, T_time) for dt in dt_levels]

    def richardson(errors):
        d1 = errors[0] - errors[1]
        d2 = errors[1] - errors[2]
        if d2 == 0.0 or d1 / d2 <= 0.0:
            return float("nan")
        return float(np.log2(d1 / d2))

    return {
        "eps": eps,
        "r_levels": r_levels,
        "spatial_errors": e_space,
        "spatial_order": richardson(e_space),
        "dt_levels": dt_levels,
        "temporal_errors": e_time,
        "temporal_order": richardson(e_time),
    }


def write_mms_csv(result, outdir):
    out = Path(outdir)
    out.mkdir(parents=True, exist_ok=True)
    rows = [
        {"kind": "spatial", "level": float(r), "error": e}
        for r, e in zip(result["r_levels"], result["spatial_errors"])
    ] + [
        {"kind": "temporal", "level": float(dt), "error": e}
        for dt, e in zip(result["dt_levels"], result["temporal_errors"])
    ] + [
        {"kind": "spatial_order", "level": float("nan"),
         "error": result["spatial_order"]},
        {"kind": "temporal_order", "level": float("nan"),
         "error": result["temporal_order"]},
    ]
    _write_csv(out / "mms.csv", ("kind", "level", "error"), rows)
    return out / "mms.csv"
