import sys
import os
import argparse
import json
import logging
import re
from dataclasses import replace
from typing import Tuple

import numpy as np
import pandas as pd
from dotenv import load_dotenv

# Add src to path
sys.path.append(os.path.join(os.path.dirname(__file__), "src"))
from config import RunConfig
from domain import Dataset, RegionGrid
from errors import SchemaError, SpatioTempError, UnseenDay
from engine import FitResult
from export import RunManifest, read_json, trace_frame, write_frame, write_json
from ingest import ingest_csv, write_csv
from mesh import build_mesh, export_mesh
from models import (
    GmrfSpec,
    RasterSpec,
    Target,
    build_gmrf,
    build_lmm,
    day_precisions,
    export_spatial_surface,
    fit_model,
    predict,
    spec_from_dict,
    targets_from,
)
from sparse_linalg import to_coo_text
from synth import SimConfig, TrueParams, simulate
from validation import (
    EngineConfig,
    cv_table,
    fold_map,
    h_sweep,
    make_folds_kfold,
    make_folds_lpo_hblock,
    paired_table,
    run_cv,
)

load_dotenv()

logger = logging.getLogger("spatiotemp")

# entries of the dense η precision below this fraction of the largest are dropped on export
ETA_DROP = 1e-10

COMMANDS = ("simulate", "fit", "predict", "cv", "sweep", "export-precision", "export-surface")


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)

    logging.basicConfig(
        level=logging.DEBUG if args.verbose > 1 else logging.INFO if args.verbose else logging.WARNING,
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
    )

    manifest = RunManifest(args.command, args.output_dir or RunConfig.output_dir, {})
    try:
        cfg = RunConfig.from_file(args.config, _overrides(args))
        manifest.output_dir, manifest.config, manifest.seed = cfg.output_dir, cfg.to_dict(), cfg.seed
        os.makedirs(cfg.output_dir, exist_ok=True)
        HANDLERS[args.command](cfg, args, manifest)
    except Exception as exc:
        if not isinstance(exc, (SpatioTempError, OSError, ValueError)):
            logger.debug("Unexpected failure in %s", args.command, exc_info=True)
        return _fail(manifest, exc)
    manifest.write("ok")
    return 0


def _fail(manifest: RunManifest, exc: BaseException) -> int:
    error = {"error": type(exc).__name__, "message": str(exc)}
    print(json.dumps(error), file=sys.stderr)
    try:
        manifest.write("error", error)
    except OSError:
        pass
    return 2


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=str, help="Config file of key = value lines")
    common.add_argument("--input", type=str, help="Station/day CSV")
    common.add_argument("--output-dir", type=str, help="Directory for all outputs")
    common.add_argument("--models", type=str, help="Comma list of lmm, gmrf, mean")
    common.add_argument("--seed", type=int, help="Random seed")
    common.add_argument("-v", "--verbose", action="count", default=0, help="-v for progress, -vv for detail")

    parser = argparse.ArgumentParser(description="Spatio-temporal PM2.5 modelling CLI")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", parents=[common], help="Write a synthetic dataset with known truth")
    p.add_argument("--n-stations", type=int, default=60)
    p.add_argument("--n-days", type=int, default=30)
    p.add_argument("--truth", choices=("gmrf", "lmm"), default="gmrf")
    p.add_argument("--layout", choices=("uniform", "clustered"), default="uniform")
    p.add_argument("--domain-km", type=float, default=100.0)
    p.add_argument("--covariates", type=int, default=0)
    p.add_argument("--range-km", type=float, help="Matérn range of both true fields")
    p.add_argument("--sigma2-eps", type=float, help="True noise variance")

    p = sub.add_parser("fit", parents=[common], help="Fit models and persist the results")
    p.add_argument("--max-rounds", type=int)
    p.add_argument("--tol", type=float)
    p.add_argument("--max-evals", type=int, help="Nelder-Mead evaluations per search")

    p = sub.add_parser("predict", parents=[common], help="Predict from a persisted fit")
    p.add_argument("--fit", dest="fit_path", type=str, help="Fit JSON (default: <output-dir>/fit_<model>.json)")
    p.add_argument("--targets", type=str, help="Target CSV (default: the input dataset)")

    p = sub.add_parser("cv", parents=[common], help="Cross-validate models: RMSE and R2 per scheme")
    p.add_argument("--schemes", dest="cv_schemes", type=str, help="Comma list of kfold:K / lpo:p:h")
    p.add_argument("--n-iter", type=int)
    p.add_argument("--fold-map", action="store_true", help="Also write station roles per LPO iteration")

    p = sub.add_parser("sweep", parents=[common], help="RMSE against the h-block radius")
    p.add_argument("--p", dest="sweep_p", type=int)
    p.add_argument("--h-list", type=str, help="Comma list of radii in km, ascending")
    p.add_argument("--n-iter", type=int)

    p = sub.add_parser("export-precision", parents=[common], help="Precision matrices of one day")
    p.add_argument("--day", type=str, help="Day label as written in the input file")
    p.add_argument("--fit", dest="fit_path", type=str)

    p = sub.add_parser("export-surface", parents=[common], help="Spatial effect of one day on a grid")
    p.add_argument("--day", type=str, help="Day label as written in the input file")
    p.add_argument("--fit", dest="fit_path", type=str)
    p.add_argument("--nx", dest="raster_nx", type=int)
    p.add_argument("--ny", dest="raster_ny", type=int)
    p.add_argument("--component", choices=("intercept", "slope"), default="intercept")
    return parser


# -----------------------
# Commands
# -----------------------

def cmd_simulate(cfg: RunConfig, args, manifest: RunManifest) -> None:
    params = TrueParams(beta=(1.0,) * args.covariates)
    if args.range_km is not None:
        params = replace(params, range_gamma=args.range_km, range_psi=args.range_km)
    if args.sigma2_eps is not None:
        params = replace(params, sigma2_eps=args.sigma2_eps)
    sim = SimConfig(
        layout=args.layout,
        n_stations=args.n_stations,
        n_days=args.n_days,
        domain_km=args.domain_km,
        truth=args.truth,
        params=params,
        n_covariates=args.covariates,
        region_cell_km=cfg.region_cell_km,
        seed=cfg.seed,
    )
    data, truth = simulate(sim)
    data_path = manifest.add(write_csv(data, os.path.join(cfg.output_dir, "data.csv")))
    manifest.add(write_json(os.path.join(cfg.output_dir, "truth.json"), truth.to_dict()))

    _banner("SIMULATED DATASET")
    print(f"Truth: {sim.truth} ({sim.layout} layout)")
    print(f"Stations: {len(data.stations)}  Days: {data.day_count}  Rows: {len(data)}")
    print(f"Written: {data_path}")
    print("=" * 60)


def cmd_fit(cfg: RunConfig, args, manifest: RunManifest) -> None:
    data = _load(cfg)
    grid = _grid(cfg)
    _banner("MODEL FIT")
    for kind in _fitted_kinds(cfg):
        mesh = _mesh(cfg, data) if kind == "gmrf" else None
        result, model = fit_model(
            kind, data, region_grid=grid, mesh=mesh, max_rounds=cfg.max_rounds, tol=cfg.tol, max_evals=cfg.max_evals
        )
        payload = {"spec": model.layout.to_dict(), "fit": result.to_dict(), "day_labels": list(data.day_labels)}
        manifest.add(write_json(_fit_path(cfg, kind), payload))
        manifest.add(write_frame(
            os.path.join(cfg.output_dir, f"trace_{kind}.csv"), trace_frame(result.trace, result.theta_names)
        ))
        if mesh is not None:
            for path in export_mesh(mesh, os.path.join(cfg.output_dir, "mesh")):
                manifest.add(path)

        print(f"\n{kind.upper()}  loglik {result.loglik:.4f}  "
              f"({'converged' if result.convergence.converged else 'NOT converged'}, "
              f"{result.convergence.rounds} rounds)")
        for name, value in result.theta.items():
            print(f"  {name:<14} {value:.6g}")
        print(f"  beta           {np.round(result.beta_hat, 4).tolist()}")
    print("\n" + "=" * 60)


def cmd_predict(cfg: RunConfig, args, manifest: RunManifest) -> None:
    for kind in _fitted_kinds(cfg):
        result, spec, labels = _load_fit(cfg, kind)
        if args.targets:
            targets = _read_targets(args.targets, spec, labels)
        else:
            targets = targets_from(_load(cfg))
        pred = predict(result, spec, targets)
        frame = pred.frame.assign(day=[labels[d - 1] for d in pred.frame["day"]])
        path = manifest.add(write_frame(os.path.join(cfg.output_dir, f"predictions_{kind}.csv"), frame))
        print(f"{kind}: {len(frame)} predictions written to {path}")


def cmd_cv(cfg: RunConfig, args, manifest: RunManifest) -> None:
    data = _load(cfg)
    engine = _engine(cfg, data)
    reports = []
    for scheme in cfg.cv_schemes:
        if scheme.kind == "kfold":
            plan = make_folds_kfold(data, scheme.k, cfg.seed)
        else:
            plan = make_folds_lpo_hblock(data, scheme.p, scheme.h, cfg.n_iter, cfg.seed)
            if args.fold_map:
                manifest.add(write_frame(
                    os.path.join(cfg.output_dir, f"fold_map_{_slug(scheme.label)}.csv"), fold_map(data, plan)
                ))
        for kind in cfg.models:
            rep = run_cv(data, kind, plan, engine)
            reports.append(rep)
            stem = os.path.join(cfg.output_dir, f"cv_{kind}_{_slug(scheme.label)}")
            manifest.add(write_frame(stem + ".csv", rep.folds))
            manifest.add(write_json(stem + ".json", json.loads(rep.to_json())))

    table = cv_table(reports)
    manifest.add(write_frame(os.path.join(cfg.output_dir, "cv_table.csv"), table, float_format="%.2f"))
    manifest.add(write_frame(os.path.join(cfg.output_dir, "cv_summary.csv"),
                             pd.DataFrame.from_records([r.summary() for r in reports])))
    paired = paired_table(reports)
    manifest.add(write_frame(os.path.join(cfg.output_dir, "cv_paired.csv"), paired))

    _banner("PM2.5 PREDICTION ACCURACY: RMSE AND R2")
    print(table.to_string(index=False, float_format=lambda v: f"{v:.2f}"))
    if not paired.empty:
        print("\n" + "-" * 60)
        print("PAIRED RMSE DIFFERENCES (95% CI)")
        print("-" * 60)
        for row in paired.itertuples(index=False):
            print(f"{row.scheme:<14} {row.model_a} - {row.model_b}: {row.mean:+.3f} [{row.ci_low:+.3f}, {row.ci_high:+.3f}]")
    print("=" * 60)


def cmd_sweep(cfg: RunConfig, args, manifest: RunManifest) -> None:
    data = _load(cfg)
    result = h_sweep(data, cfg.models, cfg.sweep_p, cfg.h_list, cfg.n_iter, cfg.seed, _engine(cfg, data))
    manifest.add(write_frame(os.path.join(cfg.output_dir, "sweep_tidy.csv"), result.tidy))
    manifest.add(write_frame(os.path.join(cfg.output_dir, "sweep_summary.csv"), result.summary))

    _banner(f"RMSE AGAINST H-BLOCK RADIUS (p = {cfg.sweep_p})")
    for row in result.summary.itertuples(index=False):
        print(f"h={row.h:<8g} {row.model:<6} {row.mean_rmse:.3f} [{row.ci_low:.3f}, {row.ci_high:.3f}]")
    print("=" * 60)


def cmd_export_precision(cfg: RunConfig, args, manifest: RunManifest) -> None:
    data = _load(cfg)
    day, label = _day(cfg, data.day_labels)
    for kind in _fitted_kinds(cfg):
        result, spec, _ = _load_fit(cfg, kind)
        model = build_gmrf(data, spec.mesh) if isinstance(spec, GmrfSpec) else build_lmm(data, spec.region_grid)
        views = day_precisions(model, result.theta_hat, day, data)
        stem = os.path.join(cfg.output_dir, f"precision_{kind}_day{_file_label(label)}")
        manifest.add(_write_matrix(stem + "_prior.mtx", views["prior"], f"{kind} prior precision, day {label}"))
        manifest.add(_write_matrix(stem + "_posterior.mtx", views["posterior"], f"{kind} posterior precision, day {label}"))
        eta = views["eta_precision"]
        eta = np.where(np.abs(eta) >= ETA_DROP * np.abs(eta).max(), eta, 0.0)
        manifest.add(_write_matrix(stem + "_eta.mtx", eta, f"{kind} observation precision, day {label}"))
        order = pd.DataFrame({"row": np.arange(len(views["station_ids"])),
                              "station_id": views["station_ids"], "region": views["regions"]})
        manifest.add(write_frame(stem + "_eta_order.csv", order))
        print(f"{kind}: day {label} precision matrices written to {stem}_*.mtx")


def cmd_export_surface(cfg: RunConfig, args, manifest: RunManifest) -> None:
    for kind in _fitted_kinds(cfg):
        result, spec, labels = _load_fit(cfg, kind)
        day, label = _day(cfg, labels)
        xy = np.array([(s.x, s.y) for s in spec.stations])
        grid = RasterSpec(xy[:, 0].min(), xy[:, 0].max(), xy[:, 1].min(), xy[:, 1].max(), cfg.raster_nx, cfg.raster_ny)
        surface = export_spatial_surface(result, spec, day, grid, component=args.component)
        path = os.path.join(cfg.output_dir, f"surface_{kind}_day{_file_label(label)}_{args.component}.csv")
        manifest.add(write_frame(path, surface))
        print(f"{kind}: {len(surface)} grid values written to {path}")


HANDLERS = {
    "simulate": cmd_simulate,
    "fit": cmd_fit,
    "predict": cmd_predict,
    "cv": cmd_cv,
    "sweep": cmd_sweep,
    "export-precision": cmd_export_precision,
    "export-surface": cmd_export_surface,
}


# -----------------------
# Helpers
# -----------------------

def _overrides(args) -> dict:
    keys = ("input", "output_dir", "models", "seed", "max_rounds", "max_evals", "tol", "fit_path", "cv_schemes",
            "n_iter", "sweep_p", "h_list", "day", "raster_nx", "raster_ny")
    return {k: getattr(args, k, None) for k in keys}


def _banner(title: str) -> None:
    print("\n" + "=" * 60)
    print(title)
    print("=" * 60)


def _slug(label: str) -> str:
    return label.replace(":", "_").replace(".", "p")


def _grid(cfg: RunConfig) -> RegionGrid:
    return RegionGrid(cfg.region_cell_km, (cfg.region_origin_x, cfg.region_origin_y))


def _load(cfg: RunConfig) -> Dataset:
    if not cfg.input:
        raise ValueError("no input dataset given (--input or input = ... in the config file)")
    return ingest_csv(cfg.input, cfg.min_per_day, cfg.min_per_station, _grid(cfg), cfg.lat0)


def _mesh(cfg: RunConfig, data: Dataset):
    return build_mesh(data.stations, cfg.mesh_buffer_fraction, cfg.mesh_max_edge_km, cfg.mesh_max_nodes)


def _engine(cfg: RunConfig, data: Dataset) -> EngineConfig:
    mesh = _mesh(cfg, data) if "gmrf" in cfg.models else None
    return EngineConfig(
        _grid(cfg), mesh, cfg.mesh_buffer_fraction, cfg.mesh_max_edge_km, cfg.max_rounds, cfg.tol,
        mesh_max_nodes=cfg.mesh_max_nodes, max_evals=cfg.max_evals,
    )


def _fitted_kinds(cfg: RunConfig):
    kinds = [k for k in cfg.models if k != "mean"]
    if not kinds:
        raise ValueError("this command needs at least one of lmm, gmrf in models")
    return kinds


def _fit_path(cfg: RunConfig, kind: str) -> str:
    if cfg.fit_path and len(_fitted_kinds(cfg)) == 1:
        return cfg.fit_path
    return os.path.join(cfg.output_dir, f"fit_{kind}.json")


def _load_fit(cfg: RunConfig, kind: str):
    payload = read_json(_fit_path(cfg, kind))
    return FitResult.from_dict(payload["fit"]), spec_from_dict(payload["spec"]), payload["day_labels"]


def _day(cfg: RunConfig, labels) -> Tuple[int, str]:
    """The dense day index of the configured day label."""
    if cfg.day is None:
        raise ValueError("no day given (--day or day = ... in the config file)")
    index = {str(label): k + 1 for k, label in enumerate(labels)}
    if cfg.day not in index:
        raise UnseenDay(cfg.day)
    return index[cfg.day], cfg.day


def _file_label(label: str) -> str:
    return re.sub(r"[^0-9A-Za-z_-]", "-", label)


def _read_targets(path: str, spec, labels) -> list:
    frame = pd.read_csv(path, dtype={"station_id": str, "day": str})
    for column in ("x_km", "y_km", "day", "aod", *spec.covariate_names):
        if column not in frame.columns:
            raise SchemaError(column)
    index = {str(label): k + 1 for k, label in enumerate(labels)}
    targets = []
    for row in frame.to_dict("records"):
        day = index.get(str(row["day"]).strip())
        if day is None:
            raise UnseenDay(row["day"])
        region = row.get("region_id")
        targets.append(Target(
            float(row["x_km"]), float(row["y_km"]), day, float(row["aod"]),
            tuple(float(row[c]) for c in spec.covariate_names),
            None if pd.isna(row.get("station_id", np.nan)) else str(row["station_id"]),
            None if region is None or pd.isna(region) else int(region),
        ))
    return targets


def _write_matrix(path: str, matrix, comment: str) -> str:
    to_coo_text(matrix, path, symmetric=True, comment=comment)
    return path


if __name__ == "__main__":
    sys.exit(main())
