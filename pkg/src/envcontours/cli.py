"""Pipeline orchestration: fit -> simulate -> contour -> respond -> compare.

Runs are driven by a JSON configuration file; every default is materialised
into the run so outputs are self-describing, and a content hash of the
materialised configuration is stamped into every sidecar.  Numerical outputs
are byte-reproducible for a fixed seed; wall-clock information lives only in
sidecar files.
"""

from __future__ import annotations

import argparse
import copy
import hashlib
import json
import math
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__
from ._rng import spawn_generators
from .contours import (
    Contour,
    DirectSamplingBuilder,
    JointExceedanceBuilder,
    alpha_for_return_period,
    calibrate_enclosed_probability,
    iform_contour,
    isodensity_contour,
)
from .envsim import (
    HierarchicalModel,
    JointEnvModel,
    fit_hierarchical,
    model_hash,
    simulate_environment,
)
from .errors import (
    CalibrationError,
    ConfigError,
    ContourError,
    EnvContoursError,
    FitError,
    InputError,
    ResolutionError,
    SchemaError,
)
from .ingest import allocate_bins, decluster, load_csv, peaks_to_arrays
from .response import (
    MixtureDist,
    P_EXP_MINUS_1,
    RayleighResponse,
    SyntheticResponse,
    base_shear_like,
    contour_response_point,
    heave_like,
    inflation_factor,
    long_term_dist,
)

KNOWN_METHODS = ("direct-sampling", "joint-exceedance", "isodensity", "iform")

DEFAULTS = {
    "seed": None,
    "input": {
        "csv": None,
        "columns": {"time": "time", "hs": "hs", "tp": "tp", "covariate": None},
    },
    "decluster": {"threshold_q": 0.95, "min_gap_hours": 24.0, "cadence_hours": None},
    "bins": {"edges": None, "periodic": True},
    "marginal": {
        "tau": 0.8,
        "penalty_grid": [0.0, 1.0, 4.0, 16.0, 64.0, 256.0, "inf"],
        "cv_folds": 10,
        "min_exceedances": 20,
    },
    "dependence": {"kappa": 0.9},
    "simulate": {
        "years": 100.0,
        "rate": None,
        "n_contour_sample": 100000,
        "n_realisations": 1000,
    },
    "contour": {
        "methods": ["direct-sampling"],
        "T": [100.0],
        "n_theta": 360,
        "smooth_window": 5,
        "calibrate": False,
        "frontier_radius": 0.5,
        "n_states_per_year": 2922.0,
        "isodensity_grid": 256,
    },
    "response": {
        "models": [
            {"name": "R3", "kind": "synthetic", "params": [2.0, 0.007, 7.0]},
            {"name": "R4", "kind": "synthetic", "params": [2.0, 0.005, 26.0]},
        ],
        "modes": ["point", "frontier"],
        "p_c": P_EXP_MINUS_1,
        "n_frontier": 20,
        "env": "joint",
        "short_term_sampling": "governing",
    },
    "output": "out",
}


def _merge(base: dict, override: dict) -> dict:
    out = copy.deepcopy(base)
    for key, value in override.items():
        if key in out and isinstance(out[key], dict) and isinstance(value, dict):
            out[key] = _merge(out[key], value)
        else:
            out[key] = copy.deepcopy(value)
    return out


def load_config(path) -> dict:
    """Read, materialise and validate a run configuration."""
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file not found: {path}")
    try:
        raw = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config is not valid JSON: {exc}") from exc
    unknown = set(raw) - set(DEFAULTS)
    if unknown:
        raise ConfigError(f"unknown config keys: {sorted(unknown)}")
    return validate_config(_merge(DEFAULTS, raw))


def validate_config(cfg: dict) -> dict:
    if cfg["seed"] is None:
        raise ConfigError("seed is required; runs must not draw implicit entropy")
    if not isinstance(cfg["seed"], int):
        raise ConfigError("seed must be an integer")
    tau = cfg["marginal"]["tau"]
    if not 0.0 < tau < 1.0:
        raise ConfigError(f"marginal.tau must lie in (0, 1), got {tau}")
    kappa = cfg["dependence"]["kappa"]
    if not 0.0 < kappa < 1.0:
        raise ConfigError(f"dependence.kappa must lie in (0, 1), got {kappa}")
    for t in cfg["contour"]["T"]:
        if t <= 0:
            raise ConfigError(f"contour.T entries must be positive, got {t}")
    for method in cfg["contour"]["methods"]:
        if method not in KNOWN_METHODS:
            raise ConfigError(f"unknown contour method {method!r}")
    for spec in cfg["response"]["models"]:
        if spec.get("kind") not in ("synthetic", "base-shear-like", "heave-like"):
            raise ConfigError(f"unknown response kind {spec.get('kind')!r}")
    if cfg["response"]["env"] not in ("joint", "hierarchical"):
        raise ConfigError("response.env must be 'joint' or 'hierarchical'")
    if cfg["response"]["short_term_sampling"] not in ("per-state", "governing"):
        raise ConfigError(
            "response.short_term_sampling must be 'per-state' or 'governing'"
        )
    return cfg


def config_hash(cfg: dict) -> str:
    hashed = {k: v for k, v in cfg.items() if k != "output"}
    return hashlib.sha256(
        json.dumps(hashed, sort_keys=True).encode("utf-8")
    ).hexdigest()[:16]


def _penalty_grid(cfg: dict) -> tuple:
    return tuple(math.inf if p == "inf" else float(p) for p in cfg["marginal"]["penalty_grid"])


def build_response(spec: dict):
    params = spec.get("params", [])
    name = spec.get("name", spec["kind"])
    if spec["kind"] == "synthetic":
        return SyntheticResponse(name, *params)
    if spec["kind"] == "base-shear-like":
        return base_shear_like(name, *params)
    if spec["kind"] == "heave-like":
        return heave_like(name, *params)
    raise ConfigError(f"unknown response kind {spec['kind']!r}")


class _OutputLock:
    """Exclusive lock on the output directory; one writer at a time."""

    def __init__(self, out: Path):
        self.path = out / ".lock"

    def __enter__(self):
        try:
            self.path.touch(exist_ok=False)
        except FileExistsError:
            raise ConfigError(
                f"output directory is locked by another run ({self.path})"
            ) from None
        return self

    def __exit__(self, *exc):
        self.path.unlink(missing_ok=True)


def _write_json(path: Path, payload: dict) -> None:
    path.write_text(json.dumps(payload, sort_keys=True, indent=1), encoding="utf-8")


def _stage_seeds(seed: int) -> dict:
    streams = np.random.SeedSequence(seed).spawn(6)
    names = ("fit", "simulate", "contour_sample", "respond", "compare", "extra")
    return {name: int(ss.generate_state(1)[0]) for name, ss in zip(names, streams)}


# ---------------------------------------------------------------------------
# stages

def cmd_fit(cfg: dict, out: Path) -> dict:
    csv_path = cfg["input"]["csv"]
    if csv_path is None:
        raise ConfigError("input.csv is required for fit")
    columns = {k: v for k, v in cfg["input"]["columns"].items() if v is not None}
    records, report = load_csv(
        csv_path, schema=columns, reject_report_path=out / "rejects.txt"
    )
    storms, rate = decluster(
        records,
        threshold_q=cfg["decluster"]["threshold_q"],
        min_gap=cfg["decluster"]["min_gap_hours"] * 3600.0,
        cadence=None
        if cfg["decluster"]["cadence_hours"] is None
        else cfg["decluster"]["cadence_hours"] * 3600.0,
    )
    if not storms:
        raise FitError("declustering produced no storms")
    peaks = peaks_to_arrays(storms)
    edges = cfg["bins"]["edges"]
    if edges is not None:
        if not np.all(np.isfinite(peaks["covariate"])):
            raise ConfigError("bins.edges given but the input has no covariate column")
        binning = allocate_bins(
            peaks["covariate"], edges, periodic=cfg["bins"]["periodic"]
        )
    else:
        binning = allocate_bins(n_obs=peaks["hs"].size)

    seeds = _stage_seeds(cfg["seed"])
    model = JointEnvModel.fit(
        peaks["hs"],
        peaks["tp"],
        bins=binning.allocation,
        tau=cfg["marginal"]["tau"],
        kappa=cfg["dependence"]["kappa"],
        penalty_grid=_penalty_grid(cfg),
        cv_folds=cfg["marginal"]["cv_folds"],
        seed=seeds["fit"],
        rate=rate,
        storm_sizes=peaks["n_sea_states"],
        min_exceedances=cfg["marginal"]["min_exceedances"],
    )
    hier = fit_hierarchical(
        peaks["hs"], peaks["tp"], rate=rate, storm_sizes=peaks["n_sea_states"]
    )

    model.marg_hs.save(out / "marginal_hs.json")
    model.marg_tp.save(out / "marginal_tp.json")
    model.ce[0].save(out / "dependence_cond_hs.json")
    model.ce[1].save(out / "dependence_cond_tp.json")
    model.save(out / "envmodel.json")
    hier.save(out / "hierarchical.json")

    diagnostics = {
        "config_hash": config_hash(cfg),
        "n_records": report.n_loaded,
        "n_rejected": report.n_rejected,
        "n_storms": len(storms),
        "rate_per_year": rate,
        "marginal_hs": {
            "xi": model.marg_hs.xi,
            "sigma": model.marg_hs.sigma.tolist(),
            "psi": model.marg_hs.psi.tolist(),
            "penalty": model.marg_hs.penalty,
        },
        "marginal_tp": {
            "xi": model.marg_tp.xi,
            "sigma": model.marg_tp.sigma.tolist(),
            "psi": model.marg_tp.psi.tolist(),
            "penalty": model.marg_tp.penalty,
        },
        "dependence": {
            str(q): {
                "alpha": m.alpha.tolist(),
                "beta": m.beta,
                "self_consistency": m.self_consistency(),
            }
            for q, m in model.ce.items()
        },
        "model_hash": model_hash(model),
    }
    _write_json(out / "fit_report.json", diagnostics)
    return diagnostics


def _load_models(cfg: dict, out: Path):
    env_path = out / "envmodel.json"
    hier_path = out / "hierarchical.json"
    if not env_path.exists() or not hier_path.exists():
        raise InputError("model files missing; run fit first")
    return JointEnvModel.load(env_path), HierarchicalModel.load(hier_path)


def cmd_simulate(cfg: dict, out: Path) -> dict:
    model, _ = _load_models(cfg, out)
    seeds = _stage_seeds(cfg["seed"])
    rate = cfg["simulate"]["rate"] or model.rate
    real = simulate_environment(
        model, cfg["simulate"]["years"], rate=rate, seed=seeds["simulate"]
    )
    real.save(out / "events.csv", model=model)
    sidecar = json.loads((out / "events.csv.json").read_text(encoding="utf-8"))
    sidecar["config_hash"] = config_hash(cfg)
    _write_json(out / "events.csv.json", sidecar)
    return {"n_events": real.n_events}


def _contour_sample(cfg: dict, model: JointEnvModel) -> np.ndarray:
    seeds = _stage_seeds(cfg["seed"])
    rng = np.random.default_rng(seeds["contour_sample"])
    hs, tp, _ = model.sample_events(cfg["simulate"]["n_contour_sample"], rng)
    return np.column_stack([hs, tp])


def _contour_path(out: Path, method: str, T: float) -> Path:
    return out / f"contour_{method}_T{T:g}.csv"


def build_contour(cfg, method, T, rate, sample, hier, builders):
    """One contour for (method, T); builders are cached across T values."""
    alpha_event = alpha_for_return_period(T, rate)
    n_theta = cfg["contour"]["n_theta"]
    n_states = cfg["contour"]["n_states_per_year"]
    if method == "direct-sampling":
        if "ds" not in builders:
            builders["ds"] = DirectSamplingBuilder(
                sample, n_theta=n_theta,
                smooth_window=cfg["contour"]["smooth_window"],
            )
        build = lambda a: builders["ds"].build(a, T=T)
        alpha0 = alpha_event
    elif method == "joint-exceedance":
        if "je" not in builders:
            builders["je"] = JointExceedanceBuilder(sample, n_theta=n_theta)
        build = lambda a: builders["je"].build(a, T=T)
        alpha0 = alpha_event
    elif method == "isodensity":
        build = lambda a: isodensity_contour(
            sample, level_p=1.0 - a, grid_n=cfg["contour"]["isodensity_grid"], T=T
        )
        alpha0 = alpha_event
    elif method == "iform":
        # iform's alpha lives on the sea-state clock
        build = lambda a: iform_contour(
            hier, T=1.0 / (a * n_states), n_states_per_year=n_states, n_theta=n_theta
        )
        alpha0 = 1.0 / (T * n_states)
    else:
        raise ConfigError(f"unknown contour method {method!r}")

    if cfg["contour"]["calibrate"]:
        # calibrate the enclosed event probability to 1 - 1/(rate * T)
        _, contour = calibrate_enclosed_probability(build, 1.0 - alpha_event, sample)
    else:
        contour = build(alpha0)
        contour.enclosed_p = float(np.mean(contour.contains(sample)))
    contour.T = T
    return contour


def cmd_contour(cfg: dict, out: Path) -> dict:
    model, hier = _load_models(cfg, out)
    rate = cfg["simulate"]["rate"] or model.rate
    sample = _contour_sample(cfg, model)
    seeds = _stage_seeds(cfg["seed"])
    builders: dict = {}
    written = []
    for method in cfg["contour"]["methods"]:
        for T in cfg["contour"]["T"]:
            contour = build_contour(cfg, method, float(T), rate, sample, hier, builders)
            path = _contour_path(out, method, float(T))
            contour.to_csv(
                path,
                sidecar={
                    "config_hash": config_hash(cfg),
                    "model_hash": model_hash(model),
                    "seed": seeds["contour_sample"],
                    "n_sample": int(sample.shape[0]),
                },
            )
            written.append(path.name)
    return {"files": written}


def cmd_respond(cfg: dict, out: Path) -> dict:
    model, hier = _load_models(cfg, out)
    envmodel = model if cfg["response"]["env"] == "joint" else hier
    rate = cfg["simulate"]["rate"] or model.rate
    seeds = _stage_seeds(cfg["seed"])
    rows = []
    estimates = {}
    for i, spec in enumerate(cfg["response"]["models"]):
        response = build_response(spec)
        est = long_term_dist(
            envmodel,
            response,
            N=cfg["simulate"]["years"],
            rate=rate,
            n_realisations=cfg["simulate"]["n_realisations"],
            seed=seeds["respond"] + i,
            short_term_sampling=cfg["response"]["short_term_sampling"],
        )
        estimates[response.name] = est
        for j in range(est.maxima.size):
            rows.append(
                (j, response.name, est.maxima[j], est.driving_hs[j], est.driving_tp[j])
            )
    with (out / "longterm.csv").open("w", encoding="utf-8") as handle:
        handle.write("realisation,response,max_response,hs,tp\n")
        for j, name, val, hs, tp in rows:
            handle.write(f"{j},{name},{val:.10g},{hs:.10g},{tp:.10g}\n")
    _write_json(
        out / "longterm.csv.json",
        {
            "config_hash": config_hash(cfg),
            "seed": seeds["respond"],
            "n_realisations": cfg["simulate"]["n_realisations"],
            "years": cfg["simulate"]["years"],
            "q_r": {name: est.q_r for name, est in estimates.items()},
        },
    )
    return {"q_r": {name: est.q_r for name, est in estimates.items()}}


def _read_longterm(out: Path) -> dict:
    path = out / "longterm.csv"
    if not path.exists():
        raise InputError("longterm.csv missing; run respond first")
    per_response: dict[str, list] = {}
    with path.open(encoding="utf-8") as handle:
        next(handle)
        for line in handle:
            _, name, val, hs, tp = line.rstrip("\n").split(",")
            per_response.setdefault(name, []).append(
                (float(val), float(hs), float(tp))
            )
    return {k: np.asarray(v) for k, v in per_response.items()}


def cmd_compare(cfg: dict, out: Path) -> dict:
    model, _ = _load_models(cfg, out)
    longterm = _read_longterm(out)
    expected_hash = config_hash(cfg)

    lt_sidecar = json.loads((out / "longterm.csv.json").read_text(encoding="utf-8"))
    if lt_sidecar.get("config_hash") != expected_hash:
        raise ConfigError("longterm.csv was produced under a different configuration")

    density_rows = []
    rows = []
    for spec in cfg["response"]["models"]:
        response = build_response(spec)
        if response.name not in longterm:
            raise InputError(f"no long-term results for response {response.name!r}")
        maxima = longterm[response.name][:, 0]
        q_r = float(np.quantile(maxima, P_EXP_MINUS_1))
        # frontier = contour arc near the realisations' driving conditions
        driving = longterm[response.name][:, 1:3]
        sample = driving[np.isfinite(driving).all(axis=1)]
        for method in cfg["contour"]["methods"]:
            for T in cfg["contour"]["T"]:
                path = _contour_path(out, method, float(T))
                if not path.exists():
                    raise InputError(f"contour file missing: {path.name}")
                sidecar = json.loads(
                    path.with_suffix(".csv.json").read_text(encoding="utf-8")
                )
                if sidecar.get("config_hash") != expected_hash:
                    raise ConfigError(
                        f"{path.name} was produced under a different configuration"
                    )
                table = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
                sizes = sidecar.get("loop_sizes", [table.shape[0]])
                loops = np.split(table[:, 1:3], np.cumsum(sizes)[:-1])
                contour = Contour(
                    method=method,
                    alpha=sidecar["alpha"],
                    T=float(T),
                    loops=loops,
                    theta=table[:, 0] if np.isfinite(table[:, 0]).all() else None,
                )
                for mode in cfg["response"]["modes"]:
                    try:
                        est = contour_response_point(
                            contour,
                            response,
                            mode=mode,
                            n_frontier=cfg["response"]["n_frontier"],
                            sample=sample,
                            frontier_radius=cfg["contour"]["frontier_radius"],
                            p_c=cfg["response"]["p_c"],
                        )
                    except ContourError as exc:
                        raise FitError(f"contour response failed: {exc}") from exc
                    rows.append(
                        {
                            "response": response.name,
                            "method": method,
                            "T": float(T),
                            "mode": mode,
                            "q_r": q_r,
                            "q_c": est.q_c,
                            "delta": round(inflation_factor(q_r, est.q_c), 3),
                        }
                    )
                    if mode == "frontier" and isinstance(est.dist, MixtureDist):
                        grid = np.linspace(0.0, max(q_r, est.q_c) * 2.0, 200)
                        dens = est.dist.pdf_on_grid(grid)
                        density_rows += [
                            (response.name, method, float(T), g, d)
                            for g, d in zip(grid, dens)
                        ]

    with (out / "density.csv").open("w", encoding="utf-8") as handle:
        handle.write("response,method,T,r,f\n")
        for name, method, T, g, d in density_rows:
            handle.write(f"{name},{method},{T:g},{g:.10g},{d:.10g}\n")
    summary = {"config_hash": expected_hash, "rows": rows}
    _write_json(out / "summary.json", summary)
    return summary


STAGES = ("fit", "simulate", "contour", "respond", "compare")


def run_command(command: str, cfg: dict, out: Path) -> dict:
    out.mkdir(parents=True, exist_ok=True)
    results = {}
    timings = {}
    with _OutputLock(out):
        stages = STAGES if command == "all" else (command,)
        for stage in stages:
            t0 = time.perf_counter()
            fn = {
                "fit": cmd_fit,
                "simulate": cmd_simulate,
                "contour": cmd_contour,
                "respond": cmd_respond,
                "compare": cmd_compare,
            }[stage]
            results[stage] = fn(cfg, out)
            timings[stage] = time.perf_counter() - t0
    _write_json(
        out / "run_meta.json",
        {
            "version": __version__,
            "command": command,
            "config_hash": config_hash(cfg),
            "config": {k: v for k, v in cfg.items()},
            "runtimes_s": timings,
            "finished_at": time.strftime("%Y-%m-%dT%H:%M:%SZ", time.gmtime()),
        },
    )
    return results


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="envcontours",
        description="Fit joint metocean extremes, estimate environmental "
        "contours and compare contour-based response estimates with the "
        "long-term distribution of the N-year maximum response.",
    )
    parser.add_argument("command", choices=STAGES + ("all",))
    parser.add_argument("--config", required=True, help="JSON run configuration")
    parser.add_argument("--seed", type=int, default=None, help="override config seed")
    parser.add_argument("--out", default=None, help="override output directory")
    parser.add_argument(
        "--jobs", type=int, default=1,
        help="reserved; stages currently execute serially and deterministically",
    )
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = load_config(args.config)
        if args.seed is not None:
            cfg["seed"] = args.seed
        out = Path(args.out if args.out is not None else cfg["output"])
        run_command(args.command, cfg, out)
    except ConfigError as exc:
        print(f"error: config: {exc}", file=sys.stderr)
        return 1
    except (InputError, SchemaError) as exc:
        print(f"error: data: {exc}", file=sys.stderr)
        return 2
    except (FitError, CalibrationError, ContourError, ResolutionError) as exc:
        print(f"error: fit: {exc}", file=sys.stderr)
        return 3
    except EnvContoursError as exc:
        print(f"error: run: {exc}", file=sys.stderr)
        return 3
    return 0


if __name__ == "__main__":
    sys.exit(main())
