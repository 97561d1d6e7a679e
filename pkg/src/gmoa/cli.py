"""Command line driver: ``simulate``, ``train``, ``surface`` and ``evaluate``.

Every command reads one JSON config (optional), applies flag overrides on top
(flags win), validates the result against a schema before doing any work, and
writes its outputs plus a ``manifest.json`` into ``--out``. Reruns with the
same config, inputs and seed produce byte-identical files.

Exit codes: 0 success, 2 usage/config error, 3 numerical failure,
4 IO/format error.
"""

from __future__ import annotations

import argparse
import copy
import json
import logging
import math
import sys
from dataclasses import fields
from pathlib import Path

import jsonschema
import numpy as np
from threadpoolctl import threadpool_limits

from . import __version__
from . import reducer as red
from .bilevel import (
    GmoaConfig,
    StepFailure,
    Timer,
    delta_mu,
    gmoa_multistart,
    gmoa_run,
    manifold_surface,
    random_starts,
    surface_to_csv,
)
from .datagen import (
    PRESETS,
    DataFormatError,
    Dataset,
    gen_gmm,
    gen_noisy_lines,
    load_csv,
    load_idx,
    preset,
    save_csv,
)
from .em import EmConfig, best_fit
from .labeling import assign_labels, contingency, hungarian_accuracy, kmeans, save_labels_csv
from .mixture import FREE, Knowns, MixtureParams

log = logging.getLogger("gmoa")

EXIT_OK, EXIT_USAGE, EXIT_NUMERIC, EXIT_IO = 0, 2, 3, 4


class ConfigError(ValueError):
    pass


class NumericalFailure(RuntimeError):
    pass


_num = {"type": "number"}
_int = {"type": "integer"}
_nullable_path = {"type": ["string", "null"]}

_GMOA_KEYS = {f.name for f in fields(GmoaConfig)} - {"em", "knowns"}
_EM_KEYS = {f.name for f in fields(EmConfig)}

SCHEMA = {
    "$schema": "https://json-schema.org/draft/2020-12/schema",
    "type": "object",
    "additionalProperties": False,
    "properties": {
        "experiment": {"type": "string"},
        "seed": {"type": "integer", "minimum": 0},
        "out": {"type": "string"},
        "dataset": {
            "type": "object",
            "required": ["kind"],
            "properties": {
                "kind": {"enum": ["preset", "noisy_lines", "csv", "idx"]},
                "name": {"type": "string"},
                "n": {"type": "integer", "minimum": 0},
                "seed": {"type": "integer", "minimum": 0},
                "slope": _num,
                "intercepts": {"type": "array", "items": _num, "minItems": 2, "maxItems": 2},
                "n_per_line": {"type": "integer", "minimum": 0},
                "eps": {"type": "number", "exclusiveMinimum": 0},
                "x_range": {"type": "array", "items": _num, "minItems": 2, "maxItems": 2},
                "path": {"type": "string"},
                "images": {"type": "string"},
                "labels": {"type": "string"},
                "digits": {"type": ["array", "null"], "items": {"type": "integer", "minimum": 0, "maximum": 255}},
                "per_digit": {"type": ["integer", "null"], "minimum": 1},
                "limit": {"type": ["integer", "null"], "minimum": 1},
            },
            "additionalProperties": False,
        },
        "reducer": {
            "type": "object",
            "required": ["kind"],
            "properties": {
                "kind": {"enum": ["angle2d", "angle3d", "linear", "mlp"]},
                "theta": {"type": ["number", "array"], "items": _num},
                "random_starts": {"type": "integer", "minimum": 1},
                "start_seed": {"type": "integer", "minimum": 0},
                "out_dim": {"type": "integer", "minimum": 1},
                "hidden": {"type": "array", "items": {"type": "integer", "minimum": 1}},
                "activation": {"enum": ["tanh", "relu"]},
                "init": {"enum": ["pca", "embedding", "random"]},
                "embedding": _nullable_path,
                "epochs": {"type": "integer", "minimum": 0},
                "lr": {"type": "number", "exclusiveMinimum": 0},
                "init_seed": {"type": "integer", "minimum": 0},
                "normalize": {"type": "boolean"},
            },
            "additionalProperties": False,
        },
        "gmoa": {
            "type": "object",
            "properties": {
                **{k: {} for k in _GMOA_KEYS},
                "eta0": {"type": "number", "exclusiveMinimum": 0},
                "n_iter": {"type": "integer", "minimum": 0},
                "delta": {"type": "number", "exclusiveMinimum": 0},
                "n_components": {"type": "integer", "minimum": 2},
                "eta_max": {"type": ["number", "null"]},
                "faithful": {"type": "boolean"},
                "knowns": {
                    "oneOf": [
                        {"enum": ["auto", "free"]},
                        {
                            "type": "object",
                            "properties": {
                                "variances": {"type": ["array", "null"]},
                                "weights": {"type": ["array", "null"], "items": _num},
                                "isotropic": {"type": "boolean"},
                            },
                            "additionalProperties": False,
                        },
                    ]
                },
            },
            "additionalProperties": False,
        },
        "em": {
            "type": "object",
            "properties": {k: {} for k in _EM_KEYS},
            "additionalProperties": False,
        },
        "surface": {
            "type": "object",
            "properties": {
                "grid": {
                    "type": "array",
                    "items": {"type": "array", "items": _num, "minItems": 3, "maxItems": 3},
                    "minItems": 1,
                    "maxItems": 2,
                },
                "min_ok_fraction": {"type": "number", "minimum": 0, "maximum": 1},
            },
            "additionalProperties": False,
        },
        "evaluate": {
            "type": "object",
            "properties": {"state": {"type": "string"}, "kmeans_seed": _int, "weighted": {"type": "boolean"}},
            "additionalProperties": False,
        },
    },
}

DEFAULTS = {
    "experiment": "gmoa",
    "seed": 0,
    "out": "runs",
    "dataset": {"kind": "preset", "name": "paper2d", "n": 2000},
    "reducer": {"kind": "angle2d", "theta": 2.5},
    "gmoa": {"knowns": "auto"},
    "em": {},
    "surface": {"min_ok_fraction": 0.95},
    "evaluate": {},
}

SURFACE_GRIDS = {
    2: [[-2 * math.pi, 2 * math.pi, 0.05]],
    3: [[0.0, math.pi, 0.1], [0.0, 2 * math.pi, 0.1]],
}


def _merge(base: dict, over: dict) -> dict:
    out = copy.deepcopy(base)
    for k, v in over.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict) and k != "knowns":
            out[k] = _merge(out[k], v)
        else:
            out[k] = copy.deepcopy(v)
    return out


def _validate(cfg: dict, where: str) -> None:
    try:
        jsonschema.validate(cfg, SCHEMA)
    except jsonschema.ValidationError as exc:
        loc = "/".join(str(p) for p in exc.absolute_path) or "<root>"
        raise ConfigError(f"{where}: {loc}: {exc.message}") from None


def load_config(path=None, overrides: dict | None = None) -> dict:
    """Defaults, then the config file, then flag overrides; validated twice."""
    user = {}
    base_dir = Path.cwd()
    if path is not None:
        path = Path(path)
        try:
            user = json.loads(path.read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON ({exc})") from None
        if not isinstance(user, dict):
            raise ConfigError(f"{path}: top level must be an object")
        _validate(user, str(path))
        base_dir = path.parent
        # a config that names its own dataset should not inherit the default one
        if "dataset" in user:
            user["dataset"] = {**user["dataset"]}
    cfg = _merge(DEFAULTS, {k: v for k, v in user.items() if k != "dataset"})
    if "dataset" in user:
        cfg["dataset"] = user["dataset"]
    if "reducer" in user:
        cfg["reducer"] = user["reducer"]
    for key, value in (overrides or {}).items():
        if value is None:
            continue
        section, _, name = key.partition(".")
        if name:
            cfg.setdefault(section, {})[name] = value
        else:
            cfg[section] = value
    _validate(cfg, "resolved config")
    _resolve_paths(cfg, base_dir)
    return cfg


def _resolve_paths(cfg: dict, base_dir: Path) -> None:
    ds = cfg["dataset"]
    keys = {"csv": ["path"], "idx": ["images", "labels"]}.get(ds["kind"], [])
    for key in keys:
        if key not in ds:
            raise ConfigError(f"dataset of kind {ds['kind']!r} needs {key!r}")
        ds[key] = str((base_dir / ds[key]).resolve()) if not Path(ds[key]).is_absolute() else ds[key]
        if not Path(ds[key]).exists():
            raise FileNotFoundError(f"dataset file not found: {ds[key]}")
    emb = cfg["reducer"].get("embedding")
    if emb:
        p = Path(emb) if Path(emb).is_absolute() else (base_dir / emb).resolve()
        if not p.exists():
            raise FileNotFoundError(f"embedding file not found: {p}")
        cfg["reducer"]["embedding"] = str(p)


def build_dataset(spec: dict, seed: int) -> Dataset:
    kind = spec["kind"]
    if kind == "preset":
        name = spec.get("name", "paper2d")
        if name not in PRESETS:
            raise ConfigError(f"unknown preset {name!r}; available presets: {', '.join(sorted(PRESETS))}")
        return gen_gmm(preset(name, spec.get("n", 2000), spec.get("seed", seed)))
    if kind == "noisy_lines":
        return gen_noisy_lines(
            slope=spec.get("slope", 1.0),
            intercepts=tuple(spec.get("intercepts", (0.0, 4.0))),
            n_per_line=spec.get("n_per_line", 500),
            eps=spec.get("eps", 0.5),
            seed=spec.get("seed", seed),
            x_range=tuple(spec.get("x_range", (0.0, 10.0))),
        )
    if kind == "csv":
        return load_csv(spec["path"])
    return load_idx(spec["images"], spec["labels"], spec.get("digits"), spec.get("limit"),
                    spec.get("per_digit"))


def build_knowns(cfg: dict) -> Knowns:
    """``auto`` fixes the preset variances and weights when an angle reducer is used.

    A unit-vector projection of an isotropic component keeps its variance, so
    the projected variances of the presets are known exactly.
    """
    k = cfg["gmoa"].get("knowns", "auto")
    if k == "free":
        return FREE
    if isinstance(k, dict):
        v = k.get("variances")
        w = k.get("weights")
        return Knowns(None if v is None else np.asarray(v, dtype=float),
                      None if w is None else np.asarray(w, dtype=float), k.get("isotropic", False))
    ds = cfg["dataset"]
    if ds["kind"] == "preset" and cfg["reducer"]["kind"] in ("angle2d", "angle3d"):
        spec = PRESETS.get(ds.get("name", "paper2d"))
        if spec is not None:
            var = np.asarray(spec["variances"], dtype=float)
            if np.allclose(var, var[:, :1]):
                return Knowns(var[:, :1].copy(), np.asarray(spec["weights"], dtype=float))
    return FREE


def build_gmoa_config(cfg: dict) -> GmoaConfig:
    g = {k: v for k, v in cfg["gmoa"].items() if k in _GMOA_KEYS}
    if g.get("eta_max", 0) is None:
        g["eta_max"] = math.inf
    g.setdefault("seed", cfg["seed"])
    em = dict(cfg["em"])
    em.setdefault("seed", cfg["seed"])
    try:
        em_cfg = EmConfig(**em)
        ctor = GmoaConfig.faithful if cfg["gmoa"].get("faithful") else GmoaConfig
        return ctor(em=em_cfg, knowns=build_knowns(cfg), **g)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid optimizer settings: {exc}") from None


def _angle_cls(kind):
    return red.Angle2D if kind == "angle2d" else red.Angle3D


def build_reducers(spec: dict, X, seed: int) -> list:
    """One reducer, or several seeded starts for angle reducers with ``random_starts``."""
    kind = spec["kind"]
    p = X.shape[1]
    if kind in ("angle2d", "angle3d"):
        need = 2 if kind == "angle2d" else 3
        if p != need:
            raise ConfigError(f"{kind} reducer needs {need}-dimensional data, got {p}")
        cls = _angle_cls(kind)
        if "random_starts" in spec:
            template = cls(0.0) if kind == "angle2d" else cls(0.0, 0.0)
            return random_starts(template, spec["random_starts"], spec.get("start_seed", seed))
        theta = np.atleast_1d(np.asarray(spec.get("theta", 0.0), dtype=float))
        if theta.shape[0] != need - 1:
            raise ConfigError(f"{kind} expects {need - 1} angle(s), got {theta.shape[0]}")
        return [cls(*theta)]
    d = spec.get("out_dim", 2)
    if kind == "linear":
        return [red.init_linear_pca(X, d)]
    init = spec.get("init", "pca")
    hidden = tuple(spec.get("hidden", (64,)))
    act = spec.get("activation", "tanh")
    init_seed = spec.get("init_seed", seed)
    if init == "random":
        mlp = red.random_mlp([p, *hidden, d], init_seed, act)
    else:
        if init == "embedding":
            if not spec.get("embedding"):
                raise ConfigError("reducer init 'embedding' needs an 'embedding' CSV path")
            target = red.load_embedding_csv(spec["embedding"], X.shape[0])
        else:
            target = red.pca_embedding(X, d)
        target = (target - target.mean(axis=0)) / target.std(axis=0)
        fit = red.init_mlp_from_embedding(X, target, hidden, spec.get("epochs", 300),
                                          spec.get("lr", 0.1), init_seed, act)
        log.info("embedding fit: mse %.4g after %d epochs", fit.mse, len(fit.history) - 1)
        mlp = fit.mlp
    if spec.get("normalize", True):
        mlp = red.normalize_output_layer(mlp, X)
    return [mlp]


def _dump_json(path: Path, data) -> None:
    path.write_text(json.dumps(data, indent=2, sort_keys=True, default=_jsonable) + "\n")


def _jsonable(x):
    if isinstance(x, np.ndarray):
        return x.tolist()
    if isinstance(x, np.generic):
        return x.item()
    if isinstance(x, float) and not math.isfinite(x):
        return str(x)
    raise TypeError(f"cannot serialize {type(x).__name__}")


def _manifest(out: Path, command: str, cfg: dict, outputs: list[str], extra=None) -> None:
    data = {"command": command, "version": __version__, "config": cfg, "outputs": outputs}
    if extra:
        data.update(extra)
    _dump_json(out / "manifest.json", data)


def state_to_dict(state, knowns: Knowns, extra=None) -> dict:
    data = {
        "u": state.u.to_dict(),
        "theta": state.theta.to_dict(),
        "E": state.E,
        "g": state.g,
        "iter": state.iter,
        "on_manifold": state.on_manifold,
        "truncated": state.truncated,
        "knowns": knowns.to_dict(),
    }
    data.update(extra or {})
    return data


def load_state(path):
    data = json.loads(Path(path).read_text())
    try:
        return MixtureParams.from_dict(data["u"]), red.from_dict(data["theta"]), data
    except (KeyError, TypeError, ValueError) as exc:
        raise DataFormatError(f"{path}: not a state file ({exc})") from None


def cmd_simulate(cfg: dict, out: Path) -> int:
    ds = build_dataset(cfg["dataset"], cfg["seed"])
    save_csv(ds, out / "dataset.csv")
    _manifest(out, "simulate", cfg, ["dataset.csv"], {"dataset": ds.meta, "n": len(ds)})
    print(f"wrote {len(ds)} points to {out / 'dataset.csv'}")
    return EXIT_OK


def run_training(cfg: dict, workers: int = 1):
    """Build data, reducer(s) and config from ``cfg`` and run the optimizer.

    Returns ``(dataset, state, trajectory, info)``.
    """
    ds = build_dataset(cfg["dataset"], cfg["seed"])
    if len(ds) == 0:
        raise ConfigError("training needs a nonempty dataset")
    gcfg = build_gmoa_config(cfg)
    starts = build_reducers(cfg["reducer"], ds.X, cfg["seed"])
    info = {"knowns": gcfg.knowns.to_dict()}
    if len(starts) > 1:
        res = gmoa_multistart(ds.X, starts, None, gcfg, workers)
        state, traj = res.state, res.trajectory
        info["best_start"] = res.best_index
        info["starts"] = [
            {"theta0": th.flat(), "final_g": r[0].g, "iterations": r[0].iter}
            for th, r in zip(starts, res.runs)
        ]
        info["total_iterations"] = sum(r[0].iter for r in res.runs)
    else:
        state, traj = gmoa_run(ds.X, starts[0], None, gcfg)
        info["total_iterations"] = state.iter
    return ds, state, traj, info


def cmd_train(cfg: dict, out: Path, workers: int = 1) -> int:
    with Timer() as t:
        ds, state, traj, info = run_training(cfg, workers)
    traj.to_csv(out / "trajectory.csv")
    knowns = build_knowns(cfg)
    extra = {"delta_mu": delta_mu(state.u), **info}
    _dump_json(out / "state.json", state_to_dict(state, knowns, extra))
    _manifest(out, "train", cfg, ["trajectory.csv", "state.json"])
    print(f"E={state.E:.10g} g={state.g:.10g} iterations={info['total_iterations']} "
          f"wall_time={t.elapsed:.2f}s")
    if state.truncated:
        print("numerical failure: trajectory truncated at the last good state", file=sys.stderr)
        return EXIT_NUMERIC
    return EXIT_OK


def surface_grid(ranges) -> np.ndarray:
    """Cartesian grid from ``[start, stop, step]`` ranges, endpoints within 1e-9 of a step kept."""
    axes = []
    for start, stop, step in ranges:
        if step <= 0:
            raise ConfigError("surface grid step must be positive")
        n = int(math.floor((stop - start) / step + 1e-9)) + 1
        if n < 1:
            raise ConfigError(f"empty surface range [{start}, {stop}]")
        axes.append(start + step * np.arange(n))
    mesh = np.meshgrid(*axes, indexing="ij")
    return np.stack([m.ravel() for m in mesh], axis=1)


def cmd_surface(cfg: dict, out: Path, workers: int = 1) -> int:
    ds = build_dataset(cfg["dataset"], cfg["seed"])
    p = ds.dim
    if p not in SURFACE_GRIDS:
        raise ConfigError(f"surface needs 2- or 3-dimensional data, got {p}")
    kind = "angle2d" if p == 2 else "angle3d"
    cfg = {**cfg, "reducer": {"kind": kind}}
    ranges = cfg["surface"].get("grid", SURFACE_GRIDS[p])
    if len(ranges) != p - 1:
        raise ConfigError(f"surface grid needs {p - 1} range(s) for {p}-dimensional data")
    grid = surface_grid(ranges)
    template = red.Angle2D(0.0) if p == 2 else red.Angle3D(0.0, 0.0)
    gcfg = build_gmoa_config(cfg)
    em = EmConfig(**{**{"max_iters": 500, "tol": 1e-10, "refine": True, "seed": cfg["seed"]}, **cfg["em"]})
    rows = manifold_surface(grid, ds.X, template, gcfg.n_components, gcfg.knowns, em, cfg["seed"], workers)
    surface_to_csv(rows, out / "surface.csv")
    ok = sum(r.ok for r in rows) / len(rows)
    _manifest(out, "surface", cfg, ["surface.csv"], {"grid_points": len(rows), "ok_fraction": ok})
    print(f"wrote {len(rows)} grid points to {out / 'surface.csv'} ({ok:.1%} ok)")
    if ok < cfg["surface"].get("min_ok_fraction", 0.95):
        print("too many grid points failed", file=sys.stderr)
        return EXIT_NUMERIC
    return EXIT_OK


def evaluate_state(u: MixtureParams, theta, ds: Dataset, kmeans_seed: int = 0,
                   weighted: bool = False, knowns: Knowns = FREE) -> tuple[dict, np.ndarray]:
    """Metrics on the projected data: GMOA labels, plus k-means and EM baselines."""
    Z = theta.project(ds.X)
    K = u.n_components
    pred = assign_labels(u, None, Z, weighted).labels
    metrics = {"n": len(ds), "n_components": K, "cluster_sizes": np.bincount(pred, minlength=K)}
    km = kmeans(Z, K, kmeans_seed).labels
    em_fit = best_fit(Z, K, EmConfig(seed=kmeans_seed), knowns, kmeans_seed).params
    em = assign_labels(em_fit, None, Z, weighted).labels
    if ds.labels is not None:
        classes, truth = np.unique(ds.labels, return_inverse=True)
        k_eff = max(K, classes.size)
        for name, lab in (("gmoa", pred), ("kmeans", km), ("em", em)):
            acc, mapping = hungarian_accuracy(lab, truth, k_eff)
            metrics[f"accuracy_{name}"] = acc
            metrics[f"contingency_{name}"] = contingency(lab, truth, k_eff)
            metrics[f"mapping_{name}"] = [int(classes[m]) if m < classes.size else None for m in mapping]
        metrics["classes"] = classes
    return metrics, pred


def cmd_evaluate(cfg: dict, out: Path, state_path) -> int:
    state_path = state_path or cfg["evaluate"].get("state")
    if not state_path:
        raise ConfigError("evaluate needs --state (or evaluate.state in the config)")
    u, theta, data = load_state(state_path)
    ds = build_dataset(cfg["dataset"], cfg["seed"])
    kn = data.get("knowns") or {}
    knowns = build_knowns(_merge(cfg, {"gmoa": {"knowns": kn}})) if kn else FREE
    metrics, pred = evaluate_state(u, theta, ds, cfg["evaluate"].get("kmeans_seed", cfg["seed"]),
                                   cfg["evaluate"].get("weighted", False), knowns)
    metrics["state"] = str(state_path)
    _dump_json(out / "metrics.json", metrics)
    save_labels_csv(out / "labels.csv", pred, ds.labels)
    _manifest(out, "evaluate", cfg, ["metrics.json", "labels.csv"], {"state": str(state_path)})
    if "accuracy_gmoa" in metrics:
        print(f"accuracy gmoa={metrics['accuracy_gmoa']:.4f} kmeans={metrics['accuracy_kmeans']:.4f} "
              f"em={metrics['accuracy_em']:.4f}")
    else:
        print("no truth labels: accuracy omitted")
    return EXIT_OK


def _dataset_overrides(args) -> dict:
    o = {}
    if getattr(args, "dataset", None):
        o["dataset"] = {"kind": "csv", "path": args.dataset}
    elif getattr(args, "preset", None) or getattr(args, "generator", None) == "noisy_lines":
        if getattr(args, "generator", None) == "noisy_lines":
            o["dataset"] = {"kind": "noisy_lines"}
            if args.n is not None:
                o["dataset"]["n_per_line"] = args.n
        else:
            o["dataset"] = {"kind": "preset", "name": args.preset}
            if args.n is not None:
                o["dataset"]["n"] = args.n
    elif getattr(args, "n", None) is not None:
        o["dataset.n"] = args.n
    return o


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON config file")
    common.add_argument("--seed", type=int, help="master seed (overrides the config)")
    common.add_argument("--out", help="output directory")
    common.add_argument("--threads", type=int, default=1,
                        help="worker processes for surface grids and multi-start (BLAS stays single-threaded)")
    common.add_argument("-v", "--verbose", action="count", default=0)

    p = argparse.ArgumentParser(prog="gmoa", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("simulate", parents=[common], help="generate a synthetic dataset")
    s.add_argument("--preset", help=f"GMM preset ({', '.join(sorted(PRESETS))})")
    s.add_argument("--generator", choices=["gmm", "noisy_lines"], default=None)
    s.add_argument("--n", type=int, help="points (gmm) or points per line (noisy_lines)")

    t = sub.add_parser("train", parents=[common], help="run the manifold optimizer")
    t.add_argument("--preset")
    t.add_argument("--n", type=int)
    t.add_argument("--dataset", help="dataset CSV (label,x1,...)")
    t.add_argument("--theta0", type=float, nargs="+", help="initial angle(s)")
    t.add_argument("--n-iter", type=int, dest="n_iter")
    t.add_argument("--eta0", type=float)

    f = sub.add_parser("surface", parents=[common], help="inner optimum over an angle grid")
    f.add_argument("--preset")
    f.add_argument("--n", type=int)
    f.add_argument("--dataset")
    f.add_argument("--grid", type=float, nargs=3, action="append", metavar=("START", "STOP", "STEP"))

    e = sub.add_parser("evaluate", parents=[common], help="label data with a trained state")
    e.add_argument("--state", help="state.json written by train")
    e.add_argument("--preset")
    e.add_argument("--n", type=int)
    e.add_argument("--dataset")
    return p


def _overrides(args) -> dict:
    o = _dataset_overrides(args)
    o["seed"] = args.seed
    o["out"] = args.out
    if getattr(args, "theta0", None) is not None:
        o["reducer"] = {"kind": "angle2d" if len(args.theta0) == 1 else "angle3d",
                        "theta": args.theta0}
    o["gmoa.n_iter"] = getattr(args, "n_iter", None)
    o["gmoa.eta0"] = getattr(args, "eta0", None)
    if getattr(args, "grid", None):
        o["surface.grid"] = args.grid
    return o


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2),
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = load_config(args.config, _overrides(args))
        out = Path(cfg["out"])
        out.mkdir(parents=True, exist_ok=True)
        if args.threads < 1:
            raise ConfigError("--threads must be >= 1")
        # multithreaded BLAS changes summation order, so results would depend on it
        with threadpool_limits(limits=1):
            if args.command == "simulate":
                return cmd_simulate(cfg, out)
            if args.command == "train":
                return cmd_train(cfg, out, args.threads)
            if args.command == "surface":
                return cmd_surface(cfg, out, args.threads)
            return cmd_evaluate(cfg, out, args.state)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (StepFailure, NumericalFailure, FloatingPointError, np.linalg.LinAlgError,
            red.DegenerateOutputError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (OSError, DataFormatError, json.JSONDecodeError) as exc:
        print(f"io error: {exc}", file=sys.stderr)
        return EXIT_IO
    except (ValueError, red.ReducerError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
