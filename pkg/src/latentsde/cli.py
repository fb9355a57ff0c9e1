"""Command-line entry points and bit-exact file formats.

Four commands — ``simulate``, ``fit``, ``portrait``, ``eval`` — cover
dataset generation, model fitting, phase-portrait export, and scoring a
fitted model against the generating truth.  All artifacts are JSON (or CSV
for portrait grids) written with canonical key order and fixed float
formatting so that identical flags and seeds produce byte-identical files.

Exit codes: 0 success, 2 input or validation error, 3 non-convergence.
"""

from __future__ import annotations

import json
import os
import sys

import click
import numpy as np

from .dynamics import (
    DynamicsModel,
    FixedPointSet,
    InducingSet,
    JacobianSet,
    LinearDynamics,
)
from .errors import InvalidArgumentError, SchemaError
from .inference import InitialState, SmootherConfig, smooth_trial
from .kernels import KernelSpec
from .learning import FitConfig, fit
from .likelihoods import Dataset, OutputMapGaussian, OutputMapPoisson, TrialData
from .systems import PROTOCOLS, DriftSpec, drift_eval, make_dataset

SCHEMA_VERSION = 1

# ---------------------------------------------------------------------------
# canonical JSON


def _fmt_float(x: float) -> str:
    if not np.isfinite(x):
        raise InvalidArgumentError("non-finite value cannot be serialized")
    if x == 0.0:
        return "0"
    return "%.17g" % x


def dumps_canonical(obj) -> str:
    """Serialize to JSON with sorted keys and 17-significant-digit floats.

    The format is deliberately rigid — no whitespace, deterministic float
    strings — so that writing the same logical content always produces the
    same bytes.
    """
    if obj is None:
        return "null"
    if isinstance(obj, (bool, np.bool_)):
        return "true" if obj else "false"
    if isinstance(obj, (int, np.integer)):
        return repr(int(obj))
    if isinstance(obj, (float, np.floating)):
        return _fmt_float(float(obj))
    if isinstance(obj, str):
        return json.dumps(obj)
    if isinstance(obj, np.ndarray):
        return dumps_canonical(obj.tolist())
    if isinstance(obj, (list, tuple)):
        return "[" + ",".join(dumps_canonical(v) for v in obj) + "]"
    if isinstance(obj, dict):
        for key in obj:
            if not isinstance(key, str):
                raise InvalidArgumentError("JSON object keys must be strings")
        return "{" + ",".join(
            json.dumps(k) + ":" + dumps_canonical(obj[k]) for k in sorted(obj)
        ) + "}"
    raise InvalidArgumentError(
        "cannot serialize object of type %s" % type(obj).__name__
    )


def write_canonical(path: str, obj) -> None:
    with open(path, "w") as fh:
        fh.write(dumps_canonical(obj))
        fh.write("\n")


def read_json(path: str):
    try:
        with open(path) as fh:
            return json.load(fh)
    except json.JSONDecodeError as exc:
        raise SchemaError("not valid JSON: %s" % exc, field="") from None


# ---------------------------------------------------------------------------
# schema validation


def _need(obj: dict, key: str, where: str):
    if key not in obj:
        raise SchemaError("missing field", field=where + key)
    return obj[key]


def _as_matrix(value, where: str) -> np.ndarray:
    try:
        arr = np.asarray(value, dtype=float)
    except (TypeError, ValueError):
        raise SchemaError("ragged or non-numeric array", field=where) from None
    if arr.dtype == object:
        raise SchemaError("ragged or non-numeric array", field=where)
    return arr


def validate_dataset_file(obj) -> None:
    """Structural checks for a dataset file; raises naming the bad field."""
    if not isinstance(obj, dict):
        raise SchemaError("dataset file must be a JSON object", field="")
    if _need(obj, "schema_version", "") != SCHEMA_VERSION:
        raise SchemaError("unsupported schema_version", field="schema_version")
    span = _need(obj, "span", "")
    if len(span) != 2 or not float(span[1]) > float(span[0]):
        raise SchemaError("span must be [t0, t_end] with t_end > t0",
                          field="span")
    kind = _need(obj, "observation_kind", "")
    if kind not in ("gaussian", "point_process"):
        raise SchemaError("unknown observation_kind", field="observation_kind")
    trials = _need(obj, "trials", "")
    if not isinstance(trials, list) or not trials:
        raise SchemaError("trials must be a nonempty list", field="trials")
    for i, tr in enumerate(trials):
        where = "trials[%d]." % i
        _need(tr, "span", where)
        if kind == "gaussian":
            times = _as_matrix(_need(tr, "times", where), where + "times")
            Y = _as_matrix(_need(tr, "Y", where), where + "Y")
            if Y.ndim != 2 or Y.shape[1] != times.size:
                raise SchemaError("Y must be channels x observation times",
                                  field=where + "Y")
        else:
            events = _need(tr, "events", where)
            for n, ev in enumerate(events):
                _as_matrix(ev, where + "events[%d]" % n)
        if ("true_path" in tr) != ("true_times" in tr):
            raise SchemaError("true_path and true_times must come together",
                              field=where + "true_path")
        if "true_path" in tr:
            tp = _as_matrix(tr["true_path"], where + "true_path")
            tt = _as_matrix(tr["true_times"], where + "true_times")
            if tp.ndim != 2 or tp.shape[0] != tt.size:
                raise SchemaError("true_path rows must match true_times",
                                  field=where + "true_path")
    if obj.get("truth") is not None:
        truth = obj["truth"]
        _need(truth, "drift_name", "truth.")
        _need(truth, "params", "truth.")
        C = _as_matrix(_need(truth, "C", "truth."), "truth.C")
        d = _as_matrix(_need(truth, "d", "truth."), "truth.d")
        if C.ndim != 2 or d.shape != (C.shape[0],):
            raise SchemaError("C rows must match d length", field="truth.C")


def validate_checkpoint_file(obj) -> None:
    if not isinstance(obj, dict):
        raise SchemaError("checkpoint file must be a JSON object", field="")
    if _need(obj, "schema_version", "") != SCHEMA_VERSION:
        raise SchemaError("unsupported schema_version", field="schema_version")
    config = _need(obj, "config", "")
    if not isinstance(config, dict):
        raise SchemaError("config must be a JSON object", field="config")
    known = set(FitConfig.__dataclass_fields__)
    for key in config:
        if key not in known:
            raise SchemaError("unknown config field", field="config." + key)
    dyn = _need(obj, "dynamics", "")
    kind = _need(dyn, "kind", "dynamics.")
    if kind == "linear":
        A = _as_matrix(_need(dyn, "decay", "dynamics."), "dynamics.decay")
        b = _as_matrix(_need(dyn, "offset", "dynamics."), "dynamics.offset")
        if A.ndim != 2 or A.shape != (b.size, b.size):
            raise SchemaError("decay must be K x K matching offset",
                              field="dynamics.decay")
    elif kind == "gp":
        kernel = _need(dyn, "kernel", "dynamics.")
        _need(kernel, "signal_var", "dynamics.kernel.")
        _need(kernel, "lengthscales", "dynamics.kernel.")
        ind = _need(dyn, "inducing", "dynamics.")
        Z = _as_matrix(_need(ind, "Z", "dynamics.inducing."),
                       "dynamics.inducing.Z")
        means = _as_matrix(_need(ind, "means", "dynamics.inducing."),
                           "dynamics.inducing.means")
        covs = _as_matrix(_need(ind, "covs", "dynamics.inducing."),
                          "dynamics.inducing.covs")
        if Z.ndim != 2:
            raise SchemaError("Z must be M x K", field="dynamics.inducing.Z")
        if means.shape != (Z.shape[1], Z.shape[0]):
            raise SchemaError("means must be K x M",
                              field="dynamics.inducing.means")
        if covs.shape != (Z.shape[1], Z.shape[0], Z.shape[0]):
            raise SchemaError("covs must be K x M x M",
                              field="dynamics.inducing.covs")
        fps = _need(dyn, "fixed_points", "dynamics.")
        locs = _as_matrix(_need(fps, "locations", "dynamics.fixed_points."),
                          "dynamics.fixed_points.locations")
        alphas = _as_matrix(_need(fps, "alphas", "dynamics.fixed_points."),
                            "dynamics.fixed_points.alphas")
        if locs.ndim != 2 or alphas.shape != (locs.shape[0],):
            raise SchemaError("alphas must match fixed-point count",
                              field="dynamics.fixed_points.alphas")
        jac = _as_matrix(_need(dyn, "jacobians", "dynamics."),
                         "dynamics.jacobians")
        K = Z.shape[1]
        if jac.shape != (locs.shape[0], K, K):
            raise SchemaError("jacobians must be L x K x K",
                              field="dynamics.jacobians")
    else:
        raise SchemaError("unknown dynamics kind", field="dynamics.kind")
    omap = _need(obj, "output_map", "")
    okind = _need(omap, "kind", "output_map.")
    if okind not in ("gaussian", "poisson"):
        raise SchemaError("unknown output map kind", field="output_map.kind")
    C = _as_matrix(_need(omap, "C", "output_map."), "output_map.C")
    d = _as_matrix(_need(omap, "d", "output_map."), "output_map.d")
    if C.ndim != 2 or d.shape != (C.shape[0],):
        raise SchemaError("C rows must match d length", field="output_map.C")
    if okind == "gaussian":
        G = _as_matrix(_need(omap, "Gamma", "output_map."), "output_map.Gamma")
        if G.shape != (C.shape[0],):
            raise SchemaError("Gamma must have one entry per channel",
                              field="output_map.Gamma")
    report = _need(obj, "report", "")
    _need(report, "trace", "report.")
    _need(report, "converged", "report.")


# ---------------------------------------------------------------------------
# object <-> file translation


def dataset_to_obj(ds: Dataset) -> dict:
    trials = []
    for tr in ds.trials:
        entry = {"span": [tr.span[0], tr.span[1]]}
        if tr.observation_kind == "gaussian":
            entry["times"] = tr.times.tolist()
            entry["Y"] = tr.Y.tolist()
        else:
            entry["events"] = [ev.tolist() for ev in tr.events]
        if tr.true_path is not None:
            entry["true_times"] = tr.true_times.tolist()
            entry["true_path"] = tr.true_path.tolist()
        trials.append(entry)
    return {
        "schema_version": SCHEMA_VERSION,
        "protocol": ds.protocol,
        "seed": ds.seed,
        "span": [ds.span[0], ds.span[1]],
        "observation_kind": ds.observation_kind,
        "trials": trials,
        "truth": ds.truth,
    }


def dataset_from_obj(obj) -> Dataset:
    validate_dataset_file(obj)
    kind = obj["observation_kind"]
    trials = []
    for tr in obj["trials"]:
        kwargs = {"span": (float(tr["span"][0]), float(tr["span"][1]))}
        if kind == "gaussian":
            kwargs["times"] = np.asarray(tr["times"], dtype=float)
            kwargs["Y"] = np.asarray(tr["Y"], dtype=float)
        else:
            kwargs["events"] = [np.asarray(ev, dtype=float)
                                for ev in tr["events"]]
        if "true_path" in tr:
            kwargs["true_path"] = np.asarray(tr["true_path"], dtype=float)
            kwargs["true_times"] = np.asarray(tr["true_times"], dtype=float)
        trials.append(TrialData(**kwargs))
    return Dataset(
        trials,
        span=(float(obj["span"][0]), float(obj["span"][1])),
        observation_kind=kind,
        protocol=obj.get("protocol"),
        seed=obj.get("seed"),
        truth=obj.get("truth"),
    )


def config_from_obj(obj) -> FitConfig:
    if not isinstance(obj, dict):
        raise SchemaError("config must be a JSON object", field="")
    known = set(FitConfig.__dataclass_fields__)
    for key in obj:
        if key not in known:
            raise SchemaError("unknown config field", field=key)
    return FitConfig(**obj)


def _dynamics_to_obj(model) -> dict:
    if isinstance(model, LinearDynamics):
        return {
            "kind": "linear",
            "decay": model.decay.tolist(),
            "offset": model.offset.tolist(),
        }
    return {
        "kind": "gp",
        "kernel": {
            "signal_var": float(model.kernel.signal_var),
            "lengthscales": model.kernel.lengthscales.tolist(),
        },
        "inducing": {
            "Z": model.inducing.Z.tolist(),
            "means": model.inducing.means.tolist(),
            "covs": model.inducing.covs.tolist(),
        },
        "fixed_points": {
            "locations": model.fixed_points.locations.tolist(),
            "alphas": model.fixed_points.alphas.tolist(),
        },
        "jacobians": model.jacobians.jacobians.tolist(),
    }


def _dynamics_from_obj(obj):
    if obj["kind"] == "linear":
        return LinearDynamics(np.asarray(obj["decay"], dtype=float),
                              np.asarray(obj["offset"], dtype=float))
    kernel = KernelSpec(
        float(obj["kernel"]["signal_var"]),
        np.asarray(obj["kernel"]["lengthscales"], dtype=float),
    )
    inducing = InducingSet(
        np.asarray(obj["inducing"]["Z"], dtype=float),
        np.asarray(obj["inducing"]["means"], dtype=float),
        np.asarray(obj["inducing"]["covs"], dtype=float),
    )
    fps = FixedPointSet(
        np.asarray(obj["fixed_points"]["locations"], dtype=float),
        np.asarray(obj["fixed_points"]["alphas"], dtype=float),
    )
    jac = JacobianSet(np.asarray(obj["jacobians"], dtype=float))
    return DynamicsModel(kernel, inducing, fps, jac)


def _output_map_to_obj(omap) -> dict:
    if isinstance(omap, OutputMapGaussian):
        return {"kind": "gaussian", "C": omap.C.tolist(), "d": omap.d.tolist(),
                "Gamma": omap.Gamma.tolist()}
    return {"kind": "poisson", "C": omap.C.tolist(), "d": omap.d.tolist()}


def _output_map_from_obj(obj):
    C = np.asarray(obj["C"], dtype=float)
    d = np.asarray(obj["d"], dtype=float)
    if obj["kind"] == "gaussian":
        return OutputMapGaussian(C, d, np.asarray(obj["Gamma"], dtype=float))
    return OutputMapPoisson(C, d)


def _report_to_obj(report) -> dict:
    """Serialize a fit report, dropping wall-clock timings.

    Timings differ between otherwise identical runs, and checkpoints are
    required to be byte-identical for the same flags and seed.
    """
    fps = report.fixed_points
    fps_obj = None
    if fps:
        fps_obj = {
            "locations": np.asarray(fps["locations"]).tolist(),
            "alphas": np.asarray(fps["alphas"]).tolist(),
            "jacobians": np.asarray(fps["jacobians"]).tolist(),
            "eigenvalues": [
                [{"re": float(np.real(e)), "im": float(np.imag(e))}
                 for e in np.atleast_1d(eigs)]
                for eigs in fps["eigenvalues"]
            ],
        }
    return {
        "trace": [float(f) for f in report.trace],
        "phases": [[int(i), name, float(f)] for i, name, f in report.phases],
        "iterations": int(report.iterations),
        "converged": bool(report.converged),
        "n_grid": int(report.n_grid),
        "fixed_points": fps_obj,
    }


def checkpoint_to_obj(config: FitConfig, result) -> dict:
    cfg = {f: getattr(config, f) for f in FitConfig.__dataclass_fields__}
    return {
        "schema_version": SCHEMA_VERSION,
        "config": cfg,
        "dynamics": _dynamics_to_obj(result.model),
        "output_map": _output_map_to_obj(result.output_map),
        "report": _report_to_obj(result.report),
    }


def checkpoint_from_obj(obj):
    validate_checkpoint_file(obj)
    config = config_from_obj(obj["config"])
    model = _dynamics_from_obj(obj["dynamics"])
    omap = _output_map_from_obj(obj["output_map"])
    return config, model, omap, obj["report"]


# ---------------------------------------------------------------------------
# evaluation metrics


def _model_fixed_points(model):
    """(locations, alphas, jacobians) of the learnt dynamics, or empty."""
    if isinstance(model, LinearDynamics):
        try:
            loc = np.linalg.solve(model.decay, model.offset)
        except np.linalg.LinAlgError:
            return np.zeros((0, model.latent_dim)), np.zeros(0), \
                np.zeros((0, model.latent_dim, model.latent_dim))
        return loc[None, :], np.zeros(1), -model.decay[None, :, :]
    return (model.fixed_points.locations, model.fixed_points.alphas,
            model.jacobians.jacobians)


def _retained_mask(alphas: np.ndarray) -> np.ndarray:
    """Fixed points that survive pruning: uncertainty below 5x the minimum."""
    if alphas.size == 0:
        return np.zeros(0, dtype=bool)
    amin = alphas.min()
    if amin <= 0.0:
        return alphas <= amin
    return alphas < 5.0 * amin


def _affine_align(latents: np.ndarray, targets: np.ndarray):
    """Least-squares map W x + c from inferred latents onto true latents."""
    n, K = latents.shape
    design = np.hstack([latents, np.ones((n, 1))])
    sol, *_ = np.linalg.lstsq(design, targets, rcond=None)
    return sol[:K].T, sol[K]


def _true_fixed_points(truth: dict, hint_points: np.ndarray) -> np.ndarray:
    from scipy.optimize import fsolve

    spec = DriftSpec(truth["drift_name"], dict(truth["params"]))
    K = spec.dim
    starts = [np.asarray(p, dtype=float) for p in hint_points]
    if hint_points.size:
        lo = hint_points.min(axis=0) - 0.5
        hi = hint_points.max(axis=0) + 0.5
        mesh = np.meshgrid(*[np.linspace(lo[k], hi[k], 4) for k in range(K)],
                           indexing="ij")
        starts += list(np.stack(mesh, axis=-1).reshape(-1, K))
    scale = max(1.0, float(np.abs(hint_points).max())) if hint_points.size else 1.0
    roots = []
    for x0 in starts:
        sol, _, ier, _ = fsolve(lambda x: drift_eval(spec, x), x0,
                                full_output=True)
        if ier != 1 or np.abs(drift_eval(spec, sol)).max() > 1e-8:
            continue
        if not any(np.allclose(sol, r, atol=1e-6 * scale) for r in roots):
            roots.append(sol)
    return np.asarray(roots).reshape(-1, K)


def evaluate_checkpoint(config, model, omap, dataset: Dataset) -> dict:
    """Score a fitted model on a dataset that carries its generating truth.

    Re-smooths every trial under the loaded model, aligns the inferred
    latents to the true paths with one shared affine map (the latent space
    is only identified up to such a map), and reports path RMSE,
    fixed-point matching distances, a data-density-weighted drift RMSE,
    and 2-standard-deviation calibration.
    """
    from scipy.optimize import linear_sum_assignment

    if dataset.truth is None:
        raise SchemaError("dataset has no truth block", field="truth")
    truth = dataset.truth
    K = model.latent_dim
    sconfig = SmootherConfig(dt=config.dt, max_iters=config.inner_iters,
                             tol=config.inner_tol)
    lat_all, tru_all, sd_all = [], [], []
    for trial in dataset.trials:
        if trial.true_path is None:
            raise SchemaError("trial lacks a stored true path",
                              field="trials.true_path")
        res = smooth_trial(trial, model, omap, InitialState.standard(K),
                           sconfig)
        grid, m, S = res.path.grid.times(), res.path.m, res.path.S
        t_eval = trial.times if trial.observation_kind == "gaussian" \
            else trial.true_times
        m_at = np.stack([np.interp(t_eval, grid, m[:, k]) for k in range(K)],
                        axis=1)
        S_at = np.empty((t_eval.size, K, K))
        for k in range(K):
            for l in range(K):
                S_at[:, k, l] = np.interp(t_eval, grid, S[:, k, l])
        Kt = trial.true_path.shape[1]
        x_at = np.stack(
            [np.interp(t_eval, trial.true_times, trial.true_path[:, k])
             for k in range(Kt)], axis=1)
        lat_all.append(m_at)
        tru_all.append(x_at)
        sd_all.append(S_at)
    lat = np.concatenate(lat_all, axis=0)
    tru = np.concatenate(tru_all, axis=0)
    S_pool = np.concatenate(sd_all, axis=0)
    if lat.shape[1] != tru.shape[1]:
        raise SchemaError("model latent dimension differs from the truth",
                          field="trials.true_path")

    W, c = _affine_align(lat, tru)
    aligned = lat @ W.T + c
    latent_rmse = float(np.sqrt(np.mean(np.sum((aligned - tru) ** 2, axis=1))))

    # calibration in the aligned frame: coordinate-wise, using the full
    # posterior covariance pushed through the alignment map
    var_aligned = np.einsum("ij,njk,ik->ni", W, S_pool, W)
    sd_aligned = np.sqrt(np.maximum(var_aligned, 1e-300))
    inside = np.abs(aligned - tru) <= 2.0 * sd_aligned
    calibration = float(inside.mean())

    # fixed points: map retained learnt points into the true frame
    locs, alphas, _ = _model_fixed_points(model)
    keep = _retained_mask(alphas)
    mapped = locs[keep] @ W.T + c if keep.any() else np.zeros((0, tru.shape[1]))
    true_fps = _true_fixed_points(truth, tru[:: max(1, tru.shape[0] // 200)])
    if mapped.shape[0] and true_fps.shape[0]:
        cost = np.linalg.norm(mapped[:, None, :] - true_fps[None, :, :], axis=2)
        rows, cols = linear_sum_assignment(cost)
        fp_distances = [float(cost[r, q]) for r, q in zip(rows, cols)]
    else:
        fp_distances = []

    # drift RMSE on the empirical (data-density-weighted) point cloud
    spec = DriftSpec(truth["drift_name"], dict(truth["params"]))
    stride = max(1, tru.shape[0] // 2000)
    cloud = tru[::stride]
    f_true = drift_eval(spec, cloud)
    Winv = np.linalg.pinv(W)
    zs = (cloud - c) @ Winv.T
    f_model = model.predict_f(zs)["mean"] @ W.T
    drift_rmse = float(np.sqrt(np.mean(np.sum((f_model - f_true) ** 2,
                                              axis=1))))

    return {
        "latent_rmse": latent_rmse,
        "calibration": calibration,
        "fixed_point_distances": fp_distances,
        "n_retained": int(keep.sum()),
        "n_true_fixed_points": int(true_fps.shape[0]),
        "drift_rmse": drift_rmse,
    }


# ---------------------------------------------------------------------------
# commands


def _fail(message: str, code: int = 2):
    click.echo("error: %s" % message, err=True)
    sys.exit(code)


@click.group()
def main():
    """Latent stochastic dynamics: simulate, fit, export, evaluate."""


@main.command("simulate")
@click.option("--protocol", required=True,
              help="one of: %s" % ", ".join(PROTOCOLS))
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("--n-trials", type=int, default=None,
              help="override the protocol's trial count")
@click.option("--out", required=True, type=click.Path(dir_okay=False))
def cmd_simulate(protocol, seed, n_trials, out):
    """Generate a benchmark dataset and write it to OUT."""
    try:
        ds = make_dataset(protocol, seed=seed, n_trials=n_trials)
    except InvalidArgumentError as exc:
        _fail(str(exc))
    obj = dataset_to_obj(ds)
    validate_dataset_file(obj)
    write_canonical(out, obj)
    click.echo("wrote %s (%d trials, %s)" % (out, ds.n_trials,
                                             ds.observation_kind))


@main.command("fit")
@click.option("--data", required=True, type=click.Path(exists=True,
                                                       dir_okay=False))
@click.option("--config", "config_path", default=None,
              type=click.Path(exists=True, dir_okay=False),
              help="JSON file with FitConfig fields; defaults apply otherwise")
@click.option("--out-checkpoint", required=True,
              type=click.Path(dir_okay=False))
def cmd_fit(data, config_path, out_checkpoint):
    """Fit the model to DATA and write a checkpoint."""
    try:
        dataset = dataset_from_obj(read_json(data))
        cfg_obj = {} if config_path is None else read_json(config_path)
        explicit_workers = "n_workers" in cfg_obj
        config = config_from_obj(cfg_obj)
    except (SchemaError, InvalidArgumentError) as exc:
        _fail(str(exc))
    cap = os.environ.get("LSDE_THREADS")
    if cap is not None:
        config.n_workers = min(config.n_workers, max(1, int(cap)))
    elif not explicit_workers:
        config.n_workers = max(1, os.cpu_count() or 1)
    result = fit(dataset, config)
    for i, f in enumerate(result.report.trace):
        click.echo("iter %d: F* = %s" % (i, _fmt_float(f)))
    write_canonical(out_checkpoint, checkpoint_to_obj(config, result))
    if result.report.converged:
        click.echo("converged in %d iterations" % result.report.iterations)
    else:
        click.echo("did not converge within %d iterations"
                   % result.report.iterations)
        sys.exit(3)


def _parse_grid(spans, expect_dim):
    if len(spans) != expect_dim:
        raise InvalidArgumentError(
            "need exactly %d --grid options (one per latent dimension), got %d"
            % (expect_dim, len(spans)))
    axes = []
    for s in spans:
        parts = s.split(",")
        if len(parts) != 3:
            raise InvalidArgumentError("grid spec %r is not min,max,n" % s)
        try:
            lo, hi, n = float(parts[0]), float(parts[1]), int(parts[2])
        except ValueError:
            raise InvalidArgumentError("grid spec %r is not min,max,n"
                                       % s) from None
        if not hi > lo or n < 2:
            raise InvalidArgumentError("grid spec %r needs max > min and n >= 2"
                                       % s)
        axes.append(np.linspace(lo, hi, n))
    return axes


@main.command("portrait")
@click.option("--checkpoint", required=True,
              type=click.Path(exists=True, dir_okay=False))
@click.option("--grid", "grids", multiple=True, required=True,
              help='"min,max,n" once per latent dimension')
@click.option("--out", required=True, type=click.Path(dir_okay=False))
def cmd_portrait(checkpoint, grids, out):
    """Tabulate the learnt drift on a grid; write CSV plus fixed-point JSON."""
    try:
        _, model, _, _ = checkpoint_from_obj(read_json(checkpoint))
        axes = _parse_grid(grids, model.latent_dim)
    except (SchemaError, InvalidArgumentError) as exc:
        _fail(str(exc))
    K = model.latent_dim
    mesh = np.meshgrid(*axes, indexing="ij")
    pts = np.stack(mesh, axis=-1).reshape(-1, K)
    pred = model.predict_f(pts)
    mean, var = np.atleast_2d(pred["mean"]), np.atleast_2d(pred["var"])
    header = ",".join(["x%d" % (k + 1) for k in range(K)]
                      + ["f_mean_%d" % (k + 1) for k in range(K)]
                      + ["f_var_%d" % (k + 1) for k in range(K)])
    with open(out, "w") as fh:
        fh.write(header + "\n")
        for r in range(pts.shape[0]):
            row = np.concatenate([pts[r], mean[r], var[r]])
            fh.write(",".join(_fmt_float(v) for v in row) + "\n")
    locs, alphas, jacs = _model_fixed_points(model)
    entries = []
    for i in range(locs.shape[0]):
        eigs = np.linalg.eigvals(jacs[i])
        entries.append({
            "s": locs[i].tolist(),
            "alpha": float(alphas[i]),
            "J": jacs[i].tolist(),
            "eigenvalues": [{"re": float(e.real), "im": float(e.imag)}
                            for e in eigs],
            "stable": bool(np.all(eigs.real < 0.0)),
        })
    companion = os.path.splitext(out)[0] + ".json"
    write_canonical(companion, {"fixed_points": entries})
    click.echo("wrote %s (%d rows) and %s" % (out, pts.shape[0], companion))


@main.command("eval")
@click.option("--checkpoint", required=True,
              type=click.Path(exists=True, dir_okay=False))
@click.option("--data", required=True, type=click.Path(exists=True,
                                                       dir_okay=False))
def cmd_eval(checkpoint, data):
    """Score a checkpoint against the truth stored in DATA."""
    try:
        config, model, omap, _ = checkpoint_from_obj(read_json(checkpoint))
        dataset = dataset_from_obj(read_json(data))
        metrics = evaluate_checkpoint(config, model, omap, dataset)
    except (SchemaError, InvalidArgumentError) as exc:
        _fail(str(exc))
    click.echo(dumps_canonical(metrics))


if __name__ == "__main__":
    main()
