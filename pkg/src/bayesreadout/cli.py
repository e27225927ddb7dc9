"""Command-line interface.

Exit codes: 0 success, 1 other library error, 2 configuration, 3 data,
4 missing calibration, 5 numerical failure.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import math
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import __version__
from .bayes_em import EmConfig, run_em
from .count_model import MixtureModel, SuperPoissonParams, sample
from .errors import (
    ArchitectureError,
    CalibrationRequiredError,
    ConfigError,
    DataFormatError,
    DegenerateWeightsError,
    FitDegenerateError,
    InvariantViolation,
    NumericalDomainError,
    ParameterDomainError,
    ReadoutError,
)
from .experiments import (
    METHODS,
    RABI_TIMES,
    RabiModel,
    RamseyModel,
    ShotSeries,
    compare_methods,
    generate_experiment,
    point_seeds,
)
from .fixtures import PAIRS, RABI, RAMSEY, RAMSEY_TIMES, SHOTS_PER_POINT
from .posterior_grid import DEFAULT_GRID_SIZE
from .shotfile import ShotFile, read_shotfile, write_shotfile
from .threshold import choose_threshold, estimate_threshold

log = logging.getLogger("bayesreadout")

EXIT_OK, EXIT_OTHER, EXIT_CONFIG, EXIT_DATA, EXIT_CALIBRATION, EXIT_NUMERICAL = 0, 1, 2, 3, 4, 5
METHOD_ALIASES = {"threshold": "threshold", "em": "em_exact", "em-net": "em_network"}


def exit_code(exc: BaseException) -> int:
    if isinstance(exc, CalibrationRequiredError):
        return EXIT_CALIBRATION
    if isinstance(exc, (ConfigError, ArchitectureError)):
        return EXIT_CONFIG
    if isinstance(exc, (DataFormatError, ParameterDomainError, DegenerateWeightsError)):
        return EXIT_DATA
    if isinstance(exc, (NumericalDomainError, InvariantViolation, FitDegenerateError)):
        return EXIT_NUMERICAL
    return EXIT_OTHER


# -- configuration files -------------------------------------------------------


class ConfigDoc:
    """A parsed JSON config that remembers its text so errors can cite a line."""

    def __init__(self, data: dict, text: str = "", source: str = "<config>"):
        if not isinstance(data, dict):
            raise ConfigError("top level of a config must be an object", line=1)
        self.data, self.text, self.source = data, text, source

    @classmethod
    def load(cls, path) -> "ConfigDoc":
        try:
            text = Path(path).read_text(encoding="utf-8")
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from None
        try:
            data = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"invalid JSON: {exc.msg}", line=exc.lineno) from None
        return cls(data, text, str(path))

    def line_of(self, field: str | None):
        if not field:
            return None
        key = f'"{field.split(".")[-1]}"'
        for i, line in enumerate(self.text.splitlines(), start=1):
            if key in line:
                return i
        return None

    def error(self, message, field):
        return ConfigError(message, field=field, line=self.line_of(field))

    def get(self, field: str, default=None, required=False):
        node = self.data
        for part in field.split("."):
            if not isinstance(node, dict) or part not in node:
                if required:
                    raise self.error("missing required field", field)
                return default
            node = node[part]
        return node

    def number(self, field, default=None, required=False, lo=None, hi=None, integer=False):
        v = self.get(field, default, required)
        if v is None:
            return None
        if isinstance(v, bool) or not isinstance(v, (int, float)) or not math.isfinite(v):
            raise self.error(f"expected a finite number, got {v!r}", field)
        if integer and int(v) != v:
            raise self.error(f"expected an integer, got {v!r}", field)
        if (lo is not None and v < lo) or (hi is not None and v > hi):
            raise self.error(f"value {v!r} outside [{lo}, {hi}]", field)
        return int(v) if integer else float(v)

    def params(self, field, default=None, required=False):
        v = self.get(field, None, required and default is None)
        if v is None:
            return default
        if not isinstance(v, dict):
            raise self.error("expected an object with alpha and beta", field)
        try:
            return SuperPoissonParams(
                self.number(f"{field}.alpha", required=True), self.number(f"{field}.beta", required=True)
            )
        except ParameterDomainError as exc:
            raise self.error(str(exc), field) from None

    def with_line(self, exc: ConfigError) -> ConfigError:
        if exc.line is None and exc.field:
            return ConfigError(str(exc).split(" (field")[0], exc.field, self.line_of(exc.field))
        return exc


# -- output helpers --------------------------------------------------------------


def dumps_json(obj) -> str:
    return json.dumps(_plain(obj), indent=2, sort_keys=True, allow_nan=True) + "\n"


def _plain(obj):
    if isinstance(obj, dict):
        return {str(k): _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return [_plain(v) for v in obj.tolist()]
    if isinstance(obj, np.generic):
        return obj.item()
    return obj


def dumps_csv(rows: list, columns=None) -> str:
    out = io.StringIO()
    if not rows:
        return ""
    columns = columns or list(rows[0])
    w = csv.DictWriter(out, fieldnames=columns, lineterminator="\n", extrasaction="ignore")
    w.writeheader()
    for r in rows:
        w.writerow({k: ("" if r.get(k) is None else _plain(r.get(k))) for k in columns})
    return out.getvalue()


def emit(text: str, out=None):
    if out is None or str(out) == "-":
        sys.stdout.write(text)
        return
    path = Path(out)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(text, encoding="utf-8", newline="\n")


def _pair(text: str, flag: str) -> SuperPoissonParams:
    try:
        a, b = (float(v) for v in text.split(","))
        return SuperPoissonParams(a, b)
    except ValueError as exc:
        raise ConfigError(f"expected ALPHA,BETA: {exc}", field=flag) from None


def _weights(path):
    from .pinet import load_default_weights
    from .pinet.weights_io import load_weights

    return load_default_weights() if path is None else load_weights(path)


def _fixture(name: str):
    if name not in PAIRS:
        raise ConfigError(f"unknown fixture {name!r}; choose from {sorted(PAIRS)}", field="fixture")
    return PAIRS[name]


# -- simulate ------------------------------------------------------------------


def _laws(doc: ConfigDoc):
    if doc.get("fixture") is not None:
        g, f = _fixture(doc.get("fixture"))
        return doc.params("dark", g), doc.params("bright", f)
    return doc.params("dark", required=True), doc.params("bright", required=True)


def _rois(doc: ConfigDoc):
    rois = doc.get("rois", ["roi0"])
    if isinstance(rois, int) and not isinstance(rois, bool):
        if rois < 1:
            raise doc.error("need at least one ROI", "rois")
        rois = [f"roi{k}" for k in range(rois)]
    if not isinstance(rois, list) or not rois or not all(isinstance(r, str) and r for r in rois):
        raise doc.error("rois must be a positive integer or a list of names", "rois")
    if len(set(rois)) != len(rois):
        raise doc.error("ROI names must be unique", "rois")
    for r in rois:
        if any(c in r for c in ",#\n\r"):
            raise doc.error(f"ROI name {r!r} may not contain ',', '#' or newlines", "rois")
    return rois


def _experiment_model(doc: ConfigDoc):
    kind = doc.get("experiment.kind", required=True)
    if kind == "rabi":
        model = RabiModel.from_frequency(
            doc.number("experiment.frequency_hz", RABI.frequency_hz, lo=0.0),
            doc.number("experiment.amplitude", RABI.amplitude, lo=0.0, hi=1.0),
        )
        default_times = RABI_TIMES
    elif kind == "ramsey":
        model = RamseyModel.from_t2(
            doc.number("experiment.t2_s", RAMSEY.t2, lo=0.0),
            doc.number("experiment.detuning_hz", RAMSEY.detuning_hz),
            phi=doc.number("experiment.phi", RAMSEY.phi),
            l0=doc.number("experiment.l0", RAMSEY.l0, lo=0.0, hi=1.0),
            amp=doc.number("experiment.amp", RAMSEY.amp),
        )
        default_times = RAMSEY_TIMES
    else:
        raise doc.error(f"experiment kind must be 'rabi' or 'ramsey', got {kind!r}", "experiment.kind")
    times = doc.get("experiment.times_s", list(default_times))
    if not isinstance(times, list) or len(times) < 1:
        raise doc.error("times_s must be a non-empty list", "experiment.times_s")
    for k in range(len(times)):
        if isinstance(times[k], bool) or not isinstance(times[k], (int, float)) or times[k] < 0:
            raise doc.error(f"bad time value {times[k]!r}", "experiment.times_s")
    times = np.asarray(times, dtype=np.float64)
    if np.any(np.diff(times) <= 0):
        raise doc.error("time points must be strictly increasing", "experiment.times_s")
    return kind, model, times


def simulate(doc: ConfigDoc, out_dir, seed=None) -> list:
    """Write shot files for a config; returns the paths written."""
    echo = json.loads(json.dumps(doc.data))
    if seed is not None:
        echo["seed"] = seed
    seed = doc.number("seed", 0, integer=True, lo=0) if seed is None else seed
    N = doc.number("shots_per_roi", SHOTS_PER_POINT, integer=True, lo=1)
    tag = doc.get("exposure_tag", "")
    if not isinstance(tag, str) or "\n" in tag:
        raise doc.error("exposure_tag must be a single-line string", "exposure_tag")
    g, f = _laws(doc)
    rois = _rois(doc)
    header_dark = g if doc.get("write_dark_calibration", True) else None
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    roi_seeds = point_seeds(seed, len(rois))

    if doc.get("experiment") is None:
        l = doc.number("occupation", required=True, lo=0.0, hi=1.0)
        model = MixtureModel(g, f, l)
        records = [sample(model, N, s, roi_id=r, exposure_tag=tag) for r, s in zip(rois, roi_seeds)]
        path = write_shotfile(ShotFile(records, tag, header_dark, {"config": echo, "l_true": l}), out_dir / "shots.csv")
        return [path]

    kind, model, times = _experiment_model(doc)
    try:
        series = [generate_experiment(model, times, N, g, f, s, roi_id=r, exposure_tag=tag) for r, s in zip(rois, roi_seeds)]
    except ParameterDomainError as exc:
        raise doc.error(str(exc), "experiment") from None
    paths, files = [], []
    for k, t in enumerate(times):
        name = f"point_{k:03d}.csv"
        meta = {"config": echo, "point": k, "t_s": float(t), "l_true": float(series[0].l_true[k])}
        records = [s.records[k] for s in series]
        paths.append(write_shotfile(ShotFile(records, tag, header_dark, meta), out_dir / name))
        files.append(name)
    manifest = {
        "format": "bayesreadout-manifest 1",
        "kind": kind,
        "times_s": times,
        "l_true": series[0].l_true,
        "files": files,
        "rois": rois,
        "config": echo,
    }
    mpath = out_dir / "manifest.json"
    mpath.write_text(dumps_json(manifest), encoding="utf-8", newline="\n")
    return paths + [mpath]


def cmd_simulate(args):
    doc = ConfigDoc.load(args.config)
    try:
        paths = simulate(doc, args.out, args.seed)
    except ConfigError as exc:
        raise doc.with_line(exc) from None
    for p in paths:
        print(p)


# -- infer ---------------------------------------------------------------------


def _em_config(args, **kw) -> EmConfig:
    return EmConfig(
        max_iter=args.max_iter,
        grid_size=args.grid,
        collapse=not args.per_shot,
        **kw,
    )


def infer_file(shots: ShotFile, method: str, args, reference=None) -> list:
    """Per-ROI results for one shot file (the ``infer`` command body)."""
    method = METHOD_ALIASES.get(method, method)
    g = _pair(args.dark, "--dark") if args.dark else shots.dark
    if g is None:
        raise CalibrationRequiredError("the dark-state law is not calibrated: the shot file has no 'dark' header and --dark was not given")
    if not shots.records:
        raise DataFormatError("shot file has no ROIs")
    rows = []
    if method == "threshold":
        if args.threshold is not None:
            spec = int(args.threshold)
        elif args.bright:
            spec = choose_threshold(g, _pair(args.bright, "--bright"))
        else:
            raise CalibrationRequiredError("threshold readout needs --threshold or a calibrated bright law (--bright)")
        for rec in shots.records:
            if rec.N == 0:
                raise DataFormatError(f"ROI {rec.roi_id!r} has no shots")
            l_hat = estimate_threshold(rec, spec)
            rows.append(
                {
                    "roi_id": rec.roi_id,
                    "N": rec.N,
                    "method": method,
                    "l_hat": l_hat,
                    "delta_l": math.sqrt(l_hat * (1.0 - l_hat) / rec.N),
                    "n_th": spec if isinstance(spec, int) else spec.n_th,
                }
            )
    else:
        cfg = _em_config(args)
        if method == "em_network":
            cfg = replace(cfg, e_step_engine="network", network=_weights(args.weights))
        elif method != "em_exact":
            raise ConfigError(f"unknown method {method!r}", field="--method")
        for rec in shots.records:
            if rec.N == 0:
                raise DataFormatError(f"ROI {rec.roi_id!r} has no shots")
            post, theta, trace = run_em(rec, g, None, cfg)
            row = {"roi_id": rec.roi_id, "N": rec.N, "method": method, "l_hat": post.mean, "delta_l": post.sd}
            row.update(trace.summary())
            row.update({"alpha_f": theta.alpha, "beta_f": theta.beta, "grid": post.L})
            rows.append(row)
    if reference is not None:
        from .experiments import fidelity

        for row in rows:
            row["reference"] = reference
            row["fidelity"] = fidelity(reference, min(max(row["l_hat"], 0.0), 1.0))
    return rows


def cmd_infer(args):
    shots = read_shotfile(args.shots)
    rows = infer_file(shots, args.method, args, args.reference)
    if args.format == "csv":
        cols = sorted({k for r in rows for k in r}, key=lambda k: (k != "roi_id", k))
        emit(dumps_csv(rows, cols), args.out)
    else:
        report = {"command": "infer", "method": METHOD_ALIASES[args.method], "exposure_tag": shots.exposure_tag, "results": rows}
        emit(dumps_json(report), args.out)


# -- train / eval -------------------------------------------------------------


def train_from_config(doc: ConfigDoc, seed=None, progress=None):
    from .pinet import ArchitectureSpec, OptimizerConfig, TrainingRanges, generate_training_set, train

    seed = doc.number("seed", 0, integer=True, lo=0) if seed is None else seed
    size = doc.number("size", 200_000, integer=True, lo=2)
    L = doc.number("grid", 201, integer=True, lo=2)
    r = doc.get("ranges", {}) or {}
    if not isinstance(r, dict):
        raise doc.error("ranges must be an object", "ranges")
    kw = {}
    for name in ("alpha", "beta", "N", "l"):
        if name in r:
            v = r[name]
            if not (isinstance(v, list) and len(v) == 2 and all(isinstance(x, (int, float)) for x in v)):
                raise doc.error("range must be [lo, hi]", f"ranges.{name}")
            kw[name] = tuple(float(x) for x in v)
    try:
        ranges = TrainingRanges(**kw)
        arch_kw = doc.get("architecture", {}) or {}
        arch_kw = {k: tuple(v) if isinstance(v, list) else v for k, v in arch_kw.items()}
        arch = ArchitectureSpec(**{"head_widths": (69, 128, 128, L), **arch_kw})
        opt = OptimizerConfig(**(doc.get("optimizer", {}) or {}))
    except TypeError as exc:
        raise ConfigError(f"unknown option: {exc}", field="architecture/optimizer") from None
    except ConfigError as exc:
        raise doc.with_line(exc) from None
    data = generate_training_set(ranges, size, seed=seed, L=L)
    weights = train(data, arch, opt, seed=seed + 1, progress=progress)
    weights.metadata["config"] = json.loads(json.dumps(doc.data))
    weights.metadata["ranges"] = ranges.to_dict()
    weights.metadata["dataset_fingerprint"] = data.fingerprint()
    return weights


def cmd_train(args):
    from .pinet.weights_io import save_weights

    doc = ConfigDoc.load(args.config)

    def progress(rec):
        log.info("epoch %(epoch)d  val KL mean %(val_kl_mean).4g  median %(val_kl_median).4g", rec)

    weights = train_from_config(doc, args.seed, progress)
    save_weights(weights, args.out)
    md = weights.metadata
    emit(
        dumps_json(
            {
                "command": "train",
                "weights": Path(args.out).name,
                "seed": md["seed"],
                "best_epoch": md["best_epoch"],
                "epochs_run": md["epochs_run"],
                "best_val_kl_mean": md["final_loss"],
                "dataset_fingerprint": md["dataset_fingerprint"],
            }
        ),
        args.report,
    )


def evaluate(weights, tasks: int, seed: int, em_tasks: int = 0, ranges=None) -> dict:
    from .pinet import TrainingRanges, evaluate_kl, generate_training_set
    from .pinet.training import evaluate_em_agreement

    if ranges is None and weights.metadata.get("ranges"):
        ranges = TrainingRanges(**{k: tuple(v) for k, v in weights.metadata["ranges"].items()})
    ranges = ranges or TrainingRanges()
    data = generate_training_set(ranges, tasks, seed=seed, L=weights.L)
    kl = evaluate_kl(weights, data)
    report = {
        "command": "eval",
        "tasks": tasks,
        "seed": seed,
        "grid": weights.L,
        "kl_median": float(np.median(kl)),
        "kl_p95": float(np.percentile(kl, 95)),
        "kl_mean": float(kl.mean()),
        "kl_max": float(kl.max()),
    }
    if em_tasks:
        agree = evaluate_em_agreement(weights, ranges, em_tasks, seed=seed + 1)
        report["em_tasks"] = em_tasks
        report["em_agreement_fraction"] = agree["fraction"]
    return report


def cmd_eval(args):
    weights = _weights(args.weights)
    ranges = None
    if args.config:
        doc = ConfigDoc.load(args.config)
        from .pinet import TrainingRanges

        r = doc.get("ranges", {}) or {}
        try:
            ranges = TrainingRanges(**{k: tuple(v) for k, v in r.items()})
        except (TypeError, ConfigError) as exc:
            raise ConfigError(f"bad ranges: {exc}", field="ranges", line=doc.line_of("ranges")) from None
    report = evaluate(weights, args.tasks, args.seed, args.em_tasks, ranges)
    if args.format == "csv":
        emit(dumps_csv([report]), args.out)
    else:
        emit(dumps_json(report), args.out)


# -- benchmark -----------------------------------------------------------------


def cmd_benchmark(args):
    from .benchmark import run_benchmark

    weights = _weights(args.weights)
    Ns = [int(n) for n in args.Ns.split(",")]

    def progress(row):
        log.info("N=%d exact %.4gs network %.4gs speedup %.1f", row.N, row.exact_s, row.network_s, row.speedup)

    report = run_benchmark(weights, Ns, args.iterations, args.repeats, args.warmup, args.seed or 0, progress=progress)
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        (out / "benchmark.csv").write_text(report.to_csv(), encoding="utf-8", newline="\n")
        (out / "benchmark.json").write_text(report.to_json(), encoding="utf-8", newline="\n")
    sys.stdout.write(report.to_csv() if args.format == "csv" else report.to_json())


# -- experiment / compare ------------------------------------------------------


def _methods(text: str) -> tuple:
    out = []
    for m in text.split(","):
        m = METHOD_ALIASES.get(m.strip(), m.strip())
        if m not in METHODS:
            raise ConfigError(f"unknown method {m!r}", field="--methods")
        out.append(m)
    return tuple(out)


def _experiment_task(task):
    kind, fixture, N, seed, methods, weights, grid, max_iter = task
    g, f = _fixture(fixture)
    model, times = (RABI, RABI_TIMES) if kind == "rabi" else (RAMSEY, RAMSEY_TIMES)
    series = generate_experiment(model, times, N, g, f, seed)
    cfg = EmConfig(max_iter=max_iter, grid_size=grid, network=weights)
    res = compare_methods(series, g, cfg, kind=kind, methods=methods, network=weights, bright_calibration=f)
    return _result_rows(res, seed=seed), {m: _result_summary(r) for m, r in res.items()}


def _result_rows(results: dict, **extra) -> list:
    rows = []
    for r in results.values():
        for row in r.rows():
            rows.append({**extra, **row})
    return rows


def _result_summary(r) -> dict:
    return {
        "mean_fidelity": None if r.fidelities is None else r.mean_fidelity,
        "fit": r.fit_summary(),
        "fit_error": r.fit_error,
        "em": r.em,
        "theta_f": None if r.theta_f is None else list(r.theta_f.as_tuple()),
    }


def _map(fn, tasks, threads: int):
    if threads <= 1:
        return [fn(t) for t in tasks]
    with ProcessPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(fn, tasks))


def _aggregate(kind: str, summaries: list, truth: dict) -> dict:
    methods = sorted({m for s in summaries for m in s})
    out = {}
    for m in methods:
        per = [s[m] for s in summaries if m in s]
        fids = [p["mean_fidelity"] for p in per if p["mean_fidelity"] is not None]
        fits = [p["fit"] for p in per if p["fit"] is not None]
        agg = {"mean_fidelity": float(np.mean(fids)) if fids else None, "fits_ok": len(fits), "runs": len(per)}
        for key, ref in truth.items():
            vals = [ft[key] for ft in fits]
            if vals:
                agg[f"median_{key}"] = float(np.median(vals))
                agg[f"median_{key}_ratio"] = float(np.median(vals)) / ref
        out[m] = agg
    return out


def _truth(kind):
    if kind == "rabi":
        return {"frequency_hz": RABI.frequency_hz, "amplitude": RABI.amplitude}
    return {"t2_s": RAMSEY.t2, "detuning_hz": RAMSEY.detuning_hz}


def cmd_experiment(args):
    methods = _methods(args.methods)
    weights = _weights(args.weights) if "em_network" in methods else None
    _fixture(args.fixture)
    seeds = [args.seed + k for k in range(args.seeds)]
    tasks = [(args.kind, args.fixture, args.N, s, methods, weights, args.grid, args.max_iter) for s in seeds]
    results = _map(_experiment_task, tasks, args.threads)
    rows = [row for r, _ in results for row in r]
    summary = {
        "command": "experiment",
        "kind": args.kind,
        "fixture": args.fixture,
        "N": args.N,
        "seeds": seeds,
        "methods": list(methods),
        "truth": _truth(args.kind),
        "summary": _aggregate(args.kind, [s for _, s in results], _truth(args.kind)),
        "runs": [s for _, s in results],
    }
    _write_tables(args, rows, summary, "experiment")


def _write_tables(args, rows, summary, stem):
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        (out / f"{stem}_points.csv").write_text(dumps_csv(rows), encoding="utf-8", newline="\n")
        (out / f"{stem}_summary.json").write_text(dumps_json(summary), encoding="utf-8", newline="\n")
    sys.stdout.write(dumps_csv(rows) if args.format == "csv" else dumps_json(summary))


def load_manifest(path):
    path = Path(path)
    if path.is_dir():
        path = path / "manifest.json"
    try:
        man = json.loads(path.read_text(encoding="utf-8"))
    except OSError as exc:
        raise DataFormatError(f"cannot read manifest {path}: {exc}") from None
    except json.JSONDecodeError as exc:
        raise DataFormatError(f"manifest {path} is not valid JSON (line {exc.lineno})") from None
    if man.get("format") != "bayesreadout-manifest 1":
        raise DataFormatError(f"{path} is not a bayesreadout manifest")
    shots = [read_shotfile(path.parent / name) for name in man["files"]]
    return man, shots


def _compare_task(task):
    kind, times, records, g, methods, weights, grid, max_iter, bright, threshold, reference = task
    series = ShotSeries(np.asarray(times), records, None)
    cfg = EmConfig(max_iter=max_iter, grid_size=grid, network=weights)
    res = compare_methods(
        series, g, cfg, kind=kind, methods=methods, network=weights,
        bright_calibration=bright, threshold=threshold, reference=reference,
    )
    return _result_rows(res, roi_id=records[0].roi_id), {m: _result_summary(r) for m, r in res.items()}


def _reference_occupations(path, rois):
    """Threshold occupations from long-exposure shots, one array per ROI."""
    man, shots = load_manifest(path)
    g = shots[0].dark
    bright = ConfigDoc(man["config"]).params("bright")
    if bright is None and man["config"].get("fixture"):
        bright = _fixture(man["config"]["fixture"])[1]
    if g is None or bright is None:
        raise CalibrationRequiredError("reference data needs dark and bright calibration")
    n_th = choose_threshold(g, bright)
    return {r: np.array([estimate_threshold(s.record(r), n_th) for s in shots]) for r in rois}


def cmd_compare(args):
    man, shots = load_manifest(args.manifest)
    methods = _methods(args.methods)
    weights = _weights(args.weights) if "em_network" in methods else None
    g = _pair(args.dark, "--dark") if args.dark else shots[0].dark
    if g is None:
        raise CalibrationRequiredError("no dark calibration in the shot files and --dark not given")
    bright = _pair(args.bright, "--bright") if args.bright else None
    if "threshold" in methods and bright is None and args.threshold is None:
        raise CalibrationRequiredError("threshold method needs --threshold or --bright")
    rois = man["rois"]
    if args.reference:
        ref = _reference_occupations(args.reference, rois)
    else:
        ref = {r: np.asarray(man["l_true"], dtype=np.float64) for r in rois}
    tasks = [
        (
            man["kind"], man["times_s"], [s.record(r) for s in shots], g, methods, weights,
            args.grid, args.max_iter, bright, args.threshold, ref[r],
        )
        for r in rois
    ]
    results = _map(_compare_task, tasks, args.threads)
    rows = [row for r, _ in results for row in r]
    per_roi = {r: s for r, (_, s) in zip(rois, results)}
    summary = {
        "command": "compare",
        "kind": man["kind"],
        "methods": list(methods),
        "reference": "threshold-long-exposure" if args.reference else "l_true",
        "rois": per_roi,
        "mean_fidelity": {
            m: float(np.mean([s[m]["mean_fidelity"] for s in per_roi.values()])) for m in methods
        },
        "fidelity_sd_across_rois": {
            m: float(np.std([s[m]["mean_fidelity"] for s in per_roi.values()])) for m in methods
        },
    }
    _write_tables(args, rows, summary, "compare")


# -- argument parsing ----------------------------------------------------------


def _add_em_flags(p):
    p.add_argument("--grid", type=int, default=DEFAULT_GRID_SIZE, help="posterior grid size L (default 1001)")
    p.add_argument("--max-iter", type=int, default=50)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="bayesreadout", description="Bayesian readout of overlapping photon-count histograms.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", help="write synthetic shot files from a JSON config")
    p.add_argument("config")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--seed", type=int, help="override the config seed")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("infer", help="estimate the bright occupation of every ROI in a shot file")
    p.add_argument("shots")
    p.add_argument("--method", choices=sorted(METHOD_ALIASES), default="em")
    p.add_argument("--weights", help="network weight file (default: bundled)")
    p.add_argument("--dark", help="ALPHA,BETA of the dark law (overrides the file header)")
    p.add_argument("--bright", help="ALPHA,BETA of a calibrated bright law (threshold method)")
    p.add_argument("--threshold", type=int, help="explicit count threshold")
    p.add_argument("--reference", type=float, help="reference occupation for the fidelity column")
    p.add_argument("--per-shot", action="store_true", help="evaluate every shot instead of collapsing repeats")
    _add_em_flags(p)
    p.add_argument("--format", choices=("json", "csv"), default="json")
    p.add_argument("--out")
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("train", help="train the posterior network from a JSON config")
    p.add_argument("config")
    p.add_argument("--out", required=True, help="weight file to write")
    p.add_argument("--seed", type=int, help="override the config seed")
    p.add_argument("--report", help="where to write the JSON summary (default stdout)")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="KL of network vs exact posteriors on fresh tasks")
    p.add_argument("--weights")
    p.add_argument("--config", help="JSON config whose 'ranges' define the task distribution")
    p.add_argument("--tasks", type=int, default=2000)
    p.add_argument("--em-tasks", type=int, default=0, help="also compare network and exact EM on this many tasks")
    p.add_argument("--seed", type=int, default=1_000_003)
    p.add_argument("--format", choices=("json", "csv"), default="json")
    p.add_argument("--out")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("benchmark", help="time exact vs network EM against N")
    p.add_argument("--weights")
    p.add_argument("--Ns", default="100,200,500,1000,2000,5000")
    p.add_argument("--iterations", type=int, default=10)
    p.add_argument("--repeats", type=int, default=7)
    p.add_argument("--warmup", type=int, default=1)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--format", choices=("json", "csv"), default="json")
    p.add_argument("--out", help="directory for benchmark.csv and benchmark.json")
    p.set_defaults(func=cmd_benchmark)

    p = sub.add_parser("experiment", help="Monte-Carlo Rabi or Ramsey scan on a fixture")
    p.add_argument("kind", choices=("rabi", "ramsey"))
    p.add_argument("--fixture", default="o61")
    p.add_argument("--seeds", type=int, default=20, help="number of seeds")
    p.add_argument("--seed", type=int, default=0, help="first seed")
    p.add_argument("--N", type=int, default=SHOTS_PER_POINT)
    p.add_argument("--methods", default="threshold,em,em-net")
    p.add_argument("--weights")
    p.add_argument("--threads", type=int, default=1)
    _add_em_flags(p)
    p.add_argument("--format", choices=("json", "csv"), default="json")
    p.add_argument("--out")
    p.set_defaults(func=cmd_experiment)

    p = sub.add_parser("compare", help="run all readout methods on simulated scan files")
    p.add_argument("manifest", help="manifest.json (or its directory) written by simulate")
    p.add_argument("--reference", help="manifest of long-exposure shots used as the threshold reference")
    p.add_argument("--methods", default="threshold,em,em-net")
    p.add_argument("--weights")
    p.add_argument("--dark")
    p.add_argument("--bright")
    p.add_argument("--threshold", type=int)
    p.add_argument("--threads", type=int, default=1)
    _add_em_flags(p)
    p.add_argument("--format", choices=("json", "csv"), default="json")
    p.add_argument("--out")
    p.set_defaults(func=cmd_compare)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s", stream=sys.stderr)
    try:
        args.func(args)
    except ReadoutError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exit_code(exc)
    except ValueError as exc:
        # ValueErrors that escape the library's own hierarchy come from bad input values
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
