"""Experiment runner: configuration, method execution, pool
persistence, score/decision/report emission.

Results land in one directory per (method, seed) plus a top-level
report.csv and per_task.csv. Everything except the wall-time column is
byte-reproducible for identical configurations.
"""

from __future__ import annotations

import dataclasses
import os
import struct
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .baselines import (SingleModelPipeline, run_variant, static_per_task,
                        train_ewc, train_joint, train_sequential)
from .learner import Learner, LearnerConfig, init_learner
from .metrics import (CSV_HEADER, MethodReport, ScoreTensor,
                      build_score_tensor, format_table, make_report,
                      report_csv_line)
from .oodgate import GaussianStats, ThresholdCalibration
from .pool import (EXPAND, ModelEntry, ModelPool, GramStats, Strategy,
                   new_pool, untrained_pool)
from .stream import Stage, build_stream

POOL_MAGIC = b"ODXP"
POOL_VERSION = 1
SCORE_MAGIC = b"ODXT"

POOL_METHODS = {
    "odex": Strategy.ODEX,
    "always_expand": Strategy.ALWAYS_EXPAND,
    "dicex": Strategy.DICE_EXPAND,
    "no_history": Strategy.NO_HISTORY,
    "gram": Strategy.GRAM,
}
KNOWN_METHODS = tuple(POOL_METHODS) + ("seq", "joint", "ewc", "static")
SCENARIOS = ("shifting_source", "transformed")


class CheckpointError(ValueError):
    pass


class CheckpointFormatError(CheckpointError):
    """Magic bytes or structural fields are wrong."""


class CheckpointVersionError(CheckpointError):
    """Format version not supported by this build."""


class TruncatedCheckpointError(CheckpointError):
    """File ended before the declared payload."""


class MissingResultsError(FileNotFoundError):
    pass


@dataclass(frozen=True)
class ExperimentConfig:
    scenario: str = "shifting_source"
    methods: tuple[str, ...] = ("odex", "seq")
    n_stages: int = 5
    samples_per_stage: int = 200
    test_per_stage: int = 50
    image_size: int = 32
    channels: int = 8
    epochs_per_stage: int = 20
    batch_size: int = 8
    learning_rate: float = 0.01
    momentum: float = 0.99
    weight_decay: float = 3e-5
    dice_smoothing: float = 1.0
    ewc_lambda: float = 0.4
    fisher_batches: int = 16
    seeds: tuple[int, ...] = (1, 2, 3)
    output_dir: str = "results"

    def __post_init__(self):
        if not self.methods:
            raise ValueError("at least one method is required")
        for m in self.methods:
            if m not in KNOWN_METHODS:
                raise ValueError(f"unknown method {m!r}; known: {KNOWN_METHODS}")
        if self.scenario not in SCENARIOS:
            raise ValueError(f"unknown scenario {self.scenario!r}")
        if len(set(self.seeds)) != len(self.seeds):
            raise ValueError("seeds must be distinct")

    def learner_config(self, seed: int) -> LearnerConfig:
        return LearnerConfig(
            channels=self.channels, image_size=self.image_size,
            learning_rate=self.learning_rate, momentum=self.momentum,
            weight_decay=self.weight_decay,
            epochs_per_stage=self.epochs_per_stage,
            batch_size=self.batch_size, dice_smoothing=self.dice_smoothing,
            seed=seed)


_LIST_FIELDS = {"methods": str, "seeds": int}


def parse_config_text(text: str) -> dict[str, str]:
    """Flat "key = value" lines; # starts a comment."""
    out = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"line {lineno}: expected 'key = value', got {raw!r}")
        key, value = line.split("=", 1)
        out[key.strip()] = value.strip()
    return out


def config_from_mapping(mapping: dict[str, str]) -> ExperimentConfig:
    kwargs = {}
    fields = {f.name: f for f in dataclasses.fields(ExperimentConfig)}
    for key, value in mapping.items():
        if key not in fields:
            raise ValueError(f"unknown config key {key!r}")
        if key in _LIST_FIELDS:
            conv = _LIST_FIELDS[key]
            kwargs[key] = tuple(conv(v.strip()) for v in value.split(",") if v.strip())
        else:
            ftype = fields[key].type
            if ftype == "int" or ftype is int:
                kwargs[key] = int(value)
            elif ftype == "float" or ftype is float:
                kwargs[key] = float(value)
            else:
                kwargs[key] = value
    return ExperimentConfig(**kwargs)


def config_to_text(config: ExperimentConfig) -> str:
    lines = []
    for f in dataclasses.fields(ExperimentConfig):
        value = getattr(config, f.name)
        if isinstance(value, tuple):
            value = ", ".join(str(v) for v in value)
        lines.append(f"{f.name} = {value}")
    return "\n".join(lines) + "\n"


# -- pool persistence -------------------------------------------------------

def _pack_array(arr: np.ndarray) -> bytes:
    shape = arr.shape
    head = struct.pack("<B", len(shape)) + struct.pack(f"<{len(shape)}I", *shape)
    return head + arr.astype("<f8").tobytes()


def _read_exact(fh, n: int) -> bytes:
    buf = fh.read(n)
    if len(buf) != n:
        raise TruncatedCheckpointError("checkpoint file truncated")
    return buf


def _unpack_array(fh) -> np.ndarray:
    ndim = struct.unpack("<B", _read_exact(fh, 1))[0]
    shape = struct.unpack(f"<{ndim}I", _read_exact(fh, 4 * ndim))
    count = int(np.prod(shape)) if shape else 1
    data = np.frombuffer(_read_exact(fh, 8 * count), dtype="<f8")
    return data.reshape(shape).copy()


def _write_entry_blob(path: Path, entry: ModelEntry, config: LearnerConfig):
    from .learner import PARAM_NAMES

    with open(path, "wb") as fh:
        fh.write(POOL_MAGIC)
        fh.write(struct.pack("<I", POOL_VERSION))
        fh.write(struct.pack("<III", entry.model_id, config.channels,
                             config.image_size))
        fh.write(struct.pack("<d", entry.last_stage_train_dice))
        fh.write(struct.pack("<I", len(entry.stages_trained)))
        for s in entry.stages_trained:
            fh.write(struct.pack("<I", s))
        cal = entry.calibration
        if cal is None:
            fh.write(struct.pack("<B", 0))
        else:
            fh.write(struct.pack("<B", 1))
            fh.write(struct.pack("<ddd", cal.d_min, cal.d_max, cal.xi))
        fh.write(struct.pack("<I", len(entry.history)))
        for stats in entry.history:
            if isinstance(stats, GramStats):
                fh.write(struct.pack("<BI", 1, stats.n_samples))
                fh.write(_pack_array(stats.matrix))
            else:
                fh.write(struct.pack("<BI", 0, stats.n_samples))
                fh.write(struct.pack("<d", stats.regularization_eps))
                fh.write(_pack_array(stats.mu))
                fh.write(_pack_array(stats.sigma))
                fh.write(_pack_array(stats.precision))
        learner = entry.learner
        for name in PARAM_NAMES:
            fh.write(_pack_array(learner.params[name]))
        for name in ("bn1_mean", "bn1_var", "bn2_mean", "bn2_var"):
            fh.write(_pack_array(learner.running[name]))
        for name in PARAM_NAMES:
            fh.write(_pack_array(learner.velocity[name]))


def _read_entry_blob(path: Path, config: LearnerConfig) -> ModelEntry:
    from .learner import PARAM_NAMES

    with open(path, "rb") as fh:
        magic = _read_exact(fh, 4)
        if magic != POOL_MAGIC:
            raise CheckpointFormatError(f"{path.name}: bad magic {magic!r}")
        version = struct.unpack("<I", _read_exact(fh, 4))[0]
        if version != POOL_VERSION:
            raise CheckpointVersionError(
                f"{path.name}: version {version}, expected {POOL_VERSION}")
        model_id, channels, image_size = struct.unpack("<III", _read_exact(fh, 12))
        if channels != config.channels or image_size != config.image_size:
            raise CheckpointFormatError(
                f"{path.name}: dimension mismatch with manifest config")
        last_dice = struct.unpack("<d", _read_exact(fh, 8))[0]
        n_stages = struct.unpack("<I", _read_exact(fh, 4))[0]
        stages = [struct.unpack("<I", _read_exact(fh, 4))[0] for _ in range(n_stages)]
        has_cal = struct.unpack("<B", _read_exact(fh, 1))[0]
        calibration = None
        if has_cal:
            d_min, d_max, xi = struct.unpack("<ddd", _read_exact(fh, 24))
            calibration = ThresholdCalibration(d_min=d_min, d_max=d_max, xi=xi)
        history = []
        n_hist = struct.unpack("<I", _read_exact(fh, 4))[0]
        for _ in range(n_hist):
            kind, n_samples = struct.unpack("<BI", _read_exact(fh, 5))
            if kind == 1:
                history.append(GramStats(matrix=_unpack_array(fh),
                                         n_samples=n_samples))
            else:
                eps = struct.unpack("<d", _read_exact(fh, 8))[0]
                mu = _unpack_array(fh)
                sigma = _unpack_array(fh)
                precision = _unpack_array(fh)
                history.append(GaussianStats(
                    mu=mu, sigma=sigma, precision=precision,
                    regularization_eps=eps, n_samples=n_samples))
        params = {name: _unpack_array(fh) for name in PARAM_NAMES}
        running = {name: _unpack_array(fh)
                   for name in ("bn1_mean", "bn1_var", "bn2_mean", "bn2_var")}
        velocity = {name: _unpack_array(fh) for name in PARAM_NAMES}
        if fh.read(1):
            raise CheckpointFormatError(f"{path.name}: trailing bytes")
    learner = Learner(config, params, running, velocity)
    return ModelEntry(model_id=model_id, learner=learner, history=history,
                      calibration=calibration, last_stage_train_dice=last_dice,
                      stages_trained=stages)


def save_pool(pool: ModelPool, path, scenario: str = "",
              stage_reached: int = 0) -> None:
    """Checkpoint = manifest.txt plus one binary blob per entry."""
    d = Path(path)
    d.mkdir(parents=True, exist_ok=True)
    cfg = pool.config
    lines = [
        f"version = {POOL_VERSION}",
        f"scenario = {scenario}",
        f"stage_reached = {stage_reached}",
        f"entry_count = {len(pool.entries)}",
        f"strategy = {pool.strategy.value}",
        f"next_id = {pool.next_id}",
        f"channels = {cfg.channels}",
        f"image_size = {cfg.image_size}",
        f"kernel_size = {cfg.kernel_size}",
        f"learning_rate = {cfg.learning_rate!r}",
        f"momentum = {cfg.momentum!r}",
        f"weight_decay = {cfg.weight_decay!r}",
        f"epochs_per_stage = {cfg.epochs_per_stage}",
        f"batch_size = {cfg.batch_size}",
        f"dice_smoothing = {cfg.dice_smoothing!r}",
        f"seed = {cfg.seed}",
    ]
    for entry in pool.entries:
        xi = "" if entry.calibration is None else repr(entry.calibration.xi)
        lines.append(
            f"entry_{entry.model_id} = blob=entry_{entry.model_id:04d}.bin "
            f"history={len(entry.history)} "
            f"stages={','.join(str(s) for s in entry.stages_trained)} xi={xi}")
    (d / "manifest.txt").write_text("\n".join(lines) + "\n")
    for entry in pool.entries:
        _write_entry_blob(d / f"entry_{entry.model_id:04d}.bin", entry, cfg)


def load_pool(path) -> ModelPool:
    d = Path(path)
    manifest = d / "manifest.txt"
    if not manifest.exists():
        raise CheckpointFormatError(f"no manifest.txt under {d}")
    kv = parse_config_text(manifest.read_text())
    version = int(kv.get("version", "-1"))
    if version != POOL_VERSION:
        raise CheckpointVersionError(f"manifest version {version}")
    config = LearnerConfig(
        channels=int(kv["channels"]), kernel_size=int(kv["kernel_size"]),
        image_size=int(kv["image_size"]),
        learning_rate=float(kv["learning_rate"]),
        momentum=float(kv["momentum"]),
        weight_decay=float(kv["weight_decay"]),
        epochs_per_stage=int(kv["epochs_per_stage"]),
        batch_size=int(kv["batch_size"]),
        dice_smoothing=float(kv["dice_smoothing"]), seed=int(kv["seed"]))
    pool = ModelPool(config=config, strategy=Strategy(kv["strategy"]),
                     next_id=int(kv["next_id"]))
    n = int(kv["entry_count"])
    for line_key in sorted(k for k in kv if k.startswith("entry_")):
        blob = dict(part.split("=", 1) for part in kv[line_key].split())["blob"]
        pool.entries.append(_read_entry_blob(d / blob, config))
    if len(pool.entries) != n:
        raise CheckpointFormatError(
            f"manifest lists {n} entries, found {len(pool.entries)}")
    pool.entries.sort(key=lambda e: e.model_id)
    return pool


# -- score tensor persistence ------------------------------------------------

def save_scores(scores: ScoreTensor, path) -> None:
    with open(path, "wb") as fh:
        fh.write(SCORE_MAGIC)
        fh.write(struct.pack("<III", POOL_VERSION, len(scores.values),
                             scores.n_tasks))
        for row in scores.values:
            for arr in row:
                fh.write(struct.pack("<I", arr.size))
                fh.write(arr.astype("<f8").tobytes())


def load_scores(path) -> ScoreTensor:
    with open(path, "rb") as fh:
        magic = _read_exact(fh, 4)
        if magic != SCORE_MAGIC:
            raise CheckpointFormatError(f"bad score-file magic {magic!r}")
        version, n_rows, n_tasks = struct.unpack("<III", _read_exact(fh, 12))
        if version != POOL_VERSION:
            raise CheckpointVersionError(f"score-file version {version}")
        values = []
        for _ in range(n_rows):
            row = []
            for _ in range(n_tasks):
                count = struct.unpack("<I", _read_exact(fh, 4))[0]
                row.append(np.frombuffer(_read_exact(fh, 8 * count),
                                         dtype="<f8").copy())
            values.append(row)
    return ScoreTensor(values)


# -- method execution --------------------------------------------------------

def _wrap_learner_pool(learner: Learner, config: LearnerConfig) -> ModelPool:
    pool = new_pool(config)
    pool.entries.append(ModelEntry(model_id=1, learner=learner))
    pool.next_id = 2
    return pool


def _checkpoint_snapshots(snapshots, config, directory: Path, scenario: str):
    for k, snap in enumerate(snapshots, 1):
        pool = (snap if isinstance(snap, ModelPool)
                else _wrap_learner_pool(snap.learner, config))
        save_pool(pool, directory / f"stage_{k:02d}", scenario=scenario,
                  stage_reached=k)


def _write_decision_log(pool: ModelPool, path: Path):
    lines = []
    for k, dec in enumerate(pool.decisions, 1):
        lines.append(
            f"stage={k} kind={dec.kind} selected={dec.selected_model} "
            f"raw={dec.raw_distance!r} normalized={dec.normalized_distance!r} "
            f"threshold={dec.threshold!r}")
    path.write_text("\n".join(lines) + "\n")


def run_method(method: str, stages: list[Stage], config: ExperimentConfig,
               seed: int, out_dir: Path):
    """Run one method on one seed; writes its artifacts and returns the
    (report-csv, per-task-csv) lines."""
    lcfg = config.learner_config(seed)
    out_dir.mkdir(parents=True, exist_ok=True)
    test_sets = [st.test for st in stages]
    n = len(stages)
    pool_size = None
    t0 = time.process_time()

    if method in POOL_METHODS:
        strategy = POOL_METHODS[method]
        snapshots, trace = run_variant(strategy, stages, lcfg)
        wall = time.process_time() - t0
        pool_size = trace[-1]
        f0 = untrained_pool(lcfg, strategy)
        _write_decision_log(snapshots[-1], out_dir / "decisions.log")
        (out_dir / "pool_trace.txt").write_text(
            ",".join(str(x) for x in trace) + "\n")
    elif method == "seq":
        snapshots = train_sequential(stages, lcfg)
        wall = time.process_time() - t0
        f0 = SingleModelPipeline(init_learner(lcfg))
    elif method == "joint":
        final = train_joint(stages, lcfg)
        wall = time.process_time() - t0
        snapshots = [final] * n
        f0 = SingleModelPipeline(init_learner(lcfg))
    elif method == "ewc":
        snapshots = train_ewc(stages, lcfg, lam=config.ewc_lambda,
                              fisher_batches=config.fisher_batches)
        wall = time.process_time() - t0
        f0 = SingleModelPipeline(init_learner(lcfg))
    elif method == "static":
        matrix = static_per_task(stages, lcfg)
        wall = time.process_time() - t0
        header = ",".join(f"task_{j + 1}" for j in range(n))
        body = "\n".join(",".join(f"{v:.6f}" for v in row) for row in matrix)
        (out_dir / "static_matrix.csv").write_text(header + "\n" + body + "\n")
        diag = np.diag(matrix)
        csv = (f"static,{config.scenario},{seed},"
               f"{diag.mean():.6f},{diag.std():.6f},,,,,{n},{wall:.3f}")
        per_task = (f"static,{config.scenario},{seed},"
                    + ",".join(f"{v:.6f}" for v in diag))
        return csv, per_task
    else:
        raise ValueError(f"unknown method {method!r}")

    scores = build_score_tensor([f0] + list(snapshots), test_sets)
    save_scores(scores, out_dir / "scores.bin")
    _checkpoint_snapshots(snapshots, lcfg, out_dir / "checkpoints",
                          config.scenario)
    report = make_report(method, config.scenario, seed, scores, pool_size, wall)
    per_task = (f"{method},{config.scenario},{seed},"
                + ",".join(f"{v:.6f}" for v in scores.per_task_final()))
    return report_csv_line(report), per_task


def _run_unit(config: ExperimentConfig, method: str, seed: int,
              results_dir: str):
    stages = build_stream(config.scenario, config.n_stages,
                          config.samples_per_stage, config.test_per_stage,
                          seed, config.image_size)
    out_dir = Path(results_dir) / f"{method}_seed{seed}"
    try:
        csv_line, per_task = run_method(method, stages, config, seed, out_dir)
        return method, seed, csv_line, per_task, None
    except Exception as exc:  # record and continue with other methods
        csv_line = f"{method},{config.scenario},{seed},,,,,,,,"
        return method, seed, csv_line, None, f"{type(exc).__name__}: {exc}"


def run_experiment(config: ExperimentConfig) -> Path:
    """Run every requested (method, seed) unit; returns the results
    directory. ODEX_THREADS > 1 runs units in parallel processes."""
    results = Path(config.output_dir)
    results.mkdir(parents=True, exist_ok=True)
    (results / "config.txt").write_text(config_to_text(config))

    units = [(method, seed) for seed in config.seeds for method in config.methods]
    workers = int(os.environ.get("ODEX_THREADS", "1") or "1")
    outcomes = []
    if workers > 1 and len(units) > 1:
        with ProcessPoolExecutor(max_workers=min(workers, len(units))) as ex:
            futures = [ex.submit(_run_unit, config, m, s, str(results))
                       for m, s in units]
            outcomes = [f.result() for f in futures]
    else:
        outcomes = [_run_unit(config, m, s, str(results)) for m, s in units]

    # deterministic row order regardless of execution order
    key = {unit: i for i, unit in enumerate(units)}
    outcomes.sort(key=lambda o: key[(o[0], o[1])])

    csv_lines = [CSV_HEADER]
    per_task_lines = ["method,scenario,seed,"
                      + ",".join(f"task_{j + 1}" for j in range(config.n_stages))]
    errors = []
    for method, seed, csv_line, per_task, err in outcomes:
        csv_lines.append(csv_line)
        if per_task:
            per_task_lines.append(per_task)
        if err:
            errors.append(f"{method} seed {seed}: {err}")
    (results / "report.csv").write_text("\n".join(csv_lines) + "\n")
    (results / "per_task.csv").write_text("\n".join(per_task_lines) + "\n")
    if errors:
        (results / "errors.log").write_text("\n".join(errors) + "\n")
    return results


def csv_without_timing(path) -> str:
    """report.csv contents with the wall-seconds column stripped, for
    byte-level reproducibility comparisons."""
    lines = []
    for line in Path(path).read_text().splitlines():
        lines.append(",".join(line.split(",")[:-1]))
    return "\n".join(lines)


def load_report_rows(results_dir) -> list[dict[str, str]]:
    path = Path(results_dir) / "report.csv"
    if not path.exists():
        raise MissingResultsError(f"no report.csv under {results_dir}")
    lines = path.read_text().splitlines()
    if len(lines) < 2:
        raise MissingResultsError(f"report.csv under {results_dir} is empty")
    header = lines[0].split(",")
    return [dict(zip(header, line.split(","))) for line in lines[1:]]


def render_report(results_dir) -> str:
    """Plain-text table of the stored report rows (seed-averaged)."""
    rows = load_report_rows(results_dir)
    reports = []
    for r in rows:
        if not r.get("mean_dice"):
            continue  # error rows carry no metrics
        reports.append(MethodReport(
            method=r["method"], scenario=r["scenario"], seed=int(r["seed"]),
            mean_dice=float(r["mean_dice"]), std_dice=float(r["std_dice"]),
            bwt=float(r["bwt"]) if r["bwt"] else 0.0,
            bwt_std=0.0,
            fwt=float(r["fwt"]) if r["fwt"] else 0.0,
            fwt_std=0.0,
            bwt_alt_norm=float(r["bwt_alt_norm"]) if r["bwt_alt_norm"] else 0.0,
            fwt_alt_norm=float(r["fwt_alt_norm"]) if r["fwt_alt_norm"] else 0.0,
            pool_size=int(r["pool_size"]) if r["pool_size"] else None,
            wall_seconds=float(r["wall_seconds"]),
        ))
    if not reports:
        raise MissingResultsError(f"no completed runs recorded under {results_dir}")
    return format_table(reports)


def describe_pool(path) -> str:
    """Human-readable summary of a pool checkpoint."""
    pool = load_pool(path)
    lines = [f"strategy = {pool.strategy.value}",
             f"entries = {len(pool.entries)}"]
    for e in pool.entries:
        xi = "-" if e.calibration is None else f"{e.calibration.xi:.4f}"
        dmin = "-" if e.calibration is None else f"{e.calibration.d_min:.4f}"
        dmax = "-" if e.calibration is None else f"{e.calibration.d_max:.4f}"
        lines.append(
            f"  model {e.model_id}: stages={e.stages_trained} "
            f"history_len={len(e.history)} xi={xi} d_min={dmin} d_max={dmax} "
            f"last_train_dice={e.last_stage_train_dice:.4f}")
    return "\n".join(lines)
