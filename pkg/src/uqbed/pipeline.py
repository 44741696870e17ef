"""Sweep orchestration: sample, train, select, calibrate, evaluate, tabulate.

Output directory layout::

    <out>/runs/<run_id>.jsonl        one RunRecord (a single JSON line)
    <out>/checkpoints/<run_id>.ckpt  model checkpoint
    <out>/partition.txt              in/out class lists
    <out>/eval.jsonl                 EvalRecords, one per line
    <out>/eval_meta.json             failed-run count and skipped (measure, model) pairs
    <out>/report_{in,out}_domain.*   rendered tables
"""

from __future__ import annotations

import hashlib
import json
import logging
import os
from collections import defaultdict
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np
import tomli

from . import metrics
from .algorithms import ALGORITHMS, HyperParams, Seeds, load_model, save_model, train_run
from .dataforge import (
    BlobSpec,
    ClassPartition,
    Dataset,
    SplitSpec,
    apply_partition,
    class_prototypes,
    generate_blob_splits,
    holdout_split,
    load_tabular,
    root_partition,
    split_train_val,
    ward_tree,
    write_partition,
)
from .measures import MEASURES, MeasureContext, MeasureError, fit_measure, score
from .netcore import PredictorConfig
from .posthoc import SelectionError, ensemble_select

log = logging.getLogger(__name__)

SCHEMA_VERSION = 1
WORKERS_ENV = "UQBED_WORKERS"
IN_DOMAIN_COLUMNS = ("ACC@1", "ACC@5", "ECE", "NLL")
OUT_DOMAIN_COLUMNS = ("AUC", "InAsIn", "OutAsOut")
DISPLAY = {"erm": "ERM", "mcdropout": "MCDropout", "mimo": "MIMO", "mixup": "Mixup", "oc": "OC",
           "rbf": "RBF", "rnd": "RND", "softlabeler": "SoftLabeler"}
MEASURE_DISPLAY = {"largest": "Largest", "gap": "Gap", "entropy": "Entropy", "jacobian": "Jacobian",
                   "gmm": "GMM", "augment": "Augmentations", "native": "Native"}


class ConfigError(ValueError):
    pass


def derive_seed(*parts) -> int:
    """Stable 63-bit seed from any tuple of JSON-able parts."""
    h = hashlib.sha256(json.dumps(parts, sort_keys=True).encode()).digest()
    return int.from_bytes(h[:8], "little") >> 1


# -- configuration ------------------------------------------------------------

@dataclass
class SweepConfig:
    schema_version: int = SCHEMA_VERSION
    seed: int = 0
    algorithms: list = field(default_factory=lambda: ["erm"])
    size_tiers: list = field(default_factory=lambda: ["small"])
    spectral: list = field(default_factory=lambda: [False])
    trials: int = 5
    data_seeds: int = 3
    measures: list = field(default_factory=lambda: list(MEASURES))
    epochs: int = 60
    batch_size: int = 64
    schedule_period: int = 20
    train_fraction: float = 0.9
    threshold_level: float = 0.95
    ece_bins: int = 15
    augment_count: int = 8
    augment_noise: float = 0.1
    workers: int = 0
    # dataset
    dataset_source: str = "blobs"
    dataset_seed: int = 0
    dataset_classes: int = 8
    dataset_per_class: int = 200
    dataset_test_per_class: int = 100
    dataset_dim: int = 16
    dataset_superclusters: int = 2
    dataset_spread: float = 1.5
    dataset_noise: float = 0.5
    dataset_separation: float = 3.0
    dataset_path: str = ""
    dataset_test_fraction: float = 0.2

    def __post_init__(self):
        self.validate()

    def validate(self):
        if self.schema_version != SCHEMA_VERSION:
            raise ConfigError(f"unsupported schema_version {self.schema_version}")
        for name, allowed in (("algorithms", ALGORITHMS), ("size_tiers", ("small", "large")),
                              ("spectral", (False, True)), ("measures", MEASURES)):
            sel = getattr(self, name)
            if not sel:
                raise ConfigError(f"{name} must be nonempty")
            bad = [s for s in sel if s not in allowed]
            if bad:
                raise ConfigError(f"{name}: unknown entries {bad}")
        if self.trials < 1 or self.data_seeds < 1:
            raise ConfigError("trials and data_seeds must be >= 1")
        if self.epochs < 1 or self.batch_size < 1 or self.schedule_period < 1:
            raise ConfigError("epochs, batch_size and schedule_period must be >= 1")
        if self.dataset_source not in ("blobs", "tabular"):
            raise ConfigError("dataset.source must be 'blobs' or 'tabular'")
        if self.dataset_source == "tabular" and not self.dataset_path:
            raise ConfigError("dataset.path is required for tabular data")

    @property
    def run_count(self) -> int:
        return len(self.algorithms) * len(self.size_tiers) * len(self.spectral) * self.trials * self.data_seeds

    @property
    def blob_spec(self) -> BlobSpec:
        return BlobSpec(self.dataset_classes, self.dataset_per_class, self.dataset_dim,
                        self.dataset_superclusters, self.dataset_spread, self.dataset_noise,
                        self.dataset_separation)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def keys(cls) -> list[str]:
        return [f.name for f in fields(cls)]

    @classmethod
    def from_flat(cls, flat: dict) -> "SweepConfig":
        norm = {k.replace(".", "_"): v for k, v in flat.items()}
        unknown = sorted(set(norm) - set(cls.keys()))
        if unknown:
            raise ConfigError(f"unknown config keys: {unknown}")
        try:
            return cls(**norm)
        except TypeError as e:
            raise ConfigError(str(e)) from None


def _flatten(d: dict, prefix: str = "") -> dict:
    out = {}
    for k, v in d.items():
        key = f"{prefix}{k}"
        if isinstance(v, dict):
            out.update(_flatten(v, key + "."))
        else:
            out[key] = v
    return out


def parse_override(text: str) -> tuple[str, object]:
    """``key=value`` with the value read as a TOML literal (bare words fall back to strings)."""
    if "=" not in text:
        raise ConfigError(f"override {text!r} is not key=value")
    key, raw = text.split("=", 1)
    key = key.strip()
    try:
        value = tomli.loads(f"v = {raw.strip()}")["v"]
    except tomli.TOMLDecodeError:
        value = raw.strip()
    return key, value


def load_config(path=None, overrides=()) -> SweepConfig:
    """Read a TOML config (dotted keys allowed) and apply ``key=value`` overrides."""
    flat = {}
    if path is not None:
        try:
            with open(path, "rb") as f:
                flat = _flatten(tomli.load(f))
        except (OSError, tomli.TOMLDecodeError) as e:
            raise ConfigError(f"cannot read config {path}: {e}") from None
    flat.setdefault("schema_version", SCHEMA_VERSION)
    known = set(SweepConfig.keys())
    for ov in overrides:
        k, v = parse_override(ov)
        if k.replace(".", "_") not in known:
            raise ConfigError(f"override references unknown key {k!r}")
        flat = {kk: vv for kk, vv in flat.items() if kk.replace(".", "_") != k.replace(".", "_")}
        flat[k] = v
    return SweepConfig.from_flat(flat)


# -- hyper-parameters ---------------------------------------------------------

def sample_hparams(algorithm: str, trial_index: int, seed: int) -> HyperParams:
    """Trial 0 is the default configuration; later trials draw from the random-search grid."""
    if algorithm not in ALGORITHMS:
        raise ValueError(f"unknown algorithm {algorithm!r}")
    if trial_index < 0:
        raise ValueError("trial_index must be >= 0")
    hp = HyperParams()
    if trial_index == 0:
        return hp
    rng = np.random.default_rng(derive_seed(seed, algorithm, trial_index))
    hp.learning_rate = float(10 ** rng.uniform(-2, -0.3))
    hp.momentum = float(rng.choice([0.5, 0.9, 0.99]))
    hp.weight_decay = float(10 ** rng.uniform(-5, -3))
    if algorithm == "mixup":
        hp.mixing_alpha = float(rng.choice([0.1, 0.2, 0.3, 1.0, 2.0]))
    elif algorithm == "mcdropout":
        hp.dropout_rate = float(rng.choice([0.05, 0.1, 0.2]))
        hp.num_passes = 10
    elif algorithm == "mimo":
        hp.subnetworks = int(rng.integers(2, 6))
        hp.input_repetition = float(rng.uniform(0, 1))
        hp.batch_repetition = int(rng.integers(1, 6))
    elif algorithm in ("rnd", "oc"):
        hp.teacher_width = int(rng.choice([64, 128, 256]))
        hp.teacher_depth = int(rng.choice([2, 3, 4]))
        hp.regularization = float(10 ** rng.uniform(-2, 1))
    elif algorithm == "softlabeler":
        hp.soft_label = float(rng.choice([0.7, 0.8, 0.9]))
    return hp


# -- data -----------------------------------------------------------------------

@dataclass
class DataBundle:
    partition: ClassPartition
    pool: Dataset        # in-domain training pool, labels remapped
    test_in: Dataset
    test_out: Dataset
    digest: str

    def split(self, data_seed: int, train_fraction: float = 0.9):
        return split_train_val(self.pool, SplitSpec(data_seed, train_fraction))


def prepare_data(config: SweepConfig) -> DataBundle:
    if config.dataset_source == "blobs":
        pool, test = generate_blob_splits(config.blob_spec, config.dataset_seed, config.dataset_test_per_class)
    else:
        full = load_tabular(config.dataset_path)
        pool, test = holdout_split(full, config.dataset_test_fraction, config.dataset_seed)
    partition = root_partition(ward_tree(class_prototypes(pool)))
    pool_in, _ = apply_partition(pool, partition)
    test_in, test_out = apply_partition(test, partition)
    return DataBundle(partition, pool_in, test_in, test_out, pool.digest() + test.digest())


# -- runs -----------------------------------------------------------------------

@dataclass
class RunRecord:
    run_id: str
    algorithm: str
    size_tier: str
    spectral: bool
    trial: int
    data_seed: int
    hparams: dict
    init_seed: int
    dataset_digest: str
    checkpoint: str = ""
    train_loss: list = field(default_factory=list)
    val_nll_log: list = field(default_factory=list)
    val_nll: float | None = None
    status: str = "pending"
    error: str = ""

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)

    @classmethod
    def from_json(cls, line: str) -> "RunRecord":
        return cls(**json.loads(line))


def plan_runs(config: SweepConfig, digest: str) -> list[RunRecord]:
    out = []
    for alg in config.algorithms:
        for trial in range(config.trials):
            hp = sample_hparams(alg, trial, config.seed)
            for tier in config.size_tiers:
                for spectral in config.spectral:
                    for ds in range(config.data_seeds):
                        ident = {
                            "algorithm": alg, "size_tier": tier, "spectral": bool(spectral), "trial": trial,
                            "data_seed": ds, "dataset": digest, "hparams": hp.to_dict(), "epochs": config.epochs,
                            "batch_size": config.batch_size, "schedule_period": config.schedule_period,
                            "train_fraction": config.train_fraction, "seed": config.seed,
                        }
                        run_id = hashlib.sha256(json.dumps(ident, sort_keys=True).encode()).hexdigest()[:16]
                        out.append(RunRecord(run_id, alg, tier, bool(spectral), trial, ds, hp.to_dict(),
                                             derive_seed(config.seed, alg, tier, bool(spectral), trial, ds),
                                             digest))
    return out


def _write_atomic(path: Path, text: str):
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_text(text, encoding="utf-8")
    os.replace(tmp, path)


def _record_path(out_dir: Path, run_id: str) -> Path:
    return out_dir / "runs" / f"{run_id}.jsonl"


def read_records(out_dir) -> list[RunRecord]:
    runs = Path(out_dir) / "runs"
    if not runs.is_dir():
        return []
    return [RunRecord.from_json(p.read_text(encoding="utf-8").strip()) for p in sorted(runs.glob("*.jsonl"))]


def _train_one(rec: RunRecord, config: SweepConfig, data: DataBundle, out_dir: Path) -> RunRecord:
    try:
        train, val = data.split(rec.data_seed, config.train_fraction)
        base = PredictorConfig.for_tier(rec.size_tier, data.pool.dim, data.pool.class_count,
                                        spectral_norm=rec.spectral)
        model = train_run(rec.algorithm, base, HyperParams(**rec.hparams), train, val,
                          Seeds(rec.init_seed, rec.data_seed, rec.trial), epochs=config.epochs,
                          batch_size=config.batch_size, schedule_period=config.schedule_period)
        ckpt = Path("checkpoints") / f"{rec.run_id}.ckpt"
        save_model(out_dir / ckpt, model, {"run_id": rec.run_id, "size_tier": rec.size_tier})
        rec.checkpoint = str(ckpt)
        rec.train_loss = model.train_loss
        rec.val_nll_log = model.val_nll_log
        rec.val_nll = model.val_nll
        rec.status = "done"
    except Exception as e:  # a failed run must not stop the sweep
        log.warning("run %s (%s trial %d seed %d) failed: %s", rec.run_id, rec.algorithm, rec.trial,
                    rec.data_seed, e)
        rec.status = "failed"
        rec.error = f"{type(e).__name__}: {e}"
    _write_atomic(_record_path(out_dir, rec.run_id), rec.to_json() + "\n")
    return rec


def _worker(args):
    rec, config, out_dir = args
    return _train_one(rec, config, prepare_data(config), Path(out_dir))


def default_workers() -> int:
    try:
        return max(1, int(os.environ.get(WORKERS_ENV, "1")))
    except ValueError:
        return 1


def execute_sweep(config: SweepConfig, out_dir, stats: dict | None = None) -> list[RunRecord]:
    """Train every run the config implies, skipping runs already marked done.

    ``stats`` (if given) receives ``trained`` and ``skipped`` counts.
    """
    config.validate()
    out_dir = Path(out_dir)
    (out_dir / "runs").mkdir(parents=True, exist_ok=True)
    (out_dir / "checkpoints").mkdir(parents=True, exist_ok=True)
    data = prepare_data(config)
    write_partition(out_dir / "partition.txt", data.partition)
    planned = plan_runs(config, data.digest)
    todo, results = [], {}
    for rec in planned:
        path = _record_path(out_dir, rec.run_id)
        if path.exists():
            old = RunRecord.from_json(path.read_text(encoding="utf-8").strip())
            if old.status == "done" and (out_dir / old.checkpoint).exists():
                results[rec.run_id] = old
                continue
        todo.append(rec)
    log.info("sweep: %d planned, %d to train", len(planned), len(todo))
    workers = config.workers or default_workers()
    if workers > 1 and len(todo) > 1:
        with ProcessPoolExecutor(workers) as pool:
            for rec in pool.map(_worker, [(r, config, str(out_dir)) for r in todo]):
                results[rec.run_id] = rec
    else:
        for rec in todo:
            _write_atomic(_record_path(out_dir, rec.run_id), rec.to_json() + "\n")
            try:
                results[rec.run_id] = _train_one(rec, config, data, out_dir)
            except KeyboardInterrupt:
                rec.status, rec.error = "failed", "interrupted"
                _write_atomic(_record_path(out_dir, rec.run_id), rec.to_json() + "\n")
                raise
    if stats is not None:
        stats["trained"] = len(todo)
        stats["skipped"] = len(planned) - len(todo)
    return [results[r.run_id] for r in planned]


# -- evaluation -----------------------------------------------------------------

@dataclass
class EvalRecord:
    algorithm: str
    size_tier: str
    spectral: bool
    calibration: str
    k: int
    measure: str | None
    metric: str
    data_seeds: list
    values: list
    mean: float = 0.0
    std: float = 0.0

    def __post_init__(self):
        v = np.asarray(self.values, dtype=float)
        self.mean = float(v.mean())
        self.std = float(v.std())  # population estimator

    @property
    def group(self) -> tuple:
        return (self.algorithm, self.spectral, self.calibration, self.k)

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)

    @classmethod
    def from_json(cls, line: str) -> "EvalRecord":
        return cls(**json.loads(line))


@dataclass
class EvalOutcome:
    records: list[EvalRecord]
    skipped: list[tuple] = field(default_factory=list)
    failed_runs: int = 0


def evaluate_all(config: SweepConfig, out_dir, records: list[RunRecord] | None = None) -> EvalOutcome:
    """Evaluate every (algorithm, tier, spectral) cell for k in {1, trials} and both calibrations."""
    out_dir = Path(out_dir)
    records = read_records(out_dir) if records is None else records
    data = prepare_data(config)
    done = [r for r in records if r.status == "done"]
    failed = sum(r.status != "done" for r in records)
    cells = defaultdict(list)
    for r in done:
        cells[(r.algorithm, r.size_tier, r.spectral)].append(r)

    ks = sorted({1, config.trials})
    values: dict[tuple, dict[int, float]] = defaultdict(dict)
    skipped = set()
    splits = {}
    for (alg, tier, spectral), recs in sorted(cells.items()):
        models = [load_model(out_dir / r.checkpoint) for r in recs]
        for K in ks:
            try:
                ensembles = ensemble_select(models, K)
            except SelectionError as e:
                log.warning("cell %s/%s/%s k=%d skipped: %s", alg, tier, spectral, K, e)
                skipped.add((alg, tier, spectral, K, "selection"))
                continue
            for ds, ens in ensembles.items():
                if ds not in splits:
                    splits[ds] = data.split(ds, config.train_fraction)
                _, val = splits[ds]
                for calib in ("initial", "learned"):
                    e = ens if calib == "initial" else ens.calibrated(val.features, val.labels)
                    key = (alg, tier, spectral, calib, K)
                    probs = e.predict_proba(data.test_in.features)
                    for name, v in metrics.in_domain_metrics(probs, data.test_in.labels, config.ece_bins).items():
                        values[key + (None, name)][ds] = v
                    for measure in config.measures:
                        ctx = MeasureContext(augment_count=config.augment_count,
                                             augment_noise=config.augment_noise, seed=ds)
                        try:
                            ctx = fit_measure(measure, e, val.features, val.labels, ctx)
                            s_val = score(measure, e, val.features, ctx)
                            s_in = score(measure, e, data.test_in.features, ctx)
                            s_out = score(measure, e, data.test_out.features, ctx)
                        except MeasureError:
                            skipped.add((alg, tier, spectral, K, measure))
                            continue
                        od = metrics.out_domain_metrics(s_val, s_in, s_out, config.threshold_level)
                        theta = metrics.quantile_threshold(s_val, config.threshold_level)
                        od["ValCoverage"] = float(np.mean(np.asarray(s_val) <= theta))
                        for name, v in od.items():
                            values[key + (measure, name)][ds] = v

    out = []
    for (alg, tier, spectral, calib, K, measure, metric), per_seed in values.items():
        seeds = sorted(per_seed)
        out.append(EvalRecord(alg, tier, spectral, calib, K, measure, metric, seeds,
                              [per_seed[s] for s in seeds]))
    out.sort(key=_record_sort_key)
    return EvalOutcome(out, sorted(skipped, key=str), failed)


def _record_sort_key(r: EvalRecord):
    return (r.size_tier, r.measure or "", DISPLAY.get(r.algorithm, r.algorithm), r.spectral,
            r.calibration, r.k, r.metric)


def write_eval(out_dir, outcome: EvalOutcome):
    out_dir = Path(out_dir)
    _write_atomic(out_dir / "eval.jsonl", "".join(r.to_json() + "\n" for r in outcome.records))
    meta = {"failed_runs": outcome.failed_runs, "skipped": [list(s) for s in outcome.skipped]}
    _write_atomic(out_dir / "eval_meta.json", json.dumps(meta, sort_keys=True, indent=1) + "\n")


def read_eval(out_dir) -> EvalOutcome:
    out_dir = Path(out_dir)
    recs = [EvalRecord.from_json(l) for l in (out_dir / "eval.jsonl").read_text(encoding="utf-8").splitlines() if l]
    meta_path = out_dir / "eval_meta.json"
    meta = json.loads(meta_path.read_text(encoding="utf-8")) if meta_path.exists() else {}
    return EvalOutcome(recs, [tuple(s) for s in meta.get("skipped", [])], meta.get("failed_runs", 0))


# -- reports --------------------------------------------------------------------

def format_cell(mean: float, std: float) -> str:
    return f"{mean:.3f} ± {std:.3f}"


def _row_key(group):
    alg, spectral, calib, k = group
    return (DISPLAY.get(alg, alg), spectral, calib, k)


def _tables(records):
    """``{(kind, tier, measure): (columns, {group: {metric: record}})}``."""
    tables = {}
    for r in records:
        cols = IN_DOMAIN_COLUMNS if r.measure is None else OUT_DOMAIN_COLUMNS
        if r.metric not in cols:
            continue
        kind = "in" if r.measure is None else "out"
        tkey = (kind, r.size_tier, r.measure or "")
        _, rows = tables.setdefault(tkey, (cols, {}))
        rows.setdefault(r.group, {})[r.metric] = r
    return tables


def _caption(kind, tier, measure):
    if kind == "in":
        return f"In-domain results for size tier {tier}."
    return f"Out-domain results for measure {MEASURE_DISPLAY.get(measure, measure)} and size tier {tier}."


def _render_text(caption, cols, rows):
    header = ["Algorithm", "Spectral", "Calibration", "k", *cols]
    body = []
    for g in sorted(rows, key=_row_key):
        alg, spectral, calib, k = g
        cells = [format_cell(rows[g][c].mean, rows[g][c].std) if c in rows[g] else "-" for c in cols]
        body.append([DISPLAY.get(alg, alg), str(spectral), calib, str(k), *cells])
    widths = [max(len(x) for x in col) for col in zip(header, *body)]
    line = lambda cells: "  ".join(c.ljust(w) for c, w in zip(cells, widths)).rstrip()  # noqa: E731
    return "\n".join([caption, line(header), line(["-" * w for w in widths]), *map(line, body)]) + "\n"


def _render_csv(caption, cols, rows, tier, measure):
    import csv
    import io

    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    for g in sorted(rows, key=_row_key):
        alg, spectral, calib, k = g
        cells = [format_cell(rows[g][c].mean, rows[g][c].std) if c in rows[g] else "" for c in cols]
        w.writerow([tier, measure, DISPLAY.get(alg, alg), spectral, calib, k, *cells])
    return buf.getvalue()


def _render_latex(caption, cols, rows):
    lines = [r"\begin{table}", r"\begin{center}", r"\resizebox{\textwidth}{!}{",
             r"\begin{tabular}{llll" + "c" * len(cols) + "}", r"\toprule",
             r"\textbf{Algorithm} & \textbf{Spectral} & \textbf{Calibration} & \textbf{k} & "
             + " & ".join(rf"\textbf{{{c}}}" for c in cols) + r" \\", r"\midrule"]
    ordered = sorted(rows, key=_row_key)
    by_alg = defaultdict(list)
    for g in ordered:
        by_alg[g[0]].append(g)
    first_alg = True
    for alg in sorted(by_alg, key=lambda a: DISPLAY.get(a, a)):
        if not first_alg:
            lines.append(r"\midrule")
        first_alg = False
        groups = by_alg[alg]
        n_spec = defaultdict(int)
        n_cal = defaultdict(int)
        for g in groups:
            n_spec[g[1]] += 1
            n_cal[g[1:3]] += 1
        prev = (None, None, None)
        for g in groups:
            _, spectral, calib, k = g
            c0 = (rf"\multirow{{{len(groups)}}}{{*}}{{{DISPLAY.get(alg, alg)}}}" if prev[0] is None else "")
            c1 = (rf"\multirow{{{n_spec[spectral]}}}{{*}}{{{spectral}}}" if prev[1] != spectral else "")
            c2 = (rf"\multirow{{{n_cal[(spectral, calib)]}}}{{*}}{{{calib}}}"
                  if prev[1:] != (spectral, calib) else "")
            cells = [rf"${rows[g][c].mean:.3f} \pm {rows[g][c].std:.3f}$" if c in rows[g] else "-" for c in cols]
            lines.append(" & ".join([c0, c1, c2, f"{float(k):.1f}", *cells]) + r" \\")
            prev = (alg, spectral, calib)
    lines += [r"\bottomrule", r"\end{tabular}", r"}\end{center}", rf"\caption{{{caption}}}", r"\end{table}"]
    return "\n".join(lines) + "\n"


def render_report(records, fmt: str = "text", failed_runs: int = 0) -> dict[str, str]:
    """Render in-domain and out-domain tables.  Returns ``{"in_domain": ..., "out_domain": ...}``."""
    if not records:
        raise ValueError("no evaluation records to render")
    if fmt not in ("text", "csv", "latex"):
        raise ValueError(f"unknown report format {fmt!r}")
    tables = _tables(records)
    parts = {"in": [], "out": []}
    for (kind, tier, measure) in sorted(tables, key=lambda t: (t[0], t[1], t[2])):
        cols, rows = tables[(kind, tier, measure)]
        cap = _caption(kind, tier, measure)
        if fmt == "text":
            parts[kind].append(_render_text(cap, cols, rows))
        elif fmt == "csv":
            parts[kind].append(_render_csv(cap, cols, rows, tier, measure))
        else:
            parts[kind].append(_render_latex(cap, cols, rows))
    out = {}
    for kind, name in (("in", "in_domain"), ("out", "out_domain")):
        if fmt == "csv":
            head = ["tier", "measure", "algorithm", "spectral", "calibration", "k"]
            head += list(IN_DOMAIN_COLUMNS if kind == "in" else OUT_DOMAIN_COLUMNS)
            doc = ",".join(head) + "\n" + "".join(parts[kind])
        else:
            doc = "\n".join(parts[kind])
        if failed_runs and fmt != "csv":
            note = f"Note: {failed_runs} failed run(s) excluded from selection and aggregation.\n"
            doc += ("% " + note) if fmt == "latex" else ("\n" + note)
        out[name] = doc
    return out


REPORT_EXT = {"text": "txt", "csv": "csv", "latex": "tex"}


def write_report(out_dir, outcome: EvalOutcome, fmt: str = "text") -> list[Path]:
    out_dir = Path(out_dir)
    docs = render_report(outcome.records, fmt, outcome.failed_runs)
    paths = []
    for name, doc in docs.items():
        p = out_dir / f"report_{name}.{REPORT_EXT[fmt]}"
        _write_atomic(p, doc)
        paths.append(p)
    return paths
