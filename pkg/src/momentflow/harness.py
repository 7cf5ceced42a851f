"""Experiment configuration, resumable pipeline, comparison and benchmarks.

A run directory holds one sub-directory per stage::

    data/       training snapshots (manifest.json + NGFD blobs)
    model/      model.ngcm checkpoint, train_log.txt
    fng/        moments.ngfd, fields_t<time>.txt
    ensemble/   members_M<M>.ngfd, fields_M<M>_t<time>.txt
    compare/    report.json
    bench/      runtime.json
    export/     plot tables

Each stage writes ``stage.json`` last; a stage whose marker matches the
current configuration digest is skipped on resume.
"""
from __future__ import annotations

import dataclasses
import hashlib
import json
import logging
import os
import platform
import statistics
import time
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import colora, filtered, formats, galerkin, pde_ref, pretrain

log = logging.getLogger(__name__)

SCHEMA_VERSION = 1
OUTPUT_ENV = "MOMENTFLOW_OUTPUT_DIR"
STAGES = ("gen-data", "pretrain", "solve-fng", "ensemble", "compare", "bench")
# files holding wall-clock measurements; excluded from bitwise reproducibility
TIMING_FILES = ("model/train_log.txt", "bench/runtime.json", "timings.json")


class ConfigError(ValueError):
    pass


class StageError(RuntimeError):
    def __init__(self, stage, cause):
        super().__init__(f"stage {stage!r} failed: {cause}")
        self.stage = stage
        self.cause = cause


# ---------------------------------------------------------------------------
# Configuration
# ---------------------------------------------------------------------------


@dataclass
class DataSection:
    mu_range: list = field(default_factory=lambda: [1e-3, 1e-1])
    m: int = 5
    K: int = 50
    T: float = 2.0
    n_cells: int = 128
    n_x: int = 64
    n_v: int = 64
    train_stride: int = 2
    dt: float | None = None


@dataclass
class ModelSection:
    width: int = 64
    n_layers: int = 5
    rank: int = 16
    activation: str = "tanh"
    hyper_width: int = 64
    hyper_layers: int = 4
    init_std: float = 0.1


@dataclass
class TrainSection:
    epochs: int = 300
    learning_rate: float = 1e-3
    batch_size: int = 4096
    mc_samples: int = 10
    sigma_noise: float = 0.01
    mode: str = "bayesian"
    kl_mode: str = "closed"


@dataclass
class OnlineSection:
    mu_test: float = 0.005
    t_end: float = 0.5
    dt: float = 5e-3
    integrator: str = "rk4"
    collocation: list = field(default_factory=lambda: [128])
    lam: float | None = None


@dataclass
class UQSection:
    n_samples: int = 100
    level: float = 0.95
    ensemble_sizes: list = field(default_factory=lambda: [5, 50, 100])
    reference_size: int = 100
    times: list = field(default_factory=lambda: [0.25, 0.5])
    eval_grid: list = field(default_factory=lambda: [256])
    common_random_numbers: bool = True


@dataclass
class BenchSection:
    repeats: int = 3
    sizes: list = field(default_factory=lambda: [25, 50, 100])
    workers: int = 1
    t_end: float = 0.05


SECTIONS = {"data": DataSection, "model": ModelSection, "train": TrainSection,
            "online": OnlineSection, "uq": UQSection, "bench": BenchSection}


@dataclass
class ExperimentConfig:
    pde: str = "burgers"
    seed: int = 0
    output_dir: str = "runs/burgers"
    schema_version: int = SCHEMA_VERSION
    data: DataSection = field(default_factory=DataSection)
    model: ModelSection = field(default_factory=ModelSection)
    train: TrainSection = field(default_factory=TrainSection)
    online: OnlineSection = field(default_factory=OnlineSection)
    uq: UQSection = field(default_factory=UQSection)
    bench: BenchSection = field(default_factory=BenchSection)

    # -- (de)serialisation -------------------------------------------------
    def to_dict(self):
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d):
        if not isinstance(d, dict):
            raise ConfigError("configuration must be a JSON object")
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown configuration keys: {sorted(unknown)}")
        if d.get("schema_version", SCHEMA_VERSION) != SCHEMA_VERSION:
            raise ConfigError(f"unsupported schema_version "
                              f"{d['schema_version']}; expected {SCHEMA_VERSION}")
        kw = {}
        for k, v in d.items():
            if k in SECTIONS:
                kw[k] = _section(SECTIONS[k], v, k)
            else:
                kw[k] = v
        cfg = cls(**kw)
        cfg.validate()
        return cfg

    @classmethod
    def load(cls, path):
        try:
            d = formats.read_json(path)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: {exc}") from None
        return cls.from_dict(d)

    def save(self, path):
        formats.write_json(path, self.to_dict())

    def digest(self, exclude=("output_dir",)):
        d = {k: v for k, v in self.to_dict().items() if k not in exclude}
        return hashlib.sha256(json.dumps(d, sort_keys=True).encode()).hexdigest()

    # -- validation --------------------------------------------------------
    def validate(self):
        if self.pde not in ("burgers", "vlasov"):
            raise ConfigError(f"pde must be 'burgers' or 'vlasov', not {self.pde!r}")
        d, o, u = self.data, self.online, self.uq
        if d.K < 1:
            raise ConfigError("data.K must be at least 1")
        if d.m < 1:
            raise ConfigError("data.m must be at least 1")
        if not (d.T > 0 and o.t_end > 0 and o.dt > 0):
            raise ConfigError("T, t_end and dt must be positive")
        lo, hi = d.mu_range
        if not lo <= hi:
            raise ConfigError("data.mu_range must be increasing")
        if not lo <= o.mu_test <= hi:
            raise ConfigError(f"test parameter {o.mu_test} outside training "
                              f"domain [{lo}, {hi}]")
        if o.integrator not in filtered.INTEGRATORS:
            raise ConfigError(f"unknown integrator {o.integrator!r}")
        ndim = 1 if self.pde == "burgers" else 2
        if len(o.collocation) != ndim or len(u.eval_grid) != ndim:
            raise ConfigError(f"collocation and eval_grid need {ndim} entries")
        if int(np.prod(o.collocation)) < self.model.n_layers + 1:
            raise ConfigError("fewer collocation points than online weights")
        for t in u.times:
            if not 0 <= t <= o.t_end + 1e-12:
                raise ConfigError(f"output time {t} outside [0, {o.t_end}]")
            if abs(round(t / o.dt) * o.dt - t) > 1e-9:
                raise ConfigError(f"output time {t} is not a multiple of dt")
        if any(M < 1 for M in u.ensemble_sizes) or u.reference_size < 1:
            raise ConfigError("ensemble sizes must be positive")
        if u.n_samples < 2:
            raise ConfigError("uq.n_samples must be at least 2")
        if not 0 < u.level < 1:
            raise ConfigError("uq.level must lie in (0, 1)")
        if self.bench.repeats < 1 or self.bench.workers < 1:
            raise ConfigError("bench.repeats and bench.workers must be positive")
        out = Path(self.output_dir)
        if out.exists() and not out.is_dir():
            raise ConfigError(f"output_dir is not a directory: {out}")
        try:
            self.train_config()
        except ValueError as exc:
            raise ConfigError(str(exc)) from None

    # -- derived objects ---------------------------------------------------
    @property
    def n_steps(self):
        return int(round(self.online.t_end / self.online.dt))

    def data_config(self):
        d = self.data
        return pde_ref.DataConfig(pde=self.pde, mu_range=tuple(d.mu_range),
                                  m=d.m, K=d.K, T=d.T, n_cells=d.n_cells,
                                  n_x=d.n_x, n_v=d.n_v,
                                  train_stride=d.train_stride, dt=d.dt,
                                  seed=stage_seed(self.seed, "gen-data"))

    def train_config(self):
        return pretrain.TrainConfig(seed=stage_seed(self.seed, "pretrain"),
                                    **dataclasses.asdict(self.train),
                                    **dataclasses.asdict(self.model))

    def collocation(self):
        c = self.online.collocation
        if self.pde == "burgers":
            return galerkin.CollocationSet.equidistant_1d(c[0])
        return galerkin.CollocationSet.equidistant_2d(c[0], c[1])

    def eval_points(self):
        return pde_ref.grid_points(self.pde, tuple(self.uq.eval_grid))

    def pde_rhs(self):
        return galerkin.get_pde(self.pde)


def _section(cls, d, name):
    if not isinstance(d, dict):
        raise ConfigError(f"section {name!r} must be an object")
    known = {f.name for f in dataclasses.fields(cls)}
    unknown = set(d) - known
    if unknown:
        raise ConfigError(f"unknown keys in {name!r}: {sorted(unknown)}")
    return cls(**d)


def stage_seed(root, label):
    """Seed for a pipeline stage, forked from the root seed by a fixed label."""
    ss = np.random.SeedSequence([int(root), zlib.crc32(label.encode())])
    return int(ss.generate_state(1, dtype=np.uint32)[0])


def desk_config(pde="burgers", output_dir=None):
    """Defaults sized for a single workstation core."""
    if pde == "burgers":
        cfg = ExperimentConfig(pde="burgers", output_dir=output_dir or "runs/burgers")
    elif pde == "vlasov":
        cfg = ExperimentConfig(
            pde="vlasov", output_dir=output_dir or "runs/vlasov",
            data=DataSection(mu_range=[0.25, 0.45], m=3, K=50, T=1.0,
                             n_x=64, n_v=64, train_stride=4),
            train=TrainSection(batch_size=8192, epochs=150),
            online=OnlineSection(mu_test=0.375, t_end=0.5, dt=1e-2,
                                 collocation=[16, 16]),
            uq=UQSection(times=[0.5], eval_grid=[64, 64]))
    else:
        raise ConfigError(f"unknown pde {pde!r}")
    return cfg


def paper_config(pde="burgers", output_dir=None):
    """Full-scale values of the original experiments."""
    cfg = desk_config(pde, output_dir)
    if pde == "burgers":
        cfg.data = DataSection(mu_range=[1e-3, 1e-1], m=34, K=100, T=2.0,
                               n_cells=256, train_stride=1)
        cfg.online = OnlineSection(mu_test=0.005, t_end=1.0, dt=1e-3,
                                   collocation=[1000])
        cfg.uq.times = [0.25, 0.5, 0.75, 1.0]
        cfg.uq.ensemble_sizes = [5, 10, 25, 50, 100]
    else:
        cfg.data = DataSection(mu_range=[0.25, 0.45], m=5, K=50, T=1.0,
                               n_x=512, n_v=512, train_stride=4, dt=1e-4)
        cfg.train.epochs = 300
        cfg.online = OnlineSection(mu_test=0.375, t_end=1.0, dt=1e-3,
                                   collocation=[128, 128])
        cfg.uq.eval_grid = [128, 128]
    return cfg


def apply_output_override(cfg):
    env = os.environ.get(OUTPUT_ENV)
    if env:
        cfg.output_dir = env
    return cfg


# ---------------------------------------------------------------------------
# Comparison
# ---------------------------------------------------------------------------


@dataclass
class ComparisonReport:
    times: list
    mean_rel_l2: list
    width_rel_diff: list
    overlap: list
    var_correlation: list
    runtimes: dict = field(default_factory=dict)

    def to_dict(self):
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


def mean_difference(a, b):
    """Symmetric relative L2 difference ``2|a-b| / (|a| + |b|)``."""
    a, b = np.asarray(a, float), np.asarray(b, float)
    den = np.linalg.norm(a) + np.linalg.norm(b)
    return 0.0 if den == 0 else float(2.0 * np.linalg.norm(a - b) / den)


def width_difference(lower, upper, ref_lower, ref_upper):
    """``|mean width - mean reference width| / mean reference width``."""
    w = float(np.mean(np.asarray(upper) - np.asarray(lower)))
    w_ref = float(np.mean(np.asarray(ref_upper) - np.asarray(ref_lower)))
    if w_ref == 0:
        return 0.0 if w == 0 else float("inf")
    return abs(w - w_ref) / w_ref


def overlap_fraction(lower, upper, ref_lower, ref_upper):
    lo = np.maximum(lower, ref_lower)
    hi = np.minimum(upper, ref_upper)
    return float(np.mean(lo <= hi))


def pattern_correlation(a, b):
    a = np.asarray(a, float).ravel() - np.mean(a)
    b = np.asarray(b, float).ravel() - np.mean(b)
    den = np.linalg.norm(a) * np.linalg.norm(b)
    if den == 0:
        return 1.0 if np.array_equal(a, b) else 0.0
    return float(a @ b / den)


def compare(fng, ens, times):
    """Metrics between two dicts ``time -> FieldSummary``; ``ens`` is the
    reference for the width difference."""
    rows = {"mean_rel_l2": [], "width_rel_diff": [], "overlap": [],
            "var_correlation": []}
    for t in times:
        if t not in fng or t not in ens:
            raise KeyError(f"time {t} missing from artifacts")
        a, b = fng[t], ens[t]
        if a.points.shape != b.points.shape or not np.allclose(a.points, b.points):
            raise ValueError("evaluation grids differ")
        rows["mean_rel_l2"].append(mean_difference(a.mean, b.mean))
        rows["width_rel_diff"].append(width_difference(a.lower, a.upper,
                                                       b.lower, b.upper))
        rows["overlap"].append(overlap_fraction(a.lower, a.upper, b.lower, b.upper))
        rows["var_correlation"].append(pattern_correlation(a.var, b.var))
    return ComparisonReport(times=list(times), **rows)


# ---------------------------------------------------------------------------
# Field tables
# ---------------------------------------------------------------------------


def coord_names(pde):
    return ["x"] if pde == "burgers" else ["x", "v"]


def write_summary(path, pde, s):
    cols = [s.points[:, i] for i in range(s.points.shape[1])]
    formats.write_table(path, cols + [s.lower, s.mean, s.upper, s.var],
                        coord_names(pde) + ["lower", "mean", "upper", "var"])


def read_summary(path):
    header, data = formats.read_table(path)
    nd = header.index("lower")
    col = {h: data[:, i] for i, h in enumerate(header)}
    return filtered.FieldSummary(data[:, :nd], col["mean"], col["lower"],
                                 col["upper"], col["var"])


def time_tag(t):
    return f"{t:.4f}"


# ---------------------------------------------------------------------------
# Pipeline
# ---------------------------------------------------------------------------


class Pipeline:
    """Resumable end-to-end run for one :class:`ExperimentConfig`."""

    def __init__(self, cfg, output_dir=None):
        self.cfg = cfg
        self.root = Path(output_dir or cfg.output_dir)
        self.digest = cfg.digest()

    def path(self, *parts):
        return self.root.joinpath(*parts)

    # -- markers -----------------------------------------------------------
    def _done(self, stage):
        marker = self.path(_stage_dir(stage), "stage.json")
        if not marker.exists():
            return False
        return formats.read_json(marker).get("config_digest") == self.digest

    def _mark(self, stage, info=None):
        formats.write_json(self.path(_stage_dir(stage), "stage.json"),
                           {"stage": stage, "config_digest": self.digest,
                            **(info or {})})

    def run(self, stages=STAGES, resume=True):
        self.root.mkdir(parents=True, exist_ok=True)
        self.cfg.save(self.path("config.json"))
        for stage in stages:
            if stage not in STAGES:
                raise ValueError(f"unknown stage {stage!r}")
            if resume and self._done(stage):
                log.info("stage %s up to date", stage)
                continue
            self.path(_stage_dir(stage)).mkdir(parents=True, exist_ok=True)
            t0 = time.perf_counter()
            try:
                info = getattr(self, "stage_" + stage.replace("-", "_"))()
            except Exception as exc:
                raise StageError(stage, exc) from exc
            self._record_time(stage, time.perf_counter() - t0)
            self._mark(stage, info)
        return self.root

    def _record_time(self, stage, seconds):
        path = self.path("timings.json")
        times = formats.read_json(path) if path.exists() else {}
        times[stage] = seconds
        formats.write_json(path, times)

    def stage_times(self):
        """Wall seconds of the most recent execution of each stage."""
        path = self.path("timings.json")
        return formats.read_json(path) if path.exists() else {}

    # -- loaders -----------------------------------------------------------
    def dataset(self):
        return pde_ref.TrainingDataset.load(self.path("data"))

    def load_model(self):
        model, hyper, _ = colora.load_checkpoint(self.path("model", "model.ngcm"))
        return model, hyper

    def initial_belief(self, hyper):
        return colora.hyper_eval(hyper, 0.0, self.cfg.online.mu_test)

    def fng_summaries(self):
        return {t: read_summary(self.path("fng", f"fields_t{time_tag(t)}.txt"))
                for t in self.cfg.uq.times}

    def ensemble_summaries(self, M):
        return {t: read_summary(self.path(
            "ensemble", f"fields_M{M}_t{time_tag(t)}.txt"))
            for t in self.cfg.uq.times}

    # -- stages ------------------------------------------------------------
    def stage_gen_data(self):
        ds = pde_ref.generate_training_set(self.cfg.data_config())
        ds.save(self.path("data"))
        return {"entries": len(ds)}

    def stage_pretrain(self):
        ds = self.dataset()
        tc = self.cfg.train_config()
        model, hyper, hist = pretrain.train(ds, tc)
        colora.save_checkpoint(self.path("model", "model.ngcm"), model, hyper,
                               {"pde": self.cfg.pde, "train": tc.to_dict()})
        formats.write_table(self.path("model", "train_log.txt"),
                            [[r["epoch"] for r in hist], [r["loss"] for r in hist],
                             [r["wall_time"] for r in hist]],
                            ["epoch", "loss", "wall_time"])
        return {"final_loss": hist[-1]["loss"] if hist else None}

    def _sample_seed(self):
        label = "ensemble" if self.cfg.uq.common_random_numbers else "fng-samples"
        return stage_seed(self.cfg.seed, label)

    def stage_solve_fng(self):
        cfg = self.cfg
        model, hyper = self.load_model()
        states = filtered.fng_solve(model, self.initial_belief(hyper),
                                    cfg.online.mu_test, cfg.online.dt,
                                    cfg.n_steps, cfg.online.integrator,
                                    cfg.collocation(), cfg.pde_rhs(),
                                    cfg.online.lam)
        formats.write_blob(self.path("fng", "moments.ngfd"),
                           filtered.moments_to_array(states))
        pts = cfg.eval_points()
        for t in cfg.uq.times:
            k = int(round(t / cfg.online.dt))
            s = filtered.summarize_belief(model, states[k].belief, pts,
                                          cfg.uq.n_samples, self._sample_seed(),
                                          cfg.uq.level)
            write_summary(self.path("fng", f"fields_t{time_tag(t)}.txt"),
                          cfg.pde, s)
        return {"steps": cfg.n_steps}

    def stage_ensemble(self):
        cfg = self.cfg
        model, hyper = self.load_model()
        sizes = sorted(set(cfg.uq.ensemble_sizes) | {cfg.uq.reference_size})
        # keyed draws make smaller ensembles prefixes of the largest one
        run = filtered.ensemble_solve(model, self.initial_belief(hyper),
                                      cfg.online.mu_test, cfg.online.dt,
                                      cfg.n_steps, max(sizes),
                                      stage_seed(cfg.seed, "ensemble"),
                                      cfg.collocation(), cfg.pde_rhs(),
                                      cfg.online.lam, workers=cfg.bench.workers,
                                      integrator=cfg.online.integrator)
        pts = cfg.eval_points()
        for M in sizes:
            formats.write_blob(self.path("ensemble", f"members_M{M}.ngfd"),
                               run.members[:M])
            for t in cfg.uq.times:
                k = int(round(t / cfg.online.dt))
                fields = filtered.evaluate_fields(model, run.members[:M, k], pts)
                s = filtered.FieldSummary.from_samples(pts, fields, cfg.uq.level)
                write_summary(self.path("ensemble",
                                        f"fields_M{M}_t{time_tag(t)}.txt"),
                              cfg.pde, s)
        return {"sizes": sizes}

    def stage_compare(self):
        cfg = self.cfg
        ref = self.ensemble_summaries(cfg.uq.reference_size)
        out = {"fng_vs_reference": compare(self.fng_summaries(), ref,
                                           cfg.uq.times).to_dict(),
               "ensembles_vs_reference": {}}
        for M in cfg.uq.ensemble_sizes:
            if M == cfg.uq.reference_size:
                continue
            out["ensembles_vs_reference"][str(M)] = compare(
                self.ensemble_summaries(M), ref, cfg.uq.times).to_dict()
        formats.write_json(self.path("compare", "report.json"), out)
        return {}

    def stage_bench(self):
        model, hyper = self.load_model()
        table = bench(self.cfg, model, hyper)
        formats.write_json(self.path("bench", "runtime.json"), table)
        return {}


def _stage_dir(stage):
    return {"gen-data": "data", "pretrain": "model", "solve-fng": "fng",
            "ensemble": "ensemble", "compare": "compare", "bench": "bench"}[stage]


def run_pipeline(config, resume=True, stages=STAGES):
    """Run (or resume) every stage; returns the artifact directory."""
    return Pipeline(config).run(stages, resume)


# ---------------------------------------------------------------------------
# Benchmarks and studies
# ---------------------------------------------------------------------------


def _median_time(fn, repeats):
    times = []
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return statistics.median(times), times


def bench(cfg, model, hyper):
    """Median wall times of the filtered solve and of ensembles."""
    b, o = cfg.bench, cfg.online
    K = max(1, int(round(b.t_end / o.dt)))
    belief0 = colora.hyper_eval(hyper, 0.0, o.mu_test)
    colloc, pde = cfg.collocation(), cfg.pde_rhs()
    seed = stage_seed(cfg.seed, "bench")
    t_fng, raw_fng = _median_time(lambda: filtered.fng_solve(
        model, belief0, o.mu_test, o.dt, K, o.integrator, colloc, pde, o.lam),
        b.repeats)
    t_ng, _ = _median_time(lambda: galerkin.ng_solve(
        model, belief0.mean, o.mu_test, o.dt, K, colloc, pde, o.lam,
        integrator=o.integrator), b.repeats)
    ens = {}
    for M in [1] + list(b.sizes):
        t, raw = _median_time(lambda M=M: filtered.ensemble_solve(
            model, belief0, o.mu_test, o.dt, K, M, seed, colloc, pde, o.lam,
            workers=b.workers, integrator=o.integrator), b.repeats)
        ens[str(M)] = {"median": t, "runs": raw}
    return {"steps": K, "workers": b.workers, "repeats": b.repeats,
            "cpu_count": os.cpu_count(), "machine": platform.machine(),
            "python": platform.python_version(),
            "fng": {"median": t_fng, "runs": raw_fng},
            "ng": {"median": t_ng},
            "ensemble": ens,
            "speedup": {M: v["median"] / t_fng for M, v in ens.items()}}


def ensemble_size_study(model, belief0, cfg, sizes, seeds, reference, times):
    """Width deviation of ensembles of each size from a reference summary.

    Returns ``{M: mean deviation over seeds and times}``.  ``reference`` maps
    time to :class:`~momentflow.filtered.FieldSummary`.
    """
    o = cfg.online
    K = int(round(max(times) / o.dt))
    pts = cfg.eval_points()
    out = {M: [] for M in sizes}
    for s in seeds:
        run = filtered.ensemble_solve(model, belief0, o.mu_test, o.dt, K,
                                      max(sizes), s, cfg.collocation(),
                                      cfg.pde_rhs(), o.lam,
                                      integrator=o.integrator)
        for M in sizes:
            for t in times:
                k = int(round(t / o.dt))
                f = filtered.evaluate_fields(model, run.members[:M, k], pts)
                sm = filtered.FieldSummary.from_samples(pts, f, cfg.uq.level)
                r = reference[t]
                out[M].append(width_difference(sm.lower, sm.upper,
                                               r.lower, r.upper))
    return {M: float(np.mean(v)) for M, v in out.items()}


# ---------------------------------------------------------------------------
# Export
# ---------------------------------------------------------------------------


def export_plot_data(run_dir, times=None, out_dir=None):
    """One table per (time, method) with coordinates, mean, lower, upper.

    Vlasov tables also carry the pointwise variance.
    """
    run_dir = Path(run_dir)
    cfg = ExperimentConfig.from_dict(formats.read_json(run_dir / "config.json"))
    times = cfg.uq.times if times is None else list(times)
    out = Path(out_dir) if out_dir else run_dir / "export"
    out.mkdir(parents=True, exist_ok=True)
    written = []
    for t in times:
        if not 0 <= t <= cfg.online.t_end + 1e-12:
            raise ValueError(f"time {t} outside [0, {cfg.online.t_end}]")
        if not any(abs(t - s) < 1e-12 for s in cfg.uq.times):
            raise KeyError(f"no artifacts stored for time {t}")
        methods = {"fng": run_dir / "fng" / f"fields_t{time_tag(t)}.txt"}
        for M in sorted(set(cfg.uq.ensemble_sizes) | {cfg.uq.reference_size}):
            methods[f"ensemble_M{M}"] = (run_dir / "ensemble"
                                         / f"fields_M{M}_t{time_tag(t)}.txt")
        for name, src in methods.items():
            if not src.exists():
                raise FileNotFoundError(f"missing artifact {src}")
            s = read_summary(src)
            cols = [s.points[:, i] for i in range(s.points.shape[1])]
            if cfg.pde == "burgers":
                cols += [s.mean, s.lower, s.upper]
                header = coord_names(cfg.pde) + ["mean", "lower", "upper"]
            else:
                cols += [s.mean, s.var, s.lower, s.upper]
                header = coord_names(cfg.pde) + ["mean", "var", "lower", "upper"]
            dst = out / f"{name}_t{time_tag(t)}.txt"
            formats.write_table(dst, cols, header)
            written.append(dst)
    return written
