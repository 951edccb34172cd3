"""Experiment orchestration: metrics, ablation tables, the lambda sweep, method
comparison, the loss-scatter analysis and reproducible run manifests.

Everything hangs off a :class:`Pipeline`, which owns the benchmark, the trained
source segmenter, the shape VAE and a memo of finished adaptation runs, so
that tables sharing a configuration reuse the same student.
"""
from __future__ import annotations

import ast
import csv
import hashlib
import io
import json
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from . import __version__
from . import autodiff as ad
from .adapt import AdaptConfig, TeacherBundle, adapt, baseline_direct_test, test_time_predict
from .baselines import (baseline_discriminator_adapt, build_discriminator, gen_discriminator_corpus,
                        train_discriminator)
from .data.benchmark import Benchmark, make_benchmark
from .data.preprocess import AugmentSpec
from .params import load_params, save_params
from .segnet import SegNet, UNetConfig, build_unet, dice_loss, dice_score, predict_mask, train_source
from .shape_vae import ShapeVae, VaeConfig, build_vae, recon_loss, train_vae
from .svg import scatter_svg
from .volume import Volume

NUM_FMT = "{:.6f}"
# VAE training keeps a parameter snapshot after this many steps for replay checks
REPRO_PREFIX = 50


# metrics

@dataclass
class MetricsRecord:
    method: str
    per_case: list
    mean_dice: float
    domain_gap: float | None = None

    def with_gap(self, upper: float) -> "MetricsRecord":
        return MetricsRecord(self.method, list(self.per_case), self.mean_dice, upper - self.mean_dice)


def _binary(v) -> np.ndarray:
    arr = v.data if isinstance(v, Volume) else np.asarray(v)
    if arr.ndim == 4:
        arr = arr[0]
    return arr > 0.5


def mean_dice(preds, gts, method: str = "") -> MetricsRecord:
    if len(preds) != len(gts):
        raise ValueError(f"{len(preds)} predictions for {len(gts)} ground truths")
    if not preds:
        raise ValueError("no cases to score")
    per_case = [dice_score(_binary(p), _binary(g)) for p, g in zip(preds, gts)]
    return MetricsRecord(method, per_case, float(np.mean(per_case)))


def evaluate(net: SegNet, samples, method: str = "", threshold: float = 0.5) -> MetricsRecord:
    return mean_dice([predict_mask(net, s.image, threshold) for s in samples], [s.mask for s in samples], method)


def add_domain_gaps(records, upper: MetricsRecord) -> list[MetricsRecord]:
    return [r.with_gap(upper.mean_dice) for r in records]


# tables: the text table and the CSV share one number formatter so they agree

TABLE_COLUMNS = ("method", "mean_dice", "domain_gap", "n_cases")


def _fmt(x) -> str:
    if x is None:
        return ""
    if isinstance(x, (float, np.floating)):
        return NUM_FMT.format(float(x))
    return str(x)


def table_rows(records) -> list[list[str]]:
    return [[r.method, _fmt(r.mean_dice), _fmt(r.domain_gap), str(len(r.per_case))] for r in records]


def format_table(records, title: str = "") -> str:
    rows = [list(TABLE_COLUMNS)] + table_rows(records)
    widths = [max(len(r[i]) for r in rows) for i in range(len(TABLE_COLUMNS))]
    lines = [title] if title else []
    for k, r in enumerate(rows):
        lines.append("  ".join(c.ljust(w) for c, w in zip(r, widths)).rstrip())
        if k == 0:
            lines.append("  ".join("-" * w for w in widths))
    return "\n".join(lines) + "\n"


def parse_table(text: str) -> list[list[str]]:
    """Read rows back from :func:`format_table` output (title and rule skipped)."""
    lines = [l for l in text.splitlines() if l.strip()]
    start = next(i for i, l in enumerate(lines) if l.split()[:1] == ["method"])
    out = []
    for l in lines[start + 2:]:
        parts = l.split()
        # method names contain no whitespace; a missing gap leaves three cells
        out.append(parts if len(parts) == 4 else [parts[0], parts[1], "", parts[2]])
    return out


def table_csv(records) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\r\n")
    w.writerow(TABLE_COLUMNS)
    w.writerows(table_rows(records))
    return buf.getvalue()


def per_case_csv(records) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\r\n")
    w.writerow(("method", "case", "dice"))
    for r in records:
        for i, d in enumerate(r.per_case):
            w.writerow((r.method, i, repr(float(d))))
    return buf.getvalue()


def write_table(out_dir, name: str, records, title: str = "") -> str:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    text = format_table(records, title)
    (out / f"{name}.txt").write_text(text)
    with open(out / f"{name}.csv", "w", newline="") as fh:
        fh.write(table_csv(records))
    with open(out / f"{name}_cases.csv", "w", newline="") as fh:
        fh.write(per_case_csv(records))
    return text


# configuration

@dataclass(frozen=True)
class ExperimentConfig:
    seed: int = 0
    size: int = 32
    n_source_train: int = 60
    n_source_test: int = 20
    n_target_train: int = 40
    n_target_test: int = 20
    unet_depth: int = 3
    unet_channels: tuple = (4, 8, 16, 32)
    source_iters: int = 500
    source_lr: float = 0.1
    vae_latent: int = 64
    vae_channels: tuple = (4, 8, 16, 32)
    vae_iters: int = 2000
    vae_lr: float = 0.05
    vae_momentum: float = 0.9
    vae_clip: float = 1.0
    # step-size drops by 10x at these iterations
    vae_decays: tuple = (1000, 1600)
    # mask augmentation for VAE training; 0 disables
    vae_rotation: float = 0.0
    vae_translation: int = 2
    lambda_hat: float = 1.0
    adapt_lr: float = 0.01
    adapt_iters: int = 200
    threshold: float = 0.5
    # source checkpoints for the discriminator corpus, as fractions of source_iters
    disc_snapshots: tuple = (0.05, 0.2, 0.5, 1.0)
    disc_iters: int = 300
    disc_lr: float = 0.05
    disc_weight: float = 1.0
    finetune_iters: int = 200
    lambdas: tuple = (0.0, 0.1, 0.2, 0.5, 1.0, 2.0)

    def __post_init__(self):
        for f in fields(self):
            v = getattr(self, f.name)
            if isinstance(f.default, tuple):
                v = tuple(type(f.default[0])(x) for x in (v if isinstance(v, (list, tuple)) else [v]))
            else:
                v = type(f.default)(v)
            object.__setattr__(self, f.name, v)
        if self.seed < 0:
            raise ValueError("seed must be non-negative")
        if self.size % 2 ** max(self.unet_depth, len(self.vae_channels) - 1):
            raise ValueError(f"size {self.size} not divisible by the network strides")

    def with_(self, **kw) -> "ExperimentConfig":
        return ExperimentConfig(**{**asdict(self), **kw})

    def to_dict(self) -> dict:
        return {k: list(v) if isinstance(v, tuple) else v for k, v in asdict(self).items()}

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(d) - known)
        if unknown:
            raise KeyError(f"unknown config keys: {', '.join(unknown)}")
        return cls(**d)

    def unet(self) -> UNetConfig:
        return UNetConfig(depth=self.unet_depth, channels=self.unet_channels)

    def vae(self) -> VaeConfig:
        return VaeConfig(latent_dim=self.vae_latent, depth=len(self.vae_channels) - 1,
                         channels=self.vae_channels, input_size=self.size)

    def vae_training(self) -> dict:
        """Keyword arguments for :func:`train_vae` besides masks, iterations and rng."""
        spec = AugmentSpec(intensity=False, rotation=self.vae_rotation > 0, max_rotation_deg=self.vae_rotation,
                           translation=self.vae_translation > 0, max_translation_vox=self.vae_translation)
        return dict(lr=self.vae_lr, momentum=self.vae_momentum, clip_norm=self.vae_clip,
                    lr_decay_at=self.vae_decays, augment_spec=spec)

    def snapshot_iters(self) -> tuple[int, ...]:
        return tuple(sorted({max(1, int(round(f * self.source_iters))) for f in self.disc_snapshots}))

    def adapt_config(self, **kw) -> AdaptConfig:
        base = AdaptConfig(lambda_hat=self.lambda_hat, lr=self.adapt_lr, iters=self.adapt_iters,
                           threshold=self.threshold)
        return base.with_(**kw)

    def digest(self, *keys) -> str:
        d = self.to_dict()
        sub = {k: d[k] for k in keys} if keys else d
        return hashlib.sha256(json.dumps(sub, sort_keys=True).encode()).hexdigest()[:16]


def parse_config_text(text: str) -> dict:
    """``key = value`` per line; ``#`` starts a comment; values are Python literals
    (numbers, tuples, lists, booleans), anything else is kept as a string."""
    out = {}
    for n, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"line {n}: expected key = value, got {line!r}")
        key, value = (p.strip() for p in line.split("=", 1))
        if not key.isidentifier():
            raise ValueError(f"line {n}: bad key {key!r}")
        try:
            out[key] = ast.literal_eval(value)
        except (ValueError, SyntaxError):
            out[key] = value
    return out


def load_config(path=None, **overrides) -> ExperimentConfig:
    d = parse_config_text(Path(path).read_text()) if path else {}
    d.update({k: v for k, v in overrides.items() if v is not None})
    return ExperimentConfig.from_dict(d)


def dump_config(cfg: ExperimentConfig) -> str:
    return "".join(f"{k} = {v!r}\n" for k, v in asdict(cfg).items())


# run manifests

@dataclass
class RunManifest:
    command: str
    seed: int
    config: dict
    dataset_seeds: dict
    code_version: str = __version__
    phases: dict = field(default_factory=dict)
    metrics: dict = field(default_factory=dict)

    def save(self, path):
        Path(path).write_text(json.dumps(asdict(self), indent=1, sort_keys=True))

    @classmethod
    def load(cls, path) -> "RunManifest":
        return cls(**json.loads(Path(path).read_text()))


class PhaseTimer:
    def __init__(self, phases: dict):
        self.phases = phases

    def __call__(self, name):
        timer = self

        class _Ctx:
            def __enter__(self):
                self.t = time.perf_counter()

            def __exit__(self, *exc):
                timer.phases[name] = timer.phases.get(name, 0.0) + time.perf_counter() - self.t

        return _Ctx()


# the pipeline

class Pipeline:
    """Benchmark, trained source segmenter and VAE for one configuration.

    Trained networks are cached under ``cache_dir`` keyed by a digest of the
    configuration entries they depend on; adaptation runs are memoised in
    memory keyed by their :class:`AdaptConfig`.
    """

    def __init__(self, cfg: ExperimentConfig, cache_dir=None, verbose: bool = False):
        self.cfg = cfg
        self.cache_dir = Path(cache_dir) if cache_dir else None
        self.verbose = verbose
        self.phases: dict = {}
        self.timer = PhaseTimer(self.phases)
        self._bm: Benchmark | None = None
        self._source: SegNet | None = None
        self._vae: ShapeVae | None = None
        self._bundle: TeacherBundle | None = None
        self._teacher_preds = None
        self._students: dict = {}
        self._logs: dict = {}
        self._snapshots: dict = {}
        self._vae_snapshots: dict = {}

    def _say(self, msg):
        if self.verbose:
            print(msg, flush=True)

    # data and models

    @property
    def benchmark(self) -> Benchmark:
        if self._bm is None:
            c = self.cfg
            with self.timer("data"):
                self._bm = make_benchmark(c.seed, c.size, (c.n_source_train, c.n_source_test),
                                          (c.n_target_train, c.n_target_test))
        return self._bm

    def _data_keys(self):
        return ("seed", "size", "n_source_train", "n_source_test", "n_target_train", "n_target_test")

    def _cached(self, kind: str, keys):
        if self.cache_dir is None:
            return None
        return self.cache_dir / f"{kind}-{self.cfg.digest(*keys)}"

    @property
    def source(self) -> SegNet:
        if self._source is None:
            keys = self._data_keys() + ("unet_depth", "unet_channels", "source_iters", "source_lr",
                                        "disc_snapshots")
            path = self._cached("source", keys)
            if path is not None and (path / "final" / "manifest.json").exists():
                self._source = SegNet.load(path / "final", self.cfg.unet())
                self._snapshots = {int(p.name[4:]): load_params(p) for p in path.glob("snap*")}
            else:
                self._source, self._snapshots = self.train_source_net()
                if path is not None:
                    self._source.save(path / "final")
                    for it, params in self._snapshots.items():
                        save_params(params, path / f"snap{it}")
            self._source.eval()
        return self._source

    def train_source_net(self):
        c = self.cfg
        self._say(f"training source segmenter for {c.source_iters} iterations")
        net = build_unet(c.unet(), seed=c.seed)
        snaps: dict = {}
        with self.timer("train_source"):
            train_source(net, self.benchmark.source_train, c.source_iters, c.source_lr, AugmentSpec(),
                         np.random.default_rng([c.seed, 1]), snapshots=snaps, snapshot_at=c.snapshot_iters())
        return net.eval(), snaps

    @property
    def vae(self) -> ShapeVae:
        if self._vae is None:
            keys = self._data_keys() + ("vae_latent", "vae_channels", "vae_iters", "vae_lr", "vae_momentum",
                                        "vae_clip", "vae_decays", "vae_rotation", "vae_translation")
            path = self._cached("vae", keys)
            if path is not None and (path / "manifest.json").exists():
                self._vae = ShapeVae.load(path, self.cfg.vae())
            else:
                self._vae = self.train_shape_vae()
                if path is not None:
                    self._vae.save(path)
            self._vae.eval()
        return self._vae

    def train_shape_vae(self, iters: int | None = None) -> ShapeVae:
        c = self.cfg
        iters = c.vae_iters if iters is None else iters
        self._say(f"training shape VAE for {iters} iterations")
        vae = build_vae(c.vae(), seed=c.seed)
        with self.timer("train_vae"):
            train_vae(vae, [s.mask for s in self.benchmark.source_train], iters, rng=np.random.default_rng([c.seed, 2]),
                      snapshots=self._vae_snapshots, snapshot_at=(REPRO_PREFIX,), **c.vae_training())
        return vae.eval()

    def training_prefix(self, kind: str, iters: int):
        """Parameters after the first ``iters`` steps of source or VAE training,
        retrained from scratch; compared against snapshots of the full run to
        check that training replays bit for bit."""
        c = self.cfg
        if kind == "source":
            net = build_unet(c.unet(), seed=c.seed)
            train_source(net, self.benchmark.source_train, iters, c.source_lr, AugmentSpec(),
                         np.random.default_rng([c.seed, 1]))
            return net.params
        if kind == "vae":
            vae = build_vae(c.vae(), seed=c.seed)
            train_vae(vae, [s.mask for s in self.benchmark.source_train], iters, rng=np.random.default_rng([c.seed, 2]),
                      **c.vae_training())
            return vae.params
        raise ValueError(f"unknown network kind {kind!r}")

    def snapshot(self, kind: str, iters: int):
        snaps = self._snapshots if kind == "source" else self._vae_snapshots
        return snaps.get(iters)

    @property
    def bundle(self) -> TeacherBundle:
        if self._bundle is None:
            self._bundle = TeacherBundle(self.source, self.vae)
        return self._bundle

    @property
    def target_images(self):
        return [s.image for s in self.benchmark.target_train]

    @property
    def teacher_preds(self):
        if self._teacher_preds is None:
            self._teacher_preds = [self.bundle.teacher_proba(x) for x in self.target_images]
        return self._teacher_preds

    # adaptation runs

    def student(self, acfg: AdaptConfig) -> SegNet:
        """Adapted student for ``acfg`` (memoised)."""
        if acfg not in self._students:
            self._say(f"adapting: {acfg}")
            log: list = []
            with self.timer("adapt"):
                st = adapt(self.bundle, self.bundle.student(), self.target_images, acfg,
                           rng=np.random.default_rng([self.cfg.seed, 3]), log=log,
                           teacher_preds=self.teacher_preds)
            self._students[acfg] = st.eval()
            self._logs[acfg] = log
        return self._students[acfg]

    def adapt_log(self, acfg: AdaptConfig) -> list:
        self.student(acfg)
        return self._logs[acfg]

    def evaluate(self, net: SegNet, method: str) -> MetricsRecord:
        with self.timer("evaluate"):
            return evaluate(net, self.benchmark.target_test, method, self.cfg.threshold)

    def evaluate_ttt(self, student: SegNet, acfg: AdaptConfig, method: str) -> MetricsRecord:
        tests = self.benchmark.target_test
        with self.timer("ttt"):
            preds = [test_time_predict(self.bundle, student, s.image, acfg) for s in tests]
        return mean_dice(preds, [s.mask for s in tests], method)

    def direct(self) -> MetricsRecord:
        preds = baseline_direct_test(self.bundle, [s.image for s in self.benchmark.target_test], self.cfg.threshold)
        return mean_dice(preds, [s.mask for s in self.benchmark.target_test], "direct_test")

    def upper_bound(self) -> MetricsRecord:
        c = self.cfg
        net = self.source.clone()
        net.params.set_trainable(True, lambda n: not n.endswith(("running_mean", "running_var")))
        with self.timer("upper_bound"):
            train_source(net, self.benchmark.target_train, c.finetune_iters, c.source_lr, AugmentSpec(),
                         np.random.default_rng([c.seed, 4]))
        return self.evaluate(net.eval(), "upper_bound")

    def discriminator(self) -> MetricsRecord:
        c = self.cfg
        self.source  # populates snapshots
        with self.timer("discriminator"):
            snaps = [self._snapshots[k] for k in sorted(self._snapshots)]
            corpus = gen_discriminator_corpus(self.benchmark.source_train, snaps, c.unet())
            disc = train_discriminator(corpus, c.disc_iters, c.disc_lr, np.random.default_rng([c.seed, 5]),
                                       build_discriminator(input_size=c.size, seed=c.seed))
            st = baseline_discriminator_adapt(self.bundle, self.bundle.student(), disc, self.target_images,
                                              c.adapt_config(), c.disc_weight,
                                              rng=np.random.default_rng([c.seed, 3]),
                                              teacher_preds=self.teacher_preds)
        return self.evaluate(st.eval(), "discriminator")

    def manifest(self, command: str, metrics: dict | None = None) -> RunManifest:
        return RunManifest(command, self.cfg.seed, self.cfg.to_dict(), dict(self.benchmark.seeds),
                           phases=dict(self.phases), metrics=metrics or {})


# tables

def ablation_configs(cfg: ExperimentConfig) -> dict:
    return {
        "pseudo_only": cfg.adapt_config(lambda_hat=0.0, use_recon=False),
        "recon_only": cfg.adapt_config(use_pseudo=False),
        "pseudo_recon": cfg.adapt_config(),
        "dynamic": cfg.adapt_config(dynamic=True),
    }


def run_ablation(pipe: Pipeline) -> list[MetricsRecord]:
    """Rows: direct test, pseudo only, recon only, pseudo + recon, + dynamic
    weight, + test-time training (on top of the dynamic-weight student)."""
    rows = [pipe.direct()]
    acfgs = ablation_configs(pipe.cfg)
    for name, acfg in acfgs.items():
        rows.append(pipe.evaluate(pipe.student(acfg), name))
    dyn = acfgs["dynamic"]
    rows.append(pipe.evaluate_ttt(pipe.student(dyn), dyn.with_(ttt=True), "dynamic_ttt"))
    return rows


def run_lambda_sweep(pipe: Pipeline, lambdas=None) -> list[MetricsRecord]:
    """Fixed-weight runs without the dynamic schedule or test-time training."""
    rows = []
    for lam in lambdas if lambdas is not None else pipe.cfg.lambdas:
        acfg = pipe.cfg.adapt_config(lambda_hat=float(lam))
        if lam == 0:
            acfg = acfg.with_(use_recon=False)
        rows.append(pipe.evaluate(pipe.student(acfg), f"lambda={float(lam):g}"))
    return rows


def run_comparison(pipe: Pipeline) -> list[MetricsRecord]:
    c = pipe.cfg
    dyn = ablation_configs(c)["dynamic"]
    rows = [
        pipe.direct(),
        pipe.evaluate(pipe.student(ablation_configs(c)["pseudo_only"]), "pseudo_label"),
        pipe.discriminator(),
        pipe.evaluate_ttt(pipe.student(dyn), dyn.with_(ttt=True), "vae_pipeline"),
    ]
    upper = pipe.upper_bound()
    return add_domain_gaps(rows + [upper], upper)


# loss scatter

SCATTER_SOURCES = ("pseudo", "ground_truth", "predicted")


@dataclass
class ScatterResult:
    points: dict
    centroids: dict
    dist_predicted: float
    dist_pseudo: float

    def csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\r\n")
        w.writerow(("source", "case", "L_pseudo", "L_recon"))
        for src in SCATTER_SOURCES:
            for i, (lp, lr) in enumerate(self.points[src]):
                w.writerow((src, i, repr(lp), repr(lr)))
        return buf.getvalue()


def _loss_pair(bundle: TeacherBundle, mask: np.ndarray, teacher: np.ndarray) -> tuple[float, float]:
    with ad.no_grad():
        lp = dice_loss(mask, teacher).item()
        lr = recon_loss(bundle.vae, mask).item()
    return float(lp), float(lr)


def loss_scatter(bundle: TeacherBundle, student: SegNet, samples, threshold: float = 0.5) -> ScatterResult:
    """(L_pseudo, L_recon) of the pseudo label, the ground truth and the
    student's prediction for each case, and the distances of the predicted and
    pseudo-label centroids to the ground-truth centroid."""
    points = {k: [] for k in SCATTER_SOURCES}
    for s in samples:
        teacher = bundle.teacher_proba(s.image)
        masks = {
            "pseudo": (teacher > threshold).astype(np.float32),
            "ground_truth": s.mask.data[0],
            "predicted": predict_mask(student, s.image, threshold).data[0],
        }
        for k, m in masks.items():
            points[k].append(_loss_pair(bundle, m, teacher))
    cents = {k: tuple(float(x) for x in np.mean(np.array(v), axis=0)) for k, v in points.items()}
    gt = np.array(cents["ground_truth"])
    return ScatterResult(points, cents, float(np.linalg.norm(np.array(cents["predicted"]) - gt)),
                         float(np.linalg.norm(np.array(cents["pseudo"]) - gt)))


def run_loss_scatter(pipe: Pipeline) -> ScatterResult:
    dyn = ablation_configs(pipe.cfg)["dynamic"]
    with pipe.timer("scatter"):
        return loss_scatter(pipe.bundle, pipe.student(dyn), pipe.benchmark.target_test, pipe.cfg.threshold)


def write_scatter(out_dir, res: ScatterResult):
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "loss_scatter.csv", "w", newline="") as fh:
        fh.write(res.csv())
    series = {k.replace("_", " "): v for k, v in res.points.items()}
    (out / "loss_scatter.svg").write_text(scatter_svg(series, "L_pseudo", "L_recon", "target test cases"))
    summary = {"centroids": res.centroids, "dist_predicted_to_gt": res.dist_predicted,
               "dist_pseudo_to_gt": res.dist_pseudo}
    (out / "loss_scatter_summary.json").write_text(json.dumps(summary, indent=1))
    return summary
