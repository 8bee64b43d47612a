"""Experiment configuration and orchestration for denoising, block CS and CS-MRI runs."""
import csv
import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from ldarecon import _backend, numerics
from ldarecon import fidelity as fid
from ldarecon import solver as sv
from ldarecon.errors import InvalidConfiguration, InvalidData
from ldarecon.feature_map import ConvNetParams, make_feature_map
from ldarecon.harness import data, metrics
from ldarecon.regularizer import block_norms

SCHEMA = 1
TASKS = ("denoise", "block_cs", "mri")


@dataclass
class ExperimentConfig:
    """Everything needed to reproduce one run.

    ``image_source`` is ``"synthetic"`` or a glob of PGM files (center-cropped
    to ``image_shape``). ``cs_ratio`` is the CS ratio for ``block_cs`` and the
    k-space sampling ratio for ``mri``. ``feature_map`` holds ``variant``
    plus ``weight`` (linear_diff) or ``params`` (conv_net checkpoint path).
    """

    task: str = "denoise"
    cs_ratio: float = 0.25
    image_source: str = "synthetic"
    image_shape: tuple = (33, 33)
    n_images: int = 4
    synthetic_kind: str = "piecewise"
    n_train: int = 400
    noise_sigma: float = 0.0
    feature_map: dict = field(default_factory=lambda: {"variant": "linear_diff", "weight": 0.05})
    solver: dict = field(default_factory=dict)
    schedule: dict = field(default_factory=dict)
    seed: int = 0
    output_dir: str = "runs/experiment"
    workers: int = 1

    def __post_init__(self):
        if self.task not in TASKS:
            raise InvalidConfiguration(f"task must be one of {TASKS}, got {self.task!r}")
        if self.task != "denoise" and not 0 < self.cs_ratio < 1:
            raise InvalidConfiguration(f"cs_ratio must lie in (0, 1), got {self.cs_ratio}")
        self.image_shape = tuple(int(s) for s in self.image_shape)
        if len(self.image_shape) != 2 or min(self.image_shape) < 1:
            raise InvalidConfiguration("image_shape must be two positive integers")
        if self.n_images < 1 or self.workers < 1 or self.n_train < 1:
            raise InvalidConfiguration("n_images, n_train and workers must be positive")
        if self.noise_sigma < 0:
            raise InvalidConfiguration("noise_sigma must be nonnegative")
        self.solver_config()
        self.step_schedule()

    def solver_config(self):
        try:
            return sv.SolverConfig(**self.solver)
        except TypeError as exc:
            raise InvalidConfiguration(f"bad solver settings: {exc}") from None

    def step_schedule(self):
        try:
            return sv.StepSchedule(**self.schedule)
        except TypeError as exc:
            raise InvalidConfiguration(f"bad schedule settings: {exc}") from None

    def to_dict(self):
        out = {"schema": SCHEMA}
        out.update(asdict(self))
        out["image_shape"] = list(self.image_shape)
        return out

    @classmethod
    def from_dict(cls, raw):
        raw = dict(raw)
        schema = raw.pop("schema", SCHEMA)
        if schema != SCHEMA:
            raise InvalidConfiguration(f"unsupported config schema {schema}")
        unknown = set(raw) - set(cls.__dataclass_fields__)
        if unknown:
            raise InvalidConfiguration(f"unknown config keys {sorted(unknown)}")
        return cls(**raw)

    @classmethod
    def from_json(cls, path):
        try:
            raw = json.loads(Path(path).read_text())
        except OSError as exc:
            raise data.DataIOError(f"cannot read config {path}: {exc}") from exc
        except json.JSONDecodeError as exc:
            raise InvalidConfiguration(f"{path}: invalid JSON ({exc})") from exc
        if "config" in raw and "schema" in raw and "constants" in raw:
            raw = raw["config"]  # a manifest
        return cls.from_dict(raw)


def init_block_cs(op, x_train):
    """Linear initializer ``Q = X B^T (B B^T)^{-1}`` with ``B = A X``.

    ``x_train`` holds training images along the first axis; columns of
    ``X`` are the flattened images. A ``1e-8 I`` ridge is added when
    ``B B^T`` is numerically singular.
    """
    x_train = np.asarray(x_train, dtype=np.float64)
    X = x_train.reshape(x_train.shape[0], -1).T
    B = op.apply(x_train).T
    gram = B @ B.T
    rhs = B @ X.T
    if np.linalg.cond(gram) > 1e12:
        gram = gram + 1e-8 * np.eye(gram.shape[0])
    try:
        Q = np.linalg.solve(gram, rhs).T
    except np.linalg.LinAlgError:
        raise InvalidData("B B^T is singular even after regularization") from None
    if not np.all(np.isfinite(Q)):
        raise InvalidData("B B^T is singular even after regularization")
    return Q


def _load_images(cfg, rng):
    if cfg.image_source == "synthetic":
        return data.synthetic_images(cfg.n_images, cfg.image_shape, rng, cfg.synthetic_kind)
    return data.load_glob(cfg.image_source, cfg.image_shape)[: cfg.n_images]


def _build_map(cfg):
    spec = dict(cfg.feature_map)
    variant = spec.pop("variant", "linear_diff")
    if variant == "conv_net":
        path = spec.get("params")
        if path is None:
            raise InvalidConfiguration("conv_net feature map needs a 'params' checkpoint path")
        return make_feature_map(variant, cfg.image_shape, params=ConvNetParams.load(path))
    return make_feature_map(variant, cfg.image_shape, weight=spec.get("weight", 1.0))


def build_problem(cfg):
    """Draw images, operator, measurements and initial points for ``cfg``.

    All random draws happen here, in a fixed order, from one generator.
    """
    rng = numerics.make_rng(cfg.seed)
    images = _load_images(cfg, rng)
    shape = cfg.image_shape
    info = {}
    if cfg.task == "denoise":
        op = fid.IdentityOperator(shape)
    elif cfg.task == "block_cs":
        op = fid.DenseOperator.orthonormal_gaussian(cfg.cs_ratio, shape, rng)
    else:
        mask, achieved = fid.make_radial_mask(shape, cfg.cs_ratio, rng)
        op = fid.MaskedDftOperator(mask)
        info["achieved_mask_ratio"] = achieved
    b = op.apply(images)
    if cfg.noise_sigma > 0:
        noise = rng.standard_normal(b.shape)
        if np.iscomplexobj(b):
            noise = (noise + 1j * rng.standard_normal(b.shape)) / np.sqrt(2.0)
        b = b + cfg.noise_sigma * noise
    if cfg.task == "denoise":
        x0 = np.real(op.adjoint(b))
    elif cfg.task == "block_cs":
        x_train = data.synthetic_images(cfg.n_train, shape, rng, cfg.synthetic_kind)
        Q = init_block_cs(op, x_train)
        x0 = (b @ Q.T).reshape(b.shape[:-1] + shape)
    else:
        x0 = np.zeros_like(images)
    return images, op, b, x0, info


def _write_trace_and_images(out, i, x, trace, fmap):
    trace.to_csv(out / f"trace_{i:03d}.csv")
    data.write_pgm(out / f"recon_{i:03d}.pgm", x)
    norms = block_norms(fmap.forward(x))
    lo, hi = float(norms.min()), float(norms.max())
    scaled = (norms - lo) / (hi - lo) if hi > lo else np.zeros_like(norms)
    data.write_pgm(out / f"feature_norm_{i:03d}.pgm", scaled)
    return {"min": lo, "max": hi}


def run_experiment(cfg):
    """Solve every image of ``cfg`` and write all artifacts; returns the manifest dict."""
    out = Path(cfg.output_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise data.DataIOError(f"cannot create output directory {out}: {exc}") from exc
    images, op, b, x0, info = build_problem(cfg)
    fmap = _build_map(cfg)
    if cfg.task == "mri":
        data.write_pgm(out / "mask.pgm", op.mask.astype(np.float64))
    config = cfg.solver_config()
    schedule = cfg.step_schedule()
    const_rng = numerics.make_rng(cfg.seed)
    budget = sv.LipschitzBudget(fid.lipschitz_f(op, const_rng), fmap.bound_Lg(const_rng),
                                fmap.bound_M(const_rng))

    def work(i):
        problem = fid.LeastSquares(op, b[i])
        x, trace = sv.solve(x0[i], config, schedule, problem, fmap, budget=budget)
        ranges = _write_trace_and_images(out, i, x, trace, fmap)
        row = metrics.metrics_row(x, images[i]) if min(cfg.image_shape) >= 11 else \
            metrics.MetricsRow(metrics.psnr(x, images[i]), metrics.rel_err(x, images[i]), float("nan"))
        return i, x, trace, row, ranges

    with ThreadPoolExecutor(max_workers=cfg.workers) as pool:
        results = list(pool.map(work, range(len(images))))

    with open(out / "metrics.csv", "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["image", "psnr", "rel_err", "ssim", "psnr_x0", "iterations", "final_eps"])
        for i, x, trace, row, _ in results:
            writer.writerow([i, _g(row.psnr), _g(row.rel_err), _g(row.ssim),
                             _g(metrics.psnr(x0[i], images[i])), len(trace), _g(trace.final_eps)])

    m = fmap.m
    manifest = {
        "schema": SCHEMA,
        "config": cfg.to_dict(),
        "seed": cfg.seed,
        "backend": _backend.BACKEND,
        "constants": {
            "L_f": budget.L_f, "M": budget.M, "L_g": budget.L_g, "m": m,
            "L_eps": [{"image": i, "schedule": [[e, budget.L_eps(e, m)]
                                                 for e in sorted(set(trace.column("eps")), reverse=True)]}
                      for i, _, trace, _, _ in results],
        },
        "feature_norm_ranges": [ranges for *_, ranges in results],
        "images": [{"index": i, "iterations": len(trace), "terminated": trace.terminated}
                   for i, _, trace, _, _ in results],
    }
    manifest.update(info)
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return manifest


def _g(value):
    return format(float(value), ".17g")
