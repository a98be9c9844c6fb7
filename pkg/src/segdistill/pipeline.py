"""End-to-end distillation: select masks, invert anchors, guided sampling, relabel."""

from __future__ import annotations

import dataclasses
import json
import logging
import math
import os
import time
import traceback
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable, Mapping

import numpy as np
import yaml

from . import ddim
from ._io import atomic_open, atomic_save_image, atomic_save_npy
from .guidance import (
    ClassFeatureBank,
    Guide,
    GuidanceConfig,
    IdentityDecoder,
    LinearSegmenter,
    PixelDecoder,
    PooledFeatureExtractor,
    PrototypeSegmenter,
    build_feature_bank,
    resize_nearest,
)
from .masks import (
    DEFAULT_IGNORE_INDEX,
    MaskDataset,
    MaskRecord,
    compute_class_stats,
    coverage_counts,
    distribution_report,
    write_label_map,
)
from .selection import (
    SelectionState,
    budget_from_ratio,
    select_greedy,
    select_random,
    select_uniform,
)

log = logging.getLogger(__name__)


class ConfigError(ValueError):
    pass


# -- configuration -------------------------------------------------------------


@dataclass
class DatasetConfig:
    path: str | None = None
    num_classes: int = 0
    ignore_index: int = DEFAULT_IGNORE_INDEX


@dataclass
class SelectionConfig:
    strategy: str = "greedy"
    budget: int | None = None
    ratio: float | None = None
    temperature: float = 0.5
    frequency_mode: str = "image"


@dataclass
class ScheduleConfig:
    kind: str = "linear"
    beta_start: float = 1e-4
    beta_end: float = 0.02
    train_steps: int = 1000


@dataclass
class SamplerConfig:
    steps: int = 50
    cfg_scale: float = 2.0
    invert: bool = True
    inversion_steps: int = 50
    inversion_cfg_scale: float = 1.0


@dataclass
class ModelConfig:
    """Built-in analytic components used in place of pretrained networks."""

    predictor: str = "gaussian"  # gaussian | zero
    predictor_variance: float = 0.25
    decoder: str = "identity"  # identity | pixel
    latent_channels: int = 4
    latent_size: tuple[int, int] = (16, 16)
    image_channels: int = 3  # pixel decoder only
    decoder_upsample: int = 1
    segmenter: str = "prototype"  # prototype | linear
    segmenter_sharpness: float = 4.0
    extractor_channels: tuple[int, ...] = (8, 16)
    extractor_factors: tuple[int, ...] = (2, 4)


@dataclass
class PipelineConfig:
    dataset: DatasetConfig = field(default_factory=DatasetConfig)
    selection: SelectionConfig = field(default_factory=SelectionConfig)
    schedule: ScheduleConfig = field(default_factory=ScheduleConfig)
    sampler: SamplerConfig = field(default_factory=SamplerConfig)
    guidance: GuidanceConfig = field(default_factory=GuidanceConfig)
    models: ModelConfig = field(default_factory=ModelConfig)
    seed: int = 0
    jobs: int = 1
    output: str | None = None

    def validate(self, dataset_size: int | None = None) -> None:
        if self.dataset.num_classes < 1:
            raise ConfigError("dataset.num_classes must be >= 1")
        if self.sampler.steps < 1 or self.sampler.inversion_steps < 1:
            raise ConfigError("sampler steps must be >= 1")
        sel = self.selection
        if sel.strategy not in ("greedy", "random", "uniform"):
            raise ConfigError(f"selection.strategy {sel.strategy!r} not usable in a pipeline run")
        if (sel.budget is None) == (sel.ratio is None):
            raise ConfigError("set exactly one of selection.budget and selection.ratio")
        if sel.budget is not None and sel.budget < 1:
            raise ConfigError("selection.budget must be >= 1")
        if not sel.temperature > 0:
            raise ConfigError("selection.temperature must be positive")
        m = self.models
        if m.predictor not in ("gaussian", "zero"):
            raise ConfigError(f"models.predictor {m.predictor!r} unknown")
        if m.decoder not in ("identity", "pixel"):
            raise ConfigError(f"models.decoder {m.decoder!r} unknown")
        if m.segmenter not in ("prototype", "linear"):
            raise ConfigError(f"models.segmenter {m.segmenter!r} unknown")
        if len(m.extractor_channels) != len(m.extractor_factors):
            raise ConfigError("models.extractor_channels and models.extractor_factors differ in length")
        h, w = self.image_size
        for f in m.extractor_factors:
            if h % f or w % f:
                raise ConfigError(f"image size {h}x{w} not divisible by extractor factor {f}")
        if dataset_size is not None:
            budget = self.resolve_budget(dataset_size)
            if budget > dataset_size:
                raise ConfigError(f"budget {budget} exceeds dataset size {dataset_size}")

    def resolve_budget(self, n: int) -> int:
        sel = self.selection
        return sel.budget if sel.budget is not None else budget_from_ratio(sel.ratio, n)

    @property
    def image_size(self) -> tuple[int, int]:
        m = self.models
        s = m.decoder_upsample if m.decoder == "pixel" else 1
        return (m.latent_size[0] * s, m.latent_size[1] * s)

    def to_dict(self) -> dict:
        return _to_plain(dataclasses.asdict(self))


def _to_plain(obj):
    if isinstance(obj, dict):
        return {k: _to_plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_to_plain(v) for v in obj]
    return obj


def _build(cls, data: Mapping[str, Any], prefix: str = ""):
    if not isinstance(data, Mapping):
        raise ConfigError(f"{prefix or 'config'}: expected a mapping")
    fields = {f.name: f for f in dataclasses.fields(cls)}
    kwargs = {}
    for key, value in data.items():
        name = f"{prefix}{key}"
        if key not in fields:
            raise ConfigError(f"unknown config key {name!r}")
        default = fields[key].default_factory() if fields[key].default_factory is not dataclasses.MISSING else fields[key].default
        if dataclasses.is_dataclass(default):
            kwargs[key] = _build(type(default), value or {}, name + ".")
        elif isinstance(default, tuple) and value is not None:
            kwargs[key] = tuple(value)
        else:
            kwargs[key] = value
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{prefix or 'config'}: {exc}") from exc


def config_from_dict(data: Mapping[str, Any]) -> PipelineConfig:
    cfg = _build(PipelineConfig, data or {})
    if cfg.guidance.active_steps is not None:
        cfg.guidance.active_steps = frozenset(int(t) for t in cfg.guidance.active_steps)
    return cfg


def load_config(path: str | os.PathLike) -> PipelineConfig:
    with open(path, encoding="utf-8") as fh:
        try:
            data = yaml.safe_load(fh)
        except yaml.YAMLError as exc:
            raise ConfigError(f"{path}: {exc}") from exc
    cfg = config_from_dict(data or {})
    if cfg.dataset.path is not None and not os.path.isabs(cfg.dataset.path):
        cfg.dataset.path = str(Path(path).parent / cfg.dataset.path)
    return cfg


# -- conditions, anchors and toy components ----------------------------------


def build_condition(record: MaskRecord, mask: np.ndarray | None = None) -> ddim.Condition:
    """Class ids present in the mask, ascending."""
    if not record.histogram:
        raise ValueError(f"record {record.id!r} has no labelled pixels; nothing to condition on")
    return ddim.Condition(tuple(sorted(record.histogram)), mask)


def encode_mask(mask: np.ndarray, num_classes: int, channels: int, size, ignore_index=DEFAULT_IGNORE_INDEX):
    """Class ids mapped linearly onto [-1, 1], ignored pixels to 0, copied
    across ``channels``."""
    small = resize_nearest(np.asarray(mask), tuple(size)).astype(np.float64)
    scale = 2.0 / (num_classes - 1) if num_classes > 1 else 0.0
    enc = np.where(small == ignore_index, 0.0, small * scale - (1.0 if num_classes > 1 else 0.0))
    return np.broadcast_to(enc, (channels, *enc.shape)).copy()


def class_codes(num_classes: int) -> np.ndarray:
    return np.array([2.0 * k / (num_classes - 1) - 1.0 if num_classes > 1 else 0.0 for k in range(num_classes)])


@dataclass
class Components:
    predictor: Any
    decoder: Any
    segmenter: Any
    extractor: Any


def build_components(cfg: PipelineConfig) -> Components:
    m = cfg.models
    K = cfg.dataset.num_classes
    rng = np.random.default_rng(cfg.seed)
    lat_shape = (m.latent_channels, *m.latent_size)

    if m.predictor == "zero":
        predictor = ddim.ZeroPredictor()
    else:
        def cond_mean(cond):
            return encode_mask(cond.mask, K, m.latent_channels, m.latent_size, cfg.dataset.ignore_index)

        predictor = ddim.GaussianPredictor(np.zeros(lat_shape), m.predictor_variance, cond_mean)

    if m.decoder == "identity":
        decoder = IdentityDecoder()
        img_channels = m.latent_channels
    else:
        decoder = PixelDecoder.random(m.latent_channels, m.image_channels, rng, m.decoder_upsample)
        img_channels = m.image_channels

    if m.segmenter == "prototype":
        codes = class_codes(K)
        protos = np.stack([decoder(np.full((m.latent_channels, 1, 1), v))[:, 0, 0] for v in codes])
        segmenter = PrototypeSegmenter(protos, m.segmenter_sharpness)
    else:
        segmenter = LinearSegmenter(rng.normal(size=(K, img_channels)), rng.normal(scale=0.1, size=K))

    extractor = PooledFeatureExtractor.random(img_channels, m.extractor_channels, m.extractor_factors, rng)
    return Components(predictor, decoder, segmenter, extractor)


def relabel(image: np.ndarray, segmenter) -> np.ndarray:
    """Per-pixel argmax of the segmenter logits; ties go to the lowest class."""
    logits = np.asarray(segmenter(image))
    if not np.isfinite(logits).all():
        raise ValueError("segmenter produced non-finite logits")
    return np.argmax(logits, axis=0)


# -- running -------------------------------------------------------------------


@dataclass
class DistilledSample:
    id: str
    source_id: str
    image: np.ndarray
    mask: np.ndarray
    seed: int
    trace: list[dict] = field(default_factory=list)


@dataclass
class DistillResult:
    selection: SelectionState
    samples: list[DistilledSample]
    failures: list[dict]
    timings: dict[str, float]
    config: PipelineConfig
    class_stats: Any = None


class Distiller:
    """Holds the dataset-wide state (stats, bank, components) for a run.

    ``anchors`` optionally maps record ids to real paired latents; records
    without one use the mask encoding.
    """

    def __init__(
        self,
        dataset: MaskDataset,
        config: PipelineConfig,
        components: Components | None = None,
        anchors: Mapping[str, np.ndarray] | None = None,
        bank: ClassFeatureBank | None = None,
    ):
        config.validate(len(dataset))
        self.dataset = dataset
        self.cfg = config
        self.comp = components or build_components(config)
        self.anchors = anchors or {}
        self._bank = bank
        sched = config.schedule
        kw = dict(kind=sched.kind, beta_start=sched.beta_start, beta_end=sched.beta_end, train_steps=sched.train_steps)
        self.schedule = ddim.build_schedule(steps=config.sampler.steps, **kw)
        self.inv_schedule = ddim.build_schedule(steps=config.sampler.inversion_steps, **kw)

    @property
    def ignore_index(self):
        return self.cfg.dataset.ignore_index

    def anchor_latent(self, rid: str, mask: np.ndarray) -> np.ndarray:
        if rid in self.anchors:
            return np.asarray(self.anchors[rid], dtype=np.float64)
        m = self.cfg.models
        return encode_mask(mask, self.cfg.dataset.num_classes, m.latent_channels, m.latent_size, self.ignore_index)

    def image_mask(self, mask):
        return resize_nearest(np.asarray(mask), self.cfg.image_size)

    def training_pairs(self):
        for rec in self.dataset.records:
            mask = self.dataset.label_map(rec.id)
            yield self.comp.decoder(self.anchor_latent(rec.id, mask)), self.image_mask(mask)

    @property
    def bank(self) -> ClassFeatureBank:
        if self._bank is None:
            self._bank = build_feature_bank(
                self.training_pairs(), self.comp.extractor, self.cfg.dataset.num_classes,
                self.ignore_index, self.cfg.jobs,
            )
        return self._bank

    def select(self) -> SelectionState:
        sel = self.cfg.selection
        recs = self.dataset.records
        budget = self.cfg.resolve_budget(len(recs))
        stats = compute_class_stats(recs, self.cfg.dataset.num_classes, sel.frequency_mode)
        if sel.strategy == "greedy":
            return select_greedy(recs, stats, budget, sel.temperature)
        if sel.strategy == "uniform":
            return select_uniform(recs, stats, budget)
        return select_random(recs, budget, self.cfg.seed, stats.num_classes)

    def synthesize(self, rid: str, seed: int) -> DistilledSample:
        cfg = self.cfg
        rec = self.dataset[rid]
        mask = self.dataset.label_map(rid)
        cond = build_condition(rec, mask)
        if cfg.sampler.invert:
            inv_pred = ddim.CFGPredictor(self.comp.predictor, cfg.sampler.inversion_cfg_scale)
            z_T = ddim.invert(self.anchor_latent(rid, mask), inv_pred, self.inv_schedule, cond)
        else:
            shape = (cfg.models.latent_channels, *cfg.models.latent_size)
            z_T = np.random.default_rng(seed).standard_normal(shape)
        predictor = ddim.CFGPredictor(self.comp.predictor, cfg.sampler.cfg_scale)
        guide = None
        if cfg.guidance.enabled:
            guide = Guide(
                cfg.guidance, self.schedule, predictor, self.comp.decoder, cond, self.image_mask(mask),
                self.comp.segmenter, self.comp.extractor,
                self.bank if cfg.guidance.lambda_feat > 0 else None, self.ignore_index,
            )
        z0 = ddim.sample(z_T, predictor, self.schedule, cond, guide)
        if not np.isfinite(z0).all():
            raise FloatingPointError("sampling diverged to non-finite values")
        image = self.comp.decoder(z0)
        return DistilledSample(rid, rid, image, relabel(image, self.comp.segmenter), seed, guide.trace if guide else [])

    def run(self, progress: Callable[[str, str], None] | None = None) -> DistillResult:
        timings = {}
        t0 = time.perf_counter()
        selection = self.select()
        timings["selection"] = time.perf_counter() - t0
        if self.cfg.guidance.lambda_feat > 0 and selection.selected:
            t0 = time.perf_counter()
            _ = self.bank
            timings["feature_bank"] = time.perf_counter() - t0

        def one(item):
            k, rid = item
            seed = self.cfg.seed + k
            try:
                out = self.synthesize(rid, seed)
                status = "ok"
            except Exception as exc:  # fail-soft per sample
                log.warning("sample %s failed: %s", rid, exc)
                out = {"id": rid, "seed": seed, "error": f"{type(exc).__name__}: {exc}",
                       "traceback": traceback.format_exc(limit=3)}
                status = "failed"
            if progress:
                progress(rid, status)
            return out

        t0 = time.perf_counter()
        items = list(enumerate(selection.selected))
        if self.cfg.jobs > 1:
            with ThreadPoolExecutor(self.cfg.jobs) as pool:
                outs = list(pool.map(one, items))
        else:
            outs = [one(it) for it in items]
        timings["synthesis"] = time.perf_counter() - t0
        samples = [o for o in outs if isinstance(o, DistilledSample)]
        failures = [o for o in outs if isinstance(o, dict)]
        stats = compute_class_stats(self.dataset.records, self.cfg.dataset.num_classes, self.cfg.selection.frequency_mode)
        return DistillResult(selection, samples, failures, timings, self.cfg, stats)


def distill(dataset: MaskDataset, config: PipelineConfig, **kwargs) -> DistillResult:
    return Distiller(dataset, config, **kwargs).run()


# -- reporting and persistence -----------------------------------------------


def relabeled_coverage(samples, num_classes: int) -> np.ndarray:
    cov = np.zeros(num_classes, dtype=np.int64)
    for s in samples:
        present = np.unique(s.mask)
        cov[present[(present >= 0) & (present < num_classes)]] += 1
    return cov


def report(result: DistillResult, dataset: MaskDataset) -> dict:
    K = dataset.num_classes
    if not result.selection.selected:
        return {"selected": 0, "samples": 0, "failures": 0, "selection": None, "relabeled": None,
                "timings": result.timings}
    considered = result.class_stats.present if result.class_stats is not None else None
    sel_cov = coverage_counts((dataset[i] for i in result.selection.selected), K)
    sel = distribution_report(sel_cov, considered)
    rel = distribution_report(relabeled_coverage(result.samples, K), considered) if result.samples else None
    return {
        "selected": len(result.selection.selected),
        "samples": len(result.samples),
        "failures": len(result.failures),
        "selection": sel.to_json(),
        "relabeled": rel.to_json() if rel else None,
        "timings": result.timings,
    }


def _preview(image: np.ndarray):
    from PIL import Image

    img = np.clip((image + 1.0) * 127.5, 0, 255).round().astype(np.uint8)
    if img.shape[0] >= 3:
        return Image.fromarray(np.ascontiguousarray(img[:3].transpose(1, 2, 0)), mode="RGB")
    return Image.fromarray(img[0], mode="L")


def write_outputs(result: DistillResult, dataset: MaskDataset, out_dir: str | os.PathLike) -> dict:
    out = Path(out_dir)
    for sub in ("images", "previews", "labels"):
        (out / sub).mkdir(parents=True, exist_ok=True)
    for s in result.samples:
        atomic_save_npy(out / "images" / f"{s.id}.npy", s.image)
        atomic_save_image(out / "previews" / f"{s.id}.png", _preview(s.image))
        write_label_map(out / "labels" / f"{s.id}.png", s.mask)
    manifest = {
        # the output location is not part of what was computed
        "config": {k: v for k, v in result.config.to_dict().items() if k != "output"},
        "selection": result.selection.to_manifest(
            considered=result.class_stats.present if result.class_stats is not None else None
        ),
        "samples": [
            {"id": s.id, "source_id": s.source_id, "seed": s.seed,
             "image": f"images/{s.id}.npy", "label": f"labels/{s.id}.png", "trace": s.trace}
            for s in result.samples
        ],
        "failures": result.failures,
    }
    summary = report(result, dataset)
    with atomic_open(out / "manifest.json") as fh:
        json.dump(_jsonable(manifest), fh, indent=1)
        fh.write("\n")
    with atomic_open(out / "report.json") as fh:
        json.dump(_jsonable(summary), fh, indent=1)
        fh.write("\n")
    return summary


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple, set, frozenset)):
        items = sorted(obj) if isinstance(obj, (set, frozenset)) else obj
        return [_jsonable(v) for v in items]
    if isinstance(obj, np.generic):
        return obj.item()
    if isinstance(obj, float) and math.isinf(obj):
        return "inf"
    return obj
