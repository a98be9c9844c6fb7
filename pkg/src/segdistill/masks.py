"""Label-map ingestion, long-tail class statistics and the histogram cache."""

from __future__ import annotations

import json
import math
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np

from ._io import atomic_open

DEFAULT_IGNORE_INDEX = 255
LABEL_SUFFIXES = (".png", ".tif", ".tiff", ".bmp", ".npy")


class DatasetError(ValueError):
    """Invalid label data or an unusable dataset."""


class CacheParseError(DatasetError):
    def __init__(self, path, lineno: int, reason: str):
        super().__init__(f"{path}:{lineno}: {reason}")
        self.lineno = lineno


@dataclass(frozen=True)
class MaskRecord:
    """One label map reduced to its per-class pixel histogram.

    ``histogram`` only holds classes with a positive count, so its keys are
    exactly the class set of the mask.
    """

    id: str
    width: int
    height: int
    histogram: Mapping[int, int]
    ignored_pixels: int = 0

    def __post_init__(self):
        hist = {int(c): int(n) for c, n in sorted(self.histogram.items())}
        if any(n <= 0 for n in hist.values()):
            raise DatasetError(f"record {self.id!r}: histogram counts must be positive")
        if any(c < 0 for c in hist):
            raise DatasetError(f"record {self.id!r}: negative class id")
        if sum(hist.values()) + self.ignored_pixels != self.width * self.height:
            raise DatasetError(
                f"record {self.id!r}: histogram + ignored != {self.width}x{self.height}"
            )
        object.__setattr__(self, "histogram", hist)

    @property
    def classes(self) -> tuple[int, ...]:
        return tuple(self.histogram)

    def to_json(self) -> dict:
        return {
            "id": self.id,
            "width": self.width,
            "height": self.height,
            "histogram": {str(c): n for c, n in self.histogram.items()},
            "ignored": self.ignored_pixels,
        }

    @classmethod
    def from_json(cls, obj: dict) -> "MaskRecord":
        return cls(
            id=str(obj["id"]),
            width=int(obj["width"]),
            height=int(obj["height"]),
            histogram={int(c): int(n) for c, n in obj["histogram"].items()},
            ignored_pixels=int(obj.get("ignored", 0)),
        )


@dataclass(frozen=True)
class ClassStats:
    num_classes: int
    image_freq: np.ndarray
    pixel_freq: np.ndarray
    weights: np.ndarray
    num_records: int
    mode: str = "image"

    @property
    def present(self) -> np.ndarray:
        return self.image_freq > 0


@dataclass
class DistributionReport:
    coverage: np.ndarray
    imbalance_factor: float
    min_coverage: int
    max_coverage: int
    classes_missing: list[int] = field(default_factory=list)
    mode: str = "image"

    def to_json(self) -> dict:
        return {
            "mode": self.mode,
            "coverage": [int(v) for v in self.coverage],
            "imbalance_factor": _json_float(self.imbalance_factor),
            "min_coverage": int(self.min_coverage),
            "max_coverage": int(self.max_coverage),
            "classes_missing": list(self.classes_missing),
        }

    def summary(self) -> str:
        if_str = "inf" if math.isinf(self.imbalance_factor) else f"{self.imbalance_factor:.2f}"
        return (
            f"classes={len(self.coverage)} IF={if_str} "
            f"min={self.min_coverage} max={self.max_coverage} missing={len(self.classes_missing)}"
        )


def _json_float(x: float):
    return "inf" if math.isinf(x) else float(x)


def ingest_label_map(
    pixels: np.ndarray,
    num_classes: int,
    id: str,
    ignore_index: int = DEFAULT_IGNORE_INDEX,
) -> MaskRecord:
    pixels = np.asarray(pixels)
    if pixels.ndim != 2:
        raise DatasetError(f"{id}: label map must be 2-D, got shape {pixels.shape}")
    if not np.issubdtype(pixels.dtype, np.integer):
        raise DatasetError(f"{id}: label map must hold integers, got {pixels.dtype}")
    flat = pixels.astype(np.int64).ravel()
    valid = flat != ignore_index
    bad = valid & ((flat < 0) | (flat >= num_classes))
    if bad.any():
        pos = int(np.flatnonzero(bad)[0])
        row, col = divmod(pos, pixels.shape[1])
        raise DatasetError(
            f"{id}: class index {int(flat[pos])} at (row={row}, col={col}) "
            f"outside [0, {num_classes})"
        )
    counts = np.bincount(flat[valid], minlength=num_classes)
    hist = {int(c): int(counts[c]) for c in np.flatnonzero(counts)}
    h, w = pixels.shape
    return MaskRecord(id=id, width=w, height=h, histogram=hist, ignored_pixels=int((~valid).sum()))


def compute_class_stats(
    records: Sequence[MaskRecord], num_classes: int, mode: str = "image"
) -> ClassStats:
    """Class frequencies and inverse-frequency weights.

    ``mode="image"`` counts records containing a class, ``mode="pixel"``
    counts pixels. Classes absent from the data get weight 0.
    """
    if mode not in ("image", "pixel"):
        raise ValueError(f"unknown frequency mode {mode!r}")
    if len(records) == 0:
        raise DatasetError("empty dataset: no records to compute class statistics")
    image_freq = np.zeros(num_classes, dtype=np.int64)
    pixel_freq = np.zeros(num_classes, dtype=np.int64)
    for rec in records:
        for c, n in rec.histogram.items():
            if c >= num_classes:
                raise DatasetError(f"record {rec.id!r} has class {c} >= K={num_classes}")
            image_freq[c] += 1
            pixel_freq[c] += n
    freq = image_freq if mode == "image" else pixel_freq
    weights = np.zeros(num_classes, dtype=np.float64)
    nz = freq > 0
    weights[nz] = 1.0 / freq[nz]
    return ClassStats(num_classes, image_freq, pixel_freq, weights, len(records), mode)


def imbalance_factor(coverage: Sequence[float], restrict_to_present: bool = False) -> float:
    """Ratio of the largest to the smallest class coverage.

    Returns ``inf`` when a considered class has zero coverage. With
    ``restrict_to_present`` zero-coverage classes are dropped first.
    """
    cov = np.asarray(coverage, dtype=np.float64)
    if cov.size == 0 or not (cov > 0).any():
        raise DatasetError("imbalance factor undefined: all coverage counts are zero")
    if restrict_to_present:
        cov = cov[cov > 0]
    lo = cov.min()
    if lo == 0:
        return math.inf
    return float(cov.max() / lo)


def coverage_counts(
    records: Iterable[MaskRecord], num_classes: int, mode: str = "image"
) -> np.ndarray:
    cov = np.zeros(num_classes, dtype=np.int64)
    for rec in records:
        for c, n in rec.histogram.items():
            cov[c] += 1 if mode == "image" else n
    return cov


def distribution_report(
    coverage: Sequence[int],
    considered: Sequence[bool] | None = None,
    mode: str = "image",
) -> DistributionReport:
    """Summarise coverage over the ``considered`` classes (default: all)."""
    cov = np.asarray(coverage, dtype=np.int64)
    mask = np.ones(cov.shape, bool) if considered is None else np.asarray(considered, bool)
    sub = cov[mask]
    missing = [int(c) for c in np.flatnonzero(mask & (cov == 0))]
    if sub.size == 0 or not (sub > 0).any():
        return DistributionReport(cov, math.inf, 0, 0, missing, mode)
    return DistributionReport(
        coverage=cov,
        imbalance_factor=imbalance_factor(sub),
        min_coverage=int(sub.min()),
        max_coverage=int(sub.max()),
        classes_missing=missing,
        mode=mode,
    )


# -- histogram cache ---------------------------------------------------------


def dumps_record(rec: MaskRecord) -> str:
    return json.dumps(rec.to_json(), separators=(",", ":"))


def write_histogram_cache(records: Iterable[MaskRecord], path: str | os.PathLike) -> None:
    with atomic_open(path) as fh:
        for rec in records:
            fh.write(dumps_record(rec))
            fh.write("\n")


def read_histogram_cache(path: str | os.PathLike) -> list[MaskRecord]:
    records = []
    seen = set()
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                rec = MaskRecord.from_json(json.loads(line))
            except (json.JSONDecodeError, KeyError, TypeError, AttributeError, ValueError) as exc:
                raise CacheParseError(path, lineno, str(exc) or type(exc).__name__) from exc
            if rec.id in seen:
                raise CacheParseError(path, lineno, f"duplicate record id {rec.id!r}")
            seen.add(rec.id)
            records.append(rec)
    return records


# -- label-map directories ---------------------------------------------------


def read_label_map(path: str | os.PathLike) -> np.ndarray:
    path = Path(path)
    if path.suffix == ".npy":
        arr = np.load(path, allow_pickle=False)
    else:
        from PIL import Image

        with Image.open(path) as im:
            if im.mode not in ("L", "P", "I", "I;16", "I;16B", "I;16L"):
                raise DatasetError(f"{path}: expected a single-channel index image, got mode {im.mode}")
            arr = np.array(im)
    if arr.ndim != 2:
        raise DatasetError(f"{path}: expected a 2-D label map, got shape {arr.shape}")
    return arr


def write_label_map(path: str | os.PathLike, labels: np.ndarray) -> None:
    from PIL import Image

    from ._io import atomic_save_image

    labels = np.asarray(labels)
    if labels.min(initial=0) < 0:
        raise DatasetError("label maps cannot hold negative values")
    if labels.max(initial=0) <= 255:
        im = Image.fromarray(labels.astype(np.uint8), mode="L")
    else:
        im = Image.fromarray(labels.astype(np.uint16))
    atomic_save_image(path, im)


def list_label_files(root: str | os.PathLike) -> list[Path]:
    root = Path(root)
    if not root.is_dir():
        raise DatasetError(f"{root}: not a directory")
    files = sorted(p for p in root.iterdir() if p.suffix.lower() in LABEL_SUFFIXES)
    stems = [p.stem for p in files]
    if len(set(stems)) != len(stems):
        raise DatasetError(f"{root}: several label files share an id")
    return files


class MaskDataset:
    """Histogram records plus lazy access to the dense label maps behind them."""

    def __init__(
        self,
        records: Sequence[MaskRecord],
        num_classes: int,
        loader: Callable[[str], np.ndarray] | None = None,
        ignore_index: int = DEFAULT_IGNORE_INDEX,
    ):
        self.records = list(records)
        self.num_classes = num_classes
        self.ignore_index = ignore_index
        self._loader = loader
        self._by_id = {r.id: r for r in self.records}
        if len(self._by_id) != len(self.records):
            raise DatasetError("duplicate record ids")

    def __len__(self):
        return len(self.records)

    def __getitem__(self, rid: str) -> MaskRecord:
        return self._by_id[rid]

    def label_map(self, rid: str) -> np.ndarray:
        if self._loader is None:
            raise DatasetError("dataset was built from a histogram cache; dense label maps unavailable")
        return self._loader(rid)

    @property
    def has_label_maps(self) -> bool:
        return self._loader is not None

    @classmethod
    def from_arrays(
        cls, maps: Mapping[str, np.ndarray], num_classes: int, ignore_index: int = DEFAULT_IGNORE_INDEX
    ) -> "MaskDataset":
        maps = {k: np.asarray(v) for k, v in maps.items()}
        records = [ingest_label_map(maps[k], num_classes, k, ignore_index) for k in sorted(maps)]
        return cls(records, num_classes, maps.__getitem__, ignore_index)

    @classmethod
    def from_directory(
        cls, root: str | os.PathLike, num_classes: int, ignore_index: int = DEFAULT_IGNORE_INDEX
    ) -> "MaskDataset":
        files = {p.stem: p for p in list_label_files(root)}
        records = [
            ingest_label_map(read_label_map(p), num_classes, rid, ignore_index)
            for rid, p in files.items()
        ]
        return cls(records, num_classes, lambda rid: read_label_map(files[rid]), ignore_index)

    @classmethod
    def from_cache(cls, path: str | os.PathLike, num_classes: int) -> "MaskDataset":
        return cls(read_histogram_cache(path), num_classes)
