"""Synthetic long-tailed label data for tests and experiments."""

from __future__ import annotations

import numpy as np

from .masks import MaskRecord


def zipf_records(
    num_records: int,
    num_classes: int,
    rng: np.random.Generator,
    exponent: float = 1.0,
    mean_extra_classes: float = 3.0,
    pixels: int = 64 * 64,
) -> list[MaskRecord]:
    """Records whose class sets follow Zipf-distributed class popularity.

    Each record holds 1 + Poisson(``mean_extra_classes``) distinct classes
    drawn without replacement with probability proportional to
    ``1 / (class + 1) ** exponent``; pixels are split at random among them.
    """
    logp = -exponent * np.log(np.arange(1, num_classes + 1))
    width = int(np.sqrt(pixels))
    height = pixels // width
    total = width * height
    ks = np.minimum(1 + rng.poisson(mean_extra_classes, size=num_records), num_classes)
    # Gumbel top-k == sequential sampling without replacement proportional to p
    keys = logp + rng.gumbel(size=(num_records, num_classes))
    order = np.argsort(-keys, axis=1)
    # floor of 0.05 keeps every listed class at >= 1 pixel for K <= 200
    shares = (rng.random((num_records, num_classes)) + 0.05) * (np.arange(num_classes) < ks[:, None])
    counts = np.floor(shares / shares.sum(axis=1, keepdims=True) * total).astype(np.int64)
    counts[:, 0] += total - counts.sum(axis=1)
    order, counts, ks = order.tolist(), counts.tolist(), ks.tolist()
    ndigits = len(str(num_records))
    records = [
        MaskRecord(f"r{i:0{ndigits}d}", width, height, dict(zip(order[i][: ks[i]], counts[i][: ks[i]])))
        for i in range(num_records)
    ]
    return records


def random_label_map(rng: np.random.Generator, shape, num_classes: int, ignore_index: int = 255, p_ignore=0.1):
    labels = rng.integers(0, num_classes, size=shape)
    if p_ignore:
        labels = np.where(rng.random(shape) < p_ignore, ignore_index, labels)
    return labels


def blob_label_map(rng: np.random.Generator, shape, num_classes: int, max_blobs: int = 4):
    """Piecewise-constant map: background class plus a few rectangles."""
    h, w = shape
    labels = np.full(shape, rng.integers(num_classes), dtype=np.int64)
    for _ in range(rng.integers(1, max_blobs + 1)):
        r0, c0 = rng.integers(0, h), rng.integers(0, w)
        r1, c1 = rng.integers(r0 + 1, h + 1), rng.integers(c0 + 1, w + 1)
        labels[r0:r1, c0:c1] = rng.integers(num_classes)
    return labels
