"""Budgeted mask selection: class-balanced greedy plus coreset baselines.

All selectors break ties by the lexicographically lowest record id, so the
output depends only on the record *set*, never on the input order.
"""

from __future__ import annotations

import json
import math
import os
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from ._io import atomic_open
from .masks import ClassStats, MaskRecord, coverage_counts, distribution_report

DEFAULT_TEMPERATURE = 0.5
STRATEGIES = ("greedy", "random", "uniform", "kcenter", "herding")


class SelectionError(ValueError):
    pass


@dataclass
class SelectionState:
    selected: list[str]
    coverage: np.ndarray
    budget: int
    temperature: float | None = None
    strategy: str = "greedy"
    params: dict = field(default_factory=dict)

    def to_manifest(self, num_classes: int | None = None, considered=None) -> dict:
        report = distribution_report(self.coverage, considered) if self.selected else None
        return {
            "strategy": self.strategy,
            "budget": self.budget,
            "params": self.params,
            "selected": list(self.selected),
            "coverage": [int(v) for v in self.coverage],
            "imbalance_factor": report.to_json()["imbalance_factor"] if report else None,
        }


def _check_budget(budget: int, n: int) -> None:
    if budget < 0:
        raise SelectionError(f"budget must be non-negative, got {budget}")
    if budget > n:
        raise SelectionError(f"budget {budget} exceeds dataset size {n}")


def _sorted_records(records: Sequence[MaskRecord]) -> list[MaskRecord]:
    recs = sorted(records, key=lambda r: r.id)
    for a, b in zip(recs, recs[1:]):
        if a.id == b.id:
            raise SelectionError(f"duplicate record id {a.id!r}")
    return recs


def _state_from_ids(ids, records_by_id, num_classes, budget, strategy, **params):
    cov = coverage_counts((records_by_id[i] for i in ids), num_classes)
    return SelectionState(list(ids), cov, budget, params.get("temperature"), strategy, params)


def greedy_score(
    record: MaskRecord, weights: np.ndarray, coverage: np.ndarray, temperature: float
) -> float:
    """Sum of w_c * exp(-n_c / T) over the classes in ``record``.

    Terms are accumulated left to right in ascending class id; ``select_greedy``
    reproduces this order so both agree to the last bit.
    """
    if not temperature > 0:
        raise SelectionError(f"temperature must be positive, got {temperature}")
    score = 0.0
    for c in record.classes:
        score += float(weights[c]) * math.exp(-float(coverage[c]) / temperature)
    return score


def select_greedy(
    records: Sequence[MaskRecord],
    stats: ClassStats,
    budget: int,
    temperature: float = DEFAULT_TEMPERATURE,
) -> SelectionState:
    if not temperature > 0:
        raise SelectionError(f"temperature must be positive, got {temperature}")
    if len(records) == 0:
        raise SelectionError("cannot select from an empty dataset")
    _check_budget(budget, len(records))
    recs = _sorted_records(records)
    K = stats.num_classes
    weights = np.asarray(stats.weights, dtype=np.float64)
    members: dict[int, list[int]] = {}
    for i, rec in enumerate(recs):
        for c in rec.histogram:
            members.setdefault(c, []).append(i)
    # ascending class order reproduces greedy_score's accumulation order;
    # skipped rows would only have added an exact 0.0
    columns = [(c, np.asarray(members[c])) for c in sorted(members)]
    coverage = np.zeros(K, dtype=np.int64)
    available = np.ones(len(recs), dtype=bool)
    selected: list[str] = []

    for _ in range(budget):
        scores = np.zeros(len(recs))
        for c, rows in columns:
            # math.exp, not np.exp: must match greedy_score bit for bit
            scores[rows] += float(weights[c]) * math.exp(-float(coverage[c]) / temperature)
        scores[~available] = -np.inf
        best = int(np.argmax(scores))  # first maximum == lowest id
        available[best] = False
        selected.append(recs[best].id)
        coverage[list(recs[best].histogram)] += 1

    return SelectionState(
        selected, coverage, budget, temperature, "greedy",
        {"temperature": temperature, "frequency_mode": stats.mode},
    )


def select_random(
    records: Sequence[MaskRecord], budget: int, seed: int = 0, num_classes: int | None = None
) -> SelectionState:
    _check_budget(budget, len(records))
    recs = _sorted_records(records)
    rng = np.random.default_rng(seed)
    idx = rng.choice(len(recs), size=budget, replace=False) if budget else []
    ids = [recs[i].id for i in idx]
    K = num_classes if num_classes is not None else _infer_k(recs)
    return _state_from_ids(ids, {r.id: r for r in recs}, K, budget, "random", seed=seed)


def select_uniform(records: Sequence[MaskRecord], stats: ClassStats, budget: int) -> SelectionState:
    """Round-robin over classes from rarest to most frequent, one record per visit."""
    _check_budget(budget, len(records))
    recs = _sorted_records(records)
    freq = stats.image_freq if stats.mode == "image" else stats.pixel_freq
    order = [int(c) for c in np.argsort(freq, kind="stable") if freq[c] > 0]
    pools = {c: [r.id for r in recs if c in r.histogram] for c in order}
    cursor = dict.fromkeys(order, 0)
    taken: set[str] = set()
    ids: list[str] = []
    while len(ids) < budget:
        progressed = False
        for c in order:
            if len(ids) == budget:
                break
            pool = pools[c]
            i = cursor[c]
            while i < len(pool) and pool[i] in taken:
                i += 1
            cursor[c] = i
            if i < len(pool):
                ids.append(pool[i])
                taken.add(pool[i])
                progressed = True
        if not progressed:
            # only class-free records remain
            ids.extend([r.id for r in recs if r.id not in taken][: budget - len(ids)])
            break
    return _state_from_ids(ids, {r.id: r for r in recs}, stats.num_classes, budget, "uniform")


def _infer_k(records) -> int:
    return 1 + max((max(r.histogram) for r in records if r.histogram), default=-1)


# -- feature-space baselines -----------------------------------------------


@dataclass(frozen=True)
class FeatureTable:
    ids: tuple[str, ...]
    features: np.ndarray

    def __post_init__(self):
        feats = np.asarray(self.features, dtype=np.float64)
        if feats.ndim != 2 or feats.shape[0] != len(self.ids):
            raise SelectionError("feature table must be (N, D) with one id per row")
        if len(set(self.ids)) != len(self.ids):
            raise SelectionError("duplicate ids in feature table")
        if not np.isfinite(feats).all():
            raise SelectionError("feature table holds non-finite values")
        object.__setattr__(self, "ids", tuple(self.ids))
        object.__setattr__(self, "features", feats)

    @property
    def dim(self) -> int:
        return self.features.shape[1]

    def sorted(self) -> "FeatureTable":
        order = sorted(range(len(self.ids)), key=self.ids.__getitem__)
        return FeatureTable(tuple(self.ids[i] for i in order), self.features[order])


def write_feature_table(table: FeatureTable, path: str | os.PathLike) -> None:
    with atomic_open(path) as fh:
        fh.write(f"dim {table.dim}\n")
        for rid, row in zip(table.ids, table.features):
            fh.write(rid + " " + " ".join(repr(float(v)) for v in row) + "\n")


def read_feature_table(path: str | os.PathLike) -> FeatureTable:
    ids, rows = [], []
    with open(path, encoding="utf-8") as fh:
        header = fh.readline().split()
        if len(header) != 2 or header[0] != "dim":
            raise SelectionError(f"{path}:1: expected header 'dim <D>'")
        dim = int(header[1])
        for lineno, line in enumerate(fh, 2):
            parts = line.split()
            if not parts:
                continue
            if len(parts) != dim + 1:
                raise SelectionError(f"{path}:{lineno}: expected id and {dim} values")
            try:
                rows.append([float(v) for v in parts[1:]])
            except ValueError as exc:
                raise SelectionError(f"{path}:{lineno}: {exc}") from exc
            ids.append(parts[0])
    return FeatureTable(tuple(ids), np.asarray(rows, dtype=np.float64).reshape(len(ids), dim))


def select_kcenter(
    table: FeatureTable,
    budget: int,
    seed: int | None = None,
    records: Sequence[MaskRecord] | None = None,
    num_classes: int | None = None,
) -> SelectionState:
    """Farthest-point traversal under the Euclidean metric.

    Starts from the lowest id, or from a seeded random point when ``seed`` is
    given.
    """
    _check_budget(budget, len(table.ids))
    tab = table.sorted()
    X = tab.features
    ids: list[int] = []
    if budget:
        start = 0 if seed is None else int(np.random.default_rng(seed).integers(len(tab.ids)))
        ids.append(start)
        mind = np.linalg.norm(X - X[start], axis=1)
        mind[start] = -np.inf
        for _ in range(budget - 1):
            nxt = int(np.argmax(mind))
            ids.append(nxt)
            mind = np.minimum(mind, np.linalg.norm(X - X[nxt], axis=1))
            mind[ids] = -np.inf
    chosen = [tab.ids[i] for i in ids]
    return _feature_state(chosen, records, num_classes, budget, "kcenter", seed=seed)


def select_herding(
    table: FeatureTable,
    budget: int,
    records: Sequence[MaskRecord] | None = None,
    num_classes: int | None = None,
) -> SelectionState:
    """Greedy mean matching: each step adds the point that brings the running
    mean of the selection closest to the full-data mean."""
    if len(table.ids) == 0:
        raise SelectionError("empty feature table")
    _check_budget(budget, len(table.ids))
    tab = table.sorted()
    X = tab.features
    mu = X.mean(axis=0)
    total = np.zeros(X.shape[1])
    available = np.ones(len(X), dtype=bool)
    ids = []
    for k in range(budget):
        dist = np.linalg.norm(mu - (total + X) / (k + 1), axis=1)
        dist[~available] = np.inf
        best = int(np.argmin(dist))
        available[best] = False
        total = total + X[best]
        ids.append(best)
    chosen = [tab.ids[i] for i in ids]
    return _feature_state(chosen, records, num_classes, budget, "herding")


def herding_objective(table: FeatureTable, ids: Sequence[str]) -> float:
    index = {rid: i for i, rid in enumerate(table.ids)}
    X = table.features
    sub = X[[index[i] for i in ids]]
    return float(np.linalg.norm(X.mean(axis=0) - sub.mean(axis=0)))


def _feature_state(chosen, records, num_classes, budget, strategy, **params):
    if records is None:
        return SelectionState(chosen, np.zeros(num_classes or 0, dtype=np.int64), budget, None, strategy, params)
    by_id = {r.id: r for r in records}
    missing = [i for i in chosen if i not in by_id]
    if missing:
        raise SelectionError(f"feature ids without mask records: {missing[:5]}")
    K = num_classes if num_classes is not None else _infer_k(records)
    return _state_from_ids(chosen, by_id, K, budget, strategy, **params)


def budget_from_ratio(ratio: float, n: int) -> int:
    if not 0 < ratio <= 1:
        raise SelectionError(f"ratio must lie in (0, 1], got {ratio}")
    # 1e-9 guards against 0.01 * 20210 landing just under 202
    return int(math.floor(ratio * n + 1e-9))


def write_manifest(manifest: dict, path: str | os.PathLike) -> None:
    with atomic_open(path) as fh:
        json.dump(manifest, fh, indent=2)
        fh.write("\n")
