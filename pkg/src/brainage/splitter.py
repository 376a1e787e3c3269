"""Decile age binning, stratified ten-way partitioning, KL-based holdouts.

The dataset is cut into ten partitions stratified on (age bin, project).
The two partitions whose age histograms sit closest to the overall
distribution (smallest KL divergence) become validation and test,
giving the 8:1:1 split.
"""

import json
import math
from dataclasses import dataclass

import numpy as np

from .dataset import Manifest, ScanRecord
from .rng import SplitMix64, derive_seed

N_PARTITIONS = 10


class SplitterError(Exception):
    pass


class DegenerateAgesError(SplitterError):
    pass


class MismatchedBinsError(SplitterError):
    pass


@dataclass(frozen=True)
class AgeBins:
    """Bin edges: [min, 10th..90th percentile, max], duplicates collapsed."""

    edges: tuple

    def __post_init__(self):
        e = tuple(float(x) for x in self.edges)
        if len(e) < 2 or any(a >= b for a, b in zip(e, e[1:])):
            raise DegenerateAgesError(f"edges must be strictly ascending, got {e}")
        object.__setattr__(self, "edges", e)

    @property
    def n_bins(self) -> int:
        return len(self.edges) - 1


def compute_age_bins(ages) -> AgeBins:
    """Decile edges via linear interpolation of order statistics.

    The quantile rule is h = (n-1)p + 1 (1-based) with linear
    interpolation between the bracketing order statistics, i.e. numpy's
    default 'linear' method.
    """
    arr = np.asarray(sorted(ages), dtype=np.float64)
    if arr.size < 2 or arr[0] == arr[-1]:
        raise DegenerateAgesError("need at least two distinct ages")
    qs = np.quantile(arr, np.arange(1, 10) / 10.0, method="linear")
    edges = [float(arr[0])]
    for q in list(qs) + [float(arr[-1])]:
        if q > edges[-1]:
            edges.append(float(q))
    return AgeBins(tuple(edges))


def bin_index(bins: AgeBins, age: float) -> int:
    """Half-open bins [e_i, e_{i+1}); the last bin is closed. Out-of-range clamps."""
    idx = int(np.searchsorted(bins.edges, age, side="right")) - 1
    return min(max(idx, 0), bins.n_bins - 1)


def age_histogram(records, bins: AgeBins) -> np.ndarray:
    counts = np.zeros(bins.n_bins, dtype=np.int64)
    for r in records:
        counts[bin_index(bins, r.age)] += 1
    return counts


def assign_partitions(m: Manifest, bins: AgeBins, seed: int) -> list[list[ScanRecord]]:
    """Deal records into ten partitions, stratified on (age bin, project).

    Each stratum is shuffled (Fisher-Yates over a stream keyed by the
    stratum's content, so record order in the manifest is irrelevant)
    and dealt round-robin starting at the stratum's ordinal mod 10.
    Per-stratum partition counts therefore differ by at most one.
    """
    strata: dict[tuple[int, str], list[ScanRecord]] = {}
    for r in m.records:
        strata.setdefault((bin_index(bins, r.age), r.project), []).append(r)
    partitions: list[list[ScanRecord]] = [[] for _ in range(N_PARTITIONS)]
    for ordinal, key in enumerate(sorted(strata)):
        b, project = key
        members = sorted(strata[key], key=lambda r: r.id)
        SplitMix64(derive_seed(seed, "stratum", b, project)).shuffle(members)
        start = ordinal % N_PARTITIONS
        for j, rec in enumerate(members):
            partitions[(start + j) % N_PARTITIONS].append(rec)
    return partitions


def kl_divergence(p_hist, q_hist, eps: float = 1e-9) -> float:
    """KL(p || q) in nats over add-eps-smoothed, renormalized histograms.

    q is the reference distribution. Always >= 0; exactly 0 iff the
    smoothed distributions coincide.
    """
    p = np.asarray(p_hist, dtype=np.float64)
    q = np.asarray(q_hist, dtype=np.float64)
    if p.shape != q.shape:
        raise MismatchedBinsError(f"histogram shapes differ: {p.shape} vs {q.shape}")

    def smooth(h):
        total = h.sum()
        h = h / total if total > 0 else np.full_like(h, 1.0 / h.size)
        h = h + eps
        return h / h.sum()

    ps, qs = smooth(p), smooth(q)
    return float(np.sum(ps * np.log(ps / qs)))


@dataclass(frozen=True)
class SplitAssignment:
    partition_of: dict
    validation: int
    test: int

    def role(self, record_id: str) -> str:
        p = self.partition_of[record_id]
        if p == self.validation:
            return "validation"
        if p == self.test:
            return "test"
        return "train"

    def ids_with_role(self, role: str) -> list[str]:
        return [rid for rid in self.partition_of if self.role(rid) == role]


def select_holdouts(partitions: list[list[ScanRecord]], bins: AgeBins) -> SplitAssignment:
    """Pick validation and test as the two partitions with smallest KL
    against the overall age histogram; ties break toward lower index.
    """
    if len(partitions) != N_PARTITIONS:
        raise SplitterError(f"expected {N_PARTITIONS} partitions, got {len(partitions)}")
    overall = age_histogram([r for part in partitions for r in part], bins)
    kls = [kl_divergence(age_histogram(part, bins), overall) for part in partitions]
    order = sorted(range(N_PARTITIONS), key=lambda i: (kls[i], i))
    validation, test = order[0], order[1]
    partition_of = {}
    for idx, part in enumerate(partitions):
        for r in part:
            partition_of[r.id] = idx
    return SplitAssignment(partition_of=partition_of, validation=validation, test=test)


def save_assignment(a: SplitAssignment, path) -> None:
    doc = {
        rid: {"partition": p, "role": a.role(rid)}
        for rid, p in sorted(a.partition_of.items())
    }
    with open(path, "w", encoding="utf-8") as f:
        json.dump(doc, f, indent=2)
        f.write("\n")


def load_assignment(path) -> SplitAssignment:
    with open(path, "r", encoding="utf-8") as f:
        doc = json.load(f)
    partition_of = {rid: int(entry["partition"]) for rid, entry in doc.items()}
    validation = test = None
    for rid, entry in doc.items():
        if entry["role"] == "validation":
            validation = partition_of[rid]
        elif entry["role"] == "test":
            test = partition_of[rid]
    if validation is None or test is None:
        raise SplitterError(f"{path}: assignment lacks a validation or test partition")
    return SplitAssignment(partition_of=partition_of, validation=validation, test=test)
