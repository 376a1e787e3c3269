import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from brainage.dataset import Manifest, ScanRecord, Sex
from brainage.splitter import (
    AgeBins,
    DegenerateAgesError,
    MismatchedBinsError,
    age_histogram,
    assign_partitions,
    bin_index,
    compute_age_bins,
    kl_divergence,
    load_assignment,
    save_assignment,
    select_holdouts,
)


def rec(i, age, project="P"):
    return ScanRecord(
        id=f"r{i:05d}", age=float(age), sex=Sex(i % 2), project=project,
        t1w_path="t.nii", aicbv_path="a.nii",
    )


def kl_oracle(p_counts, q_counts, eps=1e-9):
    """Independent direct-formula KL with the same smoothing contract."""
    def norm(h):
        total = sum(h)
        h = [x / total if total else 1.0 / len(h) for x in h]
        h = [x + eps for x in h]
        s = sum(h)
        return [x / s for x in h]

    p, q = norm(list(p_counts)), norm(list(q_counts))
    return math.fsum(pi * math.log(pi / qi) for pi, qi in zip(p, q))


class TestAgeBins:
    def test_interpolated_first_decile(self):
        # oracle: h = (n-1)p + 1 = 1.4 -> 10 + 0.4*(20-10) = 14
        bins = compute_age_bins([10, 20, 30, 40, 50])
        assert bins.edges[0] == 10.0
        assert bins.edges[1] == pytest.approx(14.0)
        assert bins.edges[-1] == 50.0

    def test_median_exact_for_odd_n(self):
        ages = [3.0, 7.0, 11.0, 19.0, 23.0, 31.0, 44.0]
        bins = compute_age_bins(ages)
        assert 19.0 in bins.edges  # p=0.5 lands exactly on the middle element

    def test_degenerate_ages(self):
        with pytest.raises(DegenerateAgesError):
            compute_age_bins([5.0, 5.0, 5.0])

    def test_duplicate_edges_collapse(self):
        bins = compute_age_bins([1.0] * 50 + [2.0])
        assert len(bins.edges) >= 2
        assert all(a < b for a, b in zip(bins.edges, bins.edges[1:]))

    def test_eleven_edges_for_spread_ages(self):
        bins = compute_age_bins(list(range(100)))
        assert len(bins.edges) == 11
        assert bins.n_bins == 10


class TestBinIndex:
    def test_max_in_last_bin(self):
        bins = AgeBins((0.0, 10.0, 20.0))
        assert bin_index(bins, 20.0) == 1

    def test_edge_belongs_to_upper_bin(self):
        bins = AgeBins((0.0, 10.0, 20.0))
        assert bin_index(bins, 10.0) == 1

    def test_just_below_edge(self):
        bins = AgeBins((0.0, 10.0, 20.0))
        assert bin_index(bins, 9.99) == 0

    def test_clamping(self):
        bins = AgeBins((0.0, 10.0, 20.0))
        assert bin_index(bins, -5.0) == 0
        assert bin_index(bins, 25.0) == 1


class TestAssignPartitions:
    def test_single_stratum_even_deal(self):
        m = Manifest(tuple(rec(i, 30.0) for i in range(100)))
        bins = AgeBins((0.0, 100.0))
        parts = assign_partitions(m, bins, seed=1)
        assert [len(p) for p in parts] == [10] * 10

    def test_deterministic(self):
        m = Manifest(tuple(rec(i, 20.0 + i % 37) for i in range(80)))
        bins = compute_age_bins(m.ages())
        a = assign_partitions(m, bins, seed=7)
        b = assign_partitions(m, bins, seed=7)
        assert [[r.id for r in p] for p in a] == [[r.id for r in p] for p in b]

    def test_stratum_ordinal_offset(self):
        # oracle: simulate the dealing rule. Five projects -> five strata in one
        # age bin; the fifth (ordinal 4) holds 3 records -> partitions 4, 5, 6.
        records = []
        i = 0
        for proj in ["A", "B", "C", "D"]:
            records.append(rec(i, 30.0, proj))
            i += 1
        for _ in range(3):
            records.append(rec(i, 30.0, "E"))
            i += 1
        parts = assign_partitions(Manifest(tuple(records)), AgeBins((0.0, 100.0)), seed=0)
        e_partitions = sorted(
            idx for idx, p in enumerate(parts) for r in p if r.project == "E"
        )
        assert e_partitions == [4, 5, 6]

    def test_disjoint_cover_any_seed(self):
        m = Manifest(tuple(rec(i, 10.0 + (i * 13) % 80, f"p{i % 3}") for i in range(173)))
        bins = compute_age_bins(m.ages())
        for seed in (0, 1, 99):
            parts = assign_partitions(m, bins, seed)
            ids = [r.id for p in parts for r in p]
            assert len(ids) == len(m)
            assert set(ids) == {r.id for r in m}

    def test_within_stratum_counts_differ_at_most_one(self):
        m = Manifest(tuple(rec(i, 10.0 + (i * 7) % 80, f"p{i % 4}") for i in range(250)))
        bins = compute_age_bins(m.ages())
        parts = assign_partitions(m, bins, seed=3)
        strata = {}
        for idx, p in enumerate(parts):
            for r in p:
                key = (bin_index(bins, r.age), r.project)
                strata.setdefault(key, [0] * 10)[idx] += 1
        for counts in strata.values():
            assert max(counts) - min(counts) <= 1

    def test_record_order_irrelevant(self):
        records = tuple(rec(i, 10.0 + (i * 13) % 80, f"p{i % 3}") for i in range(60))
        bins = compute_age_bins([r.age for r in records])
        a = assign_partitions(Manifest(records), bins, seed=5)
        b = assign_partitions(Manifest(tuple(reversed(records))), bins, seed=5)
        assert [sorted(r.id for r in p) for p in a] == [sorted(r.id for r in p) for p in b]


class TestKlDivergence:
    def test_identical_is_zero(self):
        assert kl_divergence([3, 5, 2], [3, 5, 2]) == pytest.approx(0.0, abs=1e-12)

    def test_half_half_vs_quarter(self):
        # oracle: 0.5*ln 2 + 0.5*ln(2/3) = 0.14384
        got = kl_divergence([50, 50], [25, 75])
        assert got == pytest.approx(0.5 * math.log(2) + 0.5 * math.log(2 / 3), abs=1e-4)
        assert got == pytest.approx(0.14384, abs=1e-4)

    def test_zero_reference_bin_stays_finite(self):
        assert math.isfinite(kl_divergence([10, 0], [0, 10]))

    def test_mismatched_bins(self):
        with pytest.raises(MismatchedBinsError):
            kl_divergence([1, 2], [1, 2, 3])

    @given(
        st.lists(st.integers(0, 50), min_size=2, max_size=8),
        st.lists(st.integers(0, 50), min_size=2, max_size=8),
    )
    def test_nonnegative_and_matches_oracle(self, p, q):
        n = min(len(p), len(q))
        p, q = p[:n], q[:n]
        got = kl_divergence(p, q)
        assert got >= -1e-15
        assert got == pytest.approx(kl_oracle(p, q), abs=1e-12)


class TestSelectHoldouts:
    def test_tie_break_lowest_indices(self):
        parts = [[rec(10 * i + j, 5.0 + 10 * (j % 2)) for j in range(4)] for i in range(10)]
        bins = AgeBins((0.0, 10.0, 20.0))
        a = select_holdouts(parts, bins)
        assert a.validation == 0
        assert a.test == 1

    def test_exact_match_becomes_validation(self):
        # partitions 0-4 all low bin, 5-8 all high bin, 9 proportional to overall
        bins = AgeBins((0.0, 10.0, 20.0))
        parts = []
        i = 0

        def batch(low, high):
            nonlocal i
            out = []
            for _ in range(low):
                out.append(rec(i, 5.0)); i += 1
            for _ in range(high):
                out.append(rec(i, 15.0)); i += 1
            return out

        for _ in range(5):
            parts.append(batch(2, 0))
        for _ in range(4):
            parts.append(batch(0, 2))
        parts.append(batch(5, 4))  # overall is (15, 12) = 3*(5, 4)
        a = select_holdouts(parts, bins)
        assert a.validation == 9

    def test_matches_bruteforce_ordering(self):
        rng = np.random.default_rng(12)
        bins = AgeBins((0.0, 10.0, 20.0, 30.0))
        parts = []
        i = 0
        for _ in range(10):
            part = []
            for age in rng.choice([5.0, 15.0, 25.0], size=rng.integers(3, 12)):
                part.append(rec(i, float(age))); i += 1
            parts.append(part)
        a = select_holdouts(parts, bins)
        overall = age_histogram([r for p in parts for r in p], bins)
        kls = [kl_oracle(age_histogram(p, bins), overall) for p in parts]
        order = sorted(range(10), key=lambda k: (kls[k], k))
        assert a.validation == order[0]
        assert a.test == order[1]

    def test_roles_and_serialization(self, tmp_path):
        parts = [[rec(10 * i + j, 20.0 + i + j) for j in range(3)] for i in range(10)]
        bins = AgeBins((0.0, 50.0))
        a = select_holdouts(parts, bins)
        roles = {a.role(r.id) for p in parts for r in p}
        assert roles == {"train", "validation", "test"}
        assert a.validation != a.test
        n_val = len(a.ids_with_role("validation"))
        n_test = len(a.ids_with_role("test"))
        n_train = len(a.ids_with_role("train"))
        assert (n_train, n_val, n_test) == (24, 3, 3)
        path = tmp_path / "assignment.json"
        save_assignment(a, path)
        b = load_assignment(path)
        assert b.partition_of == a.partition_of
        assert (b.validation, b.test) == (a.validation, a.test)
