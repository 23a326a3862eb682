import itertools
import random

import pytest
from hypothesis import given, strategies as st

from fbmesh.core import (
    GroupSet,
    LatencyModel,
    ModelVariant,
    Request,
    Tier,
    Universe,
    UniverseMismatch,
    enumerate_nonempty_proper_subsets,
    sample_lognormal,
    subset_of,
)


def naive_proper_subsets(ids):
    out = []
    for r in range(1, len(ids)):
        out.extend(frozenset(c) for c in itertools.combinations(ids, r))
    return out


class TestSubsetOf:
    def test_examples(self, abc):
        assert subset_of(abc.set_of("A"), abc.full)
        assert not subset_of(abc.set_of("A,B"), abc.set_of("B,C"))
        assert subset_of(abc.empty, abc.empty)

    def test_universe_mismatch(self, abc):
        other = Universe.parse("A,B,C,D")
        with pytest.raises(UniverseMismatch):
            subset_of(abc.set_of("A"), other.set_of("A"))

    @given(st.integers(0, 255), st.integers(0, 255), st.integers(0, 255))
    def test_partial_order(self, a, b, c):
        u = Universe(tuple("ABCDEFGH"))
        x, y, z = GroupSet(a, u), GroupSet(b, u), GroupSet(c, u)
        assert subset_of(x, x)
        if subset_of(x, y) and subset_of(y, x):
            assert x == y
        if subset_of(x, y) and subset_of(y, z):
            assert subset_of(x, z)


class TestEnumerate:
    def test_three_groups(self, abc):
        got = [str(s) for s in enumerate_nonempty_proper_subsets(abc.full)]
        assert got == ["A,B", "A,C", "B,C", "A", "B", "C"]

    def test_single_group(self):
        assert enumerate_nonempty_proper_subsets(Universe.parse("A").full) == []

    def test_two_groups(self):
        u = Universe.parse("A,B")
        assert [str(s) for s in enumerate_nonempty_proper_subsets(u.full)] == ["A", "B"]

    @pytest.mark.parametrize("n", range(1, 17))
    def test_count_matches_powerset(self, n):
        ids = [f"g{i}" for i in range(n)]
        u = Universe(tuple(ids))
        got = enumerate_nonempty_proper_subsets(u.full)
        assert len(got) == 2**n - 2
        if n <= 10:
            assert {frozenset(s) for s in got} == set(naive_proper_subsets(ids))

    def test_deterministic(self):
        u = Universe(tuple("ABCDEF"))
        assert enumerate_nonempty_proper_subsets(u) == enumerate_nonempty_proper_subsets(u)

    def test_order_is_size_then_mask(self):
        u = Universe(tuple("ABCDE"))
        keys = [(-len(s), s.bits) for s in enumerate_nonempty_proper_subsets(u)]
        assert keys == sorted(keys)


class TestGroupSet:
    def test_rendering_is_sorted(self):
        u = Universe.parse("C,A,B")
        assert str(u.set_of("B,C")) == "B,C"
        assert str(u.empty) == ""

    def test_algebra(self, abc):
        ab, bc = abc.set_of("A,B"), abc.set_of("B,C")
        assert str(ab | bc) == "A,B,C"
        assert str(ab & bc) == "B"
        assert str(~ab) == "C"
        assert len(abc.full) == 3

    def test_bits_outside_universe_rejected(self, abc):
        with pytest.raises(ValueError):
            GroupSet(8, abc)

    def test_unknown_group(self, abc):
        with pytest.raises(KeyError):
            abc.set_of("Z")

    def test_universe_cap(self):
        Universe(tuple(f"g{i}" for i in range(64)))
        with pytest.raises(ValueError):
            Universe(tuple(f"g{i}" for i in range(65)))


class TestVariantInvariants:
    def test_client_side_must_be_empty(self, abc):
        with pytest.raises(ValueError):
            ModelVariant("c", abc.set_of("A"), 0.2, Tier.CLIENT_SIDE)

    def test_main_needs_full_universe(self, abc):
        with pytest.raises(ValueError):
            ModelVariant("m", abc.set_of("A,B"), 0.6, Tier.MAIN)

    def test_quality_range(self, abc):
        with pytest.raises(ValueError):
            ModelVariant("f", abc.set_of("A"), 1.2, Tier.GROUP_FALLBACK)

    def test_negative_amount(self):
        with pytest.raises(ValueError):
            Request("r", -1, {})


class TestLatency:
    def test_degenerate_lognormal(self):
        import math

        assert sample_lognormal(random.Random(1), 3.0, 0.0) == math.exp(3.0)

    def test_spike_multiplier(self):
        a = sample_lognormal(random.Random(5), 3.0, 0.5)
        b = sample_lognormal(random.Random(5), 3.0, 0.5, multiplier=5.0)
        assert b == pytest.approx(5 * a)

    def test_seeded_sequence_repeats(self):
        r1, r2 = random.Random(42), random.Random(42)
        assert [sample_lognormal(r1, 1.0, 0.7) for _ in range(50)] == [sample_lognormal(r2, 1.0, 0.7) for _ in range(50)]

    def test_mean_matches_closed_form(self):
        import math

        rng = random.Random(2024)
        loc, scale = math.log(40.0), 0.5
        draws = [sample_lognormal(rng, loc, scale) for _ in range(100_000)]
        expected = math.exp(loc + scale**2 / 2)
        assert abs(sum(draws) / len(draws) - expected) / expected < 0.02

    def test_injected_cycles(self):
        m = LatencyModel("injected", values_ms=(5.0, 7.0))
        assert [m.sample(random.Random(0), i) for i in range(4)] == [5.0, 7.0, 5.0, 7.0]

    def test_bad_failure_prob(self):
        with pytest.raises(ValueError):
            LatencyModel("constant", value_ms=1.0, failure_prob=1.5)

    def test_round_trip(self):
        m = LatencyModel("lognormal", location=3.2, scale=0.4, failure_prob=0.1)
        assert LatencyModel.from_dict(m.to_dict()) == m
