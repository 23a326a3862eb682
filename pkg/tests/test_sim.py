import json
import math

import numpy as np
import pytest

from conftest import const
from oracles import brute_best
from fbmesh.config import ConfigError
from fbmesh.core import Tier
from fbmesh.policy import RetryPolicy
from fbmesh.sim import (
    METRICS_COLUMNS,
    Burst,
    Outage,
    Scenario,
    arrival_times,
    percentile_nearest_rank,
    run_scenario,
    scenario_from_dict,
)

POLICY = RetryPolicy(300, 100, 0)


def scenario(catalog, **kw) -> Scenario:
    base = dict(duration_ms=600_000, base_rate_per_s=2.0, catalog=catalog, policy=POLICY, seed=11)
    base.update(kw)
    return Scenario(**base)


class TestPercentile:
    def test_hundred(self):
        assert percentile_nearest_rank(list(range(1, 101)), 99) == 99

    @pytest.mark.parametrize("p", [0.1, 50, 99, 100])
    def test_single(self, p):
        assert percentile_nearest_rank([7], p) == 7

    def test_median_of_two(self):
        assert percentile_nearest_rank([5, 1], 50) == 1

    def test_max(self):
        assert percentile_nearest_rank([3, 9, 4], 100) == 9

    def test_empty(self):
        with pytest.raises(ValueError):
            percentile_nearest_rank([], 50)

    @pytest.mark.parametrize("p", [0, 101])
    def test_bad_p(self, p):
        with pytest.raises(ValueError):
            percentile_nearest_rank([1], p)

    @pytest.mark.parametrize("n", [1, 2, 3, 10, 37, 200])
    @pytest.mark.parametrize("p", [1, 25, 50, 90, 99, 100])
    def test_against_counting_definition(self, n, p):
        xs = list(np.random.default_rng(n).permutation(n) * 1.5)
        got = percentile_nearest_rank(xs, p)
        # smallest sample with at least p% of the data at or below it
        want = min(x for x in xs if sum(y <= x for y in xs) * 100 >= p * n)
        assert got == want


def test_zero_duration_is_empty(ref_catalog):
    res = run_scenario(scenario(ref_catalog, duration_ms=0))
    assert res.outcomes == [] and res.report.windows == []
    assert res.report.to_csv() == ",".join(METRICS_COLUMNS) + "\n"
    assert res.report.summary()["request_count"] == 0


def test_constant_latency_is_all_main(ref_catalog):
    res = run_scenario(scenario(ref_catalog, default_latency=const(40)))
    assert res.outcomes
    for w in res.report.windows:
        assert w.frac_main == 1.0 and w.sla_miss_rate == 0.0 and w.timeout_rate == 0.0
        assert w.p99_latency_ms == 40.0
        assert w.weighted_quality == pytest.approx(0.62, abs=1e-12)


def test_group_outage_routes_to_best_remaining(ref_catalog, abc):
    sc = scenario(ref_catalog, default_latency=const(40), outages=(Outage("B", 0, 600_000, "Unavailable"),))
    res = run_scenario(sc)
    want = brute_best(ref_catalog.variants, abc.set_of("A,C")).variant_id
    assert want == "F(A,C)"
    assert {o.variant_id for o in res.outcomes} == {want}
    assert all(w.frac_fallback == 1.0 for w in res.report.windows)


def test_corruption_behaves_like_unavailability(ref_catalog):
    runs = [
        run_scenario(scenario(ref_catalog, default_latency=const(40), outages=(Outage("C", 0, 600_000, mode),)))
        for mode in ("Unavailable", "Corrupted")
    ]
    assert [o.variant_id for o in runs[0].outcomes] == [o.variant_id for o in runs[1].outcomes]
    assert {o.variant_id for o in runs[0].outcomes} == {"F(A,B)"}


def test_backend_down_breaker_opens(ref_catalog):
    sc = scenario(ref_catalog, default_latency=const(40), outages=(Outage("main", 0, 600_000, "BackendDown"),))
    res = run_scenario(sc)
    later = [o for o, r in zip(res.outcomes, res.requests) if r.arrival_time > 60_000]
    # once the breaker is open, main is skipped except for half-open probes
    skipped = sum(not any(a.variant_id == "main" for a in o.attempts) for o in later)
    assert skipped > 0.9 * len(later)
    assert res.report.totals.sla_miss_rate == 0.0


def test_determinism(ref_catalog, tmp_path):
    sc = scenario(ref_catalog, bursts=(Burst(100_000, 200_000, 4.0),),
                  outages=(Outage("main", 300_000, 400_000, "LatencySpike", 5.0),))
    for d in ("a", "b"):
        run_scenario(sc).write(tmp_path / d)
    for name in ("metrics.csv", "outcomes.jsonl", "summary.json"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()
    other = run_scenario(sc.with_seed(12))
    assert other.outcomes_jsonl() != run_scenario(sc).outcomes_jsonl()


def test_conservation(ref_catalog):
    res = run_scenario(scenario(ref_catalog, base_rate_per_s=5.0))
    ids = [o.request_id for o in res.outcomes]
    assert ids == [r.request_id for r in res.requests]
    assert len(set(ids)) == len(ids)
    assert sum(w.request_count for w in res.report.windows) == len(ids)


def test_fractions_sum_to_one(ref_catalog):
    sc = scenario(ref_catalog, outages=(Outage("main", 0, 300_000, "LatencySpike", 8.0),
                                          Outage("A", 100_000, 500_000, "Unavailable")))
    for w in run_scenario(sc).report.windows:
        assert w.frac_main + w.frac_fallback + w.frac_clientside == pytest.approx(1.0, abs=1e-9)


def test_weighted_quality_is_tier_mix_dot_product(ref_catalog):
    sc = scenario(ref_catalog, outages=(Outage("main", 0, 600_000, "LatencySpike", 4.0),))
    res = run_scenario(sc)
    counts = res.report.summary()["variant_counts"]
    n = sum(counts.values())
    want = sum(c / n * ref_catalog.get(v).quality for v, c in counts.items())
    assert res.report.totals.weighted_quality == pytest.approx(want, abs=1e-9)


def test_outage_lifts_p99(ref_catalog):
    calm = run_scenario(scenario(ref_catalog))
    spiky = run_scenario(scenario(ref_catalog, outages=(Outage("main", 0, 600_000, "LatencySpike", 5.0),)))
    assert spiky.report.totals.p99_latency_ms > calm.report.totals.p99_latency_ms


def test_burst_raises_window_count(ref_catalog):
    rate, mult, win = 5.0, 6.0, 300_000
    sc = scenario(ref_catalog, duration_ms=3 * win, base_rate_per_s=rate,
                  bursts=(Burst(win, 2 * win, mult),), window_ms=win)
    for seed in range(5):
        t = arrival_times(sc.with_seed(seed))
        counts = np.histogram(t, bins=[0, win, 2 * win, 3 * win])[0]
        base_mean = rate * win / 1000
        for count, mean in zip(counts, [base_mean, base_mean * mult, base_mean]):
            assert abs(count - mean) <= 3 * math.sqrt(mean)


def test_overlapping_bursts_multiply(ref_catalog):
    sc = scenario(ref_catalog, duration_ms=100_000, base_rate_per_s=10.0,
                  bursts=(Burst(0, 100_000, 2.0), Burst(0, 100_000, 3.0)))
    mean = 10.0 * 6 * 100
    assert abs(len(arrival_times(sc)) - mean) <= 3 * math.sqrt(mean)


def test_outcome_log_shape(ref_catalog):
    res = run_scenario(scenario(ref_catalog, duration_ms=10_000))
    first = json.loads(res.outcomes_jsonl().splitlines()[0])
    assert set(first) == {"request_id", "score", "tier", "variant", "attempts", "elapsed_ms", "hedged"}


def test_ablation_has_unscored_requests(ref_catalog):
    sc = scenario(ref_catalog, outages=(Outage("main", 0, 600_000, "BackendDown"),))
    res = run_scenario(sc, ablate_fallback=True)
    assert res.report.totals.sla_miss_rate == 1.0
    assert all(o.tier in (None, Tier.MAIN) for o in res.outcomes)


class TestScenarioConfig:
    def doc(self, ref_catalog, **kw):
        d = {"schema_version": 1, "duration_ms": 1000, "catalog": ref_catalog.to_dict(),
             "arrivals": {"base_rate_per_s": 3}, "seed": 4}
        d.update(kw)
        return d

    def test_round_trip(self, ref_catalog):
        sc = scenario_from_dict(self.doc(ref_catalog, outages=[
            {"target": "main", "start_ms": 0, "end_ms": 500, "mode": "LatencySpike", "multiplier": 3}]))
        assert sc.outages[0].multiplier == 3.0 and sc.seed == 4 and sc.base_rate_per_s == 3.0

    def test_catalog_file(self, ref_catalog, tmp_path):
        ref_catalog.dump(tmp_path / "cat.json")
        d = self.doc(ref_catalog)
        del d["catalog"]
        d["catalog_file"] = "cat.json"
        assert scenario_from_dict(d, tmp_path).catalog == ref_catalog

    @pytest.mark.parametrize(
        "patch,field",
        [
            ({"schema_version": 9}, "schema_version"),
            ({"arrivals": {"base_rate_per_s": 0}}, "arrivals.base_rate_per_s"),
            ({"duration_ms": "long"}, "duration_ms"),
            ({"outages": [{"target": "Z", "start_ms": 0, "end_ms": 5, "mode": "Unavailable"}]}, "outages[0].target"),
            ({"outages": [{"target": "A", "start_ms": 0, "end_ms": 5000, "mode": "Unavailable"}]}, "outages[0]"),
            ({"outages": [{"target": "A", "start_ms": 0, "end_ms": 5, "mode": "Melted"}]}, "outages[0].mode"),
            ({"arrivals": {"base_rate_per_s": 1, "bursts": [{"start_ms": 0, "end_ms": 9e9, "rate_multiplier": 2}]}},
             "arrivals.bursts[0]"),
            ({"policy": {"sla_budget_ms": 100, "reserve_ms": 100}}, "policy"),
            ({"latency": {"nope": {"kind": "constant", "value_ms": 3}}}, "latency.nope"),
        ],
    )
    def test_errors_name_the_field(self, ref_catalog, patch, field):
        with pytest.raises(ConfigError) as info:
            scenario_from_dict(self.doc(ref_catalog, **patch))
        assert info.value.field == field

    def test_missing_catalog(self):
        with pytest.raises(ConfigError) as info:
            scenario_from_dict({"duration_ms": 5})
        assert info.value.field == "catalog"
