"""Deterministic discrete-event simulation of the router under injected faults.

A scenario describes arrivals (Poisson base rate plus burst windows),
transaction amounts, per-variant latency, and outage windows covering the
four failure types: absent data (``Unavailable``), corrupted data
(``Corrupted``), model unavailable (``BackendDown``) and latency spikes
(``LatencySpike``). Every arrival is routed on one virtual clock and the
outcomes are aggregated into fixed-size windows.
"""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable, Mapping, Sequence

import numpy as np

from .backends import BackendFault, SimulatedBackend
from .config import ConfigError, load_document
from .core import CallResult, LatencyModel, Request, RoutingOutcome, Tier
from .health import BreakerConfig, FieldSpec, HealthMonitor, PayloadSchema
from .planner import CatalogError, VariantCatalog
from .policy import FailureWindow, RetryPolicy
from .router import ClientSideModel, Decisions, Router, VirtualLoop

SCHEMA_VERSION = 1
DEFAULT_WINDOW_MS = 300_000
METRICS_COLUMNS = (
    "window_start_ms",
    "request_count",
    "p99_latency_ms",
    "timeout_rate",
    "frac_main",
    "frac_fallback",
    "frac_clientside",
    "weighted_quality",
    "sla_miss_rate",
)
DATA_MODES = ("Unavailable", "Corrupted")
BACKEND_MODES = ("BackendDown", "LatencySpike")

# substream keys; fixed so adding a subsystem never shifts another's draws
_ARRIVALS, _AMOUNTS = 0, 1


@dataclass(frozen=True)
class Burst:
    start_ms: float
    end_ms: float
    rate_multiplier: float


@dataclass(frozen=True)
class Outage:
    target: str
    start_ms: float
    end_ms: float
    mode: str
    multiplier: float = 1.0

    def active(self, t: float) -> bool:
        return self.start_ms <= t < self.end_ms


@dataclass(frozen=True)
class Scenario:
    duration_ms: float
    base_rate_per_s: float
    catalog: VariantCatalog
    policy: RetryPolicy
    bursts: tuple[Burst, ...] = ()
    amount_location: float = 8.0
    amount_scale: float = 1.0
    latency: Mapping[str, LatencyModel] = field(default_factory=dict)
    default_latency: LatencyModel = LatencyModel("lognormal", location=math.log(40.0), scale=0.3)
    outages: tuple[Outage, ...] = ()
    breaker: BreakerConfig = BreakerConfig()
    schema: PayloadSchema | None = None
    client_side: ClientSideModel = ClientSideModel()
    window_ms: float = DEFAULT_WINDOW_MS
    seed: int = 0

    def __post_init__(self) -> None:
        if self.duration_ms < 0:
            raise ConfigError("duration_ms", "must be >= 0")
        if not self.base_rate_per_s > 0:
            raise ConfigError("arrivals.base_rate_per_s", "must be > 0")
        if not self.window_ms > 0:
            raise ConfigError("window_ms", "must be > 0")
        for i, b in enumerate(self.bursts):
            if not 0 <= b.start_ms < b.end_ms <= self.duration_ms:
                raise ConfigError(f"arrivals.bursts[{i}]", "window must lie within [0, duration_ms]")
            if not b.rate_multiplier > 0:
                raise ConfigError(f"arrivals.bursts[{i}].rate_multiplier", "must be > 0")
        ids = {v.variant_id for v in self.catalog.variants}
        for i, o in enumerate(self.outages):
            where = f"outages[{i}]"
            if not 0 <= o.start_ms < o.end_ms <= self.duration_ms:
                raise ConfigError(where, "window must lie within [0, duration_ms]")
            if o.mode in DATA_MODES:
                if o.target not in self.catalog.universe:
                    raise ConfigError(f"{where}.target", f"unknown feature group {o.target!r}")
            elif o.mode in BACKEND_MODES:
                if o.target not in ids or o.target == self.catalog.client_side.variant_id:
                    raise ConfigError(f"{where}.target", f"unknown remote variant {o.target!r}")
                if o.mode == "LatencySpike" and not o.multiplier > 0:
                    raise ConfigError(f"{where}.multiplier", "must be > 0")
            else:
                raise ConfigError(f"{where}.mode", f"unknown mode {o.mode!r}")
        for vid in self.latency:
            if vid not in ids:
                raise ConfigError(f"latency.{vid}", "not a catalog variant")

    @property
    def payload_schema(self) -> PayloadSchema:
        return self.schema or PayloadSchema.single_value(self.catalog.universe)

    @property
    def client_latency_bound_ms(self) -> float:
        return self.client_side.latency_ms

    def with_seed(self, seed: int) -> Scenario:
        from dataclasses import replace

        return replace(self, seed=seed)


def _num(data: Mapping[str, Any], key: str, where: str, default: Any = None) -> float:
    value = data.get(key, default)
    if value is None:
        raise ConfigError(f"{where}{key}", "required")
    try:
        return float(value)
    except (TypeError, ValueError):
        raise ConfigError(f"{where}{key}", f"expected a number, got {value!r}") from None


def scenario_from_dict(data: Mapping[str, Any], base_dir: str | Path | None = None) -> Scenario:
    """Build a Scenario from its document form; raises ConfigError naming the bad field."""
    if not isinstance(data, Mapping):
        raise ConfigError("scenario", "expected a mapping")
    version = data.get("schema_version", SCHEMA_VERSION)
    if version != SCHEMA_VERSION:
        raise ConfigError("schema_version", f"unsupported version {version!r} (expected {SCHEMA_VERSION})")

    try:
        if "catalog" in data:
            catalog = VariantCatalog.from_dict(data["catalog"])
        elif "catalog_file" in data:
            path = Path(base_dir or ".") / data["catalog_file"]
            catalog = VariantCatalog.from_dict(load_document(path))
        else:
            raise ConfigError("catalog", "scenario needs `catalog` or `catalog_file`")
    except CatalogError as exc:
        raise ConfigError("catalog", str(exc)) from exc

    arrivals = data.get("arrivals", {})
    bursts = tuple(
        Burst(_num(b, "start_ms", f"arrivals.bursts[{i}]."), _num(b, "end_ms", f"arrivals.bursts[{i}]."),
              _num(b, "rate_multiplier", f"arrivals.bursts[{i}]."))
        for i, b in enumerate(arrivals.get("bursts", []))
    )
    amounts = data.get("amounts", {})
    try:
        policy = RetryPolicy.from_dict(data.get("policy", {}))
    except (ValueError, TypeError) as exc:
        raise ConfigError("policy", str(exc)) from exc
    try:
        latency = {vid: LatencyModel.from_dict(m) for vid, m in data.get("latency", {}).items()}
        default_latency = (
            LatencyModel.from_dict(data["default_latency"]) if "default_latency" in data
            else Scenario.default_latency
        )
    except (ValueError, TypeError) as exc:
        raise ConfigError("latency", str(exc)) from exc
    outages = []
    for i, o in enumerate(data.get("outages", [])):
        if "target" not in o or "mode" not in o:
            raise ConfigError(f"outages[{i}]", "needs `target` and `mode`")
        outages.append(Outage(str(o["target"]), _num(o, "start_ms", f"outages[{i}]."),
                              _num(o, "end_ms", f"outages[{i}]."), str(o["mode"]),
                              _num(o, "multiplier", f"outages[{i}].", 1.0)))
    try:
        breaker = BreakerConfig.from_dict(data.get("breaker", {}))
    except ValueError as exc:
        raise ConfigError("breaker", str(exc)) from exc
    try:
        schema = PayloadSchema.from_dict(data["schema"]) if "schema" in data else None
    except (KeyError, ValueError, TypeError) as exc:
        raise ConfigError("schema", str(exc)) from exc
    cs = data.get("client_side", {})
    client = ClientSideModel(**{k: float(v) for k, v in cs.items()}) if cs else ClientSideModel()

    return Scenario(
        duration_ms=_num(data, "duration_ms", ""),
        base_rate_per_s=_num(arrivals, "base_rate_per_s", "arrivals.", 1.0),
        catalog=catalog,
        policy=policy,
        bursts=bursts,
        amount_location=_num(amounts, "location", "amounts.", 8.0),
        amount_scale=_num(amounts, "scale", "amounts.", 1.0),
        latency=latency,
        default_latency=default_latency,
        outages=tuple(outages),
        breaker=breaker,
        schema=schema,
        client_side=client,
        window_ms=_num(data, "window_ms", "", DEFAULT_WINDOW_MS),
        seed=int(data.get("seed", 0)),
    )


def load_scenario(path: str | Path) -> Scenario:
    path = Path(path)
    return scenario_from_dict(load_document(path), path.parent)


def percentile_nearest_rank(samples: Sequence[float], p: float) -> float:
    """Value at rank ceil(p/100 * n) of the ascending sort."""
    if not samples:
        raise ValueError("percentile of an empty sample")
    if not 0 < p <= 100:
        raise ValueError(f"p must be in (0, 100], got {p}")
    ordered = sorted(samples)
    rank = max(1, math.ceil(p / 100.0 * len(ordered) - 1e-12))
    return float(ordered[rank - 1])


def _substream(seed: int, key: int) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(seed, spawn_key=(key,))))


def arrival_times(scenario: Scenario) -> np.ndarray:
    """Piecewise-constant-rate Poisson process; overlapping bursts multiply."""
    rng = _substream(scenario.seed, _ARRIVALS)
    edges = {0.0, float(scenario.duration_ms)}
    for b in scenario.bursts:
        edges.update((b.start_ms, b.end_ms))
    edges_sorted = sorted(edges)
    chunks = []
    for lo, hi in zip(edges_sorted, edges_sorted[1:]):
        mult = 1.0
        for b in scenario.bursts:
            if b.start_ms <= lo < b.end_ms:
                mult *= b.rate_multiplier
        mean = scenario.base_rate_per_s * mult * (hi - lo) / 1000.0
        n = rng.poisson(mean)
        chunks.append(np.sort(rng.uniform(lo, hi, n)))
    return np.concatenate(chunks) if chunks else np.empty(0)


def _payload_for(schema: PayloadSchema, group: str, corrupted: bool) -> dict[str, Any]:
    fields = schema.groups.get(group, (FieldSpec("value", "number", 0.0, 1.0),))
    out: dict[str, Any] = {}
    for spec in fields:
        if spec.kind == "number":
            lo = 0.0 if spec.lo is None else spec.lo
            hi = lo + 1.0 if spec.hi is None else spec.hi
            out[spec.name] = (lo + hi) / 2.0
        elif spec.kind == "text":
            out[spec.name] = "ok"
        else:
            out[spec.name] = True
    if corrupted:
        # a value of the wrong kind fails validation whatever the field is
        out[fields[0].name] = [] if fields else None
    return out


def generate_requests(scenario: Scenario) -> list[Request]:
    times = arrival_times(scenario)
    amounts = _substream(scenario.seed, _AMOUNTS).lognormal(scenario.amount_location, scenario.amount_scale, len(times))
    schema = scenario.payload_schema
    data_outages = [o for o in scenario.outages if o.mode in DATA_MODES]
    requests = []
    for i, (t, amt) in enumerate(zip(times.tolist(), amounts.tolist())):
        payloads: dict[str, Any] = {}
        for gid in scenario.catalog.universe.ids:
            modes = {o.mode for o in data_outages if o.target == gid and o.active(t)}
            if "Unavailable" in modes:
                payloads[gid] = None
            else:
                payloads[gid] = _payload_for(schema, gid, "Corrupted" in modes)
        requests.append(Request(f"r{i:07d}", int(round(amt)), payloads, t))
    return requests


@dataclass
class WindowMetrics:
    window_start_ms: float
    request_count: int
    p99_latency_ms: float
    timeout_rate: float
    frac_main: float
    frac_fallback: float
    frac_clientside: float
    weighted_quality: float
    sla_miss_rate: float

    def row(self) -> list[str]:
        return [
            str(int(self.window_start_ms)),
            str(self.request_count),
            repr(float(self.p99_latency_ms)),
            repr(float(self.timeout_rate)),
            repr(float(self.frac_main)),
            repr(float(self.frac_fallback)),
            repr(float(self.frac_clientside)),
            repr(float(self.weighted_quality)),
            repr(float(self.sla_miss_rate)),
        ]


@dataclass
class MetricsReport:
    windows: list[WindowMetrics]
    totals: WindowMetrics | None
    extra: dict[str, Any] = field(default_factory=dict)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(METRICS_COLUMNS)
        for win in self.windows:
            w.writerow(win.row())
        return buf.getvalue()

    def summary(self) -> dict[str, Any]:
        out: dict[str, Any] = {"schema_version": SCHEMA_VERSION, "windows": len(self.windows)}
        if self.totals is not None:
            t = self.totals
            out.update(
                request_count=t.request_count,
                p99_latency_ms=t.p99_latency_ms,
                timeout_rate=t.timeout_rate,
                frac_main=t.frac_main,
                frac_fallback=t.frac_fallback,
                frac_clientside=t.frac_clientside,
                weighted_quality=t.weighted_quality,
                sla_miss_rate=t.sla_miss_rate,
            )
        else:
            out.update(request_count=0, sla_miss_rate=0.0)
        out.update(self.extra)
        return out


def is_sla_miss(outcome: RoutingOutcome, policy: RetryPolicy, client_bound_ms: float) -> bool:
    """No score, or a score later than the budget plus the in-process client-side bound."""
    return outcome.score is None or outcome.total_elapsed_ms > policy.sla_budget_ms + client_bound_ms + 1e-9


def aggregate(
    outcomes: Sequence[RoutingOutcome],
    arrivals: Sequence[float],
    catalog: VariantCatalog,
    policy: RetryPolicy,
    client_bound_ms: float,
    window_ms: float = DEFAULT_WINDOW_MS,
) -> MetricsReport:
    """Per-window metrics over requests grouped by arrival time; empty windows are omitted."""
    quality = {v.variant_id: v.quality for v in catalog.variants}
    buckets: dict[int, list[RoutingOutcome]] = {}
    for out, t in zip(outcomes, arrivals):
        buckets.setdefault(int(t // window_ms), []).append(out)

    def summarize(start: float, group: Sequence[RoutingOutcome]) -> WindowMetrics:
        n = len(group)
        scored = [o for o in group if o.score is not None]
        tiers = [o.tier for o in scored]
        ns = len(scored)
        frac = (lambda tier: tiers.count(tier) / ns) if ns else (lambda tier: 0.0)
        return WindowMetrics(
            window_start_ms=start,
            request_count=n,
            p99_latency_ms=percentile_nearest_rank([o.total_elapsed_ms for o in group], 99),
            timeout_rate=sum(any(a.result is CallResult.TIMEOUT for a in o.attempts) for o in group) / n,
            frac_main=frac(Tier.MAIN),
            frac_fallback=frac(Tier.GROUP_FALLBACK),
            frac_clientside=frac(Tier.CLIENT_SIDE),
            weighted_quality=(sum(quality[o.variant_id] for o in scored) / ns) if ns else 0.0,
            sla_miss_rate=sum(is_sla_miss(o, policy, client_bound_ms) for o in group) / n,
        )

    windows = [summarize(k * window_ms, buckets[k]) for k in sorted(buckets)]
    totals = summarize(0.0, outcomes) if outcomes else None
    return MetricsReport(windows, totals)


@dataclass
class SimulationResult:
    report: MetricsReport
    outcomes: list[RoutingOutcome]
    requests: list[Request]

    def outcomes_jsonl(self) -> str:
        return "".join(json.dumps(o.to_dict(), separators=(",", ":")) + "\n" for o in self.outcomes)

    def write(self, out_dir: str | Path) -> None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / "metrics.csv").write_text(self.report.to_csv())
        (out / "outcomes.jsonl").write_text(self.outcomes_jsonl())
        (out / "summary.json").write_text(json.dumps(self.report.summary(), indent=2, sort_keys=True) + "\n")


def build_backend(scenario: Scenario) -> SimulatedBackend:
    faults = [
        BackendFault(o.target, o.start_ms, o.end_ms, "down" if o.mode == "BackendDown" else "spike", o.multiplier)
        for o in scenario.outages
        if o.mode in BACKEND_MODES
    ]
    latency = {v.variant_id: v.latency for v in scenario.catalog.variants if v.latency is not None}
    latency.update(scenario.latency)
    return SimulatedBackend(latency, scenario.seed, default=scenario.default_latency, faults=faults)


def run_scenario(
    scenario: Scenario,
    *,
    ablate_fallback: bool = False,
    observer: Callable[[Decisions], None] | None = None,
) -> SimulationResult:
    requests = generate_requests(scenario)
    monitor = HealthMonitor(scenario.catalog.universe, scenario.breaker)
    router = Router(
        scenario.catalog,
        scenario.policy,
        schema=scenario.payload_schema,
        monitor=monitor,
        main_window=FailureWindow(scenario.policy.failure_prob_window),
        client_model=scenario.client_side,
        ablate_fallback=ablate_fallback,
        observer=observer,
    )
    loop = VirtualLoop(build_backend(scenario))
    results: list[RoutingOutcome | None] = [None] * len(requests)

    for i, req in enumerate(requests):
        def done(out: RoutingOutcome, i: int = i) -> None:
            results[i] = out

        loop.start(req.arrival_time, req, lambda req=req: router.plan(req, loop.clock), done)
    loop.run()

    outcomes = [o for o in results if o is not None]
    if len(outcomes) != len(requests):
        raise RuntimeError("simulation lost requests")
    report = aggregate(
        outcomes,
        [r.arrival_time for r in requests],
        scenario.catalog,
        scenario.policy,
        scenario.client_latency_bound_ms,
        scenario.window_ms,
    )
    report.extra.update(
        seed=scenario.seed,
        ablate_fallback=ablate_fallback,
        duration_ms=scenario.duration_ms,
        attempts_total=sum(len(o.attempts) for o in outcomes),
        hedged_total=sum(o.hedged for o in outcomes),
        unscored_total=sum(o.score is None for o in outcomes),
        variant_counts=_variant_counts(outcomes),
    )
    return SimulationResult(report, outcomes, requests)


def _variant_counts(outcomes: Sequence[RoutingOutcome]) -> dict[str, int]:
    counts: dict[str, int] = {}
    for o in outcomes:
        key = o.variant_id or "none"
        counts[key] = counts.get(key, 0) + 1
    return dict(sorted(counts.items()))
