"""Hierarchical fallback routing.

The routing logic is a generator that yields backend commands (``Invoke``,
``Spawn``, ``Join``, ``Wait``) and receives their results. A driver decides
what time means: :class:`VirtualLoop` runs many routes on a virtual clock
(the simulator and deterministic tests), :class:`WallDriver` runs one route
against real backends (the gateway).
"""

from __future__ import annotations

import heapq
import itertools
import math
import time
from concurrent.futures import Executor, Future
from concurrent.futures import TimeoutError as FutureTimeout
from dataclasses import dataclass, field
from typing import Any, Callable, Generator, Protocol

from .backends import Backend, BackendResult
from .core import Attempt, CallResult, GroupSet, ModelVariant, Request, RoutingOutcome, Tier
from .health import GroupStatus, HealthMonitor, HealthSnapshot, PayloadSchema, payload_statuses
from .planner import VariantCatalog, ranked_variants_for
from .policy import Decision, FailureWindow, RetryContext, RetryPolicy, should_hedge, should_retry


class Clock(Protocol):
    def now_ms(self) -> float: ...


class VirtualClock:
    def __init__(self, start_ms: float = 0.0) -> None:
        self._now = float(start_ms)

    def now_ms(self) -> float:
        return self._now

    def advance_to(self, t: float) -> None:
        if t < self._now:
            raise ValueError(f"virtual clock cannot go back from {self._now} to {t}")
        self._now = float(t)


class WallClock:
    def now_ms(self) -> float:
        return time.monotonic() * 1000.0


@dataclass(frozen=True)
class CallOutcome:
    result: CallResult
    score: float | None
    start_ms: float
    end_ms: float


@dataclass(frozen=True)
class Invoke:
    variant_id: str
    timeout_ms: float
    call_index: int = 0


@dataclass(frozen=True)
class Spawn:
    variant_id: str
    timeout_ms: float
    call_index: int = 0


@dataclass(frozen=True)
class Join:
    """Wait for a spawned call until ``until_ms``; yields None if it has not answered by then."""

    handle: Any
    until_ms: float


@dataclass(frozen=True)
class Wait:
    duration_ms: float


RouteGen = Generator[Any, Any, RoutingOutcome]


@dataclass(frozen=True)
class Decisions:
    """What the router saw when a request entered: for audits and tests."""

    request_id: str
    healthy: GroupSet
    main_eligible: bool
    fallbacks: tuple[ModelVariant, ...]
    arrival_ms: float


@dataclass(frozen=True)
class ClientSideModel:
    """Tiny linear scorer over request-intrinsic fields only.

    Uses the log of the amount and a night-time indicator derived from the
    arrival hour; no feature group is consulted.
    """

    bias: float = -3.0
    amount_weight: float = 0.3
    night_weight: float = 0.6
    latency_ms: float = 0.5

    def score(self, request: Request) -> float:
        hour = int(request.arrival_time // 3_600_000) % 24
        x = self.bias + self.amount_weight * math.log1p(request.amount / 100.0) + self.night_weight * (hour < 6)
        return 1.0 / (1.0 + math.exp(-x))


def route_hedged_merge(main_result: CallOutcome | None, hedge_result: CallOutcome | None) -> CallOutcome | None:
    """Main wins whenever it answered; otherwise the hedge, if it answered. None means neither."""
    if main_result is not None and main_result.result is CallResult.OK:
        return main_result
    if hedge_result is not None and hedge_result.result is CallResult.OK:
        return hedge_result
    return None


@dataclass
class _Trace:
    request: Request
    arrival: float
    attempts: list[Attempt] = field(default_factory=list)
    hedged: bool = False

    def add(self, variant_id: str, out: CallOutcome) -> None:
        self.attempts.append(Attempt(variant_id, out.start_ms, out.end_ms, out.result))

    def done(self, now: float, variant: ModelVariant | None, score: float | None) -> RoutingOutcome:
        return RoutingOutcome(
            request_id=self.request.request_id,
            score=score,
            variant_id=None if variant is None else variant.variant_id,
            tier=None if variant is None else variant.tier,
            attempts=tuple(self.attempts),
            total_elapsed_ms=now - self.arrival,
            hedged=self.hedged,
        )


class Router:
    """Main with retries, then the best usable group fallbacks, then the client-side model.

    ``ablate_fallback`` turns the router into a Main-only system for
    comparison runs: data health is ignored and no score is produced when the
    main model never answers.
    """

    def __init__(
        self,
        catalog: VariantCatalog,
        policy: RetryPolicy,
        *,
        schema: PayloadSchema | None = None,
        monitor: HealthMonitor | None = None,
        main_window: FailureWindow | None = None,
        client_model: ClientSideModel | None = None,
        ablate_fallback: bool = False,
        observer: Callable[[Decisions], None] | None = None,
    ) -> None:
        self.catalog = catalog
        self.policy = policy
        self.schema = schema
        self.monitor = monitor
        self.main_window = main_window or FailureWindow(policy.failure_prob_window)
        self.client_model = client_model or ClientSideModel()
        self.ablate_fallback = ablate_fallback
        self.observer = observer

    def _observe(self, variant_id: str, result: CallResult, now: float) -> None:
        if self.monitor is not None:
            self.monitor.record_call(variant_id, result, now)
        if variant_id == self.catalog.main.variant_id:
            self.main_window.record(result)

    def snapshot_for(self, request: Request, now: float) -> HealthSnapshot:
        statuses = payload_statuses(self.catalog.universe, request.payloads, self.schema)
        if self.monitor is not None:
            return self.monitor.snapshot(now, statuses)
        return HealthSnapshot(self.catalog.universe, statuses, {}, now)

    def eligible_fallbacks(self, snapshot: HealthSnapshot, healthy: GroupSet) -> list[ModelVariant]:
        """Group fallbacks worth trying, best first: usable, breaker not open, better than client-side."""
        ranked = ranked_variants_for(
            [v for v in self.catalog.fallbacks if not snapshot.is_open(v.variant_id)] + [self.catalog.client_side],
            healthy,
        )
        out = []
        for v in ranked:
            if v.tier is Tier.CLIENT_SIDE:
                break
            out.append(v)
        return out

    def healthy_for(self, snapshot: HealthSnapshot, request: Request) -> GroupSet:
        statuses = payload_statuses(self.catalog.universe, request.payloads, self.schema)
        valid = self.catalog.universe.set_of([g for g, s in statuses.items() if s is GroupStatus.HEALTHY])
        return snapshot.healthy_groups & valid

    def plan(self, request: Request, clock: Clock, snapshot: HealthSnapshot | None = None) -> RouteGen:
        arrival = clock.now_ms()
        if snapshot is None:
            snapshot = self.snapshot_for(request, arrival)
        trace = _Trace(request, arrival)
        policy, main = self.policy, self.catalog.main
        if self.ablate_fallback:
            return (yield from self._main_only(request, clock, trace))

        healthy = self.healthy_for(snapshot, request)
        main_ok = main.required_groups <= healthy and not snapshot.is_open(main.variant_id)
        fallbacks = self.eligible_fallbacks(snapshot, healthy)
        q_fallback = fallbacks[0].quality if fallbacks else self.catalog.client_side.quality
        if self.observer is not None:
            self.observer(Decisions(request.request_id, healthy, main_ok, tuple(fallbacks), arrival))

        hedge_variant, hedge_handle = None, None
        if main_ok and should_hedge(policy, request, bool(fallbacks)):
            hedge_variant = fallbacks[0]
            hedge_handle = yield Spawn(hedge_variant.variant_id, policy.sla_budget_ms)
            trace.hedged = True

        if main_ok:
            main_end = arrival + policy.main_budget_ms
            used = 0
            while True:
                timeout = min(policy.attempt_timeout_ms, main_end - clock.now_ms())
                if timeout <= 0:
                    break
                out = yield Invoke(main.variant_id, timeout, used)
                used += 1
                trace.add(main.variant_id, out)
                self._observe(main.variant_id, out.result, out.end_ms)
                if route_hedged_merge(out, None) is not None:
                    if hedge_handle is not None:
                        yield from self._settle_discarded_hedge(hedge_variant, hedge_handle, clock, trace)
                    return trace.done(clock.now_ms(), main, out.score)
                ctx = RetryContext(
                    attempts_used=used,
                    elapsed_ms=clock.now_ms() - arrival,
                    p_fail_next=self.main_window.estimate(),
                    q_main=main.quality,
                    q_best_fallback=q_fallback,
                    amount=request.amount,
                    amount_cap=policy.amount_cap,
                )
                if should_retry(policy, ctx) is Decision.GO_FALLBACK:
                    break

        deadline = arrival + policy.sla_budget_ms
        for v in fallbacks:
            remaining = deadline - clock.now_ms()
            timeout = min(policy.attempt_timeout_ms, remaining)
            if v is hedge_variant:
                # the hedge gets the same window a fresh call would; an answer already in hand costs nothing
                now = clock.now_ms()
                got = yield Join(hedge_handle, now + max(0.0, timeout))
                out = got if got is not None else CallOutcome(CallResult.TIMEOUT, None, arrival, clock.now_ms())
                chosen = route_hedged_merge(None, out)
            else:
                if timeout <= 0:
                    break
                out = yield Invoke(v.variant_id, timeout, 0)
                chosen = out if out.result is CallResult.OK else None
            trace.add(v.variant_id, out)
            self._observe(v.variant_id, out.result, clock.now_ms())
            if chosen is not None:
                return trace.done(clock.now_ms(), v, chosen.score)

        client = self.catalog.client_side
        start = clock.now_ms()
        score = self.client_model.score(request)
        yield Wait(self.client_model.latency_ms)
        trace.add(client.variant_id, CallOutcome(CallResult.OK, score, start, clock.now_ms()))
        return trace.done(clock.now_ms(), client, score)

    def _settle_discarded_hedge(self, variant: ModelVariant, handle: Any, clock: Clock, trace: _Trace):
        now = clock.now_ms()
        got = yield Join(handle, now)
        if got is not None:
            self._observe(variant.variant_id, got.result, now)
            entry = Attempt(variant.variant_id, got.start_ms, got.end_ms, got.result)
        else:
            # still in flight when Main answered; abandoned
            entry = Attempt(variant.variant_id, trace.arrival, now, CallResult.TIMEOUT)
        trace.attempts.insert(0, entry)

    def _main_only(self, request: Request, clock: Clock, trace: _Trace) -> RouteGen:
        policy, main = self.policy, self.catalog.main
        main_end = trace.arrival + policy.main_budget_ms
        used = 0
        while True:
            timeout = min(policy.attempt_timeout_ms, main_end - clock.now_ms())
            if timeout <= 0:
                break
            out = yield Invoke(main.variant_id, timeout, used)
            used += 1
            trace.add(main.variant_id, out)
            self._observe(main.variant_id, out.result, out.end_ms)
            if out.result is CallResult.OK:
                return trace.done(clock.now_ms(), main, out.score)
            ctx = RetryContext(used, clock.now_ms() - trace.arrival, self.main_window.estimate(),
                               main.quality, 0.0, request.amount, policy.amount_cap)
            if should_retry(policy, ctx) is Decision.GO_FALLBACK:
                break
        return trace.done(clock.now_ms(), None, None)


def _settle(res: BackendResult, timeout_ms: float, start: float, end: float) -> CallOutcome:
    # nothing counts as Ok once the timeout has passed
    if res.result is CallResult.OK and end - start > timeout_ms:
        return CallOutcome(CallResult.TIMEOUT, None, start, start + timeout_ms)
    return CallOutcome(res.result, res.score if res.result is CallResult.OK else None, start, end)


@dataclass
class _Pending:
    outcome: CallOutcome


class _Task:
    __slots__ = ("gen", "on_done", "request")

    def __init__(self, gen: RouteGen, request: Request, on_done: Callable[[RoutingOutcome], None]) -> None:
        self.gen = gen
        self.request = request
        self.on_done = on_done


class VirtualLoop:
    """Discrete-event driver: many concurrent routes on one virtual clock.

    Events are ordered by (time, insertion sequence), so runs are exactly
    reproducible.
    """

    def __init__(self, backend: Backend, clock: VirtualClock | None = None) -> None:
        self.backend = backend
        self.clock = clock or VirtualClock()
        self._heap: list[tuple[float, int, Any, Any]] = []
        self._seq = itertools.count()

    def _push(self, t: float, item: Any, value: Any) -> None:
        heapq.heappush(self._heap, (t, next(self._seq), item, value))

    def call_at(self, t: float, fn: Callable[[], None]) -> None:
        self._push(t, fn, None)

    def start(self, t: float, request: Request, make_gen: Callable[[], RouteGen],
              on_done: Callable[[RoutingOutcome], None]) -> None:
        """Schedule a route; ``make_gen`` is called at time ``t`` so it sees the state of that instant."""

        def begin() -> None:
            self._step(_Task(make_gen(), request, on_done), None)

        self._push(t, begin, None)

    def _call(self, request: Request, variant_id: str, timeout: float, index: int) -> CallOutcome:
        now = self.clock.now_ms()
        res = self.backend.invoke(variant_id, request, timeout, index, now)
        latency = min(res.latency_ms, timeout)
        if res.latency_ms > timeout:
            return CallOutcome(CallResult.TIMEOUT, None, now, now + timeout)
        return _settle(res, timeout, now, now + latency)

    def _step(self, task: _Task, value: Any) -> None:
        now = self.clock.now_ms()
        while True:
            try:
                cmd = task.gen.send(value)
            except StopIteration as stop:
                task.on_done(stop.value)
                return
            if isinstance(cmd, Invoke):
                out = self._call(task.request, cmd.variant_id, cmd.timeout_ms, cmd.call_index)
                self._push(out.end_ms, task, out)
                return
            if isinstance(cmd, Spawn):
                value = _Pending(self._call(task.request, cmd.variant_id, cmd.timeout_ms, cmd.call_index))
                continue
            if isinstance(cmd, Join):
                out = cmd.handle.outcome
                if out.end_ms <= cmd.until_ms:
                    if out.end_ms <= now:
                        value = out
                        continue
                    self._push(out.end_ms, task, out)
                else:
                    self._push(cmd.until_ms, task, None)
                return
            if isinstance(cmd, Wait):
                self._push(now + cmd.duration_ms, task, None)
                return
            raise TypeError(f"unknown routing command {cmd!r}")

    def run(self) -> None:
        while self._heap:
            t, _, item, value = heapq.heappop(self._heap)
            self.clock.advance_to(t)
            if isinstance(item, _Task):
                self._step(item, value)
            else:
                item()


class WallDriver:
    """Runs one route synchronously against real (blocking) backends."""

    def __init__(self, backend: Backend, executor: Executor, clock: WallClock | None = None) -> None:
        self.backend = backend
        self.executor = executor
        self.clock = clock or WallClock()

    def _call(self, request: Request, variant_id: str, timeout: float, index: int, start: float) -> CallOutcome:
        res = self.backend.invoke(variant_id, request, timeout, index, start)
        end = self.clock.now_ms()
        if res.result is CallResult.TIMEOUT:
            return CallOutcome(CallResult.TIMEOUT, None, start, end)
        return _settle(res, timeout, start, end)

    def run(self, gen: RouteGen, request: Request) -> RoutingOutcome:
        value: Any = None
        while True:
            try:
                cmd = gen.send(value)
            except StopIteration as stop:
                return stop.value
            if isinstance(cmd, Invoke):
                value = self._call(request, cmd.variant_id, cmd.timeout_ms, cmd.call_index, self.clock.now_ms())
            elif isinstance(cmd, Spawn):
                value = self.executor.submit(
                    self._call, request, cmd.variant_id, cmd.timeout_ms, cmd.call_index, self.clock.now_ms()
                )
            elif isinstance(cmd, Join):
                fut: Future = cmd.handle
                wait_s = max(0.0, cmd.until_ms - self.clock.now_ms()) / 1000.0
                try:
                    out = fut.result(timeout=wait_s) if wait_s > 0 or fut.done() else None
                except FutureTimeout:
                    out = None
                value = out
            elif isinstance(cmd, Wait):
                value = None
            else:
                raise TypeError(f"unknown routing command {cmd!r}")


def route(
    request: Request,
    catalog: VariantCatalog,
    health: HealthSnapshot | None,
    policy: RetryPolicy,
    backend: Backend,
    clock: Clock | None = None,
    **router_kwargs: Any,
) -> RoutingOutcome:
    """Route one request to completion.

    With a :class:`VirtualClock` (default) the request arrives at the clock's
    current time and the clock is advanced to the moment the score is ready.
    """
    router = Router(catalog, policy, **router_kwargs)
    if clock is None:
        clock = VirtualClock(request.arrival_time)
    if isinstance(clock, VirtualClock):
        loop = VirtualLoop(backend, clock)
        result: list[RoutingOutcome] = []
        loop.start(clock.now_ms(), request, lambda: router.plan(request, clock, health), result.append)
        loop.run()
        return result[0]
    from concurrent.futures import ThreadPoolExecutor

    with ThreadPoolExecutor(max_workers=1) as pool:
        return WallDriver(backend, pool, clock).run(router.plan(request, clock, health), request)
