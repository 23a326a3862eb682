"""Feature-group and backend health: incident flags, payload checks, circuit breakers."""

from __future__ import annotations

import threading
from dataclasses import dataclass, field
from enum import Enum
from types import MappingProxyType
from typing import Any, Mapping

from .core import CallResult, GroupSet, Universe


class GroupStatus(str, Enum):
    HEALTHY = "Healthy"
    UNAVAILABLE = "Unavailable"
    CORRUPTED = "Corrupted"


class BreakerState(str, Enum):
    CLOSED = "Closed"
    OPEN = "Open"
    HALF_OPEN = "HalfOpen"


@dataclass(frozen=True)
class BreakerConfig:
    failure_threshold: int = 5
    cooldown_ms: float = 30_000
    close_after: int = 2

    def __post_init__(self) -> None:
        if self.failure_threshold < 1 or self.close_after < 1 or self.cooldown_ms <= 0:
            raise ValueError("breaker thresholds and cooldown must be positive")

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> BreakerConfig:
        return cls(
            failure_threshold=int(data.get("failure_threshold", 5)),
            cooldown_ms=float(data.get("cooldown_ms", 30_000)),
            close_after=int(data.get("close_after", 2)),
        )


@dataclass(frozen=True)
class FieldSpec:
    name: str
    kind: str  # number | text | flag
    lo: float | None = None
    hi: float | None = None

    def __post_init__(self) -> None:
        if self.kind not in ("number", "text", "flag"):
            raise ValueError(f"field {self.name}: unknown kind {self.kind!r}")
        if self.lo is not None and self.hi is not None and self.lo > self.hi:
            raise ValueError(f"field {self.name}: lo > hi")

    def conforms(self, value: Any) -> bool:
        if self.kind == "flag":
            return isinstance(value, bool)
        if self.kind == "text":
            return isinstance(value, str)
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            return False
        if self.lo is not None and value < self.lo:
            return False
        if self.hi is not None and value > self.hi:
            return False
        return True


@dataclass(frozen=True)
class PayloadSchema:
    groups: Mapping[str, tuple[FieldSpec, ...]]
    max_null_ratio: float = 0.2

    def __post_init__(self) -> None:
        if not 0.0 <= self.max_null_ratio <= 1.0:
            raise ValueError("max_null_ratio must be in [0, 1]")

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> PayloadSchema:
        groups = {}
        for gid, fields in data.get("groups", {}).items():
            specs = []
            for f in fields:
                rng = f.get("range")
                lo, hi = (rng if rng is not None else (f.get("lo"), f.get("hi")))
                specs.append(FieldSpec(f["name"], f.get("kind", "number"), lo, hi))
            groups[gid] = tuple(specs)
        return cls(groups, float(data.get("max_null_ratio", 0.2)))

    @classmethod
    def single_value(cls, universe: Universe) -> PayloadSchema:
        """One numeric field ``value`` in [0, 1] per group."""
        return cls({gid: (FieldSpec("value", "number", 0.0, 1.0),) for gid in universe.ids})


def validate_payload(schema: PayloadSchema, group: str, group_payload: Mapping[str, Any]) -> GroupStatus:
    try:
        fields = schema.groups[group]
    except KeyError:
        raise KeyError(f"schema does not cover group {group!r}") from None
    missing = 0
    for spec in fields:
        value = group_payload.get(spec.name)
        if value is None:
            missing += 1
        elif not spec.conforms(value):
            return GroupStatus.CORRUPTED
    if fields and missing / len(fields) > schema.max_null_ratio:
        return GroupStatus.CORRUPTED
    return GroupStatus.HEALTHY


def payload_statuses(
    universe: Universe, payloads: Mapping[str, Any], schema: PayloadSchema | None
) -> dict[str, GroupStatus]:
    """Absent payload means the provider did not answer; present ones are schema-checked."""
    out = {}
    for gid in universe.ids:
        payload = payloads.get(gid)
        if payload is None:
            out[gid] = GroupStatus.UNAVAILABLE
        elif schema is None or gid not in schema.groups:
            out[gid] = GroupStatus.HEALTHY
        elif not isinstance(payload, Mapping):
            out[gid] = GroupStatus.CORRUPTED
        else:
            out[gid] = validate_payload(schema, gid, payload)
    return out


@dataclass(frozen=True)
class HealthSnapshot:
    universe: Universe
    statuses: Mapping[str, GroupStatus]
    backend_open: Mapping[str, bool] = field(default_factory=dict)
    snapshot_time_ms: float = 0.0

    @property
    def healthy_groups(self) -> GroupSet:
        return self.universe.set_of([g for g, s in self.statuses.items() if s is GroupStatus.HEALTHY])

    def is_open(self, variant_id: str) -> bool:
        return self.backend_open.get(variant_id, False)

    @classmethod
    def all_healthy(cls, universe: Universe, now_ms: float = 0.0) -> HealthSnapshot:
        return cls(universe, MappingProxyType({g: GroupStatus.HEALTHY for g in universe.ids}), MappingProxyType({}), now_ms)


def healthy_groups(snapshot: HealthSnapshot) -> GroupSet:
    return snapshot.healthy_groups


class CircuitBreaker:
    """Consecutive-failure breaker. Not locked; HealthMonitor serialises access."""

    def __init__(self, config: BreakerConfig) -> None:
        self.config = config
        self._state = BreakerState.CLOSED
        self._failures = 0
        self._successes = 0
        self._opened_at = 0.0

    def state(self, now_ms: float) -> BreakerState:
        if self._state is BreakerState.OPEN and now_ms - self._opened_at >= self.config.cooldown_ms:
            self._state = BreakerState.HALF_OPEN
            self._successes = 0
        return self._state

    def record(self, result: CallResult, now_ms: float) -> BreakerState:
        state = self.state(now_ms)
        ok = result is CallResult.OK
        if state is BreakerState.CLOSED:
            self._failures = 0 if ok else self._failures + 1
            if self._failures >= self.config.failure_threshold:
                self._trip(now_ms)
        elif state is BreakerState.HALF_OPEN:
            if not ok:
                self._trip(now_ms)
            else:
                self._successes += 1
                if self._successes >= self.config.close_after:
                    self._state = BreakerState.CLOSED
                    self._failures = 0
        # results landing while Open (abandoned or hedged calls) do not move the breaker
        return self._state

    def _trip(self, now_ms: float) -> None:
        self._state = BreakerState.OPEN
        self._opened_at = now_ms
        self._failures = 0
        self._successes = 0


class HealthMonitor:
    """Shared mutable health state; hands out immutable snapshots."""

    def __init__(self, universe: Universe, breaker: BreakerConfig | None = None) -> None:
        self.universe = universe
        self.breaker_config = breaker or BreakerConfig()
        self._flags: dict[str, GroupStatus] = {}
        self._breakers: dict[str, CircuitBreaker] = {}
        self._lock = threading.Lock()

    def flag_group(self, group: str, status: GroupStatus | str) -> GroupStatus:
        status = GroupStatus(status)
        if group not in self.universe:
            raise KeyError(f"unknown feature group {group!r}")
        with self._lock:
            if status is GroupStatus.HEALTHY:
                self._flags.pop(group, None)
            else:
                self._flags[group] = status
        return status

    def record_call(self, variant_id: str, result: CallResult, now_ms: float) -> BreakerState:
        with self._lock:
            breaker = self._breakers.get(variant_id)
            if breaker is None:
                breaker = self._breakers[variant_id] = CircuitBreaker(self.breaker_config)
            return breaker.record(result, now_ms)

    def breaker_state(self, variant_id: str, now_ms: float) -> BreakerState:
        with self._lock:
            breaker = self._breakers.get(variant_id)
            return BreakerState.CLOSED if breaker is None else breaker.state(now_ms)

    def breaker_states(self, now_ms: float) -> dict[str, BreakerState]:
        with self._lock:
            return {vid: b.state(now_ms) for vid, b in sorted(self._breakers.items())}

    def snapshot(self, now_ms: float, payload: Mapping[str, GroupStatus] | None = None) -> HealthSnapshot:
        """Manual flags win; otherwise the request's payload status, else Healthy."""
        with self._lock:
            statuses = {}
            for gid in self.universe.ids:
                if gid in self._flags:
                    statuses[gid] = self._flags[gid]
                elif payload is not None:
                    statuses[gid] = payload.get(gid, GroupStatus.HEALTHY)
                else:
                    statuses[gid] = GroupStatus.HEALTHY
            open_ = {vid: b.state(now_ms) is BreakerState.OPEN for vid, b in self._breakers.items()}
        return HealthSnapshot(self.universe, MappingProxyType(statuses), MappingProxyType(open_), now_ms)
