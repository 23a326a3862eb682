"""Shared domain types and the feature-group set algebra.

Every other module routes on :class:`GroupSet`, a bitmask over a fixed
:class:`Universe` of at most 64 named feature groups.
"""

from __future__ import annotations

import math
import random
from dataclasses import dataclass, field
from enum import Enum
from typing import Any, Iterator, Mapping, Sequence

MAX_GROUPS = 64


class UniverseMismatch(ValueError):
    """Raised when two group sets from different universes are combined."""


class Tier(str, Enum):
    MAIN = "Main"
    GROUP_FALLBACK = "GroupFallback"
    CLIENT_SIDE = "ClientSide"


class CallResult(str, Enum):
    OK = "Ok"
    TIMEOUT = "Timeout"
    FAILURE = "Failure"


@dataclass(frozen=True)
class GroupId:
    id: str
    index: int


@dataclass(frozen=True)
class Universe:
    """Ordered collection of feature-group ids; position is the bit index."""

    ids: tuple[str, ...]

    def __post_init__(self) -> None:
        if len(self.ids) > MAX_GROUPS:
            raise ValueError(f"at most {MAX_GROUPS} feature groups supported, got {len(self.ids)}")
        if len(set(self.ids)) != len(self.ids):
            raise ValueError(f"duplicate group ids in universe: {self.ids}")
        for gid in self.ids:
            if not gid or "," in gid or gid != gid.strip():
                raise ValueError(f"invalid group id {gid!r}")

    @classmethod
    def parse(cls, text: str | Sequence[str]) -> Universe:
        if isinstance(text, str):
            parts = [p.strip() for p in text.split(",") if p.strip()]
        else:
            parts = list(text)
        return cls(tuple(parts))

    def __len__(self) -> int:
        return len(self.ids)

    def __contains__(self, gid: object) -> bool:
        return gid in self.ids

    def group(self, gid: str) -> GroupId:
        try:
            return GroupId(gid, self.ids.index(gid))
        except ValueError:
            raise KeyError(f"unknown feature group {gid!r}") from None

    def index(self, gid: str) -> int:
        return self.group(gid).index

    @property
    def full(self) -> GroupSet:
        return GroupSet((1 << len(self.ids)) - 1, self)

    @property
    def empty(self) -> GroupSet:
        return GroupSet(0, self)

    def set_of(self, members: str | Sequence[str]) -> GroupSet:
        """Build a GroupSet from ids, or from a canonical "A,C" string."""
        if isinstance(members, str):
            members = [m.strip() for m in members.split(",") if m.strip()]
        mask = 0
        for gid in members:
            mask |= 1 << self.index(gid)
        return GroupSet(mask, self)


@dataclass(frozen=True)
class GroupSet:
    """Membership mask over a universe. Immutable; hashable."""

    bits: int
    universe: Universe = field(repr=False)

    def __post_init__(self) -> None:
        if self.bits < 0 or self.bits >> len(self.universe):
            raise ValueError(f"mask {self.bits:#x} has bits outside a {len(self.universe)}-group universe")

    def _check(self, other: GroupSet) -> None:
        if self.universe != other.universe:
            raise UniverseMismatch(f"{self.universe.ids} vs {other.universe.ids}")

    def issubset(self, other: GroupSet) -> bool:
        self._check(other)
        return self.bits & ~other.bits == 0

    def __le__(self, other: GroupSet) -> bool:
        return self.issubset(other)

    def __lt__(self, other: GroupSet) -> bool:
        return self.issubset(other) and self.bits != other.bits

    def __or__(self, other: GroupSet) -> GroupSet:
        self._check(other)
        return GroupSet(self.bits | other.bits, self.universe)

    def __and__(self, other: GroupSet) -> GroupSet:
        self._check(other)
        return GroupSet(self.bits & other.bits, self.universe)

    def __sub__(self, other: GroupSet) -> GroupSet:
        self._check(other)
        return GroupSet(self.bits & ~other.bits, self.universe)

    def __invert__(self) -> GroupSet:
        return GroupSet(self.universe.full.bits & ~self.bits, self.universe)

    def __len__(self) -> int:
        return bin(self.bits).count("1")

    def __iter__(self) -> Iterator[str]:
        for i, gid in enumerate(self.universe.ids):
            if self.bits >> i & 1:
                yield gid

    def __contains__(self, gid: object) -> bool:
        return isinstance(gid, str) and gid in self.universe and bool(self.bits >> self.universe.index(gid) & 1)

    def __str__(self) -> str:
        return ",".join(sorted(self))

    @property
    def is_empty(self) -> bool:
        return self.bits == 0


def subset_of(a: GroupSet, b: GroupSet) -> bool:
    return a.issubset(b)


def enumerate_nonempty_proper_subsets(universe: GroupSet | Universe) -> list[GroupSet]:
    """All S with empty < S < universe, by descending size then ascending mask."""
    if isinstance(universe, Universe):
        universe = universe.full
    n = len(universe.universe)
    if n > MAX_GROUPS:
        raise ValueError(f"universe too large: {n} > {MAX_GROUPS}")
    full = universe.bits
    # walk the submasks of `full`, which need not be the whole universe
    masks = []
    sub = (full - 1) & full
    while sub:
        masks.append(sub)
        sub = (sub - 1) & full
    masks.sort(key=lambda m: (-bin(m).count("1"), m))
    return [GroupSet(m, universe.universe) for m in masks]


def sample_lognormal(rng: random.Random, location: float, scale: float, multiplier: float = 1.0) -> float:
    """exp(N(location, scale)), optionally scaled by a latency-spike multiplier."""
    if scale < 0:
        raise ValueError(f"scale must be >= 0, got {scale}")
    draw = rng.gauss(location, scale) if scale > 0 else location
    return math.exp(draw) * multiplier


@dataclass(frozen=True)
class LatencyModel:
    """Per-call latency and failure behaviour of a backend.

    ``constant`` uses ``value_ms``; ``lognormal`` draws exp(N(location, scale));
    ``injected`` cycles through ``values_ms`` by call index.
    """

    kind: str = "constant"
    value_ms: float = 1.0
    location: float = 0.0
    scale: float = 0.0
    values_ms: tuple[float, ...] = ()
    failure_prob: float = 0.0

    def __post_init__(self) -> None:
        if self.kind not in ("constant", "lognormal", "injected"):
            raise ValueError(f"unknown latency kind {self.kind!r}")
        if not 0.0 <= self.failure_prob <= 1.0:
            raise ValueError(f"failure_prob must be in [0, 1], got {self.failure_prob}")
        if self.kind == "constant" and not self.value_ms > 0:
            raise ValueError(f"constant latency must be > 0, got {self.value_ms}")
        if self.kind == "lognormal" and self.scale < 0:
            raise ValueError(f"lognormal scale must be >= 0, got {self.scale}")
        if self.kind == "injected" and (not self.values_ms or min(self.values_ms) <= 0):
            raise ValueError("injected latency needs a non-empty list of positive values")

    def sample(self, rng: random.Random, call_index: int = 0) -> float:
        if self.kind == "constant":
            return self.value_ms
        if self.kind == "injected":
            return self.values_ms[call_index % len(self.values_ms)]
        return sample_lognormal(rng, self.location, self.scale)

    def to_dict(self) -> dict[str, Any]:
        out: dict[str, Any] = {"kind": self.kind}
        if self.kind == "constant":
            out["value_ms"] = self.value_ms
        elif self.kind == "lognormal":
            out["location"] = self.location
            out["scale"] = self.scale
        else:
            out["values_ms"] = list(self.values_ms)
        out["failure_prob"] = self.failure_prob
        return out

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> LatencyModel:
        kind = str(data.get("kind", "constant")).lower()
        return cls(
            kind=kind,
            value_ms=float(data.get("value_ms", 1.0)),
            location=float(data.get("location", 0.0)),
            scale=float(data.get("scale", 0.0)),
            values_ms=tuple(float(v) for v in data.get("values_ms", ())),
            failure_prob=float(data.get("failure_prob", 0.0)),
        )


def check_quality(value: float) -> float:
    value = float(value)
    if not 0.0 <= value <= 1.0 or math.isnan(value):
        raise ValueError(f"quality must be in [0, 1], got {value}")
    return value


@dataclass(frozen=True)
class ModelVariant:
    variant_id: str
    required_groups: GroupSet
    quality: float
    tier: Tier
    latency: LatencyModel | None = None

    def __post_init__(self) -> None:
        check_quality(self.quality)
        if self.tier is Tier.CLIENT_SIDE and not self.required_groups.is_empty:
            raise ValueError(f"client-side variant {self.variant_id} must require no groups")
        if self.tier is Tier.MAIN and self.required_groups != self.required_groups.universe.full:
            raise ValueError(f"main variant {self.variant_id} must require the full universe")


@dataclass(frozen=True)
class Request:
    request_id: str
    amount: int
    payloads: Mapping[str, Mapping[str, Any] | None]
    arrival_time: float = 0.0

    def __post_init__(self) -> None:
        if self.amount < 0:
            raise ValueError(f"amount must be >= 0, got {self.amount}")


@dataclass(frozen=True)
class Attempt:
    variant_id: str
    start_ms: float
    end_ms: float
    result: CallResult

    def to_dict(self) -> dict[str, Any]:
        return {
            "variant": self.variant_id,
            "start_ms": _num(self.start_ms),
            "end_ms": _num(self.end_ms),
            "result": self.result.value,
        }


@dataclass(frozen=True)
class RoutingOutcome:
    """Trace of one routed request.

    ``score`` and ``tier`` are None only for Main-only ablation runs in which
    the main model never answered.
    """

    request_id: str
    score: float | None
    variant_id: str | None
    tier: Tier | None
    attempts: tuple[Attempt, ...]
    total_elapsed_ms: float
    hedged: bool = False

    def to_dict(self) -> dict[str, Any]:
        return {
            "request_id": self.request_id,
            "score": None if self.score is None else _num(self.score),
            "tier": None if self.tier is None else self.tier.value,
            "variant": self.variant_id,
            "attempts": [a.to_dict() for a in self.attempts],
            "elapsed_ms": _num(self.total_elapsed_ms),
            "hedged": self.hedged,
        }


def _num(x: float) -> float:
    # fixed rounding keeps JSON output stable across platforms
    return round(float(x), 6)
