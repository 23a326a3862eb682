"""Fallback-family planning: enumerate, prune, cover, and select variants."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Any, Iterable, Mapping

from .core import (
    GroupSet,
    LatencyModel,
    ModelVariant,
    Tier,
    Universe,
    check_quality,
    enumerate_nonempty_proper_subsets,
)

MAIN_ID = "main"
CLIENT_SIDE_ID = "client_side"


class CatalogError(ValueError):
    pass


def fallback_id(groups: GroupSet) -> str:
    return f"F({groups})"


@dataclass(frozen=True)
class VariantCatalog:
    universe: Universe
    variants: tuple[ModelVariant, ...]

    def __post_init__(self) -> None:
        ids = [v.variant_id for v in self.variants]
        if len(set(ids)) != len(ids):
            raise CatalogError(f"duplicate variant ids: {sorted(i for i in ids if ids.count(i) > 1)}")
        for tier in (Tier.MAIN, Tier.CLIENT_SIDE):
            n = sum(v.tier is tier for v in self.variants)
            if n != 1:
                raise CatalogError(f"catalog needs exactly one {tier.value} variant, found {n}")
        for v in self.variants:
            if v.required_groups.universe != self.universe:
                raise CatalogError(f"variant {v.variant_id} is defined over a different universe")

    @property
    def main(self) -> ModelVariant:
        return next(v for v in self.variants if v.tier is Tier.MAIN)

    @property
    def client_side(self) -> ModelVariant:
        return next(v for v in self.variants if v.tier is Tier.CLIENT_SIDE)

    @property
    def fallbacks(self) -> list[ModelVariant]:
        return [v for v in self.variants if v.tier is Tier.GROUP_FALLBACK]

    def get(self, variant_id: str) -> ModelVariant:
        for v in self.variants:
            if v.variant_id == variant_id:
                return v
        raise KeyError(variant_id)

    def __len__(self) -> int:
        return len(self.variants)

    def with_fallbacks(self, fallbacks: Iterable[ModelVariant]) -> VariantCatalog:
        return VariantCatalog(self.universe, (self.main, *fallbacks, self.client_side))

    def to_dict(self) -> dict[str, Any]:
        variants = []
        for v in self.variants:
            entry: dict[str, Any] = {
                "id": v.variant_id,
                "groups": str(v.required_groups),
                "quality": v.quality,
                "tier": v.tier.value,
            }
            if v.latency is not None:
                entry["latency"] = v.latency.to_dict()
            variants.append(entry)
        return {"universe": ",".join(self.universe.ids), "variants": variants}

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> VariantCatalog:
        try:
            universe = Universe.parse(data["universe"])
            variants = []
            for i, entry in enumerate(data["variants"]):
                try:
                    tier = Tier(entry["tier"])
                    latency = entry.get("latency")
                    variants.append(
                        ModelVariant(
                            variant_id=str(entry["id"]),
                            required_groups=universe.set_of(entry.get("groups", "")),
                            quality=float(entry["quality"]),
                            tier=tier,
                            latency=None if latency is None else LatencyModel.from_dict(latency),
                        )
                    )
                except (KeyError, ValueError, TypeError) as exc:
                    raise CatalogError(f"variants[{i}]: {exc}") from exc
        except KeyError as exc:
            raise CatalogError(f"catalog missing field {exc}") from exc
        return cls(universe, tuple(variants))

    def dump(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2) + "\n")

    @classmethod
    def load(cls, path: str | Path) -> VariantCatalog:
        from .config import load_document

        return cls.from_dict(load_document(path))


class GapMode(str, Enum):
    RELATIVE = "Relative"
    ABSOLUTE = "Absolute"


@dataclass(frozen=True)
class PrunePolicy:
    tolerance: float = 0.0
    mode: GapMode = GapMode.RELATIVE

    def __post_init__(self) -> None:
        if self.tolerance < 0:
            raise ValueError(f"tolerance must be >= 0, got {self.tolerance}")

    def gap(self, q_v: float, q_other: float) -> float:
        if self.mode is GapMode.ABSOLUTE:
            return q_v - q_other
        if q_v == 0:
            # zero-quality variant: anything at least as good is equivalent
            return 0.0 if q_other >= 0 else float("inf")
        return (q_v - q_other) / q_v


@dataclass(frozen=True)
class ScenarioWeights:
    weights: Mapping[GroupSet, float] = field(default_factory=dict)

    def __post_init__(self) -> None:
        if any(w < 0 for w in self.weights.values()):
            raise ValueError("scenario weights must be >= 0")
        if not any(w > 0 for w in self.weights.values()):
            raise ValueError("at least one scenario weight must be positive")

    @classmethod
    def uniform(cls, universe: Universe) -> ScenarioWeights:
        n = len(universe)
        return cls({GroupSet(m, universe): 1.0 for m in range(1 << n)})

    @classmethod
    def from_dict(cls, universe: Universe, data: Mapping[str, float]) -> ScenarioWeights:
        return cls({universe.set_of(k): float(w) for k, w in data.items()})


def enumerate_catalog(universe: GroupSet | Universe, quality_of: Mapping[GroupSet, float]) -> VariantCatalog:
    """Main + one fallback per nonempty proper subset + client-side."""
    if isinstance(universe, GroupSet):
        universe = universe.universe
    full, empty = universe.full, universe.empty

    def q(s: GroupSet) -> float:
        try:
            return check_quality(quality_of[s])
        except KeyError:
            label = str(s) or "(empty)"
            raise CatalogError(f"no quality given for group set {label}") from None

    variants = [ModelVariant(MAIN_ID, full, q(full), Tier.MAIN)]
    for s in enumerate_nonempty_proper_subsets(full):
        variants.append(ModelVariant(fallback_id(s), s, q(s), Tier.GROUP_FALLBACK))
    variants.append(ModelVariant(CLIENT_SIDE_ID, empty, q(empty), Tier.CLIENT_SIDE))
    return VariantCatalog(universe, tuple(variants))


def prune_equivalent(catalog: VariantCatalog, policy: PrunePolicy) -> VariantCatalog:
    """Drop fallbacks that a retained smaller-requirement variant matches within tolerance.

    Candidates are decided smallest-requirement first, so every dominator is
    already final when a larger variant is judged; a removed variant is always
    backed by a variant that survives.
    """
    order = sorted(catalog.fallbacks, key=lambda v: (len(v.required_groups), v.required_groups.bits, v.variant_id))
    retained: list[ModelVariant] = [catalog.client_side]
    kept: list[ModelVariant] = []
    for v in order:
        dominated = any(
            r.required_groups < v.required_groups and policy.gap(v.quality, r.quality) <= policy.tolerance
            for r in retained
        )
        if not dominated:
            retained.append(v)
            kept.append(v)
    kept_ids = {v.variant_id for v in kept}
    return VariantCatalog(
        catalog.universe,
        tuple(v for v in catalog.variants if v.tier is not Tier.GROUP_FALLBACK or v.variant_id in kept_ids),
    )


def min_cover_singletons(catalog: VariantCatalog) -> list[ModelVariant]:
    """One single-group variant per group; these alone cover every nonempty healthy set."""
    # with one group the only single-group model is Main itself
    pool = catalog.fallbacks if len(catalog.universe) > 1 else [catalog.main]
    out = []
    for i, gid in enumerate(catalog.universe.ids):
        match = [v for v in pool if v.required_groups.bits == 1 << i]
        if not match:
            raise CatalogError(f"catalog has no single-group fallback for {gid}")
        out.append(min(match, key=lambda v: v.variant_id))
    return out


def _rank_key(v: ModelVariant) -> tuple[float, int, str]:
    return (-v.quality, -len(v.required_groups), v.variant_id)


def best_variant_for(catalog: VariantCatalog, healthy: GroupSet) -> ModelVariant:
    """Highest-quality variant whose requirements are all healthy.

    Ties go to the variant using more groups, then to the smaller id.
    """
    usable = [v for v in catalog.variants if v.required_groups <= healthy]
    return min(usable, key=_rank_key)


def ranked_variants_for(variants: Iterable[ModelVariant], healthy: GroupSet) -> list[ModelVariant]:
    """Usable variants in best_variant_for preference order."""
    return sorted((v for v in variants if v.required_groups <= healthy), key=_rank_key)


def coverage_value(
    chosen: Iterable[ModelVariant], catalog: VariantCatalog, weights: ScenarioWeights
) -> float:
    """Weighted best-available quality over scenarios, with Main and client-side always present."""
    pool = [catalog.main, catalog.client_side, *chosen]
    total = 0.0
    for healthy, w in weights.weights.items():
        total += w * max(v.quality for v in pool if v.required_groups <= healthy)
    return total


def greedy_max_coverage(catalog: VariantCatalog, weights: ScenarioWeights, budget: int) -> list[ModelVariant]:
    if budget < 0:
        raise ValueError(f"budget must be >= 0, got {budget}")
    scenarios = [(h, w) for h, w in weights.weights.items() if w > 0]
    base = [catalog.main, catalog.client_side]
    best = [max(v.quality for v in base if v.required_groups <= h) for h, _ in scenarios]
    candidates = sorted(catalog.fallbacks, key=lambda v: (len(v.required_groups), v.variant_id))
    picked: list[ModelVariant] = []
    while len(picked) < budget and candidates:
        top, top_gain = None, 0.0
        for c in candidates:
            gain = 0.0
            for i, (h, w) in enumerate(scenarios):
                if c.required_groups <= h and c.quality > best[i]:
                    gain += w * (c.quality - best[i])
            # candidates are pre-sorted by the tie-break, so strict > keeps the first
            if gain > top_gain:
                top, top_gain = c, gain
        if top is None:
            break
        picked.append(top)
        candidates.remove(top)
        for i, (h, _) in enumerate(scenarios):
            if top.required_groups <= h:
                best[i] = max(best[i], top.quality)
    return picked


def relative_gap(q_main: float, q_other: float) -> float:
    if q_main == 0:
        raise ValueError("relative gap undefined for zero main quality")
    return (q_main - q_other) / q_main


def parse_quality_map(universe: Universe, data: Mapping[str, float]) -> dict[GroupSet, float]:
    """Quality file keys are canonical group strings; "" is the client-side model."""
    return {universe.set_of(k): check_quality(v) for k, v in data.items()}


def synthetic_quality(universe: Universe, q_main: float = 0.62, q_client: float = 0.26) -> dict[GroupSet, float]:
    """Placeholder qualities growing linearly with group count."""
    n = len(universe)
    return {
        GroupSet(m, universe): round(q_client + (q_main - q_client) * bin(m).count("1") / n, 6)
        for m in range(1 << n)
    }
