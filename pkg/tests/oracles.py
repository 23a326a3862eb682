"""Brute-force reference implementations and random instance generators for tests.

Nothing here calls the planner's selection code; each oracle recomputes its
answer from first principles.
"""

from __future__ import annotations

import itertools
import random

from fbmesh.core import GroupSet, ModelVariant, Tier, Universe
from fbmesh.planner import VariantCatalog, fallback_id


def all_sets(universe: Universe):
    return [GroupSet(m, universe) for m in range(1 << len(universe))]


def best_quality(variants, healthy: GroupSet) -> float:
    return max(v.quality for v in variants if v.required_groups.bits & ~healthy.bits == 0)


def brute_best(variants, healthy: GroupSet) -> ModelVariant:
    usable = [v for v in variants if v.required_groups.bits & ~healthy.bits == 0]
    top = max(v.quality for v in usable)
    tied = [v for v in usable if v.quality == top]
    most = max(len(v.required_groups) for v in tied)
    return sorted((v for v in tied if len(v.required_groups) == most), key=lambda v: v.variant_id)[0]


def coverage_gain(chosen, catalog: VariantCatalog, weights) -> float:
    """Weighted improvement over Main + client-side alone."""
    base = [catalog.main, catalog.client_side]
    total = 0.0
    for h, w in weights.items():
        total += w * (best_quality(base + list(chosen), h) - best_quality(base, h))
    return total


def brute_max_coverage(catalog: VariantCatalog, weights, k: int) -> float:
    cands = catalog.fallbacks
    k = min(k, len(cands))
    return max((coverage_gain(c, catalog, weights) for c in itertools.combinations(cands, k)), default=0.0)


def random_catalog(rng: random.Random, n: int, *, subset_prob: float = 1.0) -> VariantCatalog:
    """Qualities loosely increasing with group count, plus noise."""
    u = Universe(tuple("ABCDEFGH"[:n]))
    full = (1 << n) - 1
    variants = [ModelVariant("main", u.full, round(rng.uniform(0.6, 0.9), 4), Tier.MAIN)]
    for m in range(1, full):
        if rng.random() > subset_prob:
            continue
        s = GroupSet(m, u)
        q = 0.2 + 0.5 * len(s) / n + rng.uniform(-0.1, 0.1)
        variants.append(ModelVariant(fallback_id(s), s, round(min(max(q, 0.0), 1.0), 4), Tier.GROUP_FALLBACK))
    variants.append(ModelVariant("client_side", u.empty, round(rng.uniform(0.1, 0.3), 4), Tier.CLIENT_SIDE))
    return VariantCatalog(u, tuple(variants))


def random_weights(rng: random.Random, universe: Universe, density: float = 0.5) -> dict:
    sets = all_sets(universe)
    w = {s: round(rng.random(), 3) for s in sets if rng.random() < density}
    if not any(v > 0 for v in w.values()):
        w[rng.choice(sets)] = 1.0
    return w
