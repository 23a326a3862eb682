"""Fallback-aware online inference routing, planning and fault-injection simulation."""

from .core import (
    Attempt,
    CallResult,
    GroupSet,
    LatencyModel,
    ModelVariant,
    Request,
    RoutingOutcome,
    Tier,
    Universe,
    enumerate_nonempty_proper_subsets,
    subset_of,
)
from .planner import VariantCatalog, best_variant_for, enumerate_catalog, prune_equivalent
from .policy import RetryPolicy, max_attempts, should_retry
from .router import Router, VirtualClock, route

__version__ = "0.1.0"
