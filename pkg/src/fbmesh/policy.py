"""Retry budget arithmetic, transaction-time retry decisions and value-based hedging."""

from __future__ import annotations

import threading
from collections import deque
from dataclasses import dataclass
from enum import Enum
from typing import Any, Iterable, Mapping

from .core import CallResult, Request


class Decision(str, Enum):
    RETRY_MAIN = "RetryMain"
    GO_FALLBACK = "GoFallback"


@dataclass(frozen=True)
class RetryPolicy:
    sla_budget_ms: int = 300
    attempt_timeout_ms: int = 100
    reserve_ms: int = 0
    retry_penalty: float = 0.01
    hedge_value_threshold: int = 10_000
    failure_prob_window: int = 20
    amount_cap: int = 100_000

    def __post_init__(self) -> None:
        if self.sla_budget_ms <= 0:
            raise ValueError("sla_budget_ms must be > 0")
        if self.attempt_timeout_ms <= 0:
            raise ValueError("attempt_timeout_ms must be > 0")
        if not 0 <= self.reserve_ms < self.sla_budget_ms:
            raise ValueError("reserve_ms must satisfy 0 <= reserve_ms < sla_budget_ms")
        if self.retry_penalty < 0:
            raise ValueError("lambda must be >= 0")
        if self.hedge_value_threshold < 0:
            raise ValueError("hedge_value_threshold must be >= 0")
        if self.failure_prob_window < 1:
            raise ValueError("failure_prob_window must be >= 1")
        if self.amount_cap <= 0:
            raise ValueError("amount_cap must be > 0")

    @property
    def main_budget_ms(self) -> int:
        return self.sla_budget_ms - self.reserve_ms

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> RetryPolicy:
        known = {
            "sla_budget_ms": int,
            "attempt_timeout_ms": int,
            "reserve_ms": int,
            "lambda": float,
            "hedge_value_threshold": int,
            "failure_prob_window": int,
            "amount_cap": int,
        }
        unknown = set(data) - set(known)
        if unknown:
            raise ValueError(f"unknown policy field(s): {sorted(unknown)}")
        kwargs = {("retry_penalty" if k == "lambda" else k): known[k](v) for k, v in data.items()}
        return cls(**kwargs)

    def to_dict(self) -> dict[str, Any]:
        return {
            "sla_budget_ms": self.sla_budget_ms,
            "attempt_timeout_ms": self.attempt_timeout_ms,
            "reserve_ms": self.reserve_ms,
            "lambda": self.retry_penalty,
            "hedge_value_threshold": self.hedge_value_threshold,
            "failure_prob_window": self.failure_prob_window,
            "amount_cap": self.amount_cap,
        }


@dataclass(frozen=True)
class RetryContext:
    attempts_used: int
    elapsed_ms: float
    p_fail_next: float
    q_main: float
    q_best_fallback: float
    amount: int
    amount_cap: int = 100_000


def max_attempts(policy: RetryPolicy) -> int:
    return max(1, policy.main_budget_ms // policy.attempt_timeout_ms)


def effective_timeout(policy: RetryPolicy) -> int:
    """Per-attempt timeout, clamped when one attempt does not fit the main budget."""
    return min(policy.attempt_timeout_ms, policy.main_budget_ms)


def retry_score(policy: RetryPolicy, ctx: RetryContext) -> float:
    value_weight = min(1.0, ctx.amount / ctx.amount_cap)
    gain = (1.0 - ctx.p_fail_next) * (ctx.q_main - ctx.q_best_fallback) * value_weight
    return gain - policy.retry_penalty * (policy.attempt_timeout_ms / policy.sla_budget_ms)


def should_retry(policy: RetryPolicy, ctx: RetryContext) -> Decision:
    if ctx.attempts_used >= max_attempts(policy):
        return Decision.GO_FALLBACK
    if policy.main_budget_ms - ctx.elapsed_ms < policy.attempt_timeout_ms:
        return Decision.GO_FALLBACK
    if retry_score(policy, ctx) > 0:
        return Decision.RETRY_MAIN
    return Decision.GO_FALLBACK


def should_hedge(policy: RetryPolicy, request: Request, catalog_has_fallback: bool) -> bool:
    return catalog_has_fallback and request.amount >= policy.hedge_value_threshold


def estimate_p_fail(recent_results: Iterable[CallResult], window: int) -> float:
    """Share of non-Ok results among the last ``window`` calls; 0.0 with no history."""
    if window < 1:
        raise ValueError("window must be >= 1")
    recent = list(recent_results)[-window:]
    if not recent:
        return 0.0
    return sum(r is not CallResult.OK for r in recent) / len(recent)


class FailureWindow:
    """Thread-safe sliding record of recent call results."""

    def __init__(self, window: int, history: Iterable[CallResult] = ()) -> None:
        if window < 1:
            raise ValueError("window must be >= 1")
        self.window = window
        self._results: deque[CallResult] = deque(history, maxlen=window)
        self._lock = threading.Lock()

    def record(self, result: CallResult) -> None:
        with self._lock:
            self._results.append(result)

    def estimate(self) -> float:
        with self._lock:
            return estimate_p_fail(self._results, self.window)
