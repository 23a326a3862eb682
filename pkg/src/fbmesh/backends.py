"""Scoring backends: simulated (virtual time), in-process stub (real sleeps), remote HTTP."""

from __future__ import annotations

import random
import threading
import time
from dataclasses import dataclass
from typing import Any, Iterable, Mapping, Protocol

from .core import CallResult, LatencyModel, Request

# connection-refused style failures surface quickly
BACKEND_DOWN_LATENCY_MS = 1.0


@dataclass(frozen=True)
class BackendResult:
    result: CallResult
    score: float | None
    latency_ms: float


class Backend(Protocol):
    def invoke(
        self, variant_id: str, request: Request, timeout_ms: float, call_index: int, start_ms: float
    ) -> BackendResult: ...


@dataclass(frozen=True)
class BackendFault:
    """A backend outage window: ``down`` fails every call, ``spike`` multiplies latency."""

    variant_id: str
    start_ms: float
    end_ms: float
    mode: str  # "down" | "spike"
    multiplier: float = 1.0

    def active(self, t: float) -> bool:
        return self.start_ms <= t < self.end_ms


def _cap(result: CallResult, score: float | None, latency: float, timeout_ms: float) -> BackendResult:
    if latency > timeout_ms:
        return BackendResult(CallResult.TIMEOUT, None, float(timeout_ms))
    return BackendResult(result, score if result is CallResult.OK else None, latency)


class SimulatedBackend:
    """Returns instantly; the reported latency is virtual.

    Each call draws from its own RNG keyed by (seed, request, variant, call
    index), so the same call gets the same sample no matter when or in which
    order it is issued.
    """

    def __init__(
        self,
        latencies: Mapping[str, LatencyModel],
        seed: int = 0,
        *,
        default: LatencyModel | None = None,
        faults: Iterable[BackendFault] = (),
    ) -> None:
        self.latencies = dict(latencies)
        self.seed = seed
        self.default = default or LatencyModel("constant", value_ms=10.0)
        self.faults: dict[str, list[BackendFault]] = {}
        for f in faults:
            self.faults.setdefault(f.variant_id, []).append(f)

    def invoke(
        self, variant_id: str, request: Request, timeout_ms: float, call_index: int, start_ms: float
    ) -> BackendResult:
        rng = random.Random(f"{self.seed}/call/{request.request_id}/{variant_id}/{call_index}")
        model = self.latencies.get(variant_id, self.default)
        latency = model.sample(rng, call_index)
        failed = rng.random() < model.failure_prob
        score = rng.random()
        for fault in self.faults.get(variant_id, ()):
            if not fault.active(start_ms):
                continue
            if fault.mode == "down":
                return _cap(CallResult.FAILURE, None, BACKEND_DOWN_LATENCY_MS, timeout_ms)
            latency *= fault.multiplier
        return _cap(CallResult.FAILURE if failed else CallResult.OK, score, latency, timeout_ms)


class StubBackend:
    """In-process backend that really sleeps; used by the gateway.

    ``fail_next`` injects a number of forced failures per variant.
    """

    def __init__(self, models: Mapping[str, LatencyModel], scores: Mapping[str, float], seed: int = 0) -> None:
        self.models = dict(models)
        self.scores = dict(scores)
        self._rng = random.Random(seed)
        self._lock = threading.Lock()
        self._forced: dict[str, int] = {}

    def fail_next(self, variant_id: str, count: int) -> None:
        with self._lock:
            self._forced[variant_id] = self._forced.get(variant_id, 0) + count

    def invoke(
        self, variant_id: str, request: Request, timeout_ms: float, call_index: int, start_ms: float
    ) -> BackendResult:
        model = self.models[variant_id]
        with self._lock:
            latency = model.sample(self._rng, call_index)
            failed = self._rng.random() < model.failure_prob
            forced = self._forced.get(variant_id, 0)
            if forced:
                self._forced[variant_id] = forced - 1
                failed = True
        if failed:
            latency = min(latency, BACKEND_DOWN_LATENCY_MS)
        time.sleep(min(latency, timeout_ms) / 1000.0)
        return _cap(CallResult.FAILURE if failed else CallResult.OK, self.scores.get(variant_id, 0.5), latency, timeout_ms)


class RemoteBackend:
    """POSTs the request to a per-variant URL and expects ``{"score": x}`` back."""

    def __init__(self, urls: Mapping[str, str], connect_timeout_ms: float | Mapping[str, float] = 50.0) -> None:
        import httpx

        self.urls = dict(urls)
        if isinstance(connect_timeout_ms, Mapping):
            self.connect_timeouts = dict(connect_timeout_ms)
        else:
            self.connect_timeouts = {k: float(connect_timeout_ms) for k in self.urls}
        self._client = httpx.Client()

    def invoke(
        self, variant_id: str, request: Request, timeout_ms: float, call_index: int, start_ms: float
    ) -> BackendResult:
        import httpx

        body: dict[str, Any] = {
            "request_id": request.request_id,
            "amount": request.amount,
            "payloads": {k: v for k, v in request.payloads.items() if v is not None},
        }
        seconds = timeout_ms / 1000.0
        timeout = httpx.Timeout(seconds, connect=min(seconds, self.connect_timeouts.get(variant_id, 50.0) / 1000.0))
        t0 = time.monotonic()
        try:
            resp = self._client.post(self.urls[variant_id], json=body, timeout=timeout)
            resp.raise_for_status()
            score = float(resp.json()["score"])
        except httpx.TimeoutException:
            return BackendResult(CallResult.TIMEOUT, None, float(timeout_ms))
        except (httpx.HTTPError, KeyError, ValueError, TypeError):
            return BackendResult(CallResult.FAILURE, None, (time.monotonic() - t0) * 1000.0)
        if not 0.0 <= score <= 1.0:
            return BackendResult(CallResult.FAILURE, None, (time.monotonic() - t0) * 1000.0)
        return _cap(CallResult.OK, score, (time.monotonic() - t0) * 1000.0, timeout_ms)

    def close(self) -> None:
        self._client.close()
