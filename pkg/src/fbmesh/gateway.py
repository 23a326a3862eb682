"""HTTP inference gateway hosting the router and the embedded client-side model."""

from __future__ import annotations

import json
import os
import threading
import time
from contextlib import asynccontextmanager
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Mapping

from fastapi import FastAPI, Request as HTTPRequest
from fastapi.responses import JSONResponse, PlainTextResponse
from starlette.concurrency import run_in_threadpool

from .backends import BackendResult, RemoteBackend, StubBackend
from .config import ConfigError, load_document
from .core import CallResult, LatencyModel, Request, RoutingOutcome, Tier
from .health import BreakerConfig, GroupStatus, HealthMonitor, PayloadSchema
from .planner import CatalogError, VariantCatalog
from .policy import RetryPolicy
from .router import ClientSideModel, Router, WallClock, WallDriver

CONFIG_ENV = "FBMESH_CONFIG"
LATENCY_BUCKETS_MS = (5, 10, 25, 50, 100, 200, 300, 500, 1000)


@dataclass(frozen=True)
class StubSpec:
    latency: LatencyModel
    score: float


@dataclass(frozen=True)
class RemoteSpec:
    url: str
    connect_timeout_ms: float = 50.0
    read_timeout_ms: float | None = None


@dataclass(frozen=True)
class GatewayConfig:
    catalog: VariantCatalog
    policy: RetryPolicy
    backends: Mapping[str, StubSpec | RemoteSpec]
    host: str = "127.0.0.1"
    port: int = 8080
    schema: PayloadSchema | None = None
    breaker: BreakerConfig = BreakerConfig()
    client_side: ClientSideModel = ClientSideModel()
    seed: int = 0

    def __post_init__(self) -> None:
        for v in self.catalog.variants:
            if v.tier is Tier.CLIENT_SIDE:
                continue
            if v.variant_id not in self.backends:
                raise ConfigError(f"backends.{v.variant_id}", "missing backend entry for catalog variant")
        for vid in self.backends:
            try:
                if self.catalog.get(vid).tier is Tier.CLIENT_SIDE:
                    raise ConfigError(f"backends.{vid}", "client-side model always runs in-process")
            except KeyError:
                raise ConfigError(f"backends.{vid}", "not a catalog variant") from None


def _parse_listen(value: str) -> tuple[str, int]:
    host, _, port = str(value).rpartition(":")
    try:
        return host or "127.0.0.1", int(port)
    except ValueError:
        raise ConfigError("listen", f"expected host:port, got {value!r}") from None


def config_from_dict(data: Mapping[str, Any], base_dir: str | Path | None = None) -> GatewayConfig:
    if not isinstance(data, Mapping):
        raise ConfigError("config", "expected a mapping")
    host, port = _parse_listen(data.get("listen", "127.0.0.1:8080"))
    try:
        if isinstance(data.get("catalog"), Mapping):
            catalog = VariantCatalog.from_dict(data["catalog"])
        elif "catalog" in data:
            catalog = VariantCatalog.from_dict(load_document(Path(base_dir or ".") / data["catalog"]))
        else:
            raise ConfigError("catalog", "required (inline catalog or file path)")
    except CatalogError as exc:
        raise ConfigError("catalog", str(exc)) from exc
    try:
        policy = RetryPolicy.from_dict(data.get("policy", {}))
    except (ValueError, TypeError) as exc:
        raise ConfigError("policy", str(exc)) from exc

    backends: dict[str, StubSpec | RemoteSpec] = {}
    raw_backends = data.get("backends")
    if not isinstance(raw_backends, Mapping):
        raise ConfigError("backends", "required mapping of variant id -> backend")
    for vid, spec in raw_backends.items():
        where = f"backends.{vid}"
        kind = spec.get("kind") if isinstance(spec, Mapping) else None
        try:
            if kind == "stub":
                backends[vid] = StubSpec(LatencyModel.from_dict(spec.get("latency", {})), float(spec.get("score", 0.5)))
            elif kind == "remote":
                if "url" not in spec:
                    raise ConfigError(f"{where}.url", "required for remote backends")
                backends[vid] = RemoteSpec(str(spec["url"]), float(spec.get("connect_timeout_ms", 50.0)),
                                           spec.get("read_timeout_ms"))
            else:
                raise ConfigError(f"{where}.kind", f"expected 'stub' or 'remote', got {kind!r}")
        except (ValueError, TypeError) as exc:
            if isinstance(exc, ConfigError):
                raise
            raise ConfigError(where, str(exc)) from exc
    try:
        schema = PayloadSchema.from_dict(data["schema"]) if "schema" in data else None
    except (KeyError, ValueError, TypeError) as exc:
        raise ConfigError("schema", str(exc)) from exc
    try:
        breaker = BreakerConfig.from_dict(data.get("breaker", {}))
    except ValueError as exc:
        raise ConfigError("breaker", str(exc)) from exc
    cs = data.get("client_side", {})
    try:
        client = ClientSideModel(**{k: float(v) for k, v in cs.items()})
    except TypeError as exc:
        raise ConfigError("client_side", str(exc)) from exc
    return GatewayConfig(catalog, policy, backends, host, port, schema, breaker, client, int(data.get("seed", 0)))


def load_config(path: str | Path | None = None) -> GatewayConfig:
    path = path or os.environ.get(CONFIG_ENV)
    if not path:
        raise ConfigError("--config", f"no config file given (flag or {CONFIG_ENV})")
    path = Path(path)
    return config_from_dict(load_document(path), path.parent)


class MultiBackend:
    """Dispatches each variant to its stub or remote backend."""

    def __init__(self, specs: Mapping[str, StubSpec | RemoteSpec], seed: int = 0) -> None:
        stubs = {k: v for k, v in specs.items() if isinstance(v, StubSpec)}
        remotes = {k: v for k, v in specs.items() if isinstance(v, RemoteSpec)}
        self.stub = StubBackend({k: s.latency for k, s in stubs.items()}, {k: s.score for k, s in stubs.items()}, seed)
        self.remote = RemoteBackend(
            {k: r.url for k, r in remotes.items()}, {k: r.connect_timeout_ms for k, r in remotes.items()}
        ) if remotes else None
        self._read_caps = {k: r.read_timeout_ms for k, r in remotes.items() if r.read_timeout_ms}
        self._remote_ids = set(remotes)

    def invoke(self, variant_id: str, request: Request, timeout_ms: float, call_index: int,
               start_ms: float) -> BackendResult:
        if variant_id in self._remote_ids:
            assert self.remote is not None
            timeout = min(timeout_ms, self._read_caps.get(variant_id, timeout_ms))
            res = self.remote.invoke(variant_id, request, timeout, call_index, start_ms)
            if res.result is CallResult.TIMEOUT:
                return BackendResult(CallResult.TIMEOUT, None, timeout_ms)
            return res
        return self.stub.invoke(variant_id, request, timeout_ms, call_index, start_ms)


class GatewayMetrics:
    def __init__(self) -> None:
        self._lock = threading.Lock()
        self.requests = {t.value: 0 for t in Tier}
        self.attempts = 0
        self.timeouts = 0
        self.hedges = 0
        self.buckets = [0] * (len(LATENCY_BUCKETS_MS) + 1)
        self.latency_sum = 0.0

    def observe(self, outcome: RoutingOutcome) -> None:
        with self._lock:
            if outcome.tier is not None:
                self.requests[outcome.tier.value] += 1
            self.attempts += len(outcome.attempts)
            self.timeouts += sum(a.result is CallResult.TIMEOUT for a in outcome.attempts)
            self.hedges += outcome.hedged
            i = next((i for i, b in enumerate(LATENCY_BUCKETS_MS) if outcome.total_elapsed_ms <= b),
                     len(LATENCY_BUCKETS_MS))
            self.buckets[i] += 1
            self.latency_sum += outcome.total_elapsed_ms

    def render(self) -> str:
        with self._lock:
            lines = ["# TYPE fbmesh_requests_total counter"]
            for tier, n in self.requests.items():
                lines.append(f'fbmesh_requests_total{{tier="{tier}"}} {n}')
            lines += [
                "# TYPE fbmesh_attempts_total counter",
                f"fbmesh_attempts_total {self.attempts}",
                "# TYPE fbmesh_timeouts_total counter",
                f"fbmesh_timeouts_total {self.timeouts}",
                "# TYPE fbmesh_hedges_total counter",
                f"fbmesh_hedges_total {self.hedges}",
                "# TYPE fbmesh_route_latency_ms histogram",
            ]
            cumulative = 0
            for bound, n in zip(LATENCY_BUCKETS_MS, self.buckets):
                cumulative += n
                lines.append(f'fbmesh_route_latency_ms_bucket{{le="{bound}"}} {cumulative}')
            cumulative += self.buckets[-1]
            lines.append(f'fbmesh_route_latency_ms_bucket{{le="+Inf"}} {cumulative}')
            lines.append(f"fbmesh_route_latency_ms_sum {self.latency_sum!r}")
            lines.append(f"fbmesh_route_latency_ms_count {cumulative}")
        return "\n".join(lines) + "\n"


class _BadRequest(Exception):
    def __init__(self, status: int, detail: str) -> None:
        super().__init__(detail)
        self.status = status
        self.detail = detail


def _parse_score_body(raw: bytes, config: GatewayConfig) -> Request:
    try:
        body = json.loads(raw.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise _BadRequest(400, f"malformed JSON: {exc}") from exc
    if not isinstance(body, dict):
        raise _BadRequest(400, "body must be a JSON object")
    request_id, amount, payloads = body.get("request_id"), body.get("amount"), body.get("payloads", {})
    if not isinstance(request_id, str) or not request_id:
        raise _BadRequest(400, "request_id must be a non-empty string")
    if isinstance(amount, bool) or not isinstance(amount, int) or amount < 0:
        raise _BadRequest(400, "amount must be a non-negative integer (minor units)")
    if not isinstance(payloads, dict):
        raise _BadRequest(400, "payloads must be an object")
    unknown = sorted(g for g in payloads if g not in config.catalog.universe)
    if unknown:
        raise _BadRequest(422, f"unknown feature group(s): {unknown}")
    # hour-of-day for the client-side model comes from wall time
    return Request(request_id, amount, payloads, time.time() * 1000.0)


def create_app(config: GatewayConfig, backend: Any | None = None) -> FastAPI:
    """Build the gateway. ``backend`` overrides the configured backends (tests)."""
    hedge_pool = ThreadPoolExecutor(max_workers=32, thread_name_prefix="fbmesh-hedge")

    @asynccontextmanager
    async def lifespan(_: FastAPI):
        yield
        hedge_pool.shutdown(wait=False)

    app = FastAPI(title="fbmesh gateway", lifespan=lifespan)
    monitor = HealthMonitor(config.catalog.universe, config.breaker)
    clock = WallClock()
    router = Router(
        config.catalog,
        config.policy,
        schema=config.schema,
        monitor=monitor,
        client_model=config.client_side,
    )
    backend = backend or MultiBackend(config.backends, config.seed)
    driver = WallDriver(backend, hedge_pool, clock)
    metrics = GatewayMetrics()
    app.state.config = config
    app.state.monitor = monitor
    app.state.backend = backend
    app.state.metrics = metrics

    @app.post("/v1/score")
    async def score(http_request: HTTPRequest) -> JSONResponse:
        try:
            request = _parse_score_body(await http_request.body(), config)
        except _BadRequest as exc:
            return JSONResponse({"error": exc.detail}, status_code=exc.status)
        outcome = await run_in_threadpool(lambda: driver.run(router.plan(request, clock), request))
        metrics.observe(outcome)
        return JSONResponse(outcome.to_dict())

    @app.post("/v1/admin/flag")
    async def flag(http_request: HTTPRequest) -> JSONResponse:
        try:
            body = json.loads((await http_request.body()).decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as exc:
            return JSONResponse({"error": f"malformed JSON: {exc}"}, status_code=400)
        if not isinstance(body, dict):
            return JSONResponse({"error": "body must be a JSON object"}, status_code=400)
        group, status = body.get("group"), body.get("status")
        try:
            applied = monitor.flag_group(str(group), GroupStatus(status))
        except ValueError:
            return JSONResponse({"error": f"unknown status {status!r}"}, status_code=422)
        except KeyError:
            return JSONResponse({"error": f"unknown group {group!r}"}, status_code=422)
        return JSONResponse({"group": group, "status": applied.value})

    @app.get("/v1/health")
    def health() -> JSONResponse:
        now = clock.now_ms()
        snap = monitor.snapshot(now)
        breakers = {v.variant_id: "Closed" for v in config.catalog.variants if v.tier is not Tier.CLIENT_SIDE}
        breakers.update({vid: s.value for vid, s in monitor.breaker_states(now).items()})
        return JSONResponse({"groups": {g: s.value for g, s in snap.statuses.items()}, "breakers": breakers})

    @app.get("/v1/metrics")
    def metrics_endpoint() -> PlainTextResponse:
        return PlainTextResponse(metrics.render())

    return app


def serve(config: GatewayConfig) -> None:
    import uvicorn

    uvicorn.run(create_app(config), host=config.host, port=config.port, log_level="info")
