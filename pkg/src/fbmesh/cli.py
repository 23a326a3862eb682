"""Command-line entry point: ``fbmesh plan|simulate|serve|report``."""

from __future__ import annotations

import argparse
import csv
import json
import sys
from pathlib import Path
from typing import Sequence

from .config import ConfigError, load_document
from .core import Universe
from .planner import (
    CatalogError,
    GapMode,
    PrunePolicy,
    ScenarioWeights,
    VariantCatalog,
    best_variant_for,
    enumerate_catalog,
    greedy_max_coverage,
    parse_quality_map,
    prune_equivalent,
    relative_gap,
    synthetic_quality,
)

EXIT_OK, EXIT_RUNTIME, EXIT_CONFIG = 0, 1, 2


class _Parser(argparse.ArgumentParser):
    def error(self, message: str) -> None:  # argparse already exits 2; keep the message terse
        self.print_usage(sys.stderr)
        self.exit(EXIT_CONFIG, f"{self.prog}: error: {message}\n")


def _build_catalog(args: argparse.Namespace) -> tuple[VariantCatalog, bool]:
    """Catalog from --catalog, or enumerated from --universe and --quality-file."""
    if getattr(args, "catalog", None):
        return VariantCatalog.from_dict(load_document(args.catalog)), False
    if not args.universe:
        raise ConfigError("--universe", "required unless --catalog is given")
    try:
        universe = Universe.parse(args.universe)
    except ValueError as exc:
        raise ConfigError("--universe", str(exc)) from exc
    if len(universe) == 0:
        raise ConfigError("--universe", "needs at least one feature group")
    if args.quality_file:
        raw = load_document(args.quality_file)
        if not isinstance(raw, dict):
            raise ConfigError("--quality-file", "expected a mapping of group set -> quality")
        try:
            quality = parse_quality_map(universe, raw)
        except (KeyError, ValueError) as exc:
            raise ConfigError("--quality-file", str(exc)) from exc
        synthesized = False
    else:
        quality, synthesized = synthetic_quality(universe), True
    try:
        return enumerate_catalog(universe, quality), synthesized
    except CatalogError as exc:
        raise ConfigError("--quality-file", str(exc)) from exc


def _print_table(rows: list[tuple[str, ...]], headers: tuple[str, ...]) -> None:
    widths = [max(len(h), *(len(r[i]) for r in rows)) if rows else len(h) for i, h in enumerate(headers)]
    print("  ".join(h.ljust(w) for h, w in zip(headers, widths)))
    for r in rows:
        print("  ".join(c.ljust(w) for c, w in zip(r, widths)))


def _plan_table(original: VariantCatalog, kept: VariantCatalog) -> None:
    kept_ids = {v.variant_id for v in kept.variants}
    q_main = original.main.quality
    rows = []
    for v in original.variants:
        gap = f"{relative_gap(q_main, v.quality):.4f}" if q_main > 0 else "n/a"
        rows.append((v.variant_id, str(v.required_groups) or "-", v.tier.value, f"{v.quality:.4f}", gap,
                     "kept" if v.variant_id in kept_ids else "dropped"))
    _print_table(rows, ("variant", "groups", "tier", "quality", "gap_vs_main", "status"))


def cmd_plan(args: argparse.Namespace) -> int:
    catalog, synthesized = _build_catalog(args)
    if synthesized:
        print("note: no --quality-file given; using placeholder qualities", file=sys.stderr)
    if args.action == "enumerate":
        result = catalog
    elif args.action == "prune":
        if args.tolerance < 0:
            raise ConfigError("--tolerance", "must be >= 0")
        result = prune_equivalent(catalog, PrunePolicy(args.tolerance, GapMode(args.mode)))
    else:
        if args.budget is None or args.budget < 0:
            raise ConfigError("--budget", "cover needs --budget >= 0")
        if args.weights_file:
            raw = load_document(args.weights_file)
            try:
                weights = ScenarioWeights.from_dict(catalog.universe, raw)
            except (KeyError, ValueError, AttributeError) as exc:
                raise ConfigError("--weights-file", str(exc)) from exc
        else:
            weights = ScenarioWeights.uniform(catalog.universe)
        result = catalog.with_fallbacks(greedy_max_coverage(catalog, weights, args.budget))
    _plan_table(catalog, result)
    if args.out:
        Path(args.out).parent.mkdir(parents=True, exist_ok=True)
        result.dump(args.out)
        print(f"wrote {len(result)} variants to {args.out}")
    else:
        print(json.dumps(result.to_dict(), indent=2))
    return EXIT_OK


def cmd_simulate(args: argparse.Namespace) -> int:
    from .sim import load_scenario, run_scenario

    scenario = load_scenario(args.scenario)
    if args.seed is not None:
        scenario = scenario.with_seed(args.seed)
    result = run_scenario(scenario, ablate_fallback=args.ablate_fallback)
    result.write(args.out_dir)
    s = result.report.summary()
    print(
        f"{s['request_count']} requests, {s['windows']} windows, "
        f"sla_miss_rate={s['sla_miss_rate']}, outputs in {args.out_dir}"
    )
    return EXIT_OK


def cmd_serve(args: argparse.Namespace) -> int:
    from .gateway import load_config, serve

    serve(load_config(args.config))
    return EXIT_OK


def cmd_report(args: argparse.Namespace) -> int:
    path = Path(args.input)
    try:
        with path.open(newline="") as fh:
            rows = list(csv.reader(fh))
    except OSError as exc:
        raise ConfigError("--in", f"cannot read {path}: {exc.strerror}") from exc
    if not rows:
        raise ConfigError("--in", "empty file (no header)")
    header, body = tuple(rows[0]), [tuple(r) for r in rows[1:] if r]
    _print_table(body, header)
    if body:
        idx = {h: i for i, h in enumerate(header)}
        counts = [int(r[idx["request_count"]]) for r in body]
        total = sum(counts)

        def weighted(col: str) -> float:
            return sum(float(r[idx[col]]) * n for r, n in zip(body, counts)) / total if total else 0.0

        print()
        print(f"windows: {len(body)}  requests: {total}  "
              f"max_window_p99_ms: {max(float(r[idx['p99_latency_ms']]) for r in body)!r}")
        print("  ".join(f"{c}: {weighted(c):.6f}" for c in
                        ("timeout_rate", "frac_main", "frac_fallback", "frac_clientside",
                         "weighted_quality", "sla_miss_rate")))
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="fbmesh", description="Fallback-aware inference routing: planner, simulator, gateway.")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    plan = sub.add_parser("plan", help="build the fallback catalog")
    plan.add_argument("action", choices=("enumerate", "prune", "cover"))
    plan.add_argument("--universe", help="comma-separated feature groups, e.g. A,B,C")
    plan.add_argument("--catalog", help="existing catalog file instead of --universe/--quality-file")
    plan.add_argument("--quality-file", help='mapping "A,B" -> quality; "" is the client-side model')
    plan.add_argument("--tolerance", type=float, default=0.0)
    plan.add_argument("--mode", choices=[m.value for m in GapMode], default=GapMode.RELATIVE.value)
    plan.add_argument("--budget", type=int)
    plan.add_argument("--weights-file", help='mapping healthy group set "A,C" -> weight')
    plan.add_argument("--out", help="catalog file to write (stdout if omitted)")
    plan.set_defaults(func=cmd_plan)

    sim = sub.add_parser("simulate", help="run a fault-injection scenario")
    sim.add_argument("--scenario", required=True)
    sim.add_argument("--seed", type=int)
    sim.add_argument("--out-dir", required=True)
    sim.add_argument("--ablate-fallback", action="store_true", help="Main-only routing, for comparison")
    sim.set_defaults(func=cmd_simulate)

    srv = sub.add_parser("serve", help="run the HTTP gateway")
    srv.add_argument("--config", help="gateway config (or FBMESH_CONFIG)")
    srv.set_defaults(func=cmd_serve)

    rep = sub.add_parser("report", help="summarise a metrics.csv")
    rep.add_argument("--in", dest="input", required=True)
    rep.set_defaults(func=cmd_report)
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"fbmesh: invalid configuration: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except Exception as exc:  # noqa: BLE001
        print(f"fbmesh: error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
