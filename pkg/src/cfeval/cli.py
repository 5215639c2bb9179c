"""Command line entry point: ``cfeval <subcommand> [--config FILE] [--output-dir DIR] ...``.

Exit status: 0 when every seed succeeded, 2 when some failed, 1 when all failed.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

from . import estimators, harness, propensity

log = logging.getLogger("cfeval")


def _config(args) -> harness.ExperimentConfig:
    cfg = harness.load_config(args.config) if args.config else harness.ExperimentConfig()
    if getattr(args, "methods", None):
        cfg = replace(cfg, methods=tuple(m.strip() for m in args.methods.split(",") if m.strip()))
    if getattr(args, "weight_mode", None):
        cfg = replace(cfg, weight_mode=args.weight_mode)
    if getattr(args, "seeds", None):
        cfg = replace(cfg, seeds=tuple(int(s) for s in args.seeds.split(",")))
    cfg.validate()
    return cfg


def _seeds(cfg, args) -> list[int]:
    return [s + args.seed_offset for s in cfg.seeds]


def _per_seed(cfg, args, out: Path, fn) -> int:
    """Apply ``fn(seed, seed_dir)`` to every seed with crash isolation."""
    ok = failed = 0
    for seed in _seeds(cfg, args):
        d = harness.seed_dir(out, seed)
        try:
            fn(seed, d)
            ok += 1
        except Exception as exc:
            failed += 1
            log.error("seed %s: %s: %s", seed, type(exc).__name__, exc)
    return 0 if not failed else (2 if ok else 1)


def cmd_simulate(args) -> int:
    cfg = _config(args)
    out = harness.resolve_output_dir(args.output_dir, cfg)

    def fn(seed, d):
        d.mkdir(parents=True, exist_ok=True)
        harness.stage_simulate(cfg, seed, d)

    return _per_seed(cfg, args, out, fn)


def cmd_weights(args) -> int:
    cfg = _config(args)
    out = harness.resolve_output_dir(args.output_dir, cfg)

    def fn(seed, d):
        bundle, _, source, targets = harness.load_simulation(d)
        harness.stage_weights(cfg, seed, bundle, source, targets, d)

    return _per_seed(cfg, args, out, fn)


def cmd_train(args) -> int:
    cfg = _config(args)
    out = harness.resolve_output_dir(args.output_dir, cfg)

    def fn(seed, d):
        bundle = harness.load_simulation(d)[0]
        harness.stage_train(cfg, seed, bundle, harness.load_weights(cfg, d), out=d)

    return _per_seed(cfg, args, out, fn)


def cmd_evaluate(args) -> int:
    cfg = _config(args)
    out = harness.resolve_output_dir(args.output_dir, cfg)

    def fn(seed, d):
        bundle, truth, source, targets = harness.load_simulation(d)
        table = harness.load_weights(cfg, d)
        models = harness.load_models(cfg, d)
        reports = harness.stage_evaluate(cfg, seed, bundle, truth, source, targets, table, models, d)
        if args.external_lifts:
            ext = harness.ingest_external_lifts(args.external_lifts, reports, cfg.tau)
            estimators.save_reports(
                ext, d / "recovery_report_external.json", {"config_hash": cfg.config_hash(), "seed": seed}
            )

    return _per_seed(cfg, args, out, fn)


def cmd_run(args) -> int:
    cfg = _config(args)
    out = harness.resolve_output_dir(args.output_dir, cfg)
    arts = harness.run(cfg, out, workers=args.workers, seed_offset=args.seed_offset)
    for r in arts.results:
        if not r.ok:
            log.error("seed %s failed: %s", r.seed, r.error)
    if arts.summary_json is not None:
        print(arts.summary_json.read_text(encoding="utf-8"), end="")
    return arts.exit_code


def cmd_sweep_beta(args) -> int:
    cfg = _config(args)
    if args.beta_grid:
        cfg = replace(cfg, beta_grid=tuple(float(b) for b in args.beta_grid.split(",")))
    elif not cfg.beta_grid:
        cfg = replace(cfg, beta_grid=(0.0, 0.5, 1.0, 2.0))
    out = harness.resolve_output_dir(args.output_dir, cfg)
    rows = harness.sweep_beta(cfg, out, seed_offset=args.seed_offset)
    for b, m in rows:
        print(f"beta={b:g}\tmean_rec_cv={'undefined' if m is None else f'{m:.6g}'}")
    return 0 if any(m is not None for _, m in rows) else 1


def cmd_report(args) -> int:
    cfg = _config(args)
    out = harness.resolve_output_dir(args.output_dir, cfg)
    found = harness.collect_reports(out)
    if not found:
        log.error("no recovery reports under %s", out)
        return 1
    results = [harness.SeedResult(s, True, r) for s, r in sorted(found.items())]
    arts = harness.emit_report(harness.RunArtifacts(out, cfg.config_hash(), results))
    print(arts.summary_json.read_text(encoding="utf-8"), end="")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="cfeval", description="Counterfactual evaluation of ranking-policy changes.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--config", help="experiment config (JSON)")
        sp.add_argument("--output-dir", help=f"output directory (fallback: ${harness.ENV_OUTPUT_DIR})")
        sp.add_argument("--seed-offset", type=int, default=0)
        sp.add_argument("--methods", help="comma list from proposed,baseline,ips")
        sp.add_argument("--weight-mode", choices=[propensity.ORACLE, propensity.ESTIMATED])
        sp.add_argument("--seeds", help="comma list overriding the config seeds")
        return sp

    common(sub.add_parser("simulate", help="generate bundles, truth and policies")).set_defaults(fn=cmd_simulate)
    common(sub.add_parser("weights", help="compute density-ratio weights")).set_defaults(fn=cmd_weights)
    common(sub.add_parser("train", help="train reward models")).set_defaults(fn=cmd_train)
    ev = common(sub.add_parser("evaluate", help="estimate lifts and recovery"))
    ev.add_argument("--external-lifts", help="JSON file of measured lifts per target k")
    ev.set_defaults(fn=cmd_evaluate)
    r = common(sub.add_parser("run", help="all stages for every seed, then report"))
    r.add_argument("--workers", type=int, default=1)
    r.set_defaults(fn=cmd_run)
    sb = common(sub.add_parser("sweep-beta", help="proposed-method rec_cv across beta values"))
    sb.add_argument("--beta-grid", help="comma list, default 0,0.5,1,2")
    sb.set_defaults(fn=cmd_sweep_beta)
    common(sub.add_parser("report", help="summary.csv and comparison.svg from existing reports")).set_defaults(
        fn=cmd_report
    )
    sub.add_parser("default-config", help="print the default config").set_defaults(fn=cmd_default_config)
    return p


def cmd_default_config(args) -> int:
    print(json.dumps(harness.ExperimentConfig().to_dict(), indent=2, sort_keys=True))
    return 0


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.fn(args)
    except (harness.ExperimentError, ValueError, OSError) as exc:
        log.error("%s", exc)
        return 1


if __name__ == "__main__":
    sys.exit(main())
