"""End-to-end experiments: simulate -> weights -> train -> evaluate -> report.

Each seed writes into its own ``seed_<s>/`` directory, so seeds can run in
separate processes without sharing anything but the (read-only) config.
"""

from __future__ import annotations

import hashlib
import json
import logging
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
from threadpoolctl import threadpool_limits

from . import core, estimators, propensity, report, sim
from ._rng import stream
from .reward_model import BASELINE, PROPOSED, RewardModel, TrainConfig, train

log = logging.getLogger(__name__)

IPS = "ips"
METHODS = (PROPOSED, BASELINE, IPS)
METHOD_TAGS = {PROPOSED: estimators.DM_PROPOSED, BASELINE: estimators.DM_BASELINE, IPS: estimators.IPS}
ENV_OUTPUT_DIR = "CFEVAL_OUTPUT_DIR"


class ExperimentError(RuntimeError):
    pass


class MissingLiftError(KeyError):
    pass


@dataclass(frozen=True)
class ExperimentConfig:
    sim: sim.SimConfig = field(default_factory=sim.SimConfig)
    train: dict = field(
        default_factory=lambda: {
            PROPOSED: TrainConfig(weight_mode=PROPOSED),
            BASELINE: TrainConfig(weight_mode=BASELINE),
        }
    )
    weight_mode: str = propensity.ORACLE
    methods: tuple = METHODS
    seeds: tuple = tuple(range(10))
    beta_grid: Optional[tuple] = None
    clip_cap: Optional[float] = None
    density_ratio: dict = field(default_factory=dict)
    ips_self_normalized: bool = True
    tau: float = estimators.DEFAULT_TAU
    output_dir: Optional[str] = None

    def __post_init__(self):
        object.__setattr__(self, "methods", tuple(self.methods))
        object.__setattr__(self, "seeds", tuple(int(s) for s in self.seeds))
        if self.beta_grid is not None:
            object.__setattr__(self, "beta_grid", tuple(float(b) for b in self.beta_grid))

    def validate(self) -> None:
        if not self.methods:
            raise ExperimentError("at least one method is required")
        unknown = set(self.methods) - set(METHODS)
        if unknown:
            raise ExperimentError(f"unknown methods {sorted(unknown)}")
        if not self.seeds:
            raise ExperimentError("seeds must be nonempty")
        if self.weight_mode not in (propensity.ORACLE, propensity.ESTIMATED):
            raise ExperimentError(f"unknown weight_mode {self.weight_mode!r}")
        if self.weight_mode == propensity.ORACLE and not self.sim.oracle:
            raise ExperimentError("oracle weights need sim.oracle = true")
        if self.clip_cap is not None and not self.clip_cap > 0:
            raise ExperimentError("clip_cap must be > 0")
        for m in (PROPOSED, BASELINE):
            if m in self.methods and m not in self.train:
                raise ExperimentError(f"no train config for method {m}")
        for tc in self.train.values():
            tc.validate()
        self.sim.validate()

    @property
    def effective_clip_cap(self) -> Optional[float]:
        if self.clip_cap is not None:
            return self.clip_cap
        return propensity.DEFAULT_ESTIMATED_CAP if self.weight_mode == propensity.ESTIMATED else None

    def to_dict(self) -> dict:
        return {
            "sim": self.sim.to_dict(),
            "train": {m: tc.to_dict() for m, tc in sorted(self.train.items())},
            "weight_mode": self.weight_mode,
            "methods": list(self.methods),
            "seeds": list(self.seeds),
            "beta_grid": None if self.beta_grid is None else list(self.beta_grid),
            "clip_cap": self.clip_cap,
            "density_ratio": dict(self.density_ratio),
            "ips_self_normalized": self.ips_self_normalized,
            "tau": self.tau,
            "output_dir": self.output_dir,
        }

    @classmethod
    def from_dict(cls, obj: dict) -> "ExperimentConfig":
        obj = dict(obj)
        unknown = set(obj) - set(cls.__dataclass_fields__)
        if unknown:
            raise ExperimentError(f"unknown config keys: {sorted(unknown)}")
        if "sim" in obj:
            obj["sim"] = sim.SimConfig.from_dict(obj["sim"])
        if "train" in obj:
            trains = {}
            for m, tc in obj["train"].items():
                tc = dict(tc)
                tc.setdefault("weight_mode", m)
                trains[m] = TrainConfig.from_dict(tc)
            defaults = cls().train
            for m in defaults:
                trains.setdefault(m, defaults[m])
            obj["train"] = trains
        return cls(**obj)

    def config_hash(self) -> str:
        """Stable hash of the semantic content; key order and output_dir do not matter."""
        d = self.to_dict()
        d.pop("output_dir")
        blob = json.dumps(d, sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode("utf-8")).hexdigest()[:16]


def load_config(path) -> ExperimentConfig:
    with open(path, encoding="utf-8") as fh:
        return ExperimentConfig.from_dict(json.load(fh))


def resolve_output_dir(flag: Optional[str], config: ExperimentConfig) -> Path:
    for cand in (flag, os.environ.get(ENV_OUTPUT_DIR), config.output_dir):
        if cand:
            return Path(cand)
    return Path("cfeval_runs")


def _dump(obj, path: Path) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True)
        fh.write("\n")


# ---------------------------------------------------------------- stages

def seed_dir(output_dir, seed: int) -> Path:
    return Path(output_dir) / f"seed_{seed}"


def stage_simulate(config: ExperimentConfig, seed: int, out: Optional[Path] = None):
    sc = replace(config.sim, seed=seed)
    truth = sim.make_ground_truth(sc, stream(seed, "truth"))
    source, targets = sim.make_policies(sc, truth, stream(seed, "policies"))
    bundle = sim.simulate(sc, truth, source, targets)
    if out is not None:
        core.save_bundle(bundle, out)
        meta_path = out / "bundle_meta.json"
        meta = json.loads(meta_path.read_text(encoding="utf-8"))
        meta["config_hash"] = config.config_hash()
        _dump(meta, meta_path)
        sim.save_truth(truth, out / "truth.json")
        sim.save_policies(source, targets, out / "policies.json")
    return bundle, truth, source, targets


def load_simulation(out: Path):
    bundle = core.load_bundle(out)
    truth = sim.load_truth(out / "truth.json")
    source, targets = sim.load_policies(out / "policies.json")
    return bundle, truth, source, targets


def stage_weights(config: ExperimentConfig, seed: int, bundle, source=None, targets=None, out: Optional[Path] = None):
    if config.weight_mode == propensity.ORACLE:
        table = propensity.oracle_weights(bundle, source, targets)
    else:
        hyper = dict(config.density_ratio)
        hyper["seed"] = seed
        models = propensity.fit_density_ratios(bundle, **hyper)
        table = propensity.estimate_weights(models, bundle)
    cap = config.effective_clip_cap
    if cap is not None:
        table = propensity.clip_weights(table, cap)
    if out is not None:
        table.save(out / "weights.jsonl")
        diag = propensity.weight_diagnostics(table)
        diag["config_hash"] = config.config_hash()
        diag["seed"] = seed
        _dump(diag, out / "weights_report.json")
    return table


def load_weights(config: ExperimentConfig, out: Path):
    return propensity.WeightTable.load(out / "weights.jsonl", config.effective_clip_cap)


def stage_train(config: ExperimentConfig, seed: int, bundle, table, methods=None, out: Optional[Path] = None) -> dict:
    models = {}
    for m in methods or config.methods:
        if m == IPS:
            continue
        tc = replace(config.train[m], seed=seed, weight_mode=m)
        model = train(bundle, table, tc)
        models[m] = model
        if out is not None:
            model.save(out / f"reward_model_{m}.json")
    return models


def load_models(config: ExperimentConfig, out: Path) -> dict:
    return {
        m: RewardModel.load(out / f"reward_model_{m}.json")
        for m in config.methods
        if m != IPS and (out / f"reward_model_{m}.json").exists()
    }


def estimate_lifts(config: ExperimentConfig, bundle, table, models: dict) -> dict:
    """Per-method list of K LiftEstimates."""
    out = {}
    for m in config.methods:
        if m == IPS:
            w = table.aligned(bundle)
            out[m] = [
                estimators.estimate_lift_ips(bundle.source.rewards, w[:, k - 1], k, config.ips_self_normalized)
                for k in range(1, bundle.K + 1)
            ]
        elif m in models:
            out[m] = [estimators.estimate_lift_dm(models[m], bundle, k, METHOD_TAGS[m]) for k in range(1, bundle.K + 1)]
    return out


def stage_evaluate(
    config: ExperimentConfig,
    seed: int,
    bundle,
    truth,
    source,
    targets,
    table,
    models: dict,
    out: Optional[Path] = None,
    true_lifts: Optional[Sequence[float]] = None,
) -> dict:
    lifts = estimate_lifts(config, bundle, table, models)
    if true_lifts is None:
        true_lifts = sim.exact_true_lifts(targets, source, truth, bundle)
        tag = "exact"
    else:
        tag = "external"
    reports = {
        METHOD_TAGS[m]: estimators.build_report(METHOD_TAGS[m], true_lifts, [e.value for e in ests], config.tau, tag)
        for m, ests in lifts.items()
    }
    if out is not None:
        estimators.save_reports(reports, out / "recovery_report.json", {"config_hash": config.config_hash(), "seed": seed})
    return reports


# ---------------------------------------------------------------- runs

@dataclass
class SeedResult:
    seed: int
    ok: bool
    reports: dict = field(default_factory=dict)
    error: Optional[str] = None


@dataclass
class RunArtifacts:
    output_dir: Path
    config_hash: str
    results: list
    summary_csv: Optional[Path] = None
    summary_json: Optional[Path] = None
    comparison_svg: Optional[Path] = None

    @property
    def succeeded(self) -> list:
        return [r for r in self.results if r.ok]

    @property
    def exit_code(self) -> int:
        ok = len(self.succeeded)
        if ok == len(self.results):
            return 0
        return 2 if ok else 1

    def seed_reports(self) -> dict:
        return {r.seed: r.reports for r in self.succeeded}


def run_seed(config: ExperimentConfig, seed: int, output_dir, write: bool = True) -> SeedResult:
    """All stages for one seed; any failure is captured, never raised."""
    out = seed_dir(output_dir, seed) if write else None
    try:
        with threadpool_limits(limits=1):
            if out is not None:
                out.mkdir(parents=True, exist_ok=True)
            bundle, truth, source, targets = stage_simulate(config, seed, out)
            table = stage_weights(config, seed, bundle, source, targets, out)
            models = stage_train(config, seed, bundle, table, out=out)
            reports = stage_evaluate(config, seed, bundle, truth, source, targets, table, models, out)
        return SeedResult(seed, True, reports)
    except Exception as exc:  # isolate the seed; the run carries on
        log.warning("seed %s failed: %s", seed, exc)
        if out is not None:
            _dump({"seed": seed, "error": f"{type(exc).__name__}: {exc}"}, out / "error.json")
        return SeedResult(seed, False, error=f"{type(exc).__name__}: {exc}")


def _run_seed_star(args):
    return run_seed(*args)


def run(config: ExperimentConfig, output_dir=None, workers: int = 1, seed_offset: int = 0, write: bool = True) -> RunArtifacts:
    config.validate()
    seeds = [s + seed_offset for s in config.seeds]
    output_dir = Path(output_dir) if output_dir is not None else resolve_output_dir(None, config)
    if write:
        output_dir.mkdir(parents=True, exist_ok=True)
        _dump(config.to_dict() | {"config_hash": config.config_hash()}, output_dir / "config.json")
    jobs = [(config, s, output_dir, write) for s in seeds]
    if workers > 1 and len(seeds) > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(_run_seed_star, jobs))
    else:
        results = [run_seed(*j) for j in jobs]
    arts = RunArtifacts(output_dir, config.config_hash(), results)
    if write and arts.succeeded:
        emit_report(arts)
    return arts


def emit_report(artifacts: RunArtifacts) -> RunArtifacts:
    if not artifacts.succeeded:
        raise ExperimentError("no completed seeds to report")
    rows = report.summary_rows(artifacts.seed_reports())
    out = Path(artifacts.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    artifacts.summary_csv = out / "summary.csv"
    report.write_summary_csv(rows, artifacts.summary_csv, artifacts.config_hash)
    stats = report.method_stats(rows)
    stats["config_hash"] = artifacts.config_hash
    stats["seeds_ok"] = [r.seed for r in artifacts.succeeded]
    stats["seeds_failed"] = {str(r.seed): r.error for r in artifacts.results if not r.ok}
    artifacts.summary_json = out / "summary.json"
    _dump(stats, artifacts.summary_json)
    artifacts.comparison_svg = out / "comparison.svg"
    artifacts.comparison_svg.write_text(
        report.render_svg(rows, config_hash=artifacts.config_hash), encoding="utf-8", newline="\n"
    )
    return artifacts


def collect_reports(output_dir) -> dict:
    """seed -> {method: RecoveryReport} for every seed directory holding a report."""
    found = {}
    for d in sorted(Path(output_dir).glob("seed_*")):
        p = d / "recovery_report.json"
        if p.exists():
            reports, header = estimators.load_reports(p)
            found[int(header.get("seed", d.name.split("_", 1)[1]))] = reports
    return found


def sweep_beta(config: ExperimentConfig, output_dir=None, seed_offset: int = 0, write: bool = True) -> list[tuple]:
    """Mean proposed-method rec_cv for each beta; data and weights are shared across betas."""
    config.validate()
    if not config.beta_grid:
        raise ExperimentError("beta_grid must be nonempty")
    if PROPOSED not in config.methods:
        raise ExperimentError("sweep_beta needs the proposed method")
    per_beta = {b: [] for b in config.beta_grid}
    for s in config.seeds:
        seed = s + seed_offset
        try:
            with threadpool_limits(limits=1):
                bundle, truth, source, targets = stage_simulate(config, seed)
                table = stage_weights(config, seed, bundle, source, targets)
                true_lifts = sim.exact_true_lifts(targets, source, truth, bundle)
                for b in config.beta_grid:
                    tc = replace(config.train[PROPOSED], beta=b, seed=seed, weight_mode=PROPOSED)
                    model = train(bundle, table, tc)
                    est = [estimators.estimate_lift_dm(model, bundle, k).value for k in range(1, bundle.K + 1)]
                    rep = estimators.build_report(estimators.DM_PROPOSED, true_lifts, est, config.tau)
                    per_beta[b].append(rep.rec_cv)
        except Exception as exc:
            log.warning("seed %s failed during beta sweep: %s", seed, exc)
    rows = []
    for b in config.beta_grid:
        vals = [v for v in per_beta[b] if v is not None]
        rows.append((b, float(np.mean(vals)) if vals else None, len(vals)))
    if write:
        out = Path(output_dir) if output_dir is not None else resolve_output_dir(None, config)
        out.mkdir(parents=True, exist_ok=True)
        lines = [f"# config_hash={config.config_hash()}", "beta,mean_rec_cv,n_seeds"]
        lines += [f"{b!r},{'' if m is None else repr(m)},{n}" for b, m, n in rows]
        (out / "beta_sweep.csv").write_bytes(("\n".join(lines) + "\n").encode("utf-8"))
    return [(b, m) for b, m, _ in rows]


# ---------------------------------------------------------------- external lifts

def read_external_lifts(path) -> dict:
    """k -> (lift, std_error or None) from a JSON mapping or a list of records."""
    with open(path, encoding="utf-8") as fh:
        obj = json.load(fh)
    out = {}
    if isinstance(obj, dict):
        obj = obj.get("lifts", obj)
    if isinstance(obj, dict):
        for k, v in obj.items():
            if isinstance(v, dict):
                out[int(k)] = (float(v["lift"]), v.get("std_error"))
            else:
                out[int(k)] = (float(v), None)
    else:
        for rec in obj:
            out[int(rec["k"])] = (float(rec["lift"]), rec.get("std_error"))
    return out


def ingest_external_lifts(path, reports: dict, tau: float = estimators.DEFAULT_TAU) -> dict:
    """Re-score reports against externally measured lifts (e.g. from a real A/B test).

    A lift whose magnitude is within two of its standard errors (when one is
    given) yields an undefined recovery.
    """
    lifts = read_external_lifts(path)
    out = {}
    for method, rep in reports.items():
        K = rep.K
        missing = [k for k in range(1, K + 1) if k not in lifts]
        if missing:
            raise MissingLiftError(f"external lift file {path} has no entry for target k={missing[0]}")
        true = [lifts[k][0] for k in range(1, K + 1)]
        new = estimators.build_report(method, true, rep.estimated_lifts, tau, "external")
        recs = list(new.recs)
        for k in range(1, K + 1):
            se = lifts[k][1]
            if se is not None and abs(lifts[k][0]) <= 2 * float(se):
                recs[k - 1] = None
        if recs != new.recs:
            avg, dev, cv = estimators.rec_aggregate(recs, tau)
            new = estimators.RecoveryReport(
                method, true, list(rep.estimated_lifts), recs, avg, dev, estimators.rec_dev_std(recs), cv,
                list(dict.fromkeys(new.flags + [f"undefined_rec_target_{k + 1}" for k, r in enumerate(recs) if r is None])),
                "external",
            )
        out[method] = new
    return out
