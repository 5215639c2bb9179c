"""Lift estimators and the recovery metrics used to score them.

Recovery of target k is ``estimated_lift / true_lift``; a perfect estimator has
recovery 1 everywhere. Across K targets the headline number is the coefficient
of variation ``rec_dev / rec_avg`` where ``rec_dev`` is the mean absolute
deviation about ``rec_avg``. An undefined recovery (true lift too close to
zero) is represented by ``None`` and propagates into the aggregates.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import core
from .reward_model import RewardModel, predict

DM_PROPOSED = "DM-proposed"
DM_BASELINE = "DM-baseline"
IPS = "IPS"
DEFAULT_TAU = 1e-8


class EmptyDataError(ValueError):
    pass


@dataclass(frozen=True)
class LiftEstimate:
    k: int
    method: str
    value: float
    n: int
    std_error: Optional[float] = None

    def __post_init__(self):
        if not np.isfinite(self.value):
            raise ValueError(f"non-finite lift estimate for target {self.k}")


def estimate_lift_dm(model: RewardModel, bundle: core.EvalBundle, k: int, method: str = DM_PROPOSED) -> LiftEstimate:
    """Mean of h over the target-k rows minus mean of h over the source rows, paired by request."""
    core.check_target_index(k, bundle.K)
    n = len(bundle.source)
    if n == 0:
        raise EmptyDataError("empty datasets")
    x = bundle.source.contexts
    h_s = predict(model, x, bundle.ad_features(bundle.source.ad_ids))
    h_t = predict(model, x, bundle.ad_features(bundle.aligned_target_ads(k)))
    diff = h_t - h_s
    se = float(diff.std(ddof=1) / np.sqrt(n)) if n > 1 else None
    return LiftEstimate(k, method, float(h_t.sum() - h_s.sum()) / n, n, se)


def estimate_lift_ips(rewards, weights, k: int, self_normalized: bool = True) -> LiftEstimate:
    """Importance-weighted minus plain mean of the logged rewards.

    ``weights`` is the column of density ratios for target k, aligned with
    ``rewards``.
    """
    y = np.asarray(rewards, dtype=np.float64)
    w = np.asarray(weights, dtype=np.float64)
    n = len(y)
    if n == 0:
        raise EmptyDataError("empty datasets")
    total = w.sum()
    if total <= 0:
        raise EmptyDataError(f"all-zero weight column for target {k} (ESS = 0)")
    w_hat = w / total if self_normalized else w / n
    terms = n * w_hat * y - y
    return LiftEstimate(k, IPS, float(np.dot(w_hat, y) - y.mean()), n, float(terms.std(ddof=1) / np.sqrt(n)) if n > 1 else None)


def recovery(estimated: float, true_lift: float, tau: float = DEFAULT_TAU) -> Optional[float]:
    if abs(true_lift) <= tau:
        return None
    return estimated / true_lift


def rec_aggregate(recs: Sequence[Optional[float]], tau: float = DEFAULT_TAU):
    """(rec_avg, rec_dev, rec_cv) with rec_dev the mean absolute deviation."""
    if len(recs) == 0 or any(r is None for r in recs):
        return None, None, None
    r = np.asarray(recs, dtype=np.float64)
    if np.all(r == r[0]):
        # the float mean of equal values can drift by an ulp
        return float(r[0]), 0.0, 0.0 if abs(r[0]) > tau else None
    avg = float(r.mean())
    dev = float(np.abs(r - avg).mean())
    cv = dev / avg if abs(avg) > tau else None
    return avg, dev, cv


def rec_dev_std(recs: Sequence[Optional[float]]) -> Optional[float]:
    """Population standard deviation of the recoveries (reported alongside, not used for rec_cv)."""
    if len(recs) == 0 or any(r is None for r in recs):
        return None
    r = np.asarray(recs, dtype=np.float64)
    return 0.0 if np.all(r == r[0]) else float(np.std(r))


@dataclass
class RecoveryReport:
    method: str
    true_lifts: list
    estimated_lifts: list
    recs: list
    rec_avg: Optional[float]
    rec_dev: Optional[float]
    rec_dev_std: Optional[float]
    rec_cv: Optional[float]
    flags: list = field(default_factory=list)
    truth_source: str = "exact"

    @property
    def K(self) -> int:
        return len(self.true_lifts)

    def to_dict(self) -> dict:
        return {
            "method": self.method,
            "truth_source": self.truth_source,
            "targets": [
                {"k": k + 1, "true_lift": t, "est_lift": e, "rec": r}
                for k, (t, e, r) in enumerate(zip(self.true_lifts, self.estimated_lifts, self.recs))
            ],
            "rec_avg": self.rec_avg,
            "rec_dev_mad": self.rec_dev,
            "rec_dev_std": self.rec_dev_std,
            "rec_cv": self.rec_cv,
            "flags": list(self.flags),
        }

    @classmethod
    def from_dict(cls, obj: dict) -> "RecoveryReport":
        t = obj["targets"]
        return cls(
            method=obj["method"],
            true_lifts=[r["true_lift"] for r in t],
            estimated_lifts=[r["est_lift"] for r in t],
            recs=[r["rec"] for r in t],
            rec_avg=obj["rec_avg"],
            rec_dev=obj["rec_dev_mad"],
            rec_dev_std=obj["rec_dev_std"],
            rec_cv=obj["rec_cv"],
            flags=list(obj.get("flags", [])),
            truth_source=obj.get("truth_source", "exact"),
        )


def build_report(method: str, true_lifts, estimated_lifts, tau: float = DEFAULT_TAU, truth_source: str = "exact") -> RecoveryReport:
    true_lifts = [float(t) for t in true_lifts]
    est = [float(e) for e in estimated_lifts]
    if len(true_lifts) != len(est):
        raise ValueError("need one true lift per estimate")
    recs = [recovery(e, t, tau) for e, t in zip(est, true_lifts)]
    avg, dev, cv = rec_aggregate(recs, tau)
    flags = []
    if len(recs) == 1:
        flags.append("single_domain")
    for k, r in enumerate(recs, start=1):
        if r is None:
            flags.append(f"undefined_rec_target_{k}")
    if avg is not None and cv is None:
        flags.append("undefined_rec_cv")
    return RecoveryReport(method, true_lifts, est, recs, avg, dev, rec_dev_std(recs), cv, flags, truth_source)


def evaluate_method(
    bundle: core.EvalBundle,
    truth,
    policies,
    lifts_est: Sequence[LiftEstimate],
    tau: float = DEFAULT_TAU,
    true_lifts: Optional[Sequence[float]] = None,
) -> RecoveryReport:
    """Score K lift estimates against the exact true lifts (or externally supplied ones).

    ``policies`` is ``(source, targets)``; it and ``truth`` may be None when
    ``true_lifts`` is given.
    """
    ests = sorted(lifts_est, key=lambda e: e.k)
    methods = {e.method for e in ests}
    method = methods.pop() if len(methods) == 1 else "mixed"
    if true_lifts is None:
        from .sim import exact_true_lifts

        source, targets = policies
        true_lifts = exact_true_lifts(targets, source, truth, bundle)
        source_tag = "exact"
    else:
        source_tag = "external"
    if len(true_lifts) != len(ests):
        raise ValueError(f"{len(ests)} estimates for {len(true_lifts)} true lifts")
    return build_report(method, true_lifts, [e.value for e in ests], tau, source_tag)


def save_reports(reports: dict, path, header: Optional[dict] = None) -> None:
    obj = {"methods": {m: r.to_dict() for m, r in sorted(reports.items())}}
    if header:
        obj.update(header)
    with open(Path(path), "w", encoding="utf-8", newline="\n") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True)
        fh.write("\n")


def load_reports(path) -> tuple[dict, dict]:
    with open(path, encoding="utf-8") as fh:
        obj = json.load(fh)
    reports = {m: RecoveryReport.from_dict(r) for m, r in obj.pop("methods").items()}
    return reports, obj
