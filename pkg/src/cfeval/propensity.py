"""Density ratios w_ik = p_Tk(a_i | x_i) / p_S(a_i | x_i) at the logged source ads.

Two ways to get them:

* oracle: both policies are known softmax policies, so the ratio is exact;
* estimated: a logistic classifier per target learns to tell target rows from
  source rows, and its odds q / (1 - q) are the ratio (times the class prior
  n_S / n_Tk, which is 1 for paired bundles).
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
from scipy.special import expit

from . import core
from ._optim import DivergenceError, minibatch_descent  # noqa: F401 (re-exported)
from ._rng import stream
from .features import featurize

ORACLE = "oracle"
ESTIMATED = "estimated"
Q_MAX = 1.0 - 1e-6
DEFAULT_ESTIMATED_CAP = 20.0


class OverlapError(ValueError):
    """A logged ad has zero source propensity."""


class CandidateError(ValueError):
    pass


@dataclass(frozen=True)
class WeightTable:
    """(n, K) density ratios, rows keyed by source request id."""

    request_ids: np.ndarray
    weights: np.ndarray
    mode: str = ORACLE
    clip_cap: Optional[float] = None
    clipped_fraction: tuple = ()
    notes: dict = field(default_factory=dict, compare=False)

    def __post_init__(self):
        w = np.array(self.weights, dtype=np.float64)
        if w.ndim != 2 or w.shape[0] != len(self.request_ids):
            raise ValueError(f"weights must be (n, K) with n={len(self.request_ids)}, got {w.shape}")
        if not np.all(np.isfinite(w)) or np.any(w < 0):
            raise ValueError("weights must be finite and >= 0")
        w.flags.writeable = False
        ids = np.array(self.request_ids, dtype=np.int64)
        ids.flags.writeable = False
        object.__setattr__(self, "weights", w)
        object.__setattr__(self, "request_ids", ids)
        if not self.clipped_fraction:
            object.__setattr__(self, "clipped_fraction", tuple([0.0] * w.shape[1]))

    @property
    def n(self) -> int:
        return self.weights.shape[0]

    @property
    def K(self) -> int:
        return self.weights.shape[1]

    def column(self, k: int) -> np.ndarray:
        core.check_target_index(k, self.K)
        return self.weights[:, k - 1]

    def aligned(self, bundle: core.EvalBundle) -> np.ndarray:
        """Weights reordered to the bundle's source row order."""
        if np.array_equal(self.request_ids, bundle.source.request_ids):
            return self.weights
        pos = {int(r): i for i, r in enumerate(self.request_ids)}
        try:
            idx = np.fromiter((pos[int(r)] for r in bundle.source.request_ids), np.int64, len(bundle.source))
        except KeyError as exc:
            raise ValueError(f"weight table has no row for request {exc}") from exc
        return self.weights[idx]

    def save(self, path) -> None:
        with open(Path(path), "w", encoding="utf-8", newline="\n") as fh:
            for i, r in enumerate(self.request_ids.tolist()):
                for k in range(self.K):
                    fh.write(
                        json.dumps(
                            {"request_id": r, "k": k + 1, "w": float(self.weights[i, k]), "mode": self.mode},
                            separators=(",", ":"),
                        )
                    )
                    fh.write("\n")

    @classmethod
    def load(cls, path, clip_cap: Optional[float] = None) -> "WeightTable":
        rows: dict[int, dict[int, float]] = {}
        order: list[int] = []
        mode = ORACLE
        with open(path, encoding="utf-8") as fh:
            for line in fh:
                if not line.strip():
                    continue
                r = json.loads(line)
                rid = int(r["request_id"])
                if rid not in rows:
                    rows[rid] = {}
                    order.append(rid)
                rows[rid][int(r["k"])] = float(r["w"])
                mode = r.get("mode", mode)
        K = max((max(v) for v in rows.values()), default=0)
        w = np.array([[rows[rid][k] for k in range(1, K + 1)] for rid in order]).reshape(len(order), K)
        return cls(np.array(order, dtype=np.int64), w, mode, clip_cap)


def oracle_propensity(policy, x, candidates, a: int) -> float:
    """Softmax probability that ``policy`` serves ad ``a`` among ``candidates``.

    ``candidates`` is a sequence of (ad_id, features) pairs or of
    :class:`cfeval.core.Ad`.
    """
    ids, feats = _unpack_candidates(candidates)
    if a not in ids:
        raise CandidateError(f"ad {a} is not in the candidate set {ids}")
    probs = policy.probabilities(np.asarray(x, dtype=np.float64), feats)
    return float(probs[ids.index(a)])


def _unpack_candidates(candidates):
    ids, feats = [], []
    for c in candidates:
        if isinstance(c, core.Ad):
            ids.append(c.ad_id)
            feats.append(c.features)
        else:
            ids.append(int(c[0]))
            feats.append(c[1])
    return ids, np.asarray(feats, dtype=np.float64)


def logged_propensities(policy, bundle: core.EvalBundle) -> np.ndarray:
    """Probability that ``policy`` serves each source-logged ad, shape (n,)."""
    cands = bundle.candidates
    probs = policy.probabilities(bundle.source.contexts, bundle.ad_features(cands))
    hit = cands == bundle.source.ad_ids[:, None]
    if not np.all(hit.sum(axis=1) == 1):
        bad = int(np.flatnonzero(hit.sum(axis=1) != 1)[0])
        raise CandidateError(f"source row {bad}: logged ad not (uniquely) in its candidate set")
    return probs[hit]


def oracle_weights(bundle: core.EvalBundle, source_policy, target_policies: Sequence) -> WeightTable:
    p_s = logged_propensities(source_policy, bundle)
    if np.any(p_s <= 0):
        raise OverlapError(f"source row {int(np.flatnonzero(p_s <= 0)[0])} has zero source propensity")
    w = np.stack([logged_propensities(t, bundle) / p_s for t in target_policies], axis=1)
    return WeightTable(bundle.source.request_ids, w, ORACLE)


@dataclass(frozen=True)
class DensityRatioModel:
    k: int
    d: int
    q: int
    theta: np.ndarray
    prior_ratio: float = 1.0
    loss_history: tuple = ()

    def probability(self, x, a) -> np.ndarray:
        """Classifier probability that (x, a) came from target k."""
        return expit(featurize(x, a) @ self.theta)

    def to_dict(self) -> dict:
        return {"k": self.k, "d": self.d, "q": self.q, "theta": self.theta.tolist(), "prior_ratio": self.prior_ratio}


def fit_density_ratio(
    source_x,
    source_a,
    target_x,
    target_a,
    *,
    k: int = 1,
    learning_rate: float = 2.0,
    epochs: int = 300,
    l2: float = 1e-4,
    batch_size: Optional[int] = None,
    decay: float = 0.0,
    seed: int = 0,
) -> DensityRatioModel:
    """Logistic regression of target (label 1) vs source (label 0) rows on phi(x, a).

    Defaults to full-batch gradient descent: the ratio signal for targets close
    to the source is weak, and minibatch noise swamps it.
    """
    source_x, source_a = np.atleast_2d(source_x), np.atleast_2d(source_a)
    target_x, target_a = np.atleast_2d(target_x), np.atleast_2d(target_a)
    n_s, n_t = len(source_x), len(target_x)
    if n_s == 0 or n_t == 0:
        raise ValueError("both datasets must be nonempty")
    phi = np.vstack([featurize(source_x, source_a), featurize(target_x, target_a)])
    y = np.concatenate([np.zeros(n_s), np.ones(n_t)])
    n = len(y)
    history: list[float] = []
    batch_losses: list[float] = []

    def objective(theta, idx):
        z = phi[idx] @ theta
        loss = np.mean(np.logaddexp(0.0, z) - y[idx] * z) + 0.5 * l2 * theta @ theta
        grad = phi[idx].T @ (expit(z) - y[idx]) / len(idx) + l2 * theta
        batch_losses.append(loss)
        return loss, grad

    def epoch_end(epoch, theta):
        history.append(float(np.mean(batch_losses)))
        batch_losses.clear()

    theta = minibatch_descent(
        objective,
        np.zeros(phi.shape[1]),
        n,
        batch_size=n if batch_size is None else batch_size,
        epochs=epochs,
        learning_rate=learning_rate,
        rng=stream(seed, "density_ratio", k),
        decay=decay,
        epoch_end=epoch_end,
    )
    d, q = source_x.shape[1], source_a.shape[1]
    theta.flags.writeable = False
    return DensityRatioModel(k, d, q, theta, n_s / n_t, tuple(history))


def fit_density_ratios(bundle: core.EvalBundle, **hyper) -> list[DensityRatioModel]:
    src = bundle.source
    xs, as_ = src.contexts, bundle.ad_features(src.ad_ids)
    models = []
    for k in range(1, bundle.K + 1):
        tgt = bundle.target(k)
        models.append(
            fit_density_ratio(xs, as_, tgt.contexts, bundle.ad_features(tgt.ad_ids), k=k, **hyper)
        )
    return models


def odds_weights(q, prior_ratio: float = 1.0) -> tuple[np.ndarray, int]:
    """Classifier odds times the class prior; returns (weights, number of q guarded below 1)."""
    q = np.asarray(q, dtype=np.float64)
    guarded = int(np.sum(q > Q_MAX))
    q = np.minimum(q, Q_MAX)
    return q / (1.0 - q) * prior_ratio, guarded


def estimate_weights(models: Sequence[DensityRatioModel], bundle: core.EvalBundle) -> WeightTable:
    src = bundle.source
    a = bundle.ad_features(src.ad_ids)
    cols, guarded = [], []
    for m in sorted(models, key=lambda m: m.k):
        w, g = odds_weights(m.probability(src.contexts, a), m.prior_ratio)
        cols.append(w)
        guarded.append(g)
    return WeightTable(src.request_ids, np.stack(cols, axis=1), ESTIMATED, notes={"q_guarded": guarded})


def clip_weights(table: WeightTable, cap: float) -> WeightTable:
    if not cap > 0:
        raise ValueError("cap must be > 0")
    clipped = table.weights > cap
    frac = tuple(float(f) for f in clipped.mean(axis=0))
    prev = table.clipped_fraction
    # re-clipping at a looser cap keeps the earlier record
    frac = tuple(max(a, b) for a, b in zip(frac, prev)) if prev else frac
    cap_out = cap if table.clip_cap is None else min(cap, table.clip_cap)
    return WeightTable(
        table.request_ids, np.minimum(table.weights, cap), table.mode, cap_out, frac, dict(table.notes)
    )


def weight_diagnostics(table: WeightTable) -> dict:
    w = table.weights
    s = w.sum(axis=0)
    s2 = (w * w).sum(axis=0)
    ess = np.where(s2 > 0, s * s / np.where(s2 > 0, s2, 1.0), 0.0)
    per_k = [
        {
            "k": k + 1,
            "mean": float(w[:, k].mean()),
            "max": float(w[:, k].max()),
            "ess": float(ess[k]),
            "clipped_fraction": float(table.clipped_fraction[k]),
        }
        for k in range(table.K)
    ]
    return {"mode": table.mode, "n": table.n, "clip_cap": table.clip_cap, "targets": per_k, **table.notes}


def save_diagnostics(table: WeightTable, path) -> None:
    with open(Path(path), "w", encoding="utf-8", newline="\n") as fh:
        json.dump(weight_diagnostics(table), fh, indent=2, sort_keys=True)
        fh.write("\n")
