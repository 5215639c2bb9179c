"""Synthetic serving environment.

One source policy and K target policies rank the same candidate sets for the
same requests. Rewards follow a generalized linear model of the (context, ad)
features that does not depend on which policy showed the ad. Because both the
policies and the reward are known, the true lift of every target policy can be
computed exactly instead of sampled.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, asdict
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
from scipy.special import expit, softmax

from . import core
from ._rng import stream
from .features import DimensionError, linear_score, n_features

SIGMOID = "sigmoid"
IDENTITY = "identity"
IDENTITY_CLIPPED = "identity_clipped"
BERNOULLI = "bernoulli"
GAUSSIAN = "gaussian"

MAX_POLICY_RESAMPLES = 20


class ConfigError(ValueError):
    pass


class GenerationError(RuntimeError):
    pass


@dataclass(frozen=True)
class SimConfig:
    d: int = 8
    q: int = 8
    inventory_size: int = 200
    candidates_per_request: int = 20
    n: int = 50_000
    K: int = 3
    alphas: tuple = (0.25, 0.5, 1.0)
    temperature: float = 1.0
    seed: int = 0
    reward_mode: str = core.BINARY
    noise_sigma: float = 0.1
    link: Optional[str] = None
    oracle: bool = True
    probe_size: int = 5000

    def __post_init__(self):
        object.__setattr__(self, "alphas", tuple(float(a) for a in self.alphas))

    @property
    def resolved_link(self) -> str:
        if self.link is not None:
            return self.link
        return SIGMOID if self.reward_mode == core.BINARY else IDENTITY_CLIPPED

    def validate(self) -> None:
        if self.d < 0 or self.q < 0 or self.d + self.q == 0:
            raise ConfigError(f"empty feature space (d={self.d}, q={self.q})")
        if self.candidates_per_request < 2:
            raise ConfigError("candidates_per_request must be >= 2")
        if self.inventory_size < self.candidates_per_request:
            raise ConfigError("inventory_size must be >= candidates_per_request")
        if self.n < 1:
            raise ConfigError("n must be >= 1")
        if self.K < 1 or len(self.alphas) != self.K:
            raise ConfigError(f"need K >= 1 alphas, got K={self.K} and {len(self.alphas)} alphas")
        a = np.asarray(self.alphas)
        if not (np.all(a > 0) and np.all(np.diff(a) > 0)):
            raise ConfigError(f"alphas must be positive and strictly increasing, got {self.alphas}")
        if not self.temperature > 0:
            raise ConfigError("temperature must be > 0")
        if self.reward_mode not in core.REWARD_MODES:
            raise ConfigError(f"unknown reward_mode {self.reward_mode!r}")
        if self.reward_mode == core.BINARY and self.resolved_link != SIGMOID:
            raise ConfigError("binary rewards require the sigmoid link")
        if self.resolved_link not in (SIGMOID, IDENTITY, IDENTITY_CLIPPED):
            raise ConfigError(f"unknown link {self.link!r}")

    def to_dict(self) -> dict:
        out = asdict(self)
        out["alphas"] = list(self.alphas)
        return out

    @classmethod
    def from_dict(cls, obj: dict) -> "SimConfig":
        known = cls.__dataclass_fields__
        unknown = set(obj) - set(known)
        if unknown:
            raise ConfigError(f"unknown sim config keys: {sorted(unknown)}")
        return cls(**obj)


@dataclass(frozen=True)
class RewardGroundTruth:
    d: int
    q: int
    coefficients: np.ndarray
    noise_mode: str = BERNOULLI
    sigma: float = 0.0
    link: str = SIGMOID

    def __post_init__(self):
        coef = np.array(self.coefficients, dtype=np.float64)
        coef.flags.writeable = False
        object.__setattr__(self, "coefficients", coef)
        if len(coef) != n_features(self.d, self.q, bias=False):
            raise DimensionError("coefficient vector does not match d+q+min(d,q)")
        if not np.all(np.isfinite(coef)):
            raise ConfigError("non-finite reward coefficients")
        if self.noise_mode == BERNOULLI and self.link != SIGMOID:
            raise ConfigError("bernoulli noise requires the sigmoid link")

    def to_dict(self) -> dict:
        return {
            "d": self.d,
            "q": self.q,
            "coefficients": self.coefficients.tolist(),
            "noise_mode": self.noise_mode,
            "sigma": self.sigma,
            "link": self.link,
        }

    @classmethod
    def from_dict(cls, obj: dict) -> "RewardGroundTruth":
        return cls(**obj)


@dataclass(frozen=True)
class SoftmaxPolicy:
    """Softmax over a candidate set of ``score_weights . phi(x, a) / temperature``."""

    d: int
    q: int
    score_weights: np.ndarray
    temperature: float = 1.0
    improvement_alpha: float = 0.0

    def __post_init__(self):
        w = np.array(self.score_weights, dtype=np.float64)
        w.flags.writeable = False
        object.__setattr__(self, "score_weights", w)
        if not self.temperature > 0:
            raise ConfigError("temperature must be > 0")

    def scores(self, x, cand_features) -> np.ndarray:
        return linear_score(self.score_weights, x, cand_features, self.d, self.q)

    def probabilities(self, x, cand_features) -> np.ndarray:
        """Selection probabilities, shape (..., c) for candidate features (..., c, q)."""
        return softmax(self.scores(x, cand_features) / self.temperature, axis=-1)

    def to_dict(self) -> dict:
        return {
            "d": self.d,
            "q": self.q,
            "score_weights": self.score_weights.tolist(),
            "temperature": self.temperature,
            "improvement_alpha": self.improvement_alpha,
        }

    @classmethod
    def from_dict(cls, obj: dict) -> "SoftmaxPolicy":
        return cls(**obj)


def make_ground_truth(config: SimConfig, rng: np.random.Generator) -> RewardGroundTruth:
    if config.d + config.q == 0 or config.d < 0 or config.q < 0:
        raise ConfigError(f"empty feature space (d={config.d}, q={config.q})")
    p = n_features(config.d, config.q, bias=False)
    coef = rng.standard_normal(p) / np.sqrt(p)
    noise = BERNOULLI if config.reward_mode == core.BINARY else GAUSSIAN
    sigma = 0.0 if noise == BERNOULLI else float(config.noise_sigma)
    return RewardGroundTruth(config.d, config.q, coef, noise, sigma, config.resolved_link)


def true_reward_mean(truth: RewardGroundTruth, x, a) -> np.ndarray:
    """Expected reward E[y | x, a]; accepts single pairs or broadcastable batches."""
    z = linear_score(truth.coefficients, x, a, truth.d, truth.q)
    if truth.link == SIGMOID:
        return expit(z)
    if truth.link == IDENTITY_CLIPPED:
        return np.clip(z, 0.0, 1.0)
    return z


def sample_reward(truth: RewardGroundTruth, x, a, rng: np.random.Generator) -> np.ndarray:
    mean = true_reward_mean(truth, x, a)
    if truth.noise_mode == BERNOULLI:
        return (rng.random(np.shape(mean)) < mean).astype(np.float64)
    return mean + truth.sigma * rng.standard_normal(np.shape(mean))


def _draw_requests(n: int, d: int, inventory_size: int, c: int, rng_ctx, rng_cand):
    contexts = rng_ctx.standard_normal((n, d))
    rows = np.empty((n, c), dtype=np.int64)
    chunk = 4096
    for s in range(0, n, chunk):
        e = min(n, s + chunk)
        keys = rng_cand.random((e - s, inventory_size))
        part = np.argpartition(keys, c - 1, axis=1)[:, :c]
        # argpartition order is implementation-defined; fix it by key value
        order = np.argsort(np.take_along_axis(keys, part, axis=1), axis=1)
        rows[s:e] = np.take_along_axis(part, order, axis=1)
    return contexts, rows


def _policy_values(policies: Sequence[SoftmaxPolicy], truth, contexts, cand_feats) -> np.ndarray:
    """Per-request expected reward under each policy, shape (len(policies), n)."""
    mu = true_reward_mean(truth, contexts, cand_feats)
    return np.stack([np.sum(p.probabilities(contexts, cand_feats) * mu, axis=-1) for p in policies])


def make_policies(config: SimConfig, truth: RewardGroundTruth, rng: np.random.Generator):
    """Random source policy plus K targets leaning toward the true reward.

    Target k uses ``source_weights + alphas[k] * truth.coefficients``. When the
    alphas are strictly increasing, the true lift must increase with k on a
    probe set of requests; the source weights are redrawn until it does.
    """
    p = n_features(config.d, config.q, bias=False)
    alphas = np.asarray(config.alphas, dtype=np.float64)
    check_order = len(alphas) > 0 and np.all(alphas > 0) and np.all(np.diff(alphas) > 0)
    inventory = stream_inventory(config)
    m = min(config.n, config.probe_size)
    ctx, rows = _draw_requests(m, config.d, config.inventory_size, config.candidates_per_request, rng, rng)
    cand_feats = inventory[rows]
    for _ in range(MAX_POLICY_RESAMPLES):
        w_s = rng.standard_normal(p) / np.sqrt(p)
        source = SoftmaxPolicy(config.d, config.q, w_s, config.temperature, 0.0)
        targets = [
            SoftmaxPolicy(config.d, config.q, w_s + a * truth.coefficients, config.temperature, float(a))
            for a in alphas
        ]
        if not check_order:
            return source, targets
        values = _policy_values([source] + targets, truth, ctx, cand_feats).mean(axis=1)
        lifts = values[1:] - values[0]
        if lifts[0] > 0 and np.all(np.diff(lifts) > 0):
            return source, targets
    raise GenerationError(
        f"seed {config.seed}: target lifts not increasing in k after {MAX_POLICY_RESAMPLES} source draws"
    )


def stream_inventory(config: SimConfig) -> np.ndarray:
    return stream(config.seed, "inventory").standard_normal((config.inventory_size, config.q))


def simulate(
    config: SimConfig,
    truth: RewardGroundTruth,
    source: SoftmaxPolicy,
    targets: Sequence[SoftmaxPolicy],
) -> core.EvalBundle:
    """Serve ``config.n`` requests to every policy and log the results.

    Each policy picks one ad from the same candidate set. Only the source
    choice receives a realized reward (and its exact propensity, in oracle
    mode). All draws come from streams keyed by ``config.seed`` and the
    stage/domain name, so the output does not depend on evaluation order.
    """
    config.validate()
    if len(targets) != config.K:
        raise ConfigError(f"expected {config.K} target policies, got {len(targets)}")
    n, c = config.n, config.candidates_per_request
    seed = config.seed
    inventory = stream_inventory(config)
    inventory_ids = np.arange(inventory.shape[0], dtype=np.int64) + 100

    contexts, rows = _draw_requests(
        n, config.d, config.inventory_size, c, stream(seed, "contexts"), stream(seed, "candidates")
    )
    request_ids = _request_ids(n, stream(seed, "request_ids"))
    cand_feats = inventory[rows]

    def choose(policy, domain):
        probs = policy.probabilities(contexts, cand_feats)
        u = stream(seed, "choice", domain).random(n)
        idx = np.minimum((np.cumsum(probs, axis=1) < u[:, None]).sum(axis=1), c - 1)
        return idx, probs[np.arange(n), idx]

    s_idx, s_prop = choose(source, 0)
    s_rows = rows[np.arange(n), s_idx]
    rewards = sample_reward(truth, contexts, inventory[s_rows], stream(seed, "reward"))

    target_data = []
    for k, pol in enumerate(targets, start=1):
        t_idx, _ = choose(pol, k)
        target_data.append(
            core.TargetData(k, request_ids, contexts, inventory_ids[rows[np.arange(n), t_idx]])
        )
    meta = core.BundleMeta(config.d, config.q, config.K, n, config.reward_mode, config.oracle, seed)
    return core.EvalBundle(
        meta=meta,
        source=core.SourceData(
            request_ids, contexts, inventory_ids[s_rows], rewards, s_prop if config.oracle else None
        ),
        targets=tuple(target_data),
        candidates=inventory_ids[rows],
        inventory_ids=inventory_ids,
        inventory=inventory,
    )


def _request_ids(n: int, rng: np.random.Generator) -> np.ndarray:
    ids = rng.integers(1, 2**62, size=n, dtype=np.int64)
    while len(np.unique(ids)) != n:
        ids = rng.integers(1, 2**62, size=n, dtype=np.int64)
    return ids


def policy_values(policies: Sequence[SoftmaxPolicy], truth: RewardGroundTruth, bundle: core.EvalBundle) -> np.ndarray:
    """Exact mean expected reward of each policy over the bundle's requests."""
    cand_feats = bundle.ad_features(bundle.candidates)
    return _policy_values(policies, truth, bundle.source.contexts, cand_feats).mean(axis=1)


def exact_true_lift(
    policy_k: SoftmaxPolicy,
    source_policy: SoftmaxPolicy,
    truth: RewardGroundTruth,
    bundle: core.EvalBundle,
) -> float:
    """E_{T_k}[y] - E_S[y] over the bundle's requests and candidate sets, with no sampling."""
    if policy_k is source_policy:
        return 0.0
    v = policy_values([policy_k, source_policy], truth, bundle)
    return float(v[0] - v[1])


def exact_true_lifts(targets, source, truth, bundle) -> np.ndarray:
    v = policy_values([source] + list(targets), truth, bundle)
    return v[1:] - v[0]


def save_truth(truth: RewardGroundTruth, path) -> None:
    _dump(truth.to_dict(), path)


def save_policies(source: SoftmaxPolicy, targets, path) -> None:
    _dump(
        {
            "source": source.to_dict(),
            "targets": [t.to_dict() for t in targets],
            "alphas": [t.improvement_alpha for t in targets],
        },
        path,
    )


def load_truth(path) -> RewardGroundTruth:
    with open(path, encoding="utf-8") as fh:
        return RewardGroundTruth.from_dict(json.load(fh))


def load_policies(path):
    with open(path, encoding="utf-8") as fh:
        obj = json.load(fh)
    return SoftmaxPolicy.from_dict(obj["source"]), [SoftmaxPolicy.from_dict(t) for t in obj["targets"]]


def _dump(obj, path) -> None:
    with open(Path(path), "w", encoding="utf-8", newline="\n") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True)
        fh.write("\n")
