"""Reward model h(x, a) and its two trainers.

The proposed trainer weights every logged source row by how differently the
target policies would have served it::

    sw_i = sum_k |w_ik - 1| + beta * sum_{k < k'} |w_ik - w_ik'|

with w_ik = p_Tk(a_i | x_i) / p_S(a_i | x_i). Rows that every target policy
serves exactly like the source get zero weight. The baseline trainer fits all
rows with weight 1.

The default model is generalized linear on :func:`cfeval.features.featurize`;
``hidden > 0`` switches to a one-hidden-layer tanh network.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
from scipy.special import expit

from . import core
from ._optim import DivergenceError, minibatch_descent
from ._rng import stream
from .features import DimensionError, featurize, n_features

SIGMOID = "sigmoid"
IDENTITY = "identity"
LOG_LOSS = "log"
SQUARED = "squared"
PROPOSED = "proposed"
BASELINE = "baseline"

__all__ = [
    "DivergenceError",
    "RewardModel",
    "TrainConfig",
    "featurize",
    "loss_and_grad",
    "predict",
    "sample_weight",
    "train",
]


@dataclass(frozen=True)
class TrainConfig:
    beta: float = 1.0
    learning_rate: float = 1.0
    epochs: int = 50
    batch_size: int = 512
    l2: float = 1e-4
    seed: int = 0
    weight_mode: str = PROPOSED
    overlap_floor: float = 0.0
    decay: float = 0.5
    hidden: int = 0

    def validate(self) -> None:
        if self.beta < 0:
            raise ValueError("beta must be >= 0")
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be > 0")
        if self.weight_mode not in (PROPOSED, BASELINE):
            raise ValueError(f"unknown weight_mode {self.weight_mode!r}")
        if self.overlap_floor < 0:
            raise ValueError("overlap_floor must be >= 0")
        if self.epochs < 0 or self.batch_size < 1 or self.l2 < 0 or self.hidden < 0:
            raise ValueError("epochs, l2 and hidden must be >= 0 and batch_size >= 1")

    def to_dict(self) -> dict:
        return dict(self.__dict__)

    @classmethod
    def from_dict(cls, obj: dict) -> "TrainConfig":
        unknown = set(obj) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValueError(f"unknown train config keys: {sorted(unknown)}")
        return cls(**obj)


@dataclass(frozen=True)
class RewardModel:
    d: int
    q: int
    theta: np.ndarray
    link: str = SIGMOID
    loss_kind: str = LOG_LOSS
    hidden: int = 0
    metadata: dict = field(default_factory=dict, compare=False)

    def __post_init__(self):
        theta = np.array(self.theta, dtype=np.float64)
        theta.flags.writeable = False
        object.__setattr__(self, "theta", theta)
        if len(theta) != n_params(self.d, self.q, self.hidden):
            raise DimensionError(
                f"theta has length {len(theta)}, expected {n_params(self.d, self.q, self.hidden)}"
            )
        if self.loss_kind == LOG_LOSS and self.link != SIGMOID:
            raise ValueError("log-loss requires the sigmoid link")
        if self.link not in (SIGMOID, IDENTITY) or self.loss_kind not in (LOG_LOSS, SQUARED):
            raise ValueError(f"unsupported link/loss {self.link}/{self.loss_kind}")

    @classmethod
    def zeros(cls, d: int, q: int, reward_mode: str = core.BINARY, hidden: int = 0) -> "RewardModel":
        link, loss = (SIGMOID, LOG_LOSS) if reward_mode == core.BINARY else (IDENTITY, SQUARED)
        return cls(d, q, np.zeros(n_params(d, q, hidden)), link, loss, hidden)

    def with_theta(self, theta, **metadata) -> "RewardModel":
        return replace(self, theta=theta, metadata={**self.metadata, **metadata})

    def to_dict(self) -> dict:
        return {
            "layout": {
                "d": self.d,
                "q": self.q,
                "blocks": ["context", "ad", "interaction", "bias"],
                "n_features": n_features(self.d, self.q),
                "hidden": self.hidden,
            },
            "theta": self.theta.tolist(),
            "link": self.link,
            "loss_kind": self.loss_kind,
            "train": self.metadata,
        }

    @classmethod
    def from_dict(cls, obj: dict) -> "RewardModel":
        lay = obj["layout"]
        return cls(lay["d"], lay["q"], obj["theta"], obj["link"], obj["loss_kind"], lay.get("hidden", 0), obj.get("train", {}))

    def save(self, path) -> None:
        with open(Path(path), "w", encoding="utf-8", newline="\n") as fh:
            json.dump(self.to_dict(), fh, indent=2, sort_keys=True)
            fh.write("\n")

    @classmethod
    def load(cls, path) -> "RewardModel":
        with open(path, encoding="utf-8") as fh:
            return cls.from_dict(json.load(fh))


def n_params(d: int, q: int, hidden: int = 0) -> int:
    p = n_features(d, q)
    return p if hidden == 0 else hidden * p + hidden + 1


def sample_weight(row_weights, beta: float, overlap_floor: float = 0.0) -> np.ndarray:
    """Per-row training weight from the density ratios of all K targets.

    ``row_weights`` is (K,) for one row or (n, K) for many.
    """
    w = np.asarray(row_weights, dtype=np.float64)
    single = w.ndim == 1
    w = np.atleast_2d(w)
    out = np.abs(w - 1.0).sum(axis=1)
    K = w.shape[1]
    if K > 1 and beta != 0:
        i, j = np.triu_indices(K, k=1)
        out = out + beta * np.abs(w[:, i] - w[:, j]).sum(axis=1)
    out = out + overlap_floor
    return out[0] if single else out


def _raw_output(model: RewardModel, theta: np.ndarray, phi: np.ndarray):
    """Pre-link output z and, for the hidden-layer variant, the activations."""
    if model.hidden == 0:
        return phi @ theta, None
    H, p = model.hidden, phi.shape[1]
    W = theta[: H * p].reshape(H, p)
    v = theta[H * p : H * p + H]
    c = theta[-1]
    act = np.tanh(phi @ W.T)
    return act @ v + c, act


def _pointwise(model: RewardModel, z: np.ndarray, y: np.ndarray):
    """Per-sample loss and dL/dz."""
    if model.loss_kind == LOG_LOSS:
        return np.logaddexp(0.0, z) - y * z, expit(z) - y
    h = z if model.link == IDENTITY else expit(z)
    r = h - y
    dh = 1.0 if model.link == IDENTITY else h * (1.0 - h)
    return r * r, 2.0 * r * dh


def loss_and_grad(model: RewardModel, phi, y, sw, l2: float, theta=None) -> tuple[float, np.ndarray]:
    """``sum_i sw_i * L(h_i, y_i) + l2 * ||theta||^2 / 2`` and its gradient in theta.

    The sample weights are constants here; nothing in this function depends on
    how they were produced.
    """
    theta = model.theta if theta is None else np.asarray(theta, dtype=np.float64)
    phi = np.atleast_2d(np.asarray(phi, dtype=np.float64))
    y = np.asarray(y, dtype=np.float64)
    sw = np.asarray(sw, dtype=np.float64)
    z, act = _raw_output(model, theta, phi)
    L, dz = _pointwise(model, z, y)
    loss = float(np.dot(sw, L) + 0.5 * l2 * np.dot(theta, theta))
    if not np.isfinite(loss):
        raise DivergenceError("non-finite loss")
    g = sw * dz
    if model.hidden == 0:
        grad = phi.T @ g
    else:
        H, p = model.hidden, phi.shape[1]
        v = theta[H * p : H * p + H]
        da = (g[:, None] * v) * (1.0 - act * act)
        grad = np.concatenate([(da.T @ phi).ravel(), act.T @ g, [g.sum()]])
    return loss, grad + l2 * theta


def predict(model: RewardModel, x, a) -> np.ndarray:
    """Expected reward link(h(x, a)) for one pair or broadcastable batches."""
    x = np.asarray(x, dtype=np.float64)
    a = np.asarray(a, dtype=np.float64)
    if x.shape[-1] != model.d or a.shape[-1] != model.q:
        raise DimensionError(
            f"expected context dim {model.d} and ad dim {model.q}, got {x.shape[-1]} and {a.shape[-1]}"
        )
    phi = featurize(x, a)
    shape = phi.shape[:-1]
    z, _ = _raw_output(model, model.theta, phi.reshape(-1, phi.shape[-1]))
    z = z.reshape(shape)
    return expit(z) if model.link == SIGMOID else z


def source_features(bundle: core.EvalBundle) -> np.ndarray:
    return featurize(bundle.source.contexts, bundle.ad_features(bundle.source.ad_ids))


def training_weights(bundle: core.EvalBundle, weight_table, config: TrainConfig) -> np.ndarray:
    """Frozen per-row sample weights for ``config.weight_mode``."""
    n = len(bundle.source)
    if config.weight_mode == BASELINE:
        return np.ones(n)
    if weight_table is None:
        raise ValueError("proposed mode needs a weight table")
    w = weight_table.aligned(bundle)
    return sample_weight(w, config.beta, config.overlap_floor)


def train(bundle: core.EvalBundle, weight_table, config: TrainConfig) -> RewardModel:
    """Fit h on the labeled source rows of ``bundle``.

    ``weight_table`` is a fixed table of density ratios (unused in baseline
    mode). Parameters start at zero. The objective is divided by the mean
    sample weight so the step size means the same thing in both modes; with
    all sample weights zero the parameters never move.
    """
    config.validate()
    phi = source_features(bundle)
    y = bundle.source.rewards
    n = len(y)
    sw = training_weights(bundle, weight_table, config)
    scale = float(sw.mean()) if sw.mean() > 0 else 1.0
    model = RewardModel.zeros(bundle.meta.d, bundle.meta.q, bundle.meta.reward_mode, config.hidden)
    theta0 = np.zeros(len(model.theta))
    if config.hidden:
        # zero init leaves a tanh layer stuck at a saddle
        theta0[: config.hidden * phi.shape[1]] = 0.1 * stream(config.seed, "init").standard_normal(
            config.hidden * phi.shape[1]
        )
    history: list[float] = []

    def grad_fn(theta, idx):
        loss, grad = loss_and_grad(model, phi[idx], y[idx], sw[idx], config.l2 * len(idx) / n, theta)
        return loss / (len(idx) * scale), grad / (len(idx) * scale)

    def epoch_end(epoch, theta):
        try:
            loss, _ = loss_and_grad(model, phi, y, sw, config.l2, theta)
        except DivergenceError:
            raise DivergenceError(f"non-finite loss at the end of epoch {epoch}; try a smaller learning rate") from None
        history.append(loss / (n * scale))

    theta = minibatch_descent(
        grad_fn,
        theta0,
        n,
        batch_size=config.batch_size,
        epochs=config.epochs,
        learning_rate=config.learning_rate,
        rng=stream(config.seed, "train", config.weight_mode),
        decay=config.decay,
        epoch_end=epoch_end,
    )
    return model.with_theta(
        theta,
        weight_mode=config.weight_mode,
        beta=config.beta,
        final_loss=history[-1] if history else None,
        loss_history=history,
        weight_scale=scale,
    )
