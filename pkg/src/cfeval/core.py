"""Shared data model: contexts, ads, domains and paired evaluation bundles.

A bundle holds one labeled source dataset and K unlabeled target datasets
that were produced from the *same* requests. Everything is stored column-wise
in numpy arrays; the row dataclasses (:class:`LoggedSample`,
:class:`TargetSample`) are views used for iteration and file IO.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Optional

import numpy as np

BINARY = "binary"
CONTINUOUS = "continuous"
REWARD_MODES = (BINARY, CONTINUOUS)


class DomainIndexError(IndexError):
    """Raised when a target index falls outside 1..K."""


class BundleFormatError(ValueError):
    """Raised when dataset files cannot be turned into a bundle."""


@dataclass(frozen=True)
class DomainId:
    """Source domain (``k == 0``) or target domain ``k`` in 1..K."""

    k: int = 0

    @classmethod
    def source(cls) -> "DomainId":
        return cls(0)

    @classmethod
    def target(cls, k: int) -> "DomainId":
        if k < 1:
            raise DomainIndexError(f"target index must be >= 1, got {k}")
        return cls(k)

    @property
    def is_source(self) -> bool:
        return self.k == 0

    def __str__(self) -> str:
        return "source" if self.is_source else f"target_{self.k}"


@dataclass(frozen=True)
class Context:
    request_id: int
    features: tuple[float, ...]


@dataclass(frozen=True)
class Ad:
    ad_id: int
    features: tuple[float, ...]


@dataclass(frozen=True)
class LoggedSample:
    context: Context
    ad: Ad
    reward: float
    logged_propensity: Optional[float] = None


@dataclass(frozen=True)
class TargetSample:
    context: Context
    ad: Ad
    domain: DomainId


@dataclass(frozen=True)
class BundleMeta:
    d: int
    q: int
    K: int
    n: int
    reward_mode: str = BINARY
    oracle: bool = True
    seed: int = 0

    def to_dict(self) -> dict:
        return {
            "d": self.d,
            "q": self.q,
            "K": self.K,
            "n": self.n,
            "reward_mode": self.reward_mode,
            "oracle": self.oracle,
            "seed": self.seed,
        }

    @classmethod
    def from_dict(cls, obj: dict) -> "BundleMeta":
        return cls(
            d=int(obj["d"]),
            q=int(obj["q"]),
            K=int(obj["K"]),
            n=int(obj["n"]),
            reward_mode=str(obj.get("reward_mode", BINARY)),
            oracle=bool(obj.get("oracle", True)),
            seed=int(obj.get("seed", 0)),
        )


def _frozen(arr, dtype) -> np.ndarray:
    out = np.array(arr, dtype=dtype, copy=True)
    out.flags.writeable = False
    return out


@dataclass(frozen=True)
class SourceData:
    """Columns of the labeled source dataset D_S."""

    request_ids: np.ndarray
    contexts: np.ndarray
    ad_ids: np.ndarray
    rewards: np.ndarray
    propensities: Optional[np.ndarray] = None

    def __post_init__(self):
        object.__setattr__(self, "request_ids", _frozen(self.request_ids, np.int64))
        object.__setattr__(self, "contexts", _frozen(self.contexts, np.float64))
        object.__setattr__(self, "ad_ids", _frozen(self.ad_ids, np.int64))
        object.__setattr__(self, "rewards", _frozen(self.rewards, np.float64))
        if self.propensities is not None:
            object.__setattr__(self, "propensities", _frozen(self.propensities, np.float64))

    def __len__(self) -> int:
        return len(self.request_ids)


@dataclass(frozen=True)
class TargetData:
    """Columns of one unlabeled target dataset D_Tk."""

    k: int
    request_ids: np.ndarray
    contexts: np.ndarray
    ad_ids: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "request_ids", _frozen(self.request_ids, np.int64))
        object.__setattr__(self, "contexts", _frozen(self.contexts, np.float64))
        object.__setattr__(self, "ad_ids", _frozen(self.ad_ids, np.int64))

    def __len__(self) -> int:
        return len(self.request_ids)


@dataclass(frozen=True)
class EvalBundle:
    """Paired datasets {D_S, D_T1..D_TK} over shared requests.

    ``candidates`` is an (n, c) array of ad ids aligned with the source rows.
    ``inventory_ids``/``inventory`` give the feature vector of every ad.
    """

    meta: BundleMeta
    source: SourceData
    targets: tuple[TargetData, ...]
    candidates: np.ndarray
    inventory_ids: np.ndarray
    inventory: np.ndarray
    _ad_index: dict = field(default=None, repr=False, compare=False)
    _target_order: dict = field(default=None, repr=False, compare=False)

    def __post_init__(self):
        object.__setattr__(self, "targets", tuple(self.targets))
        object.__setattr__(self, "candidates", _frozen(self.candidates, np.int64))
        object.__setattr__(self, "inventory_ids", _frozen(self.inventory_ids, np.int64))
        object.__setattr__(self, "inventory", _frozen(self.inventory, np.float64))
        object.__setattr__(
            self, "_ad_index", {int(a): i for i, a in enumerate(self.inventory_ids)}
        )
        object.__setattr__(self, "_target_order", {})

    @property
    def n(self) -> int:
        return self.meta.n

    @property
    def K(self) -> int:
        return self.meta.K

    def ad_rows(self, ad_ids) -> np.ndarray:
        """Inventory row index for each ad id (any shape)."""
        ids = np.asarray(ad_ids)
        if ids.size == 0:
            return ids.astype(np.int64)
        idx = np.fromiter((self._ad_index[int(a)] for a in ids.ravel()), np.int64, ids.size)
        return idx.reshape(ids.shape)

    def ad_features(self, ad_ids) -> np.ndarray:
        return self.inventory[self.ad_rows(ad_ids)]

    def target(self, k: int) -> TargetData:
        check_target_index(k, self.K)
        return self.targets[k - 1]

    def target_order(self, k: int) -> np.ndarray:
        """Permutation mapping source row i to the matching row of target k."""
        cached = self._target_order.get(k)
        if cached is not None:
            return cached
        tgt = self.target(k)
        pos = {int(r): j for j, r in enumerate(tgt.request_ids)}
        order = np.fromiter(
            (pos[int(r)] for r in self.source.request_ids), np.int64, len(self.source)
        )
        order.flags.writeable = False
        self._target_order[k] = order
        return order

    def aligned_target_ads(self, k: int) -> np.ndarray:
        """Ad ids chosen by target k, in source row order."""
        return self.target(k).ad_ids[self.target_order(k)]

    def equals(self, other: "EvalBundle") -> bool:
        if self.meta != other.meta or len(self.targets) != len(other.targets):
            return False
        arrays = [
            (self.source.request_ids, other.source.request_ids),
            (self.source.contexts, other.source.contexts),
            (self.source.ad_ids, other.source.ad_ids),
            (self.source.rewards, other.source.rewards),
            (self.candidates, other.candidates),
            (self.inventory_ids, other.inventory_ids),
            (self.inventory, other.inventory),
        ]
        for a, b in zip(self.targets, other.targets):
            if a.k != b.k:
                return False
            arrays += [(a.request_ids, b.request_ids), (a.contexts, b.contexts), (a.ad_ids, b.ad_ids)]
        sp, op = self.source.propensities, other.source.propensities
        if (sp is None) != (op is None):
            return False
        if sp is not None:
            arrays.append((sp, op))
        return all(np.array_equal(a, b) for a, b in arrays)


def check_target_index(k: int, K: int) -> None:
    if not 1 <= k <= K:
        raise DomainIndexError(f"target index {k} out of range 1..{K}")


def validate_bundle(bundle: EvalBundle) -> list[str]:
    """List every violated bundle invariant; an empty list means valid."""
    meta = bundle.meta
    out: list[str] = []
    src = bundle.source
    n = meta.n
    if meta.K < 1:
        out.append(f"K must be >= 1, got {meta.K}")
    if meta.reward_mode not in REWARD_MODES:
        out.append(f"unknown reward_mode {meta.reward_mode!r}")
    if len(bundle.targets) != meta.K:
        out.append(f"expected {meta.K} target datasets, found {len(bundle.targets)}")
    if len(src) != n:
        out.append(f"length mismatch: source has {len(src)} rows, expected {n}")
    if src.contexts.shape != (len(src), meta.d):
        out.append(f"source contexts have shape {src.contexts.shape}, expected ({len(src)}, {meta.d})")
    if bundle.inventory.ndim != 2 or bundle.inventory.shape[1] != meta.q:
        out.append(f"inventory features have shape {bundle.inventory.shape}, expected (m, {meta.q})")
    if not np.all(np.isfinite(bundle.inventory)):
        out.append("inventory: non-finite ad features")
    if len(np.unique(bundle.inventory_ids)) != len(bundle.inventory_ids):
        out.append("inventory: duplicate ad ids")

    src_ids = src.request_ids
    if len(np.unique(src_ids)) != len(src_ids):
        out.append("source: duplicate request ids")
    src_set = set(src_ids.tolist())
    known_ads = bundle._ad_index

    bad_ctx = np.flatnonzero(~np.all(np.isfinite(src.contexts), axis=1)) if src.contexts.ndim == 2 else []
    for i in bad_ctx:
        out.append(f"source row {i}: non-finite context features")
    for i in np.flatnonzero(~np.isfinite(src.rewards)):
        out.append(f"source row {i}: non-finite reward")
    if meta.reward_mode == BINARY:
        for i in np.flatnonzero(np.isfinite(src.rewards) & (src.rewards != 0) & (src.rewards != 1)):
            out.append(f"source row {i}: reward {src.rewards[i]} not in {{0, 1}} in binary mode")
    if src.propensities is not None:
        p = src.propensities
        for i in np.flatnonzero(~((p > 0) & (p <= 1))):
            out.append(f"source row {i}: logged_propensity {p[i]} outside (0, 1]")
    for i, a in enumerate(src.ad_ids.tolist()):
        if a not in known_ads:
            out.append(f"source row {i}: ad_id {a} not in inventory")

    if bundle.candidates.shape[0] != len(src):
        out.append(
            f"candidates: {bundle.candidates.shape[0]} rows, expected one per source row ({len(src)})"
        )
    else:
        for i, (a, cands) in enumerate(zip(src.ad_ids.tolist(), bundle.candidates.tolist())):
            if a not in cands:
                out.append(f"source row {i}: logged ad {a} not among its candidates")
            missing = [c for c in cands if c not in known_ads]
            if missing:
                out.append(f"candidates row {i}: ad ids {missing} not in inventory")

    src_pos = {r: i for i, r in enumerate(src_ids.tolist())}
    for j, tgt in enumerate(bundle.targets, start=1):
        if tgt.k != j:
            out.append(f"target {j}: tagged with index {tgt.k}")
        if len(tgt) != n:
            out.append(f"length mismatch: target {j} has {len(tgt)} rows, expected {n}")
        if len(np.unique(tgt.request_ids)) != len(tgt.request_ids):
            out.append(f"target {j}: duplicate request ids")
        for i, r in enumerate(tgt.request_ids.tolist()):
            if r not in src_set:
                out.append(f"target {j} row {i}: request_id {r} not in source")
                continue
            si = src_pos[r]
            if tgt.contexts.shape[1:] == (meta.d,) and not np.array_equal(tgt.contexts[i], src.contexts[si]):
                out.append(f"target {j} row {i}: context differs from source request {r}")
            a = int(tgt.ad_ids[i])
            if a not in known_ads:
                out.append(f"target {j} row {i}: ad_id {a} not in inventory")
            elif bundle.candidates.shape[0] == len(src) and a not in bundle.candidates[si]:
                out.append(f"target {j} row {i}: ad {a} not among candidates of request {r}")
        if tgt.contexts.ndim != 2 or tgt.contexts.shape[1] != meta.d:
            out.append(f"target {j}: contexts have shape {tgt.contexts.shape}, expected (n, {meta.d})")
    return out


def pair_rows(bundle: EvalBundle, k: int) -> Iterator[tuple[LoggedSample, TargetSample]]:
    """Yield (source, target k) row pairs in source request order, matched by request_id."""
    check_target_index(k, bundle.K)
    src = bundle.source
    tgt = bundle.target(k)
    order = bundle.target_order(k)
    dom = DomainId.target(k)
    for i, j in enumerate(order):
        ctx = Context(int(src.request_ids[i]), tuple(src.contexts[i].tolist()))
        a_s = int(src.ad_ids[i])
        a_t = int(tgt.ad_ids[j])
        prop = None if src.propensities is None else float(src.propensities[i])
        logged = LoggedSample(ctx, _ad(bundle, a_s), float(src.rewards[i]), prop)
        t_ctx = Context(int(tgt.request_ids[j]), tuple(tgt.contexts[j].tolist()))
        yield logged, TargetSample(t_ctx, _ad(bundle, a_t), dom)


def _ad(bundle: EvalBundle, ad_id: int) -> Ad:
    return Ad(ad_id, tuple(bundle.inventory[bundle._ad_index[ad_id]].tolist()))


# ---------------------------------------------------------------- file IO

def _write_jsonl(path: Path, rows) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for row in rows:
            fh.write(json.dumps(row, separators=(",", ":")))
            fh.write("\n")


def _read_jsonl(path: Path) -> list[dict]:
    with open(path, encoding="utf-8") as fh:
        return [json.loads(line) for line in fh if line.strip()]


def save_bundle(bundle: EvalBundle, directory) -> Path:
    """Write the bundle as line-delimited JSON files under ``directory``."""
    out = Path(directory)
    out.mkdir(parents=True, exist_ok=True)
    meta = bundle.meta.to_dict()
    meta["candidates_per_request"] = int(bundle.candidates.shape[1]) if bundle.candidates.ndim == 2 else 0
    with open(out / "bundle_meta.json", "w", encoding="utf-8", newline="\n") as fh:
        json.dump(meta, fh, indent=2, sort_keys=True)
        fh.write("\n")
    _write_jsonl(
        out / "inventory.jsonl",
        ({"ad_id": int(a), "features": f.tolist()} for a, f in zip(bundle.inventory_ids, bundle.inventory)),
    )
    _write_jsonl(
        out / "candidates.jsonl",
        ({"request_id": int(r), "ad_ids": c.tolist()} for r, c in zip(bundle.source.request_ids, bundle.candidates)),
    )
    src = bundle.source

    def source_rows():
        for i in range(len(src)):
            row = {
                "context": {"request_id": int(src.request_ids[i]), "features": src.contexts[i].tolist()},
                "ad": {"ad_id": int(src.ad_ids[i])},
                "reward": float(src.rewards[i]),
            }
            if src.propensities is not None:
                row["logged_propensity"] = float(src.propensities[i])
            yield row

    _write_jsonl(out / "source.jsonl", source_rows())
    for tgt in bundle.targets:
        _write_jsonl(
            out / f"target_{tgt.k}.jsonl",
            (
                {
                    "context": {"request_id": int(r), "features": x.tolist()},
                    "ad": {"ad_id": int(a)},
                    "domain": f"target_{tgt.k}",
                }
                for r, x, a in zip(tgt.request_ids, tgt.contexts, tgt.ad_ids)
            ),
        )
    return out


def load_bundle(directory) -> EvalBundle:
    """Read a bundle written by :func:`save_bundle` (or by hand, same schema)."""
    src_dir = Path(directory)
    try:
        with open(src_dir / "bundle_meta.json", encoding="utf-8") as fh:
            meta = BundleMeta.from_dict(json.load(fh))
        inv = _read_jsonl(src_dir / "inventory.jsonl")
        cand_rows = _read_jsonl(src_dir / "candidates.jsonl")
        src_rows = _read_jsonl(src_dir / "source.jsonl")
    except (OSError, KeyError, json.JSONDecodeError) as exc:
        raise BundleFormatError(f"cannot read bundle in {src_dir}: {exc}") from exc

    inventory_ids = np.array([r["ad_id"] for r in inv], dtype=np.int64)
    inventory = np.array([r["features"] for r in inv], dtype=np.float64).reshape(len(inv), meta.q)
    cand_map = {int(r["request_id"]): r["ad_ids"] for r in cand_rows}

    req = np.array([r["context"]["request_id"] for r in src_rows], dtype=np.int64)
    ctx = np.array([r["context"]["features"] for r in src_rows], dtype=np.float64).reshape(len(src_rows), meta.d)
    ads = np.array([r["ad"]["ad_id"] for r in src_rows], dtype=np.int64)
    rew = np.array([r["reward"] for r in src_rows], dtype=np.float64)
    props = None
    if src_rows and all("logged_propensity" in r for r in src_rows):
        props = np.array([r["logged_propensity"] for r in src_rows], dtype=np.float64)
    try:
        candidates = np.array([cand_map[int(r)] for r in req], dtype=np.int64)
    except KeyError as exc:
        raise BundleFormatError(f"request {exc} has no candidate set") from exc
    except ValueError as exc:
        raise BundleFormatError("candidate sets must all have the same size") from exc

    targets = []
    for k in range(1, meta.K + 1):
        path = src_dir / f"target_{k}.jsonl"
        if not path.exists():
            raise BundleFormatError(f"missing {path.name}")
        rows = _read_jsonl(path)
        targets.append(
            TargetData(
                k=k,
                request_ids=np.array([r["context"]["request_id"] for r in rows], dtype=np.int64),
                contexts=np.array([r["context"]["features"] for r in rows], dtype=np.float64).reshape(len(rows), meta.d),
                ad_ids=np.array([r["ad"]["ad_id"] for r in rows], dtype=np.int64),
            )
        )
    return EvalBundle(
        meta=meta,
        source=SourceData(req, ctx, ads, rew, props),
        targets=tuple(targets),
        candidates=candidates,
        inventory_ids=inventory_ids,
        inventory=inventory,
    )
