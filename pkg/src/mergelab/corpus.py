"""Interaction ingestion, synthetic corpora, filtering, splitting and pseudo-users.

Every domain is handled on its own; nothing here mixes ids across domains.
"""

from __future__ import annotations

import hashlib
import logging
import math
import zlib
from collections import Counter, defaultdict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, NamedTuple, Sequence

import numpy as np

from .errors import InputError

log = logging.getLogger(__name__)

MIN_CORE = 5
DEFAULT_FEATURE_DIM = 64
DEFAULT_ACTIVE = 8


class Interaction(NamedTuple):
    user_id: str
    item_id: str
    timestamp: int


class Split(NamedTuple):
    train: list[int]
    valid: int
    test: int

    @property
    def history(self) -> list[int]:
        """Items visible when predicting the test item."""
        return self.train + [self.valid]


@dataclass(frozen=True)
class Catalog:
    """Item ids of one domain plus their feature vectors, row-aligned."""

    domain_id: str
    item_ids: tuple[str, ...]
    features: np.ndarray

    def __post_init__(self):
        if self.features.ndim != 2 or self.features.shape[0] != len(self.item_ids):
            raise InputError(
                f"catalog {self.domain_id}: {len(self.item_ids)} items but features "
                f"shaped {self.features.shape}"
            )

    def __len__(self) -> int:
        return len(self.item_ids)

    @property
    def dim(self) -> int:
        return self.features.shape[1]

    def index(self) -> dict[str, int]:
        return {item: i for i, item in enumerate(self.item_ids)}


@dataclass
class DomainDataset:
    domain_id: str
    catalog: Catalog
    users: dict[str, list[int]]
    splits: dict[str, Split] = field(default_factory=dict)

    @property
    def user_ids(self) -> list[str]:
        return list(self.users)

    def train_popularity(self) -> np.ndarray:
        """Per-item interaction counts over the training prefixes."""
        counts = np.zeros(len(self.catalog), dtype=np.int64)
        for split in self.splits.values():
            np.add.at(counts, split.train, 1)
        return counts

    def training_pairs(self) -> list[tuple[list[int], int]]:
        """(prefix, next item) for every position of every training prefix."""
        pairs = []
        for uid in self.users:
            train = self.splits[uid].train
            for j in range(1, len(train)):
                pairs.append((train[:j], train[j]))
        return pairs


@dataclass(frozen=True)
class PseudoUserSet:
    domain_id: str
    sequences: tuple[tuple[int, ...], ...]

    def __len__(self) -> int:
        return len(self.sequences)

    @property
    def items(self) -> np.ndarray:
        return np.array([seq[0] for seq in self.sequences], dtype=np.int64)


@dataclass(frozen=True)
class SyntheticDomainSpec:
    domain_id: str
    users: int
    items: int
    mean_length: float = 12.0
    latent_dim: int = 8
    popularity_skew: float = 1.0
    user_strength: float = 3.0
    sequence_strength: float = 5.0
    # share of each item's latent factor explained by its feature vector
    feature_alignment: float = 0.7


@dataclass(frozen=True)
class FeatureSpec:
    dim: int = DEFAULT_FEATURE_DIM
    active: int = DEFAULT_ACTIVE
    seed: int = 0
    # seeds the feature -> latent projection shared by every synthetic domain
    semantic_seed: int = 0


# ---------------------------------------------------------------- ingestion


def ingest_tsv(path: str | Path) -> list[Interaction]:
    """Parse a `user<TAB>item<TAB>timestamp` file. No filtering is applied."""
    path = Path(path)
    if not path.exists():
        raise InputError(f"interaction file not found: {path}")
    out = []
    with path.open(encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.rstrip("\r\n")
            if not line.strip() or line.startswith("#"):
                continue
            fields = line.split("\t")
            if len(fields) < 3:
                raise InputError(f"{path}:{lineno}: expected 3 tab-separated fields, got {len(fields)}")
            try:
                ts = int(fields[2])
            except ValueError:
                raise InputError(f"{path}:{lineno}: unparsable timestamp {fields[2]!r}") from None
            out.append(Interaction(fields[0], fields[1], ts))
    return out


def write_tsv(interactions: Iterable[Interaction], path: str | Path, header: str = "") -> None:
    """Write interactions; an optional `header` goes out as leading `#` comment lines."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", encoding="utf-8", newline="\n") as fh:
        fh.write(_comment(header))
        for it in interactions:
            fh.write(f"{it.user_id}\t{it.item_id}\t{it.timestamp}\n")


def _comment(header: str) -> str:
    return "".join(f"# {line}\n" for line in header.splitlines())


# ---------------------------------------------------------------- synthesis


def _domain_rng(seed: int, domain_id: str) -> np.random.Generator:
    # keyed by id so adding a domain leaves the others untouched
    return np.random.default_rng([seed, zlib.crc32(domain_id.encode("utf-8"))])


def _sequence_length(rng: np.random.Generator, mean: float, cap: int) -> int:
    floor = MIN_CORE if mean > MIN_CORE else 1
    n = floor + int(rng.poisson(max(mean - floor, 0.0)))
    return min(n, cap)


def _semantic_projection(features: FeatureSpec, latent_dim: int) -> np.ndarray:
    rng = np.random.default_rng([features.semantic_seed, latent_dim, features.dim])
    return rng.normal(size=(latent_dim, features.dim)) / math.sqrt(features.active * latent_dim)


def synthesize_domain(spec: SyntheticDomainSpec, seed: int, features: FeatureSpec = FeatureSpec()) -> list[Interaction]:
    """Sample sequences from latent dot-product preferences, popularity skew and a first-order item transition."""
    if spec.users <= 0 or spec.items <= 0:
        raise InputError(f"domain {spec.domain_id}: users and items must be positive")
    if not 0 <= spec.feature_alignment <= 1:
        raise InputError(f"domain {spec.domain_id}: feature_alignment must lie in [0, 1]")
    rng = _domain_rng(seed, spec.domain_id)
    r = spec.latent_dim
    item_ids = [f"{spec.domain_id}_i{i}" for i in range(spec.items)]
    semantic = featurize_items(item_ids, features.dim, features.active, features.seed) @ _semantic_projection(features, r).T
    noise = rng.normal(size=(spec.items, r)) / math.sqrt(r)
    a = spec.feature_alignment
    item_f = math.sqrt(a) * semantic + math.sqrt(1.0 - a) * noise
    user_f = rng.normal(size=(spec.users, r)) / math.sqrt(r)
    ranks = rng.permutation(spec.items) + 1
    pop_bias = -spec.popularity_skew * np.log(ranks)

    out = []
    for u in range(spec.users):
        uid = f"{spec.domain_id}_u{u}"
        n = _sequence_length(rng, spec.mean_length, spec.items)
        base_logits = spec.user_strength * (item_f @ user_f[u]) + pop_bias
        seen = np.zeros(spec.items, dtype=bool)
        ts = int(rng.integers(0, 1_000_000))
        last = None
        for _ in range(n):
            logits = base_logits.copy()
            if last is not None:
                logits += spec.sequence_strength * (item_f @ item_f[last])
            logits[seen] = -np.inf
            p = np.exp(logits - logits.max())
            p /= p.sum()
            item = int(rng.choice(spec.items, p=p))
            seen[item] = True
            last = item
            ts += int(rng.integers(1, 1000))
            out.append(Interaction(uid, item_ids[item], ts))
    return out


def synthesize_domains(
    specs: Sequence[SyntheticDomainSpec], seed: int, features: FeatureSpec = FeatureSpec()
) -> list[list[Interaction]]:
    """One raw interaction list per spec. Ids are prefixed by domain, so domains never share users or items."""
    ids = [s.domain_id for s in specs]
    if len(set(ids)) != len(ids):
        raise InputError(f"duplicate domain ids in synthetic spec: {ids}")
    return [synthesize_domain(s, seed, features) for s in specs]


# ---------------------------------------------------------------- filtering / splitting


def five_core_filter(interactions: Sequence[Interaction], k: int = MIN_CORE) -> list[Interaction]:
    """Drop users and items with fewer than `k` interactions until nothing changes."""
    current = list(interactions)
    while True:
        ucount = Counter(it.user_id for it in current)
        icount = Counter(it.item_id for it in current)
        kept = [it for it in current if ucount[it.user_id] >= k and icount[it.item_id] >= k]
        if len(kept) == len(current):
            return kept
        current = kept


def order_sequences(interactions: Sequence[Interaction]) -> dict[str, list[str]]:
    """Per-user item ids sorted by timestamp; ties keep input order."""
    by_user: dict[str, list[tuple[int, int, str]]] = defaultdict(list)
    for pos, it in enumerate(interactions):
        by_user[it.user_id].append((it.timestamp, pos, it.item_id))
    return {uid: [item for _, _, item in sorted(rows)] for uid, rows in by_user.items()}


def leave_one_out_split(sequences: dict[str, Sequence[int]]) -> dict[str, Split]:
    splits = {}
    for uid, seq in sequences.items():
        if len(seq) < 3:
            raise InputError(f"user {uid} has {len(seq)} interactions; leave-one-out needs at least 3")
        seq = list(seq)
        splits[uid] = Split(seq[:-2], seq[-2], seq[-1])
    return splits


# ---------------------------------------------------------------- features / catalogs


def _item_rng(item_id: str, seed: int) -> np.random.Generator:
    digest = hashlib.blake2b(f"{seed}\x00{item_id}".encode("utf-8"), digest_size=16).digest()
    return np.random.default_rng(int.from_bytes(digest, "little"))


def featurize_items(
    item_ids: Sequence[str], dim: int = DEFAULT_FEATURE_DIM, active: int = DEFAULT_ACTIVE, seed: int = 0
) -> np.ndarray:
    """Hash each id to a binary vector with exactly `active` of `dim` coordinates set."""
    if not 0 < active <= dim:
        raise InputError(f"need 0 < active <= dim, got active={active}, dim={dim}")
    out = np.zeros((len(item_ids), dim))
    for row, item in enumerate(item_ids):
        out[row, _item_rng(item, seed).choice(dim, size=active, replace=False)] = 1.0
    return out


def read_features(path: str | Path) -> dict[str, np.ndarray]:
    """Parse an `item_id<TAB>f0,f1,...` feature file."""
    path = Path(path)
    if not path.exists():
        raise InputError(f"feature file not found: {path}")
    out: dict[str, np.ndarray] = {}
    dim = None
    with path.open(encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.rstrip("\r\n")
            if not line.strip() or line.startswith("#"):
                continue
            parts = line.split("\t")
            if len(parts) != 2:
                raise InputError(f"{path}:{lineno}: expected item_id<TAB>features")
            try:
                vec = np.array([float(v) for v in parts[1].split(",")])
            except ValueError:
                raise InputError(f"{path}:{lineno}: unparsable feature value") from None
            if dim is None:
                dim = vec.size
            elif vec.size != dim:
                raise InputError(f"{path}:{lineno}: {vec.size} features, expected {dim}")
            out[parts[0]] = vec
    return out


def write_catalog(catalog: Catalog, path: str | Path, header: str = "") -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", encoding="utf-8", newline="\n") as fh:
        fh.write(_comment(header))
        for item, vec in zip(catalog.item_ids, catalog.features):
            fh.write(item + "\t" + ",".join(repr(float(v)) for v in vec) + "\n")


def read_catalog(path: str | Path, domain_id: str) -> Catalog:
    feats = read_features(path)
    if not feats:
        raise InputError(f"catalog file {path} is empty")
    ids = tuple(feats)
    return Catalog(domain_id, ids, np.stack([feats[i] for i in ids]))


def build_dataset(
    interactions: Sequence[Interaction],
    domain_id: str,
    dim: int = DEFAULT_FEATURE_DIM,
    active: int = DEFAULT_ACTIVE,
    feature_seed: int = 0,
    feature_overrides: dict[str, np.ndarray] | None = None,
) -> DomainDataset:
    """5-core filter, chronological ordering, leave-one-out split and featurization."""
    filtered = five_core_filter(interactions)
    if not filtered:
        raise InputError(f"domain {domain_id}: nothing left after 5-core filtering")
    ordered = order_sequences(filtered)
    item_ids = tuple(sorted({it.item_id for it in filtered}))
    feats = featurize_items(item_ids, dim, active, feature_seed)
    if feature_overrides:
        for row, item in enumerate(item_ids):
            if item in feature_overrides:
                vec = feature_overrides[item]
                if vec.size != dim:
                    raise InputError(f"override for {item} has {vec.size} features, expected {dim}")
                feats[row] = vec
    catalog = Catalog(domain_id, item_ids, feats)
    index = catalog.index()
    users = {}
    short = 0
    for uid in sorted(ordered):
        seq = [index[i] for i in ordered[uid]]
        if len(seq) < 3:
            short += 1
            continue
        users[uid] = seq
    if short:
        log.warning("domain %s: dropped %d users with fewer than 3 interactions", domain_id, short)
    return DomainDataset(domain_id, catalog, users, leave_one_out_split(users))


def subsample_users(dataset: DomainDataset, fraction: float, seed: int) -> DomainDataset:
    """Keep a random `fraction` of users (at least one); catalog is unchanged."""
    if not 0 < fraction <= 1:
        raise InputError(f"fraction must lie in (0, 1], got {fraction}")
    uids = dataset.user_ids
    n = max(1, int(round(fraction * len(uids))))
    if n == len(uids):
        return dataset
    rng = np.random.default_rng([seed, zlib.crc32(dataset.domain_id.encode("utf-8"))])
    keep = sorted(rng.choice(len(uids), size=n, replace=False))
    chosen = [uids[i] for i in keep]
    return DomainDataset(
        dataset.domain_id,
        dataset.catalog,
        {u: dataset.users[u] for u in chosen},
        {u: dataset.splits[u] for u in chosen},
    )


def build_pseudo_users(catalog: Catalog | Sequence) -> PseudoUserSet:
    """One single-item sequence per catalog entry, in catalog order."""
    n = len(catalog)
    if n == 0:
        raise InputError("cannot build pseudo-users from an empty catalog")
    domain = catalog.domain_id if isinstance(catalog, Catalog) else ""
    return PseudoUserSet(domain, tuple((i,) for i in range(n)))
