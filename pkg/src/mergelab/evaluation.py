"""Full-catalog ranking metrics, fine-tune normalization, grouped analyses and significance tests."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np
from scipy import stats

from . import recmodel as rm
from .corpus import DomainDataset
from .errors import InputError
from .recmodel import ParamSet

log = logging.getLogger(__name__)

DEFAULT_K = 10
# inclusive upper edges of train-popularity groups: 1-10, 11-30, 31-100, 101-300, >300
DEFAULT_POPULARITY_EDGES = (10, 30, 100, 300)
DEFAULT_LENGTH_BINS = 5


def target_ranks(scores: np.ndarray, targets: np.ndarray) -> np.ndarray:
    """1-based rank of each row's target; equal scores are ordered by catalog index."""
    rows = np.arange(len(targets))
    s_t = scores[rows, targets][:, None]
    above = (scores > s_t).sum(axis=1)
    tied_before = ((scores == s_t) & (np.arange(scores.shape[1])[None, :] < targets[:, None])).sum(axis=1)
    return 1 + above + tied_before


def metrics_from_ranks(ranks: np.ndarray, k: int) -> tuple[float, float]:
    if k < 1:
        raise InputError(f"cutoff k must be >= 1, got {k}")
    if len(ranks) == 0:
        return 0.0, 0.0
    hit = ranks <= k
    recall = float(hit.mean())
    ndcg = float(np.where(hit, 1.0 / np.log2(1.0 + ranks), 0.0).mean())
    return recall, ndcg


def rank_metrics(
    params: ParamSet,
    histories: Sequence[Sequence[int]],
    targets: Sequence[int],
    features: np.ndarray,
    k: int = DEFAULT_K,
    gamma: float = rm.DEFAULT_GAMMA,
) -> tuple[float, float, np.ndarray]:
    """(recall@k, ndcg@k, ranks) of `targets` given `histories`, ranking the whole catalog."""
    if k < 1:
        raise InputError(f"cutoff k must be >= 1, got {k}")
    targets = np.asarray(targets, dtype=np.int64)
    if len(targets) == 0:
        return 0.0, 0.0, np.zeros(0, dtype=np.int64)
    dist = rm.score_many(params, histories, features, 1.0, gamma)
    ranks = target_ranks(dist.scores, targets)
    recall, ndcg = metrics_from_ranks(ranks, k)
    return recall, ndcg, ranks


def leave_one_out_ranks(params: ParamSet, dataset: DomainDataset, gamma: float = rm.DEFAULT_GAMMA) -> np.ndarray:
    splits = [dataset.splits[u] for u in dataset.users]
    if not splits:
        return np.zeros(0, dtype=np.int64)
    dist = rm.score_many(params, [s.history for s in splits], dataset.catalog.features, 1.0, gamma)
    return target_ranks(dist.scores, np.array([s.test for s in splits], dtype=np.int64))


def recall_ndcg_at_k(
    params: ParamSet, dataset: DomainDataset, k: int = DEFAULT_K, gamma: float = rm.DEFAULT_GAMMA
) -> tuple[float, float]:
    """Leave-one-out test metrics: history is train + validation, target is the test item."""
    if k < 1:
        raise InputError(f"cutoff k must be >= 1, got {k}")
    return metrics_from_ranks(leave_one_out_ranks(params, dataset, gamma), k)


def popularity_recall(dataset: DomainDataset, k: int = DEFAULT_K, split: str = "valid") -> float:
    """Recall@k of recommending the k most popular training items to everyone.

    The reference point a trained model has to beat; `split` picks the
    validation or the test item as target.
    """
    if k < 1:
        raise InputError(f"cutoff k must be >= 1, got {k}")
    pop = dataset.train_popularity()
    # stable ordering: higher count first, then catalog index
    top = set(np.argsort(-pop, kind="stable")[:k].tolist())
    splits = [dataset.splits[u] for u in dataset.users]
    if not splits:
        return 0.0
    targets = [s.valid if split == "valid" else s.test for s in splits]
    return float(np.mean([t in top for t in targets]))


# ---------------------------------------------------------------- normalization


@dataclass
class NormalizedReport:
    values: dict[tuple[str, str], float | None]
    averages: dict[str, float | None]


def normalize(
    absolute: dict[tuple[str, str], float], reference: dict[tuple[str, str], float]
) -> NormalizedReport:
    """100 * method / reference per (domain, metric); averages are means of normalized cells.

    Cells whose reference is missing or zero are None and left out of the average.
    """
    values: dict[tuple[str, str], float | None] = {}
    by_metric: dict[str, list[float]] = {}
    for key, value in absolute.items():
        ref = reference.get(key)
        if ref is None or ref <= 0:
            log.warning("normalization undefined for %s: reference %r", key, ref)
            values[key] = None
            by_metric.setdefault(key[1], [])
            continue
        values[key] = 100.0 * (value / ref)
        by_metric.setdefault(key[1], []).append(values[key])
    averages = {m: (float(np.mean(v)) if v else None) for m, v in by_metric.items()}
    return NormalizedReport(values, averages)


# ---------------------------------------------------------------- groups


@dataclass
class GroupMetrics:
    label: str
    count: int
    recall: float
    ndcg: float
    normalized_recall: float | None = None
    normalized_ndcg: float | None = None


@dataclass
class GroupReport:
    length_groups: list[GroupMetrics] = field(default_factory=list)
    popularity_groups: list[GroupMetrics] = field(default_factory=list)


def length_edges(lengths: np.ndarray, n_bins: int = DEFAULT_LENGTH_BINS) -> list[int]:
    """Inclusive upper edges of quantile bins over history lengths (last edge is the max)."""
    qs = np.quantile(lengths, np.linspace(0, 1, n_bins + 1)[1:], method="higher")
    return sorted({int(q) for q in qs})


def _edge_labels(edges: Sequence[float], low: int) -> list[str]:
    labels, lo = [], low
    for e in edges:
        labels.append(f"{lo}-{int(e)}" if math.isfinite(e) else f">{lo - 1}")
        lo = int(e) + 1 if math.isfinite(e) else lo
    return labels


def _assign(values: np.ndarray, edges: Sequence[float]) -> np.ndarray:
    return np.searchsorted(np.asarray(edges, dtype=float), values, side="left")


def _grouped(ranks, groups, n_groups, k, labels, ref_ranks=None) -> list[GroupMetrics]:
    out = []
    for g in range(n_groups):
        mask = groups == g
        if not mask.any():
            log.info("group %s is empty", labels[g])
        r, n = metrics_from_ranks(ranks[mask], k)
        gm = GroupMetrics(labels[g], int(mask.sum()), r, n)
        if ref_ranks is not None and mask.any():
            rr, rn = metrics_from_ranks(ref_ranks[mask], k)
            gm.normalized_recall = 100.0 * (r / rr) if rr > 0 else None
            gm.normalized_ndcg = 100.0 * (n / rn) if rn > 0 else None
        out.append(gm)
    return out


def group_analysis(
    params: ParamSet,
    dataset: DomainDataset,
    reference: ParamSet | None = None,
    k: int = DEFAULT_K,
    length_bin_edges: Sequence[int] | None = None,
    popularity_edges: Sequence[int] = DEFAULT_POPULARITY_EDGES,
    gamma: float = rm.DEFAULT_GAMMA,
) -> GroupReport:
    """Metrics per history-length group and per test-item popularity group.

    Popularity counts training-prefix interactions; the lowest group also takes
    items with no training interactions. With `reference`, each group is
    normalized by the reference model's metric on the same group.
    """
    splits = [dataset.splits[u] for u in dataset.users]
    lengths = np.array([len(s.history) for s in splits])
    ranks = leave_one_out_ranks(params, dataset, gamma)
    ref_ranks = leave_one_out_ranks(reference, dataset, gamma) if reference is not None else None

    l_edges = list(length_bin_edges) if length_bin_edges is not None else length_edges(lengths)
    if lengths.size and lengths.max() > l_edges[-1]:
        raise InputError(f"length bins end at {l_edges[-1]} but a history has length {lengths.max()}")
    l_groups = _assign(lengths, l_edges)
    l_labels = _edge_labels(l_edges, int(lengths.min()) if lengths.size else 0)

    pop = dataset.train_popularity()[[s.test for s in splits]]
    p_edges = list(popularity_edges) + [math.inf]
    p_groups = _assign(pop, p_edges)
    p_labels = _edge_labels(p_edges, 1)

    return GroupReport(
        _grouped(ranks, l_groups, len(l_edges), k, l_labels, ref_ranks),
        _grouped(ranks, p_groups, len(p_edges), k, p_labels, ref_ranks),
    )


# ---------------------------------------------------------------- dynamics


@dataclass(frozen=True)
class ProbeSet:
    """Fixed pseudo-user probes of one domain with the teacher's top-1 label for each."""

    features: np.ndarray
    items: np.ndarray
    labels: np.ndarray


def probe_metrics(params: ParamSet, probes: Sequence[ProbeSet], temperature: float = 1.0) -> tuple[float, float]:
    """Mean cross-entropy against the probe labels and mean prediction entropy."""
    ces, ents = [], []
    for probe in probes:
        items = rm.encode(params, probe.features)
        users = items[probe.items]
        c, _ = rm.cosine_matrix(users, items)
        logp = rm.log_softmax(c / temperature)
        ces.append(-logp[np.arange(len(probe.items)), probe.labels])
        ents.append(-(np.exp(logp) * logp).sum(axis=1))
    return float(np.concatenate(ces).mean()), float(np.concatenate(ents).mean())


def dynamics_probe(
    models: Iterable[tuple[int, ParamSet]], probes: Sequence[ProbeSet], temperature: float = 1.0
) -> list[tuple[int, float, float]]:
    """(step, cross-entropy, entropy) for each (step, merged model) in the stream."""
    return [(step, *probe_metrics(params, probes, temperature)) for step, params in models]


# ---------------------------------------------------------------- statistics


@dataclass
class TTestResult:
    statistic: float
    dof: float
    p_value: float
    degenerate: bool = False


def one_tailed_welch_t(a: Sequence[float], b: Sequence[float]) -> TTestResult:
    """Welch t-test of mean(a) > mean(b), one-tailed.

    When both samples have zero variance the statistic is infinite; p is then
    0 or 1 by the sign of the mean difference, or 0.5 for equal means.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if len(a) < 2 or len(b) < 2:
        raise InputError("Welch t-test needs at least two samples per group")
    va, vb = a.var(ddof=1) / len(a), b.var(ddof=1) / len(b)
    diff = a.mean() - b.mean()
    se2 = va + vb
    if se2 == 0:
        if diff == 0:
            log.warning("Welch t-test undefined: both samples constant and equal")
            return TTestResult(0.0, math.nan, 0.5, True)
        return TTestResult(math.copysign(math.inf, diff), math.nan, 0.0 if diff > 0 else 1.0, True)
    t = diff / math.sqrt(se2)
    dof = se2 ** 2 / (va ** 2 / (len(a) - 1) + vb ** 2 / (len(b) - 1))
    return TTestResult(float(t), float(dof), float(stats.t.sf(t, dof)))
