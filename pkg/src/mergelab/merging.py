"""Task vectors, training-free merges, and learned merging weights.

Nothing in this module takes interaction logs. Adaptive merges see only
checkpoints, item catalogs (ids + features) and pseudo-user sets.
"""

from __future__ import annotations

import logging
import math
import zlib
from dataclasses import dataclass, field
from typing import Callable, Iterator, Sequence

import numpy as np

from . import recmodel as rm
from .corpus import Catalog, PseudoUserSet
from .errors import IncompatibleError, InputError, NumericalError
from .recmodel import ParamSet
from .training import OptimizerState, adam_step

log = logging.getLogger(__name__)

DOMAINWISE = "domainwise"
LAYERWISE = "layerwise"
MODES = (DOMAINWISE, LAYERWISE)
TASK_ARITHMETIC_WEIGHT = 0.4
TIES_DENSITY = 0.2
TIES_WEIGHT = 1.0


@dataclass
class TaskVector:
    domain_id: str
    delta: ParamSet

    def flat(self) -> np.ndarray:
        return self.delta.flat()


@dataclass
class MergeWeights:
    mode: str
    values: np.ndarray

    def __post_init__(self):
        if self.mode not in MODES:
            raise InputError(f"merge mode must be one of {MODES}, got {self.mode!r}")
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.mode == DOMAINWISE and self.values.ndim != 1:
            raise InputError("domain-wise weights must be a vector with one value per domain")
        if self.mode == LAYERWISE and self.values.ndim != 2:
            raise InputError("layer-wise weights must be a (domains x layers) matrix")

    @classmethod
    def constant(cls, mode: str, n_domains: int, n_layers: int, value: float) -> "MergeWeights":
        shape = (n_domains,) if mode == DOMAINWISE else (n_domains, n_layers)
        return cls(mode, np.full(shape, float(value)))

    @property
    def n_domains(self) -> int:
        return self.values.shape[0]


def _require_mode(mode: str) -> str:
    if mode not in MODES:
        raise InputError(f"merge mode must be one of {MODES}, got {mode!r}")
    return mode


# ---------------------------------------------------------------- task vectors and static merges


def task_vector(finetuned: ParamSet, base: ParamSet) -> TaskVector:
    finetuned.check_compatible(base, f"task vector of {finetuned.domain_id or 'model'}")
    delta = base.with_arrays([f - b for f, b in zip(finetuned.arrays(), base.arrays())], role="task_vector")
    delta.domain_id = finetuned.domain_id
    return TaskVector(finetuned.domain_id, delta)


def _check_taus(base: ParamSet, taus: Sequence[TaskVector]) -> None:
    if not taus:
        raise InputError("need at least one task vector")
    for tau in taus:
        base.check_compatible(tau.delta, f"task vector {tau.domain_id}")


def _merged(base: ParamSet, arrays: list[np.ndarray], taus: Sequence[TaskVector]) -> ParamSet:
    out = base.with_arrays(arrays, role="merged", domain_id="")
    out.extra["domains"] = ",".join(t.domain_id for t in taus)
    return out


def merge_domainwise(base: ParamSet, taus: Sequence[TaskVector], w: MergeWeights | Sequence[float]) -> ParamSet:
    """base + sum_k w_k * tau_k over every layer."""
    if not isinstance(w, MergeWeights):
        w = MergeWeights(DOMAINWISE, np.asarray(w, dtype=np.float64))
    if w.mode != DOMAINWISE:
        raise InputError("merge_domainwise needs domain-wise weights")
    _check_taus(base, taus)
    if w.n_domains != len(taus):
        raise IncompatibleError(f"{w.n_domains} weights for {len(taus)} task vectors")
    arrays = [a.copy() for a in base.arrays()]
    for wk, tau in zip(w.values, taus):
        if wk == 0.0:
            continue
        for a, d in zip(arrays, tau.delta.arrays()):
            a += wk * d
    return _merged(base, arrays, taus)


def merge_layerwise(base: ParamSet, taus: Sequence[TaskVector], w: MergeWeights | np.ndarray) -> ParamSet:
    """Per layer l: base^l + sum_k w[k, l] * tau_k^l (weight and bias of a layer share a coefficient)."""
    if not isinstance(w, MergeWeights):
        w = MergeWeights(LAYERWISE, np.asarray(w, dtype=np.float64))
    if w.mode != LAYERWISE:
        raise InputError("merge_layerwise needs layer-wise weights")
    _check_taus(base, taus)
    if w.values.shape != (len(taus), base.n_layers):
        raise IncompatibleError(
            f"layer-wise weights shaped {w.values.shape}, expected ({len(taus)}, {base.n_layers})"
        )
    arrays = [a.copy() for a in base.arrays()]
    for k, tau in enumerate(taus):
        deltas = tau.delta.arrays()
        for l in range(base.n_layers):
            c = w.values[k, l]
            if c == 0.0:
                continue
            arrays[2 * l] += c * deltas[2 * l]
            arrays[2 * l + 1] += c * deltas[2 * l + 1]
    return _merged(base, arrays, taus)


def merge(base: ParamSet, taus: Sequence[TaskVector], w: MergeWeights) -> ParamSet:
    return merge_domainwise(base, taus, w) if w.mode == DOMAINWISE else merge_layerwise(base, taus, w)


def task_arithmetic(base: ParamSet, taus: Sequence[TaskVector], weight: float = TASK_ARITHMETIC_WEIGHT) -> ParamSet:
    return merge_domainwise(base, taus, MergeWeights.constant(DOMAINWISE, len(taus), base.n_layers, weight))


def weight_averaging(models: Sequence[ParamSet], base: ParamSet | None = None, atol: float = 1e-6) -> ParamSet:
    """Coordinate-wise mean of the models.

    With `base`, also checks that the mean equals base + mean task vector.
    """
    if not models:
        raise InputError("weight averaging needs at least one model")
    ref = models[0]
    for m in models[1:]:
        ref.check_compatible(m, "weight averaging")
    k = len(models)
    arrays = [sum(m.arrays()[i] for m in models) / k for i in range(len(ref.arrays()))]
    if k == 1:
        arrays = [a.copy() for a in ref.arrays()]
    out = ref.with_arrays(arrays, role="merged", domain_id="")
    out.extra["domains"] = ",".join(m.domain_id for m in models)
    if base is not None:
        taus = [task_vector(m, base) for m in models]
        alt = merge_domainwise(base, taus, np.full(k, 1.0 / k))
        gap = float(np.max(np.abs(out.flat() - alt.flat())))
        if gap > atol:
            raise IncompatibleError(f"models do not share the given base: averaging identity off by {gap:.3g}")
    return out


# ---------------------------------------------------------------- TIES


def ties_trim(vec: np.ndarray, density: float) -> np.ndarray:
    """Keep the ceil(density * size) largest-magnitude entries, zero the rest."""
    keep = min(vec.size, max(0, math.ceil(density * vec.size - 1e-9)))
    out = np.zeros_like(vec)
    if keep:
        idx = np.argsort(-np.abs(vec), kind="stable")[:keep]
        out[idx] = vec[idx]
    return out


def ties_elect(trimmed: np.ndarray) -> np.ndarray:
    """Per-coordinate sign of the summed trimmed values; a zero sum elects +1."""
    return np.where(trimmed.sum(axis=0) >= 0, 1.0, -1.0)


def ties_disjoint_mean(trimmed: np.ndarray, signs: np.ndarray) -> np.ndarray:
    agree = (np.sign(trimmed) == signs[None, :]) & (trimmed != 0)
    counts = agree.sum(axis=0)
    total = np.where(agree, trimmed, 0.0).sum(axis=0)
    return np.where(counts > 0, total / np.maximum(counts, 1), 0.0)


def ties_merged_vector(vectors: np.ndarray, density: float) -> np.ndarray:
    """Trim, elect, disjoint-merge over a (K, P) stack of flat task vectors."""
    if not 0 < density <= 1:
        raise InputError(f"TIES density must lie in (0, 1], got {density}")
    vectors = np.atleast_2d(np.asarray(vectors, dtype=np.float64))
    trimmed = np.stack([ties_trim(v, density) for v in vectors])
    return ties_disjoint_mean(trimmed, ties_elect(trimmed))


def ties_merge(
    base: ParamSet,
    taus: Sequence[TaskVector],
    density: float = TIES_DENSITY,
    weight: float = TIES_WEIGHT,
    per_layer: bool = False,
) -> ParamSet:
    """TIES merge. Trimming is global over the flattened vector unless `per_layer`."""
    if not 0 < density <= 1:
        raise InputError(f"TIES density must lie in (0, 1], got {density}")
    _check_taus(base, taus)
    if per_layer:
        pieces = []
        for l in range(base.n_layers):
            stack = np.stack([t.delta.layer_flat(l) for t in taus])
            pieces.append(ties_merged_vector(stack, density))
        merged_tau = np.concatenate(pieces)
        # layer_flat order (W, b) per layer matches ParamSet.flat()
    else:
        merged_tau = ties_merged_vector(np.stack([t.flat() for t in taus]), density)
    return _merged(base, list(base.with_flat(base.flat() + weight * merged_tau).arrays()), taus)


# ---------------------------------------------------------------- weight gradients


def grad_wrt_weights(grad: ParamSet, taus: Sequence[TaskVector], mode: str) -> np.ndarray:
    """Chain rule through the linear merge: <dL/dtheta^l, tau_k^l>, summed over layers if domain-wise."""
    _require_mode(mode)
    per_layer = np.zeros((len(taus), grad.n_layers))
    for k, tau in enumerate(taus):
        grad.check_compatible(tau.delta, f"task vector {tau.domain_id}")
        g_arr, t_arr = grad.arrays(), tau.delta.arrays()
        for l in range(grad.n_layers):
            per_layer[k, l] = float(
                np.vdot(g_arr[2 * l], t_arr[2 * l]) + np.vdot(g_arr[2 * l + 1], t_arr[2 * l + 1])
            )
    return per_layer.sum(axis=1) if mode == DOMAINWISE else per_layer


# ---------------------------------------------------------------- adaptive merging


@dataclass
class MergeRecConfig:
    lam: float = 1000.0
    steps: int = 500
    lr: float = 0.001
    batch: int = 16
    temperature: float = 1.0
    init: float = 0.2
    seed: int = 0
    sampling: str = "round_robin"  # or "proportional"
    label_excludes_input: bool = True
    gamma: float = rm.DEFAULT_GAMMA

    def __post_init__(self):
        if self.steps < 0 or self.batch < 1 or self.lr <= 0 or self.temperature <= 0:
            raise InputError(f"invalid merge config: {self}")
        if self.sampling not in ("round_robin", "proportional"):
            raise InputError(f"sampling must be 'round_robin' or 'proportional', got {self.sampling!r}")


@dataclass
class AdaptiveResult:
    params: ParamSet
    weights: list[np.ndarray]
    losses: list[dict[str, float]] = field(default_factory=list)
    mode: str = DOMAINWISE

    @property
    def final_weights(self) -> MergeWeights:
        return MergeWeights(self.mode, self.weights[-1])

    def trajectory_records(self) -> list[tuple[int, str, float]]:
        """(step, name, value) rows: every weight at every step, then per-step losses."""
        rows = []
        for step, w in enumerate(self.weights):
            for idx in np.ndindex(w.shape):
                rows.append((step, "w_" + "_".join(str(i) for i in idx), float(w[idx])))
        for step, parts in enumerate(self.losses, start=1):
            for name, value in parts.items():
                rows.append((step, name, value))
        return rows


def _require_inputs(pseudo_sets, catalogs, taus) -> None:
    if len(pseudo_sets) != len(catalogs) or len(catalogs) != len(taus):
        raise IncompatibleError(
            f"need one pseudo-user set and catalog per task vector: "
            f"{len(pseudo_sets)} sets, {len(catalogs)} catalogs, {len(taus)} task vectors"
        )
    for cat in catalogs:
        # a DomainDataset carries interaction sequences and must never reach this stage
        if not isinstance(cat, Catalog):
            raise TypeError(f"merging accepts item catalogs only, got {type(cat).__name__}")
    for ps, cat in zip(pseudo_sets, catalogs):
        if not isinstance(ps, PseudoUserSet):
            raise TypeError(f"expected PseudoUserSet, got {type(ps).__name__}")
        if len(ps) == 0:
            raise InputError(f"pseudo-user set for {cat.domain_id} is empty")
        if max(max(s) for s in ps.sequences) >= len(cat):
            raise IncompatibleError(f"pseudo-users of {cat.domain_id} reference items outside its catalog")


def pseudo_user_batches(
    pseudo_sets: Sequence[PseudoUserSet], batch: int, seed: int, sampling: str = "round_robin"
) -> Iterator[list[tuple[int, int]]]:
    """Endless stream of batches of (domain index, pseudo-user index).

    round_robin: slots cycle through domains so each contributes equally;
    each domain walks its own reshuffled permutation. proportional: one
    shuffled stream over the union of all pseudo-users.
    """
    rng = np.random.default_rng([seed, zlib.crc32(b"pseudo-user-batches")])
    if sampling == "proportional":
        pool = [(d, j) for d, ps in enumerate(pseudo_sets) for j in range(len(ps))]
        queue: list[tuple[int, int]] = []
        while True:
            out = []
            while len(out) < batch:
                if not queue:
                    queue = [pool[i] for i in rng.permutation(len(pool))]
                out.append(queue.pop(0))
            yield out
    k = len(pseudo_sets)
    queues: list[list[int]] = [[] for _ in range(k)]
    slot = 0
    while True:
        out = []
        for _ in range(batch):
            d = slot % k
            slot += 1
            if not queues[d]:
                queues[d] = list(rng.permutation(len(pseudo_sets[d])))
            out.append((d, int(queues[d].pop(0))))
        yield out


def _group_by_domain(batch: list[tuple[int, int]]) -> dict[int, list[int]]:
    groups: dict[int, list[int]] = {}
    for d, j in batch:
        groups.setdefault(d, []).append(j)
    return dict(sorted(groups.items()))


def _adaptive_loop(
    base: ParamSet,
    taus: Sequence[TaskVector],
    pseudo_sets: Sequence[PseudoUserSet],
    catalogs: Sequence[Catalog],
    mode: str,
    cfg: MergeRecConfig,
    make_heads: Callable[[int, list[int]], list[tuple[str, float, rm.Head]]],
    callback: Callable[[int, ParamSet], None] | None,
) -> AdaptiveResult:
    _require_mode(mode)
    _check_taus(base, taus)
    _require_inputs(pseudo_sets, catalogs, taus)
    for cat in catalogs:
        if cat.dim != base.input_dim:
            raise IncompatibleError(f"catalog {cat.domain_id} has {cat.dim} features, model expects {base.input_dim}")
    w = MergeWeights.constant(mode, len(taus), base.n_layers, cfg.init)
    trajectory = [w.values.copy()]
    losses: list[dict[str, float]] = []
    state = OptimizerState(lr=cfg.lr)
    merged = merge(base, taus, w)
    if callback:
        callback(0, merged)
    stream = pseudo_user_batches(pseudo_sets, cfg.batch, cfg.seed, cfg.sampling)
    for step in range(1, cfg.steps + 1):
        grad = None
        parts: dict[str, float] = {}
        total = 0.0
        for d, rows in _group_by_domain(next(stream)).items():
            seqs = [pseudo_sets[d].sequences[j] for j in rows]
            feats = catalogs[d].features
            x = rm.pool_many(seqs, feats, cfg.gamma)
            components: dict[str, float] = {}
            res = rm.objective_and_grad(merged, x, feats, _logged_head(make_heads(d, rows), components), cfg.temperature)
            for name, value in components.items():
                parts[name] = parts.get(name, 0.0) + value
            total += res.loss
            grad = res.grad if grad is None else grad.with_arrays([a + b for a, b in zip(grad.arrays(), res.grad.arrays())])
        parts["total"] = total
        if not all(math.isfinite(v) for v in parts.values()):
            raise NumericalError(f"non-finite merging loss at step {step}: {parts}")
        gw = grad_wrt_weights(grad, taus, mode)
        new_values, state = adam_step(w.values, gw, state)
        w = MergeWeights(mode, new_values)
        trajectory.append(w.values.copy())
        losses.append(parts)
        merged = merge(base, taus, w)
        if callback:
            callback(step, merged)
    return AdaptiveResult(merged, trajectory, losses, mode)


def _logged_head(named: list[tuple[str, float, rm.Head]], sink: dict[str, float]) -> rm.Head:
    """Weighted sum of named heads that also records each unweighted component in `sink`."""

    def head(s):
        total, grad = 0.0, np.zeros_like(s)
        for name, coef, h in named:
            value, g = h(s)
            sink[name] = value
            total += coef * value
            grad += coef * g
        return total, grad

    return head


def adamerging(
    base: ParamSet,
    taus: Sequence[TaskVector],
    pseudo_sets: Sequence[PseudoUserSet],
    catalogs: Sequence[Catalog],
    mode: str = DOMAINWISE,
    cfg: MergeRecConfig | None = None,
    callback: Callable[[int, ParamSet], None] | None = None,
) -> AdaptiveResult:
    """Learn merging weights by minimizing prediction entropy on pseudo-users."""
    cfg = cfg or MergeRecConfig()

    def heads(d, rows):
        return [("entropy", 1.0, rm.entropy_head())]

    return _adaptive_loop(base, taus, pseudo_sets, catalogs, mode, cfg, heads, callback)


@dataclass
class TeacherCache:
    """Teacher distributions over each domain's catalog for every pseudo-user, plus top-1 labels."""

    probs: list[np.ndarray]
    labels: list[np.ndarray]


def teacher_pass(
    teachers: Sequence[ParamSet],
    pseudo_sets: Sequence[PseudoUserSet],
    catalogs: Sequence[Catalog],
    temperature: float = 1.0,
    exclude_input: bool = True,
    gamma: float = rm.DEFAULT_GAMMA,
) -> TeacherCache:
    """Run each fine-tuned model on its own domain's pseudo-users.

    With `exclude_input`, the pseudo-label is the top-1 item other than the
    ones already in the pseudo-user's sequence; a single-item user's own item
    otherwise always scores a cosine of exactly 1.
    """
    if not (len(teachers) == len(pseudo_sets) == len(catalogs)):
        raise IncompatibleError("need one teacher per pseudo-user set and catalog")
    probs, labels = [], []
    for teacher, ps, cat in zip(teachers, pseudo_sets, catalogs):
        if cat.dim != teacher.input_dim:
            raise IncompatibleError(f"teacher for {cat.domain_id} expects {teacher.input_dim} features, catalog has {cat.dim}")
        dist = rm.score_many(teacher, ps.sequences, cat.features, temperature, gamma)
        ranked = dist.scores.copy()
        if exclude_input and len(cat) > 1:
            for row, seq in enumerate(ps.sequences):
                ranked[row, list(seq)] = -np.inf
        probs.append(dist.probs)
        labels.append(np.argmax(ranked, axis=1))
    return TeacherCache(probs, labels)


def mergerec(
    base: ParamSet,
    taus: Sequence[TaskVector],
    teachers: Sequence[ParamSet],
    pseudo_sets: Sequence[PseudoUserSet],
    catalogs: Sequence[Catalog],
    mode: str = DOMAINWISE,
    cfg: MergeRecConfig | None = None,
    callback: Callable[[int, ParamSet], None] | None = None,
    cache: TeacherCache | None = None,
) -> AdaptiveResult:
    """Learn merging weights with pseudo-label cross-entropy + lam * KL(merged || teacher)."""
    cfg = cfg or MergeRecConfig()
    if len(teachers) != len(taus):
        raise IncompatibleError(f"{len(teachers)} teachers for {len(taus)} task vectors")
    for teacher in teachers:
        base.check_compatible(teacher, f"teacher {teacher.domain_id}")
    _require_inputs(pseudo_sets, catalogs, taus)
    cache = cache or teacher_pass(teachers, pseudo_sets, catalogs, cfg.temperature, cfg.label_excludes_input, cfg.gamma)

    def heads(d, rows):
        return [
            ("rec", 1.0, rm.ce_head(cache.labels[d][rows])),
            ("kd", cfg.lam, rm.kd_head(cache.probs[d][rows])),
        ]

    return _adaptive_loop(base, taus, pseudo_sets, catalogs, mode, cfg, heads, callback)
