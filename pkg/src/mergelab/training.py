"""Base pre-training and per-domain fine-tuning with a hand-rolled Adam."""

from __future__ import annotations

import logging
import zlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import recmodel as rm
from .corpus import DomainDataset
from .errors import IncompatibleError, InputError, NumericalError
from .evaluation import rank_metrics
from .recmodel import ParamSet

log = logging.getLogger(__name__)


@dataclass
class OptimizerState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: list[np.ndarray] | None = None
    v: list[np.ndarray] | None = None


def _as_arrays(x) -> list[np.ndarray]:
    return x.arrays() if isinstance(x, ParamSet) else [np.asarray(x, dtype=np.float64)]


def adam_step(params, grads, state: OptimizerState):
    """One bias-corrected Adam update. Works on a ParamSet or a plain array.

    Returns (new_params, state); `state` is updated in place.
    """
    p_arrays, g_arrays = _as_arrays(params), _as_arrays(grads)
    if [a.shape for a in p_arrays] != [g.shape for g in g_arrays]:
        raise IncompatibleError("gradient shapes do not match parameter shapes")
    for i, g in enumerate(g_arrays):
        if not np.isfinite(g).all():
            raise NumericalError(f"non-finite gradient in array {i} at optimizer step {state.step + 1}")
    if state.m is None:
        state.m = [np.zeros_like(a) for a in p_arrays]
        state.v = [np.zeros_like(a) for a in p_arrays]
    elif [m.shape for m in state.m] != [a.shape for a in p_arrays]:
        raise IncompatibleError("optimizer moments do not match parameter shapes")
    state.step += 1
    bc1 = 1.0 - state.beta1 ** state.step
    bc2 = 1.0 - state.beta2 ** state.step
    out = []
    for i, (p, g) in enumerate(zip(p_arrays, g_arrays)):
        state.m[i] = state.beta1 * state.m[i] + (1.0 - state.beta1) * g
        state.v[i] = state.beta2 * state.v[i] + (1.0 - state.beta2) * (g * g)
        m_hat = state.m[i] / bc1
        v_hat = state.v[i] / bc2
        out.append(p - state.lr * m_hat / (np.sqrt(v_hat) + state.eps))
    if isinstance(params, ParamSet):
        return params.with_arrays(out), state
    return out[0], state


@dataclass
class TrainConfig:
    epochs: int = 50
    batch_size: int = 64
    lr: float = 1e-3
    seed: int = 0
    negatives: str = "full"  # or "in_batch"
    patience: int = 5
    temperature: float = 1.0
    gamma: float = rm.DEFAULT_GAMMA
    eval_k: int = 10

    def __post_init__(self):
        if self.epochs < 0 or self.batch_size < 1 or self.lr <= 0 or self.patience < 1:
            raise InputError(f"invalid training config: {self}")
        if self.negatives not in ("full", "in_batch"):
            raise InputError(f"negatives must be 'full' or 'in_batch', got {self.negatives!r}")


@dataclass
class TrainResult:
    params: ParamSet
    records: list[tuple[int, str, str, float]] = field(default_factory=list)
    best_epoch: int = 0

    def epoch_losses(self) -> list[float]:
        return [v for _, split, metric, v in self.records if split == "train" and metric == "loss"]


@dataclass
class _DomainBatches:
    """Pooled training inputs of one domain, computed once per run."""

    features: np.ndarray
    inputs: np.ndarray
    targets: np.ndarray
    val_histories: list[list[int]]
    val_targets: np.ndarray


def _prepare(dataset: DomainDataset, gamma: float) -> _DomainBatches:
    pairs = dataset.training_pairs()
    if not pairs:
        raise InputError(f"domain {dataset.domain_id} has no training pairs")
    feats = dataset.catalog.features
    inputs = rm.pool_many([p for p, _ in pairs], feats, gamma)
    targets = np.array([t for _, t in pairs], dtype=np.int64)
    splits = [dataset.splits[u] for u in dataset.users]
    return _DomainBatches(
        feats, inputs, targets, [s.train for s in splits], np.array([s.valid for s in splits], dtype=np.int64)
    )


def _batch_loss(params: ParamSet, data: _DomainBatches, idx: np.ndarray, cfg: TrainConfig) -> rm.LossResult:
    x = data.inputs[idx]
    targets = data.targets[idx]
    if cfg.negatives == "in_batch":
        cands, targets = np.unique(targets, return_inverse=True)
        items = data.features[cands]
    else:
        items = data.features
    return rm.objective_and_grad(params, x, items, rm.ce_head(targets), cfg.temperature)


def _validation_recall(params: ParamSet, data_list: Sequence[_DomainBatches], cfg: TrainConfig) -> float:
    vals = [
        rank_metrics(params, d.val_histories, d.val_targets, d.features, cfg.eval_k, cfg.gamma)[0]
        for d in data_list
    ]
    return float(np.mean(vals))


def _train(
    start: ParamSet, data_list: Sequence[_DomainBatches], cfg: TrainConfig, stream_key: str
) -> TrainResult:
    if cfg.epochs == 0:
        return TrainResult(start.copy(), [], 0)
    rng = np.random.default_rng([cfg.seed, zlib.crc32(stream_key.encode("utf-8"))])
    state = OptimizerState(lr=cfg.lr)
    params = start.copy()
    best, best_score, best_epoch, stale = params, -np.inf, 0, 0
    records: list[tuple[int, str, str, float]] = []
    for epoch in range(1, cfg.epochs + 1):
        batches = []
        for d_i, data in enumerate(data_list):
            order = rng.permutation(len(data.targets))
            batches.extend((d_i, order[s:s + cfg.batch_size]) for s in range(0, len(order), cfg.batch_size))
        if len(data_list) > 1:
            batches = [batches[i] for i in rng.permutation(len(batches))]
        losses = []
        for d_i, idx in batches:
            res = _batch_loss(params, data_list[d_i], idx, cfg)
            if not np.isfinite(res.loss):
                raise NumericalError(f"non-finite training loss at epoch {epoch}")
            params, state = adam_step(params, res.grad, state)
            losses.append(res.loss)
        train_loss = float(np.mean(losses))
        val = _validation_recall(params, data_list, cfg)
        records.append((epoch, "train", "loss", train_loss))
        records.append((epoch, "valid", f"recall@{cfg.eval_k}", val))
        log.debug("%s epoch %d loss %.5f valid R@%d %.4f", stream_key, epoch, train_loss, cfg.eval_k, val)
        if val > best_score:
            best, best_score, best_epoch, stale = params, val, epoch, 0
        else:
            stale += 1
            if stale >= cfg.patience:
                break
    return TrainResult(best.rounded(), records, best_epoch)


def pretrain_base(
    corpus: Sequence[DomainDataset],
    cfg: TrainConfig,
    hidden: int = rm.DEFAULT_HIDDEN,
    output: int = rm.DEFAULT_OUTPUT,
    layers: int = rm.DEFAULT_LAYERS,
) -> TrainResult:
    """Train a fresh encoder on the union of the pre-training domains."""
    if not corpus:
        raise InputError("pre-training corpus is empty")
    dim = corpus[0].catalog.dim
    if any(d.catalog.dim != dim for d in corpus):
        raise InputError("pre-training domains disagree on feature dimension")
    init = rm.init_params(dim, hidden, output, layers, seed=cfg.seed).rounded()
    data = [_prepare(d, cfg.gamma) for d in corpus]
    res = _train(init, data, cfg, "pretrain")
    res.params.role, res.params.domain_id, res.params.seed = "base", "", cfg.seed
    return res


def finetune(base: ParamSet, dataset: DomainDataset, cfg: TrainConfig) -> TrainResult:
    """Fine-tune a copy of `base` on one domain's training prefixes."""
    if dataset.catalog.dim != base.input_dim:
        raise IncompatibleError(
            f"domain {dataset.domain_id} has {dataset.catalog.dim} features, base expects {base.input_dim}"
        )
    res = _train(base, [_prepare(dataset, cfg.gamma)], cfg, f"finetune:{dataset.domain_id}")
    res.params.role, res.params.domain_id, res.params.seed = "finetuned", dataset.domain_id, cfg.seed
    return res


def joint_train(base: ParamSet, datasets: Sequence[DomainDataset], cfg: TrainConfig) -> TrainResult:
    """Fine-tune one model on the pooled training data of every domain.

    This reference point needs all interaction logs at once, so it sits
    outside the data-isolated setting the merging methods work under.
    """
    if not datasets:
        raise InputError("joint training needs at least one domain")
    for d in datasets:
        if d.catalog.dim != base.input_dim:
            raise IncompatibleError(f"domain {d.domain_id} has {d.catalog.dim} features, base expects {base.input_dim}")
    res = _train(base, [_prepare(d, cfg.gamma) for d in datasets], cfg, "joint")
    res.params.role, res.params.domain_id, res.params.seed = "joint", "", cfg.seed
    return res


def write_log(records, path, header: str = "") -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", encoding="utf-8", newline="\n") as fh:
        fh.write("".join(f"# {line}\n" for line in header.splitlines()))
        for epoch, split, metric, value in records:
            fh.write(f"{epoch}\t{split}\t{metric}\t{value:.8g}\n")
