"""Featurized sequential recommender: a tanh MLP encoder shared by users and items.

Users are encoded from a recency-weighted pool of their items' feature vectors,
items from their own vectors; scores are cosine similarities and predictions a
temperature softmax over the domain catalog. All gradients are hand-derived.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Callable, Sequence

import numpy as np

from .errors import IncompatibleError, InputError

DEFAULT_GAMMA = 0.8
DEFAULT_HIDDEN = 32
DEFAULT_OUTPUT = 16
DEFAULT_LAYERS = 3


@dataclass
class ParamSet:
    """Affine layers `W @ a + b`, tanh between layers, linear output."""

    weights: list[np.ndarray]
    biases: list[np.ndarray]
    role: str = "base"
    domain_id: str = ""
    seed: int = 0
    extra: dict[str, str] = field(default_factory=dict)

    def __post_init__(self):
        if len(self.weights) != len(self.biases) or not self.weights:
            raise IncompatibleError("a ParamSet needs one bias per weight matrix and at least one layer")
        for l, (w, b) in enumerate(zip(self.weights, self.biases)):
            if w.ndim != 2 or b.shape != (w.shape[0],):
                raise IncompatibleError(f"layer {l}: weight {w.shape} and bias {b.shape} do not match")
            if l and w.shape[1] != self.weights[l - 1].shape[0]:
                raise IncompatibleError(
                    f"layer {l} expects input {w.shape[1]}, previous layer emits {self.weights[l - 1].shape[0]}"
                )

    @property
    def n_layers(self) -> int:
        return len(self.weights)

    @property
    def dims(self) -> tuple[int, ...]:
        return (self.weights[0].shape[1],) + tuple(w.shape[0] for w in self.weights)

    @property
    def input_dim(self) -> int:
        return self.weights[0].shape[1]

    def shapes(self) -> list[tuple[tuple[int, ...], tuple[int, ...]]]:
        return [(w.shape, b.shape) for w, b in zip(self.weights, self.biases)]

    def arrays(self) -> list[np.ndarray]:
        """Weight, bias, weight, bias, ... in layer order."""
        out = []
        for w, b in zip(self.weights, self.biases):
            out.extend((w, b))
        return out

    @property
    def size(self) -> int:
        return sum(a.size for a in self.arrays())

    def flat(self) -> np.ndarray:
        return np.concatenate([a.ravel() for a in self.arrays()])

    def layer_flat(self, l: int) -> np.ndarray:
        return np.concatenate([self.weights[l].ravel(), self.biases[l]])

    def with_flat(self, vec: np.ndarray, **meta) -> "ParamSet":
        arrays, pos = [], 0
        for a in self.arrays():
            arrays.append(np.asarray(vec[pos : pos + a.size], dtype=np.float64).reshape(a.shape).copy())
            pos += a.size
        return self._from_arrays(arrays, **meta)

    def with_arrays(self, arrays: Sequence[np.ndarray], **meta) -> "ParamSet":
        return self._from_arrays(list(arrays), **meta)

    def _from_arrays(self, arrays, **meta) -> "ParamSet":
        new = replace(self, weights=arrays[0::2], biases=arrays[1::2], extra=dict(self.extra))
        for k, v in meta.items():
            setattr(new, k, v)
        return new

    def copy(self, **meta) -> "ParamSet":
        return self.with_arrays([a.copy() for a in self.arrays()], **meta)

    def zeros_like(self) -> "ParamSet":
        return self.with_arrays([np.zeros_like(a) for a in self.arrays()])

    def rounded(self) -> "ParamSet":
        """Same parameters rounded to float32 precision (what a checkpoint stores)."""
        return self.with_arrays([a.astype(np.float32).astype(np.float64) for a in self.arrays()])

    def compatible(self, other: "ParamSet") -> bool:
        return self.shapes() == other.shapes()

    def check_compatible(self, other: "ParamSet", what: str = "") -> None:
        if not self.compatible(other):
            raise IncompatibleError(
                f"incompatible parameter shapes{' for ' + what if what else ''}: "
                f"{self.shapes()} vs {other.shapes()}"
            )

    def is_finite(self) -> bool:
        return all(np.isfinite(a).all() for a in self.arrays())


def init_params(
    input_dim: int,
    hidden: int = DEFAULT_HIDDEN,
    output: int = DEFAULT_OUTPUT,
    layers: int = DEFAULT_LAYERS,
    seed: int = 0,
) -> ParamSet:
    """Scaled-normal weights (std 1/sqrt(fan_in)), zero biases."""
    if layers < 1:
        raise InputError("need at least one layer")
    dims = [input_dim] + [hidden] * (layers - 1) + [output]
    rng = np.random.default_rng(seed)
    weights = [rng.normal(size=(o, i)) / np.sqrt(i) for i, o in zip(dims[:-1], dims[1:])]
    biases = [np.zeros(o) for o in dims[1:]]
    return ParamSet(weights, biases, role="base", seed=seed)


# ---------------------------------------------------------------- encoder


def _forward(params: ParamSet, x: np.ndarray) -> tuple[np.ndarray, list[np.ndarray]]:
    acts = [x]
    a = x
    last = params.n_layers - 1
    for l, (w, b) in enumerate(zip(params.weights, params.biases)):
        z = a @ w.T + b
        a = z if l == last else np.tanh(z)
        acts.append(a)
    return a, acts


def _backward(params: ParamSet, acts: list[np.ndarray], d_out: np.ndarray) -> list[np.ndarray]:
    grads: list[np.ndarray] = [None] * (2 * params.n_layers)  # type: ignore[list-item]
    dz = d_out
    for l in range(params.n_layers - 1, -1, -1):
        a_in = acts[l]
        grads[2 * l] = dz.T @ a_in
        grads[2 * l + 1] = dz.sum(axis=0)
        if l:
            dz = (dz @ params.weights[l]) * (1.0 - acts[l] ** 2)
    return grads


def encode(params: ParamSet, x: np.ndarray) -> np.ndarray:
    """Representation of one feature vector (or a row-stack of them)."""
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-1] != params.input_dim:
        raise IncompatibleError(f"input has {x.shape[-1]} features, encoder expects {params.input_dim}")
    return _forward(params, x)[0]


def pool_weights(length: int, gamma: float = DEFAULT_GAMMA) -> np.ndarray:
    """Normalized recency weights; the most recent item gets exponent 0."""
    w = gamma ** np.arange(length - 1, -1, -1, dtype=np.float64)
    return w / w.sum()


def pool(sequence: Sequence[int], features: np.ndarray, gamma: float = DEFAULT_GAMMA) -> np.ndarray:
    if len(sequence) == 0:
        raise InputError("cannot pool an empty sequence")
    if len(sequence) == 1:
        return features[sequence[0]].astype(np.float64, copy=True)
    return pool_weights(len(sequence), gamma) @ features[list(sequence)]


def pool_many(sequences: Sequence[Sequence[int]], features: np.ndarray, gamma: float = DEFAULT_GAMMA) -> np.ndarray:
    return np.stack([pool(s, features, gamma) for s in sequences])


def user_representation(
    params: ParamSet, sequence: Sequence[int], features: np.ndarray, gamma: float = DEFAULT_GAMMA
) -> np.ndarray:
    return encode(params, pool(sequence, features, gamma))


# ---------------------------------------------------------------- scoring


def _normalize(r: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    norms = np.linalg.norm(r, axis=1)
    safe = np.where(norms > 0, norms, 1.0)
    return r / safe[:, None], norms


def cosine_matrix(u: np.ndarray, v: np.ndarray) -> tuple[np.ndarray, int]:
    """Pairwise cosine; zero-norm rows yield 0. Also returns how many pairs hit that guard."""
    un, unorm = _normalize(u)
    vn, vnorm = _normalize(v)
    return np.clip(un @ vn.T, -1.0, 1.0), _zero_pairs(unorm, vnorm)


def _zero_pairs(unorm: np.ndarray, vnorm: np.ndarray) -> int:
    zu, zv = int((unorm == 0).sum()), int((vnorm == 0).sum())
    return zu * len(vnorm) + zv * len(unorm) - zu * zv


def softmax(s: np.ndarray) -> np.ndarray:
    e = np.exp(s - s.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def log_softmax(s: np.ndarray) -> np.ndarray:
    m = s.max(axis=-1, keepdims=True)
    return s - m - np.log(np.exp(s - m).sum(axis=-1, keepdims=True))


@dataclass
class PredictionDistribution:
    scores: np.ndarray
    probs: np.ndarray
    temperature: float
    zero_norm_pairs: int = 0


def score(
    params: ParamSet,
    sequence: Sequence[int],
    features: np.ndarray,
    temperature: float = 1.0,
    gamma: float = DEFAULT_GAMMA,
) -> PredictionDistribution:
    """Cosine score of one user against every catalog item."""
    dist = score_many(params, [sequence], features, temperature, gamma)
    return PredictionDistribution(dist.scores[0], dist.probs[0], temperature, dist.zero_norm_pairs)


def score_many(
    params: ParamSet,
    sequences: Sequence[Sequence[int]],
    features: np.ndarray,
    temperature: float = 1.0,
    gamma: float = DEFAULT_GAMMA,
    item_reps: np.ndarray | None = None,
) -> PredictionDistribution:
    if len(features) == 0:
        raise InputError("empty candidate catalog")
    users = encode(params, pool_many(sequences, features, gamma))
    items = encode(params, features) if item_reps is None else item_reps
    c, zero = cosine_matrix(users, items)
    return PredictionDistribution(c, softmax(c / temperature), temperature, zero)


# ---------------------------------------------------------------- losses


# A head maps the logit matrix S = cos / T (batch x catalog) to a scalar loss
# and dLoss/dS.
Head = Callable[[np.ndarray], tuple[float, np.ndarray]]


def ce_head(targets: Sequence[int], sample_weights: np.ndarray | None = None) -> Head:
    targets = np.asarray(targets, dtype=np.int64)

    def head(s):
        w = np.full(len(s), 1.0 / len(s)) if sample_weights is None else sample_weights
        logp = log_softmax(s)
        rows = np.arange(len(s))
        loss = float(-(w * logp[rows, targets]).sum())
        ds = np.exp(logp)
        ds[rows, targets] -= 1.0
        return loss, ds * w[:, None]

    return head


def kd_head(teacher_probs: np.ndarray, sample_weights: np.ndarray | None = None) -> Head:
    """KL(student || teacher), student first."""
    log_t = np.log(teacher_probs)

    def head(s):
        w = np.full(len(s), 1.0 / len(s)) if sample_weights is None else sample_weights
        logp = log_softmax(s)
        p = np.exp(logp)
        f = logp - log_t
        kl = (p * f).sum(axis=1)
        return float((w * kl).sum()), p * (f - kl[:, None]) * w[:, None]

    return head


def entropy_head(sample_weights: np.ndarray | None = None) -> Head:
    def head(s):
        w = np.full(len(s), 1.0 / len(s)) if sample_weights is None else sample_weights
        logp = log_softmax(s)
        p = np.exp(logp)
        h = -(p * logp).sum(axis=1)
        return float((w * h).sum()), -p * (logp + h[:, None]) * w[:, None]

    return head


@dataclass
class LossResult:
    loss: float
    grad: ParamSet
    zero_norm_pairs: int = 0


def objective_and_grad(
    params: ParamSet,
    user_inputs: np.ndarray,
    item_features: np.ndarray,
    head: Head,
    temperature: float = 1.0,
) -> LossResult:
    """Backpropagate `head` through softmax, cosine, and both encoder passes."""
    if item_features.shape[-1] != params.input_dim or user_inputs.shape[-1] != params.input_dim:
        raise IncompatibleError(f"feature dimension does not match encoder input {params.input_dim}")
    ru, acts_u = _forward(params, user_inputs)
    ri, acts_i = _forward(params, item_features)
    un, unorm = _normalize(ru)
    vn, vnorm = _normalize(ri)
    c = un @ vn.T
    loss, ds = head(c / temperature)
    dc = ds / temperature
    dun = dc @ vn
    dvn = dc.T @ un
    dru = _normalize_backward(un, unorm, dun)
    dri = _normalize_backward(vn, vnorm, dvn)
    gu = _backward(params, acts_u, dru)
    gi = _backward(params, acts_i, dri)
    grad = params.with_arrays([a + b for a, b in zip(gu, gi)], role="gradient")
    return LossResult(loss, grad, _zero_pairs(unorm, vnorm))


def _normalize_backward(rn: np.ndarray, norms: np.ndarray, d_rn: np.ndarray) -> np.ndarray:
    safe = np.where(norms > 0, norms, 1.0)
    d = (d_rn - rn * (d_rn * rn).sum(axis=1, keepdims=True)) / safe[:, None]
    d[norms == 0] = 0.0
    return d


def ce_loss_and_grad(
    params: ParamSet,
    sequence: Sequence[int],
    positive: int,
    features: np.ndarray,
    temperature: float = 1.0,
    gamma: float = DEFAULT_GAMMA,
) -> LossResult:
    """Negative log-probability of `positive` under the softmax over cosine scores."""
    if not 0 <= positive < len(features):
        raise InputError(f"positive item {positive} is not in the catalog of {len(features)} items")
    x = pool(sequence, features, gamma)[None]
    return objective_and_grad(params, x, features, ce_head([positive]), temperature)


def kd_loss_and_grad(
    params: ParamSet,
    teacher_probs: np.ndarray,
    sequence: Sequence[int],
    features: np.ndarray,
    temperature: float = 1.0,
    gamma: float = DEFAULT_GAMMA,
) -> LossResult:
    teacher_probs = np.atleast_2d(teacher_probs)
    if teacher_probs.shape[1] != len(features):
        raise IncompatibleError(
            f"teacher distribution covers {teacher_probs.shape[1]} items, catalog has {len(features)}"
        )
    x = pool(sequence, features, gamma)[None]
    return objective_and_grad(params, x, features, kd_head(teacher_probs), temperature)


def entropy_loss_and_grad(
    params: ParamSet,
    sequence: Sequence[int],
    features: np.ndarray,
    temperature: float = 1.0,
    gamma: float = DEFAULT_GAMMA,
) -> LossResult:
    x = pool(sequence, features, gamma)[None]
    return objective_and_grad(params, x, features, entropy_head(), temperature)


def kl_divergence(p: np.ndarray, q: np.ndarray) -> np.ndarray:
    return (p * (np.log(p) - np.log(q))).sum(axis=-1)


def entropy(p: np.ndarray) -> np.ndarray:
    return -(p * np.log(p)).sum(axis=-1)
