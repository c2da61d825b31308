import textwrap
from pathlib import Path

import numpy as np
import pytest

from mergelab import recmodel as rm

REPO = Path(__file__).resolve().parents[1]
BENCHMARK = REPO / "configs" / "benchmark.toml"

TINY_CONFIG = """
seeds = [0, 1]
out = "out"

[features]
dim = 16
active = 4

[pretrain_corpus]
seed = 3
[[pretrain_corpus.domains]]
id = "p0"
users = 60
items = 30
mean_length = 8

[corpus]
seed = 5
[[corpus.domains]]
id = "a"
users = 60
items = 30
mean_length = 8
[[corpus.domains]]
id = "b"
users = 50
items = 25
mean_length = 8
[[corpus.domains]]
id = "c"
users = 40
items = 20
mean_length = 8

[model]
hidden = 8
output = 4

[pretrain]
epochs = 2

[finetune]
epochs = 3

[merge]
steps = 12

[experiments]
lambda_grid = [0, 1000]
scarcity_fractions = [0.5, 1.0]
scarcity_targets = ["c"]
unseen_targets = ["c"]
probe_per_domain = 4
probe_every = 4
"""


@pytest.fixture
def tiny_config(tmp_path):
    """Write a fast 3-domain config into tmp_path; returns its path. Extra TOML can be appended."""

    def make(extra: str = "", body: str = TINY_CONFIG) -> Path:
        path = tmp_path / "tiny.toml"
        path.write_text(textwrap.dedent(body) + "\n" + textwrap.dedent(extra), encoding="utf-8")
        return path

    return make


def small_params(seed: int, dims=(8, 8, 4), layers: int = 3) -> rm.ParamSet:
    """Randomly initialized encoder with nonzero biases, so every coordinate carries gradient."""
    p = rm.init_params(dims[0], dims[1], dims[2], layers, seed=seed)
    rng = np.random.default_rng(seed + 1000)
    return p.with_arrays([a + 0.1 * rng.normal(size=a.shape) if a.ndim == 1 else a for a in p.arrays()])


def small_features(seed: int, n_items: int = 12, dim: int = 8) -> np.ndarray:
    return np.random.default_rng(seed + 2000).normal(size=(n_items, dim))


def finite_difference_check(loss_fn, analytic: np.ndarray, x0: np.ndarray, n_coords: int, rng, h: float = 1e-4):
    """Compare analytic gradient entries with central differences of `loss_fn(flat vector)`.

    Returns a list of (index, analytic, numeric) triples that violate
    |a - n| <= 1e-3 * max(|a|, |n|) + 1e-8.
    """
    idx = rng.choice(x0.size, size=min(n_coords, x0.size), replace=False)
    bad = []
    for i in idx:
        up, down = x0.copy(), x0.copy()
        up[i] += h
        down[i] -= h
        numeric = (loss_fn(up) - loss_fn(down)) / (2 * h)
        a = analytic[i]
        if abs(a - numeric) > 1e-3 * max(abs(a), abs(numeric)) + 1e-8:
            bad.append((int(i), float(a), float(numeric)))
    return bad
