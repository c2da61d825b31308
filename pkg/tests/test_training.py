import numpy as np
import pytest

from mergelab import corpus as C
from mergelab import evaluation as E
from mergelab import training as T
from mergelab.errors import IncompatibleError, InputError, NumericalError
from mergelab.recmodel import init_params


@pytest.fixture(scope="module")
def small_domains():
    specs = [C.SyntheticDomainSpec("p0", 120, 40, 9), C.SyntheticDomainSpec("d0", 100, 40, 9)]
    raw = C.synthesize_domains(specs, 3, C.FeatureSpec(dim=16, active=4))
    return [C.build_dataset(r, s.domain_id, dim=16, active=4) for r, s in zip(raw, specs)]


# ---------------------------------------------------------------- Adam


def test_adam_zero_gradient_leaves_params_and_decays_moments():
    state = T.OptimizerState()
    x = np.array([1.0, -2.0])
    x1, state = T.adam_step(x, np.array([0.5, 0.5]), state)
    m_before = state.m[0].copy()
    x2, state = T.adam_step(x1, np.zeros(2), state)
    assert np.all(np.abs(state.m[0]) < np.abs(m_before))
    # with zero gradient the update is lr * m_hat / sqrt(v_hat), not exactly zero, unless moments are zero
    fresh = T.OptimizerState()
    x3, fresh = T.adam_step(x, np.zeros(2), fresh)
    assert np.array_equal(x3, x) and fresh.step == 1


def test_adam_constant_gradient_moves_against_sign_at_lr():
    state = T.OptimizerState(lr=0.01)
    x = np.array([0.0])
    for _ in range(200):
        prev = x.copy()
        x, state = T.adam_step(x, np.array([-3.0]), state)
    assert x[0] > 0
    assert x[0] - prev[0] == pytest.approx(0.01, rel=1e-6)


def test_adam_first_step_value():
    # hand computation: m_hat = g, v_hat = g^2, step = -lr * 1 / (1 + 1e-8)
    x, state = T.adam_step(np.array([0.0]), np.array([1.0]), T.OptimizerState(lr=0.001))
    assert x[0] == pytest.approx(-0.001 / (1 + 1e-8), rel=1e-12)
    assert state.step == 1


def test_adam_rejects_shape_mismatch_and_nan():
    with pytest.raises(IncompatibleError):
        T.adam_step(np.zeros(2), np.zeros(3), T.OptimizerState())
    with pytest.raises(NumericalError, match="step 1"):
        T.adam_step(np.zeros(2), np.array([np.nan, 0.0]), T.OptimizerState())


def test_adam_on_paramset():
    p = init_params(4, 3, 2, 2, seed=0)
    q, state = T.adam_step(p, p.zeros_like(), T.OptimizerState())
    assert np.array_equal(q.flat(), p.flat())
    assert [m.shape for m in state.m] == [a.shape for a in p.arrays()]


# ---------------------------------------------------------------- config


@pytest.mark.parametrize("kwargs", [{"batch_size": 0}, {"lr": 0.0}, {"negatives": "sampled"}, {"epochs": -1}])
def test_train_config_validation(kwargs):
    with pytest.raises(InputError):
        T.TrainConfig(**kwargs)


# ---------------------------------------------------------------- pretrain / finetune


def test_pretrain_zero_epochs_is_the_init(small_domains):
    res = T.pretrain_base(small_domains[:1], T.TrainConfig(epochs=0, seed=4), hidden=8, output=4)
    init = init_params(16, 8, 4, 3, seed=4).rounded()
    assert np.array_equal(res.params.flat(), init.flat())
    assert res.params.role == "base"


def test_pretrain_rejects_empty_corpus():
    with pytest.raises(InputError):
        T.pretrain_base([], T.TrainConfig())


def test_pretrain_is_deterministic_and_beats_popularity(small_domains):
    cfg = T.TrainConfig(epochs=20, seed=1)
    a = T.pretrain_base(small_domains[:1], cfg, hidden=16, output=8)
    b = T.pretrain_base(small_domains[:1], cfg, hidden=16, output=8)
    assert np.array_equal(a.params.flat(), b.params.flat())
    d = small_domains[0]
    splits = [d.splits[u] for u in d.users]
    model_r, _, _ = E.rank_metrics(a.params, [s.train for s in splits], [s.valid for s in splits], d.catalog.features)
    assert model_r > E.popularity_recall(d, 10)


def test_finetune_zero_epochs_equals_base(small_domains):
    base = T.pretrain_base(small_domains[:1], T.TrainConfig(epochs=1), hidden=8, output=4).params
    ft = T.finetune(base, small_domains[1], T.TrainConfig(epochs=0))
    assert np.array_equal(ft.params.flat(), base.flat())
    assert ft.params.role == "finetuned" and ft.params.domain_id == "d0"


def test_finetune_improves_validation_and_loss(small_domains):
    base = T.pretrain_base(small_domains[:1], T.TrainConfig(epochs=3), hidden=16, output=8).params
    d = small_domains[1]
    res = T.finetune(base, d, T.TrainConfig(epochs=15, seed=0))
    splits = [d.splits[u] for u in d.users]
    hist, val = [s.train for s in splits], [s.valid for s in splits]
    r_ft = E.rank_metrics(res.params, hist, val, d.catalog.features)[0]
    r_base = E.rank_metrics(base, hist, val, d.catalog.features)[0]
    assert r_ft >= r_base
    losses = res.epoch_losses()
    assert losses[-1] < losses[0]


def test_finetune_seeds_give_distinct_same_shaped_models(small_domains):
    base = T.pretrain_base(small_domains[:1], T.TrainConfig(epochs=1), hidden=8, output=4).params
    outs = [T.finetune(base, small_domains[1], T.TrainConfig(epochs=2, seed=s)).params for s in range(5)]
    assert len({o.flat().tobytes() for o in outs}) == 5
    assert all(o.shapes() == base.shapes() for o in outs)
    assert [o.seed for o in outs] == list(range(5))


def test_finetune_rejects_dimension_mismatch(small_domains):
    with pytest.raises(IncompatibleError):
        T.finetune(init_params(8, 4, 2, 2), small_domains[1], T.TrainConfig(epochs=1))


def test_in_batch_negatives_run(small_domains):
    base = T.pretrain_base(small_domains[:1], T.TrainConfig(epochs=1), hidden=8, output=4).params
    res = T.finetune(base, small_domains[1], T.TrainConfig(epochs=2, negatives="in_batch"))
    assert res.params.is_finite()


def test_training_log_format(tmp_path, small_domains):
    base = T.pretrain_base(small_domains[:1], T.TrainConfig(epochs=2), hidden=8, output=4)
    T.write_log(base.records, tmp_path / "log.tsv", header="h")
    lines = [l for l in (tmp_path / "log.tsv").read_text().splitlines() if not l.startswith("#")]
    epoch, split, metric, value = lines[0].split("\t")
    assert (epoch, split, metric) == ("1", "train", "loss") and float(value) > 0
