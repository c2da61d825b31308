import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mergelab import corpus as C
from mergelab import merging as M
from mergelab import recmodel as rm
from mergelab.errors import IncompatibleError, InputError

from conftest import finite_difference_check, small_features, small_params


def _setup(k=3, seed=0, scale=0.3):
    base = small_params(seed)
    rng = np.random.default_rng(seed + 100)
    teachers = []
    for d in range(k):
        t = base.with_flat(base.flat() + scale * rng.normal(size=base.size), role="finetuned")
        t.domain_id = f"d{d}"
        teachers.append(t)
    catalogs = [C.Catalog(f"d{d}", tuple(f"d{d}_i{j}" for j in range(12)), small_features(seed + d)) for d in range(k)]
    pseudo = [C.build_pseudo_users(c) for c in catalogs]
    taus = [M.task_vector(t, base) for t in teachers]
    return base, teachers, taus, catalogs, pseudo


def _one_param(value):
    return rm.ParamSet([np.array([[float(value)]])], [np.array([0.0])])


# ---------------------------------------------------------------- static merges


def test_zero_weights_give_base_bitwise():
    base, _, taus, _, _ = _setup()
    for mode in M.MODES:
        merged = M.merge(base, taus, M.MergeWeights.constant(mode, 3, base.n_layers, 0.0))
        assert merged.flat().tobytes() == base.flat().tobytes()


def test_single_unit_weight_recovers_finetuned():
    base, teachers, taus, _, _ = _setup(k=1)
    merged = M.merge_domainwise(base, taus, [1.0])
    assert np.allclose(merged.flat(), teachers[0].flat(), rtol=0, atol=np.spacing(np.abs(teachers[0].flat()).max()))


def test_constant_layerwise_equals_domainwise():
    base, _, taus, _, _ = _setup()
    w = np.array([0.3, -0.1, 0.7])
    dw = M.merge_domainwise(base, taus, w)
    lw = M.merge_layerwise(base, taus, np.repeat(w[:, None], base.n_layers, axis=1))
    assert np.allclose(lw.flat(), dw.flat(), rtol=1e-6, atol=1e-12)


def test_scalar_toy_merge():
    merged = M.merge_domainwise(_one_param(1.0), [M.TaskVector("a", _one_param(2.0))], [0.2])
    assert merged.weights[0][0, 0] == pytest.approx(1.4)


def test_layerwise_toy_merge():
    base = rm.ParamSet([np.ones((1, 1)), np.ones((1, 1))], [np.zeros(1), np.zeros(1)])
    tau = M.TaskVector("a", base.with_arrays([np.full((1, 1), 2.0), np.zeros(1), np.full((1, 1), 4.0), np.ones(1)]))
    merged = M.merge_layerwise(base, [tau], np.array([[0.5, 0.25]]))
    assert merged.weights[0][0, 0] == 2.0 and merged.weights[1][0, 0] == 2.0
    assert merged.biases[0][0] == 0.0 and merged.biases[1][0] == 0.25


def test_task_arithmetic_toy():
    base = rm.ParamSet([np.zeros((1, 2))], [np.zeros(1)])
    tau = M.TaskVector("a", rm.ParamSet([np.array([[5.0, -5.0]])], [np.zeros(1)]))
    assert np.allclose(M.task_arithmetic(base, [tau]).weights[0], [[2.0, -2.0]])


def test_merge_records_domains_and_validates():
    base, _, taus, _, _ = _setup()
    assert M.merge_domainwise(base, taus, [0.1] * 3).extra["domains"] == "d0,d1,d2"
    with pytest.raises(IncompatibleError):
        M.merge_domainwise(base, taus, [0.1, 0.1])
    with pytest.raises(InputError):
        M.MergeWeights("sideways", np.zeros(3))
    with pytest.raises(InputError):
        M.merge_domainwise(base, [], [])


def test_weight_averaging_identity():
    base, teachers, _, _, _ = _setup()
    avg = M.weight_averaging(teachers, base=base)
    expected = np.mean([t.flat() for t in teachers], axis=0)
    assert np.allclose(avg.flat(), expected, rtol=0, atol=1e-12)
    assert M.weight_averaging(teachers[:1]).flat().tobytes() == teachers[0].flat().tobytes()


def test_weight_averaging_rejects_shape_mismatch():
    _, teachers, _, _, _ = _setup()
    with pytest.raises(IncompatibleError):
        M.weight_averaging(teachers + [small_params(1, dims=(8, 6, 4))])


# ---------------------------------------------------------------- TIES


def test_ties_hand_example():
    vecs = np.array([[3.0, -1.0, 0.5, 0.0], [-2.0, -4.0, 0.1, 1.0]])
    # trim to 2 per row: [3,-1,0,0], [-2,-4,0,0]; signs of sums: +,-,+,+
    assert np.array_equal(M.ties_merged_vector(vecs, 0.5), [3.0, -2.5, 0.0, 0.0])


def test_ties_two_thirds_density_example():
    # trim keeps two of three entries: [1,-2,0], [1,3,0]; elected signs +,+,+; only tau2 agrees on coordinate 1
    merged = M.ties_merged_vector(np.array([[1.0, -2.0, 0.1], [1.0, 3.0, 0.2]]), 2 / 3)
    assert merged.tolist() == [1.0, 3.0, 0.0]


def test_ties_full_density_single_vector_is_identity():
    v = np.array([0.3, -2.0, 1.5])
    assert np.array_equal(M.ties_merged_vector(v[None, :], 1.0), v)


def test_ties_rejects_bad_density():
    with pytest.raises(InputError):
        M.ties_merged_vector(np.ones((2, 3)), 0.0)


@settings(max_examples=100, deadline=None)
@given(st.integers(1, 5), st.integers(1, 30), st.floats(0.05, 1.0), st.integers(0, 2**31))
def test_ties_properties(k, p, density, seed):
    vecs = np.random.default_rng(seed).normal(size=(k, p))
    out = M.ties_merged_vector(vecs, density)
    trimmed = np.stack([M.ties_trim(v, density) for v in vecs])
    keep = int(np.ceil(density * p - 1e-9))
    assert all(np.count_nonzero(t) <= keep for t in trimmed)
    signs = M.ties_elect(trimmed)
    # nonzero outputs carry the elected sign and lie within the agreeing entries' range
    nz = out != 0
    assert np.all(np.sign(out[nz]) == signs[nz])
    assert np.all(np.abs(out) <= np.abs(trimmed).max(axis=0) + 1e-12)


def test_ties_merge_on_params():
    base, _, taus, _, _ = _setup()
    merged = M.ties_merge(base, taus, density=0.2, weight=1.0)
    moved = np.count_nonzero(merged.flat() - base.flat())
    assert 0 < moved <= base.size
    layered = M.ties_merge(base, taus, density=0.2, per_layer=True)
    assert layered.shapes() == base.shapes()


# ---------------------------------------------------------------- weight gradients


@pytest.mark.parametrize("seed", [0, 1, 2])
@pytest.mark.parametrize("mode", M.MODES)
def test_weight_gradient_matches_finite_differences(seed, mode):
    base, _, taus, catalogs, pseudo = _setup(seed=seed)
    feats = catalogs[0].features
    x = rm.pool_many(pseudo[0].sequences[:5], feats)
    head = rm.ce_head(np.arange(5) + 3)
    shape = (3,) if mode == M.DOMAINWISE else (3, base.n_layers)
    w0 = np.random.default_rng(seed).uniform(0, 0.5, size=shape)

    def loss(v):
        return rm.objective_and_grad(M.merge(base, taus, M.MergeWeights(mode, v.reshape(shape))), x, feats, head).loss

    grad = rm.objective_and_grad(M.merge(base, taus, M.MergeWeights(mode, w0)), x, feats, head).grad
    analytic = M.grad_wrt_weights(grad, taus, mode).ravel()
    bad = finite_difference_check(loss, analytic, w0.ravel(), w0.size, np.random.default_rng(seed))
    assert not bad, bad


# ---------------------------------------------------------------- adaptive merges


def test_adamerging_zero_steps_is_initial_merge():
    base, _, taus, catalogs, pseudo = _setup()
    res = M.adamerging(base, taus, pseudo, catalogs, cfg=M.MergeRecConfig(steps=0))
    assert len(res.weights) == 1
    assert res.params.flat().tobytes() == M.merge_domainwise(base, taus, [0.2] * 3).flat().tobytes()


def test_adamerging_trajectory_length_and_entropy_logged():
    base, _, taus, catalogs, pseudo = _setup()
    res = M.adamerging(base, taus, pseudo, catalogs, M.LAYERWISE, M.MergeRecConfig(steps=7, batch=6))
    assert len(res.weights) == 8 and len(res.losses) == 7
    assert res.weights[-1].shape == (3, base.n_layers)
    assert set(res.losses[0]) == {"entropy", "total"}


def test_mergerec_only_weights_move():
    base, teachers, taus, catalogs, pseudo = _setup()
    before = [t.flat().copy() for t in teachers] + [base.flat().copy()]
    res = M.mergerec(base, taus, teachers, pseudo, catalogs, cfg=M.MergeRecConfig(steps=10, lr=0.01))
    after = [t.flat() for t in teachers] + [base.flat()]
    assert all(np.array_equal(a, b) for a, b in zip(before, after))
    assert np.array_equal(res.params.flat(), M.merge(base, taus, res.final_weights).flat())


def test_mergerec_is_reproducible():
    base, teachers, taus, catalogs, pseudo = _setup()
    cfg = M.MergeRecConfig(steps=6, seed=3)
    a = M.mergerec(base, taus, teachers, pseudo, catalogs, cfg=cfg)
    b = M.mergerec(base, taus, teachers, pseudo, catalogs, cfg=cfg)
    assert a.trajectory_records() == b.trajectory_records()


def test_kd_weight_controls_teacher_agreement():
    base, teachers, taus, catalogs, pseudo = _setup()
    kd = {}
    for lam in (0.0, 1000.0):
        res = M.mergerec(base, taus, teachers, pseudo, catalogs, cfg=M.MergeRecConfig(lam=lam, steps=40, lr=0.01))
        kd[lam] = np.mean([p["kd"] for p in res.losses[-8:]])
    assert kd[1000.0] < kd[0.0]


def test_kd_zero_when_merged_equals_teacher():
    base, teachers, taus, catalogs, pseudo = _setup(k=1)
    cache = M.teacher_pass(teachers, pseudo, catalogs)
    merged = M.merge_domainwise(base, taus, [1.0])
    x = rm.pool_many(pseudo[0].sequences, catalogs[0].features)
    res = rm.objective_and_grad(merged, x, catalogs[0].features, rm.kd_head(cache.probs[0]))
    assert abs(res.loss) < 1e-9


def test_teacher_labels_exclude_input_item():
    _, teachers, _, catalogs, pseudo = _setup()
    cache = M.teacher_pass(teachers, pseudo, catalogs)
    for d in range(3):
        assert not np.any(cache.labels[d] == pseudo[d].items)
    raw = M.teacher_pass(teachers, pseudo, catalogs, exclude_input=False)
    # a single-item user's own item has cosine 1 with itself and wins
    assert np.array_equal(raw.labels[0], pseudo[0].items)


def test_adaptive_merges_reject_interaction_data():
    base, teachers, taus, catalogs, pseudo = _setup(k=1)
    rows = C.synthesize_domain(C.SyntheticDomainSpec("d0", 30, 12, 8), 0)
    dataset = C.build_dataset(rows, "d0", dim=8, active=3)
    with pytest.raises(TypeError):
        M.adamerging(base, taus, pseudo, [dataset], cfg=M.MergeRecConfig(steps=1))
    with pytest.raises(TypeError):
        M.mergerec(base, taus, teachers, pseudo, [dataset], cfg=M.MergeRecConfig(steps=1))


def test_round_robin_batches_balance_domains():
    pseudo = [C.build_pseudo_users([f"i{j}" for j in range(n)]) for n in (3, 50, 7)]
    batch = next(M.pseudo_user_batches(pseudo, 12, 0))
    assert [sum(d == k for d, _ in batch) for k in range(3)] == [4, 4, 4]
