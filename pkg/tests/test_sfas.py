import math

import numpy as np
import pytest

from gridpeft.errors import ContractError
from gridpeft.objectives import Batch
from gridpeft.sfas import (
    AdamW,
    FisherState,
    batch_gradients,
    estimate_fisher,
    freeze_audit,
    kl_quadratic_check,
    masked_step,
    perturb,
    select_topk,
    selection_size,
    sfas_step,
    write_mask_stats,
)
from toymodels import MSE, GaussianMean, Scalar, TwoLayer, oracle_fisher, regression_batch

NAMES = ["w1", "b1", "w2"]


def test_single_sample_scalar_model():
    m = Scalar(1.0)
    batch = Batch(np.array([[1.0]]), np.array([[0.0]]))
    assert np.array_equal(estimate_fisher(m, MSE(), batch, ["theta"]), [1.0])


def test_per_sample_versus_batch_mean():
    m = Scalar(1.0)
    # scores (theta*x - y)*x: sample 1 gives 2, sample 2 gives 0
    batch = Batch(np.array([[1.0], [1.0]]), np.array([[-1.0], [1.0]]))
    assert np.array_equal(estimate_fisher(m, MSE(), batch, ["theta"], "per_sample"), [2.0])
    assert np.array_equal(estimate_fisher(m, MSE(), batch, ["theta"], "batch_mean"), [1.0])


def test_zero_gradients_give_zero_fisher():
    m = Scalar(1.0)
    batch = Batch(np.array([[1.0], [2.0]]), np.array([[1.0], [2.0]]))
    assert np.array_equal(estimate_fisher(m, MSE(), batch, ["theta"]), [0.0])


def test_empty_batch_rejected():
    with pytest.raises(ContractError):
        estimate_fisher(Scalar(), MSE(), Batch(np.zeros((0, 1)), np.zeros((0, 1))), ["theta"])


def test_fisher_matches_hand_written_oracle():
    for seed in range(10):
        m = TwoLayer(seed=seed)
        batch = regression_batch(seed=seed)
        assert m.params.count() <= 100
        got = estimate_fisher(m, MSE(), batch, NAMES)
        assert np.max(np.abs(got - oracle_fisher(m, batch))) < 1e-12


def test_modes_agree_for_one_sample():
    m = TwoLayer(seed=1)
    batch = regression_batch(n=1, seed=1)
    a = estimate_fisher(m, MSE(), batch, NAMES, "per_sample")
    b = estimate_fisher(m, MSE(), batch, NAMES, "batch_mean")
    assert np.allclose(a, b, rtol=1e-14, atol=0)


def test_perturb_examples():
    F = np.random.default_rng(0).random(500)
    assert perturb(F, 7, 7, 0.2, 0).tobytes() == F.tobytes()
    assert perturb(F, 3, 7, 0.0, 0).tobytes() == F.tobytes()
    d = perturb(F, 0, 10, 0.2, 0) - F
    assert np.all(d >= 0) and np.all(d < 0.2)
    assert perturb(F, 2, 10, 0.2, 5).tobytes() == perturb(F, 2, 10, 0.2, 5).tobytes()
    with pytest.raises(ContractError):
        perturb(F, 11, 10, 0.2, 0)


def test_noise_bound_over_many_draws():
    F = np.zeros(1000)
    for ns in (0, 3, 9):
        d = perturb(F, ns, 10, 0.5, 1)
        bound = 0.5 * (1 - ns / 10)
        assert d.max() < bound and d.max() > 0.99 * bound


def test_select_topk_examples():
    assert select_topk([3.0, 1.0, 2.0], 2 / 3).tolist() == [True, False, True]
    assert select_topk([3.0, 1.0, 2.0], 1.0).all()
    assert select_topk([5.0, 5.0, 1.0], 1 / 3).tolist() == [True, False, False]
    assert selection_size(0.001, 50816) == 51
    assert selection_size(0.3, 10) == 3


def _adam_setup(seed=0):
    m = TwoLayer(seed=seed)
    batch = regression_batch(seed=seed)
    _, grads = batch_gradients(m, MSE(), batch, NAMES)
    return m, grads


def test_masked_step_examples():
    m, grads = _adam_setup()
    before = m.params.state()
    n = m.params.count()
    opt = AdamW(m.params)
    assert masked_step(m.params, grads, np.zeros(n, bool), opt, 1e-2, NAMES) == 0
    assert all(m.params[k].value.tobytes() == v.tobytes() for k, v in before.items())

    a, grads = _adam_setup()
    b, _ = _adam_setup()
    AdamW(a.params).step(grads, 1e-2)
    masked_step(b.params, grads, np.ones(n, bool), AdamW(b.params), 1e-2, NAMES)
    assert a.params.flatten(NAMES).tobytes() == b.params.flatten(NAMES).tobytes()

    c, grads = _adam_setup()
    start = c.params.flatten(NAMES)
    mask = np.zeros(n, bool)
    mask[17] = True
    assert masked_step(c.params, grads, mask, AdamW(c.params), 1e-2, NAMES) == 1
    changed = np.flatnonzero(c.params.flatten(NAMES) != start)
    assert changed.tolist() == [17]
    with pytest.raises(ContractError):
        masked_step(c.params, grads, mask[:-1], AdamW(c.params), 1e-2, NAMES)


def test_moments_frozen_where_masked():
    m, grads = _adam_setup()
    opt = AdamW(m.params)
    n = m.params.count()
    opt.step(grads, 1e-2)
    snapshot = {k: {s: v.copy() for s, v in slot.items()} for k, slot in opt.state.items()}
    mask = np.zeros(n, bool)
    mask[::3] = True
    masked_step(m.params, grads, mask, opt, 1e-2, NAMES)
    flat = {s: np.concatenate([opt.state[k][s].ravel() for k in NAMES]) for s in ("m", "v", "step")}
    old = {s: np.concatenate([snapshot[k][s].ravel() for k in NAMES]) for s in ("m", "v", "step")}
    for s in flat:
        assert flat[s][~mask].tobytes() == old[s][~mask].tobytes()
    assert np.all(flat["step"][mask] == 2) and np.all(flat["step"][~mask] == 1)


def _run(model, steps, k, gamma, seed=0, mode="per_sample", batches=None):
    state = FisherState(domain=NAMES, k=k, gamma=gamma, ts=steps, seed=seed, mode=mode)
    opt = AdamW(model.params)
    losses = []
    for i in range(steps):
        losses.append(sfas_step(model, MSE(), batches[i % len(batches)], state, opt, 1e-2))
    return state, losses


BATCHES = [regression_batch(n=4, seed=s) for s in range(5)]


def test_cardinality_freeze_and_determinism():
    m1, m2 = TwoLayer(seed=2), TwoLayer(seed=2)
    start = m1.params.state()
    s1, l1 = _run(m1, 12, 0.05, 0.2, batches=BATCHES)
    s2, l2 = _run(m2, 12, 0.05, 0.2, batches=BATCHES)
    assert l1 == l2 and m1.params.flatten(NAMES).tobytes() == m2.params.flatten(NAMES).tobytes()
    want = math.ceil(0.05 * m1.params.count())
    assert all(row["selected_count"] == want for row in s1.stats)
    assert freeze_audit(m1.params, NAMES, start, s1.ever_selected)
    untouched = ~s1.ever_selected
    assert untouched.any()
    assert np.array_equal(m1.params.flatten(NAMES)[untouched], np.concatenate([start[n].ravel() for n in NAMES])[untouched])


def test_full_selection_without_noise_is_plain_adamw():
    a, b = TwoLayer(seed=3), TwoLayer(seed=3)
    _run(a, 10, 1.0, 0.0, batches=BATCHES)
    from gridpeft.sfas import average_gradients, per_sample_gradients

    opt = AdamW(b.params)
    for i in range(10):
        _, grads = average_gradients(per_sample_gradients(b, MSE(), BATCHES[i % 5], NAMES))
        opt.step(grads, 1e-2)
    assert a.params.flatten(NAMES).tobytes() == b.params.flatten(NAMES).tobytes()


def test_last_step_selection_equals_topk_of_clean_fisher():
    m = TwoLayer(seed=4)
    state, _ = _run(m, 50, 0.05, 0.2, batches=BATCHES)
    assert state.ns == 50
    assert np.array_equal(state.mask, select_topk(state.fisher, 0.05))


def test_step_past_schedule_rejected():
    m = TwoLayer()
    state = FisherState(domain=NAMES, ts=1)
    opt = AdamW(m.params)
    sfas_step(m, MSE(), BATCHES[0], state, opt, 1e-2)
    with pytest.raises(ContractError):
        sfas_step(m, MSE(), BATCHES[0], state, opt, 1e-2)


def test_mask_stats_file(tmp_path):
    m = TwoLayer(seed=5)
    state, _ = _run(m, 3, 0.1, 0.2, batches=BATCHES)
    path = tmp_path / "mask_stats.csv"
    write_mask_stats(path, state.stats)
    lines = path.read_text().splitlines()
    assert lines[0] == "step,selected_count,overlap_with_prev,noise_scale,max_F,median_F"
    assert len(lines) == 4 and lines[1].split(",")[2] == ""


def test_optimizer_state_round_trip():
    m, grads = _adam_setup()
    opt = AdamW(m.params)
    opt.step(grads, 1e-2)
    other = AdamW(m.params)
    other.load_state_entries(opt.state_entries())
    for k in opt.state:
        for s in ("m", "v", "step"):
            assert np.array_equal(opt.state[k][s], other.state[k][s])


def test_kl_quadratic_check_gaussian_mean():
    m = GaussianMean()
    x = np.zeros((8, 1))
    res = kl_quadratic_check(m, x, "theta", 0, [1e-1, 5e-2, 2.5e-2])
    assert abs(res["fisher"] - 1.0) < 1e-8
    assert all(abs(r - 0.5) < 1e-9 for r in res["ratio"])
    assert abs(res["ratio"][-1] / res["ratio"][-2] - 1) < 0.01
    assert abs(res["constant"] - 0.5) < 1e-8
    zero = kl_quadratic_check(m, x, "unused", 0, [1e-2])
    assert zero["ratio"] == [0.0] and zero["constant"] is None


def test_kl_quadratic_check_nonlinear_limit():
    m = TwoLayer(seed=6)
    x = regression_batch(n=10, seed=6).x
    res = kl_quadratic_check(m, x, "w1", 5, [1e-2, 5e-3, 2.5e-3])
    assert abs(res["ratio"][-1] / res["ratio"][-2] - 1) < 0.01
    assert abs(res["constant"] - 0.5) < 1e-2
