"""AdamW against a float64 recurrence, schedule shapes, and state validation."""

import numpy as np
import pytest

from dtslab import AdamW, OptimError, OptimState, Tensor, adamw_step, lr_at

import oracles


def _params(shapes, seed=0):
    r = np.random.default_rng(seed)
    return [Tensor(r.normal(size=s).astype(np.float32), requires_grad=True)
            for s in shapes]


def test_adamw_matches_reference_over_ten_steps():
    params = _params([(3, 2), (4,)], seed=1)
    state = OptimState.for_params(params)
    r = np.random.default_rng(2)
    ref = [(p.data.astype(np.float64).copy(), np.zeros(p.data.shape),
            np.zeros(p.data.shape)) for p in params]
    for step in range(1, 11):
        grads = [r.normal(size=p.data.shape).astype(np.float32) for p in params]
        adamw_step(params, grads, state, lr=0.01)
        for i, g in enumerate(grads):
            p, m, v = ref[i]
            ref[i] = oracles.ref_adamw_step(p, g, m, v, step, 0.01)
    for p, (rp, _, _) in zip(params, ref):
        np.testing.assert_allclose(p.data, rp, rtol=2e-4, atol=2e-6)


def test_weight_decay_is_decoupled():
    # zero gradient: Adam's moment path contributes nothing, decay still shrinks
    p = _params([(4,)], seed=3)
    state = OptimState.for_params(p)
    before = p[0].data.copy()
    adamw_step(p, [np.zeros(4, dtype=np.float32)], state, lr=0.5)
    np.testing.assert_allclose(p[0].data, before * (1 - 0.5 * 0.01), rtol=1e-6)


def test_zero_lr_freezes_parameters():
    p = _params([(4,)], seed=4)
    state = OptimState.for_params(p)
    before = p[0].data.copy()
    adamw_step(p, [np.ones(4, dtype=np.float32)], state, lr=0.0)
    np.testing.assert_array_equal(p[0].data, before)
    assert state.step == 1  # moments still advance


def test_adamw_step_validation():
    p = _params([(2, 2)], seed=5)
    state = OptimState.for_params(p)
    with pytest.raises(OptimError):
        adamw_step(p, [], state, lr=0.1)
    with pytest.raises(OptimError):
        adamw_step(p, [np.zeros((3, 3), dtype=np.float32)], state, lr=0.1)
    bad = np.full((2, 2), np.nan, dtype=np.float32)
    with pytest.raises(OptimError) as exc:
        adamw_step(p, [bad], state, names=["enc1.w"], lr=0.1)
    assert "enc1.w" in str(exc.value)


def test_missing_gradient_rejected():
    p = _params([(2,)], seed=6)
    state = OptimState.for_params(p)
    with pytest.raises(OptimError):
        adamw_step(p, [None], state, lr=0.1)


# ---------------------------------------------------------------------------
# learning-rate schedule


@pytest.mark.parametrize("decay", ["constant", "poly"])
def test_lr_matches_reference(decay):
    for it in (0, 1, 49, 50, 51, 500, 999, 1000):
        got = lr_at(it, 0.01, warmup_iters=50, total_iters=1000, decay=decay)
        want = oracles.ref_lr(it, 0.01, 50, 1000, decay)
        assert got == pytest.approx(want, rel=1e-9), (decay, it)


def test_lr_warmup_is_linear_and_reaches_base():
    vals = [lr_at(i, 1.0, 10, 100) for i in range(10)]
    np.testing.assert_allclose(vals, [i / 10 for i in range(10)], rtol=1e-9)
    assert lr_at(10, 1.0, 10, 100) == 1.0


def test_lr_poly_hits_zero_at_end():
    assert lr_at(1000, 1.0, 0, 1000, decay="poly") == 0.0
    mid = lr_at(500, 1.0, 0, 1000, decay="poly", power=0.9)
    assert 0.0 < mid < 1.0


def test_lr_no_warmup():
    assert lr_at(0, 0.25, 0, 100) == 0.25


def test_lr_rejects_unknown_decay():
    with pytest.raises(OptimError):
        lr_at(0, 1.0, 0, 100, decay="cosine")


# ---------------------------------------------------------------------------
# the grouped wrapper


def _named_params():
    r = np.random.default_rng(7)
    return {
        "enc.w": Tensor(r.normal(size=(3, 3)).astype(np.float32), True),
        "head.w": Tensor(r.normal(size=(2,)).astype(np.float32), True),
    }


def test_groups_apply_their_own_base_lr():
    params = _named_params()
    opt = AdamW(params, {"encoder": (["enc.w"], 0.0),
                         "decoder": (["head.w"], 0.1)})
    before_enc = params["enc.w"].data.copy()
    before_head = params["head.w"].data.copy()
    grads = {n: np.ones_like(p.data) for n, p in params.items()}
    opt.step(grads, lr_scale=1.0)
    np.testing.assert_array_equal(params["enc.w"].data, before_enc)
    assert np.any(params["head.w"].data != before_head)


def test_lr_scale_multiplies_every_group():
    params = _named_params()
    opt = AdamW(params, {"all": (["enc.w", "head.w"], 0.1)})
    before = {n: p.data.copy() for n, p in params.items()}
    grads = {n: np.ones_like(p.data) for n, p in params.items()}
    opt.step(grads, lr_scale=0.0)
    for n in params:
        np.testing.assert_array_equal(params[n].data, before[n])


def test_group_validation():
    params = _named_params()
    with pytest.raises(OptimError):
        AdamW(params, {"g": (["enc.w", "nope"], 0.1)})
    with pytest.raises(OptimError):
        AdamW(params, {"g": (["enc.w"], 0.1)})  # head.w unassigned
    with pytest.raises(OptimError):
        AdamW(params, {"a": (["enc.w", "head.w"], 0.1),
                       "b": (["head.w"], 0.1)})  # assigned twice
