import json

import numpy as np
import pytest

from flatrecon.autodiff import ContractError, ShapeError
from flatrecon.flow import build_schedule, euler_step
from flatrecon.model import (
    DivergenceError,
    LoadError,
    UnrolledModel,
    cascade_update,
    forward_unrolled,
    init_model,
    load_checkpoint,
    regularizer_apply,
    save_checkpoint,
)
from flatrecon.physics import adjoint, apply_forward, data_consistency, make_equispaced_mask


def grid(seed, n=16):
    rng = np.random.default_rng(seed)
    return rng.normal(size=(n, n)) + 1j * rng.normal(size=(n, n))


def identity_model(K=2, sign=1.0):
    # ReLU(u) - ReLU(-u) = u, routed through the 2-16-16-2 stack
    model = init_model(build_schedule(K), seed=0)
    w0 = np.zeros((16, 2, 3, 3))
    w1 = np.zeros((16, 16, 3, 3))
    w2 = np.zeros((2, 16, 3, 3))
    for c in range(2):
        w0[2 * c, c, 1, 1], w0[2 * c + 1, c, 1, 1] = 1.0, -1.0
        w2[c, 2 * c, 1, 1], w2[c, 2 * c + 1, 1, 1] = sign, -sign
    for j in range(4):
        w1[j, j, 1, 1] = 1.0
    for k in range(K):
        model.params.update({f"c{k:02d}.conv0.w": w0, f"c{k:02d}.conv1.w": w1, f"c{k:02d}.conv2.w": w2})
    return model


def zero_model(K=3, grounded=True):
    model = init_model(build_schedule(K), grounded=grounded, seed=1)
    for n in model.params:
        if ".conv" in n:
            model.params[n] = np.zeros_like(model.params[n])
    return model


def test_identity_regularizer_roundtrip():
    x = grid(0)
    np.testing.assert_allclose(regularizer_apply(x, identity_model(), 0), x, atol=1e-12)


def test_zero_regularizer():
    assert not regularizer_apply(grid(1), zero_model(), 0).any()


def test_random_regularizer_shape_and_finite():
    out = regularizer_apply(grid(2, 32), init_model(build_schedule(4), seed=3), 2)
    assert out.shape == (32, 32) and np.all(np.isfinite(out))


def test_regularizer_width_mismatch():
    with pytest.raises(ShapeError):
        regularizer_apply(np.zeros((12, 16), complex), zero_model(), 0)


def test_consistent_state_is_fixed_point():
    m = make_equispaced_mask(16, 4, 0.125)
    x = grid(3)
    y = apply_forward(x, m)
    assert np.array_equal(cascade_update(x, y, m, 0, zero_model()), x)


def test_unit_step_full_mask_projects_onto_y():
    model = zero_model(K=2, grounded=False)  # learnable eta starts at 1
    m = make_equispaced_mask(16, 1, 0.5)
    y = grid(5)
    np.testing.assert_allclose(cascade_update(grid(4), y, m, 1, model), y, atol=1e-15)


@pytest.mark.parametrize("seed", range(4))
def test_cascade_is_euler_step(seed):
    sched = build_schedule(6, 4.0)
    model = init_model(sched, seed=seed)
    m = make_equispaced_mask(16, 4, 0.125, seed % 4)
    x, y = grid(seed + 10), apply_forward(grid(seed + 20), m)
    for k in range(sched.K):
        # v_theta = f_theta in k-space minus the data term, lambda = sigma = 1
        field = lambda z, t: regularizer_apply(z, model, k) - data_consistency(z, y, m)  # noqa: E731
        ref = euler_step(x, sched.t[k], sched.delta[k], field)
        out = cascade_update(x, y, m, k, model)
        assert np.abs(out - ref).max() < 1e-12
        x = out


def test_cascade_index_checked():
    m = make_equispaced_mask(16, 4, 0.125)
    with pytest.raises(ValueError):
        cascade_update(grid(0), grid(1), m, 3, zero_model(K=3))


def test_forward_unrolled_base_case_and_zero_input():
    m = make_equispaced_mask(16, 4, 0.125)
    model = init_model(build_schedule(1), seed=4)
    y = apply_forward(grid(6), m)
    rec = forward_unrolled(y, m, model)
    assert len(rec.states) == 2
    assert np.array_equal(rec.states[0], adjoint(y, m))
    assert np.array_equal(rec.states[1], cascade_update(rec.states[0], y, m, 0, model))
    zero = forward_unrolled(np.zeros((16, 16), complex), m, zero_model(K=4))
    assert len(zero.states) == 5 and not any(s.any() for s in zero.states)


def test_divergence_names_cascade():
    m = make_equispaced_mask(16, 4, 0.125)
    model = init_model(build_schedule(4), seed=5)
    model.params["c02.conv2.b"] = np.array([np.inf, 0.0])
    with pytest.raises(DivergenceError) as err:
        with np.errstate(invalid="ignore", over="ignore"):
            forward_unrolled(apply_forward(grid(7), m), m, model)
    assert err.value.cascade == 2


def test_weight_sharing_store():
    sched = build_schedule(5)
    model = init_model(sched, weight_sharing=True, seed=6)
    assert {n.split(".")[0] for n in model.params} == {"shared"}
    assert model.params["shared.conv0.w"].shape == (16, 3, 3, 3)
    x = grid(8)
    before = [regularizer_apply(x, model, k) for k in range(5)]
    model.params["shared.conv2.b"] = model.params["shared.conv2.b"] + 0.5
    after = [regularizer_apply(x, model, k) for k in range(5)]
    dc = np.zeros((16, 16), complex)
    dc[8, 8] = 0.5 * 16  # a constant 0.5 image has a single DC coefficient
    for b, a in zip(before, after):
        np.testing.assert_allclose(a - b, dc * (1 + 1j), atol=1e-12)


def test_unshared_parameter_counts_match():
    model = init_model(build_schedule(4), seed=7)
    sizes = [sum(p.size for p in model.regularizer_params(k).values()) for k in range(4)]
    assert len(set(sizes)) == 1 and sizes[0] == 16 * 2 * 9 + 16 + 16 * 16 * 9 + 16 + 2 * 16 * 9 + 2


def test_ungrounded_contract():
    model = init_model(build_schedule(3), grounded=False)
    del model.params["eta.01"]
    with pytest.raises(ContractError):
        model.check()


def test_determinism():
    m = make_equispaced_mask(16, 4, 0.125)
    y = apply_forward(grid(9), m)
    a = forward_unrolled(y, m, init_model(build_schedule(4), seed=8))
    b = forward_unrolled(y, m, init_model(build_schedule(4), seed=8))
    assert all(np.array_equal(p, q) for p, q in zip(a.states, b.states))


@pytest.mark.parametrize("shared,grounded", [(False, True), (True, True), (False, False)])
def test_checkpoint_roundtrip(tmp_path, shared, grounded):
    model = init_model(build_schedule(3, 2.0, 0.5), shared, grounded, seed=9)
    save_checkpoint(model, tmp_path / "ck")
    back = load_checkpoint(tmp_path / "ck")
    assert back.weight_sharing == shared and back.grounded == grounded
    assert np.array_equal(back.schedule.eta, model.schedule.eta)
    assert all(np.array_equal(back.params[n], p) for n, p in model.params.items())


def test_checkpoint_load_errors(tmp_path):
    with pytest.raises(LoadError):
        load_checkpoint(tmp_path)
    save_checkpoint(init_model(build_schedule(2)), tmp_path / "ck")
    man = json.loads((tmp_path / "ck" / "manifest.json").read_text())
    man["architecture"]["channels"] = [2, 8, 8, 2]
    (tmp_path / "ck" / "manifest.json").write_text(json.dumps(man))
    with pytest.raises(LoadError):
        load_checkpoint(tmp_path / "ck")
