import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from stdf4d.diffcore import (
    LrSchedule,
    NonFiniteError,
    ParamStore,
    adam_step,
    grad_check,
    load_checkpoint,
    lr_at,
    save_checkpoint,
    zero_grads,
)


def test_zero_grads_clears_every_entry():
    s = ParamStore()
    s.add("a", [1.0, 2.0])
    s.add("b", np.ones((2, 2)))
    s.add("c", 3.0)
    s.grad("a")[...] = [1.0, -2.0]
    s.grad("b")[...] = 5.0
    s.grad("c")[...] = 7.0
    zero_grads(s)
    for n in s.names():
        assert np.all(s.grad(n) == 0.0)
    assert list(s.get("a")) == [1.0, 2.0]


def test_zero_grads_empty_store():
    assert len(zero_grads(ParamStore())) == 0


def test_duplicate_names_rejected():
    s = ParamStore()
    s.add("a", [1.0])
    with pytest.raises(KeyError):
        s.add("a", [2.0])


def test_adam_first_step_moves_by_lr():
    s = ParamStore()
    s.add("v", [0.0])
    s.grad("v")[...] = 1.0
    adam_step(s, 0.1, 0.9, 0.999, 1e-15)
    # m_hat = 1, v_hat = 1 -> step = lr * 1 / (1 + eps)
    assert s.get("v")[0] == pytest.approx(-0.1, rel=1e-12)
    assert s.entry("v").step == 1


def test_adam_zero_gradient_is_identity_and_counts_step():
    s = ParamStore()
    s.add("v", [1.0, -3.0])
    adam_step(s, 0.5)
    assert list(s.get("v")) == [1.0, -3.0]
    assert s.entry("v").step == 1


@given(st.lists(st.floats(-5, 5), min_size=1, max_size=6), st.integers(1, 5))
@settings(max_examples=30, deadline=None)
def test_adam_zero_gradient_identity_for_any_state(vals, warm):
    s = ParamStore()
    s.add("v", vals)
    rng = np.random.default_rng(0)
    for _ in range(warm):
        s.grad("v")[...] = rng.normal(size=len(vals))
        adam_step(s, 0.01)
    zero_grads(s)
    e = s.entry("v")
    e.m[...] = 0.0
    before = s.get("v").copy()
    adam_step(s, 0.01)
    assert np.array_equal(before, s.get("v"))


def test_adam_nan_gradient_names_entry():
    s = ParamStore()
    s.add("good", [1.0])
    s.add("bad", [1.0])
    s.grad("bad")[...] = np.nan
    with pytest.raises(NonFiniteError, match="bad"):
        adam_step(s, 0.1)
    assert s.get("good")[0] == 1.0


def test_adam_per_entry_rates_skip_missing():
    s = ParamStore()
    s.add("a", [0.0])
    s.add("b", [0.0])
    s.grad("a")[...] = 1.0
    s.grad("b")[...] = 1.0
    adam_step(s, {"a": 0.1})
    assert s.get("a")[0] != 0.0 and s.get("b")[0] == 0.0
    assert s.entry("b").step == 0


def test_adam_rejects_bad_hyperparameters():
    s = ParamStore()
    s.add("a", [0.0])
    with pytest.raises(ValueError):
        adam_step(s, 0.0)
    with pytest.raises(ValueError):
        adam_step(s, 0.1, beta1=1.0)


def test_lr_schedule_endpoints_and_midpoint():
    sch = LrSchedule(1.6e-3, 1.6e-4, 30000)
    assert lr_at(sch, 0) == 1.6e-3
    assert lr_at(sch, 30000) == 1.6e-4
    assert lr_at(sch, 15000) == pytest.approx(1.6e-3 * 10 ** (-0.5), rel=1e-12)
    assert lr_at(sch, 15000) == pytest.approx(5.0596e-4, rel=1e-4)
    assert lr_at(sch, 40000) == 1.6e-4


@given(st.integers(0, 29999))
def test_lr_schedule_monotone(step):
    sch = LrSchedule(1.6e-3, 1.6e-4, 30000)
    assert lr_at(sch, step + 1) <= lr_at(sch, step)


def test_lr_schedule_rejects_nonpositive():
    with pytest.raises(ValueError):
        LrSchedule(0.0, 1e-4, 10)
    with pytest.raises(ValueError):
        LrSchedule(1e-3, -1.0, 10)


def test_grad_check_square():
    s = ParamStore()
    s.add("x", [3.0])

    def f(st):
        x = st.get("x")[0]
        st.grad("x")[0] += 2 * x
        return x * x

    rep = grad_check(f, s, h=1e-5)
    assert rep.max_rel_error < 1e-9


def test_grad_check_constant_is_zero_error():
    s = ParamStore()
    s.add("x", [1.0, 2.0])
    rep = grad_check(lambda st: 4.0, s)
    assert rep.max_rel_error == 0.0


def test_grad_check_detects_wrong_gradient():
    s = ParamStore()
    s.add("x", [2.0])

    def f(st):
        x = st.get("x")[0]
        st.grad("x")[0] += 3 * x  # wrong on purpose
        return x * x

    assert not grad_check(f, s).ok()


def test_grad_check_zero_derivative_with_rounding_noise():
    s = ParamStore()
    s.add("x", [0.3])
    # constant in exact arithmetic; float evaluation wobbles by an ulp
    rep = grad_check(lambda st: (0.3 + st.get("x")[0]) - st.get("x")[0] + 0.26, s)
    assert rep.n_checked == 1
    assert rep.max_rel_error == 0.0


def test_grad_check_missed_small_slope_detected():
    s = ParamStore()
    s.add("x", [0.3])
    # true slope 1e-6, analytic gradient left at zero
    rep = grad_check(lambda st: 0.36 + 1e-6 * st.get("x")[0], s)
    assert rep.max_rel_error == pytest.approx(1.0, rel=1e-4)


def test_grad_check_non_finite_raises():
    s = ParamStore()
    s.add("x", [0.0])
    with pytest.raises(NonFiniteError):
        grad_check(lambda st: math.log(st.get("x")[0]) if st.get("x")[0] > 0 else math.nan, s)


def test_checkpoint_round_trip_is_bit_exact(tmp_path):
    rng = np.random.default_rng(3)
    s = ParamStore()
    s.add("a", rng.normal(size=(3, 4)))
    s.add("b", [np.pi, 1e-300, -0.0, 5e-324])
    s.grad("a")[...] = rng.normal(size=(3, 4))
    adam_step(s, 0.01)
    save_checkpoint(tmp_path / "c.json", s, {"note": "x"}, step=7)
    s2, header, step = load_checkpoint(tmp_path / "c.json")
    assert header == {"note": "x"} and step == 7
    for n in s.names():
        for attr in ("value", "m", "v"):
            assert getattr(s.entry(n), attr).tobytes() == getattr(s2.entry(n), attr).tobytes()
        assert s.entry(n).step == s2.entry(n).step
