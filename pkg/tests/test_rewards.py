import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from rocmlab.errors import ConfigError
from rocmlab.rewards import REWARD_KINDS, RewardModel, reward_eval
from rocmlab.tensor import Tape, Tensor, grad_check


def test_radial_is_zero_at_target():
    rm = RewardModel("radial", target=[1.0, -2.0])
    assert float(reward_eval(rm, [[1.0, -2.0]]).data[0]) == 0.0


def test_radial_gradient(rng):
    r = np.array([0.5, 1.5])
    rm = RewardModel("radial", target=list(r))
    x = rng.normal(size=(6, 2))
    assert grad_check(lambda t: reward_eval(rm, t).sum(), x) < 1e-8
    leaf = Tensor(x, requires_grad=True)
    with Tape() as tape:
        tape.backward(reward_eval(rm, leaf).sum())
    np.testing.assert_allclose(leaf.grad, -2.0 * (x - r), atol=1e-14)


def test_halfplane_zero_on_boundary_and_bounded():
    rm = RewardModel("halfplane", direction=[1.0, 0.0])
    np.testing.assert_array_equal(reward_eval(rm, [[0.0, 3.0], [0.0, -7.0]]).data, 0.0)
    v = reward_eval(rm, [[50.0, 0.0], [-50.0, 0.0]]).data
    assert v[0] <= 1.0 and v[1] >= -1.0 and v[0] > 0.99


def test_hackable_adds_norm_bonus():
    x = np.array([[0.3, -1.0]])
    h = reward_eval(RewardModel("hackable", bonus=0.2), x).data
    p = reward_eval(RewardModel("halfplane"), x).data
    np.testing.assert_allclose(h - p, 0.2 * np.sum(x**2))


def test_mixture_mode_is_log_density():
    rm = RewardModel("mixture-mode", target=[1.0, 0.0], scale=[0.5, 2.0])
    x = np.array([[0.2, 0.7]])
    var = np.array([0.5, 2.0])
    want = -0.5 * np.sum((x - [1.0, 0.0]) ** 2 / var) - 0.5 * np.sum(np.log(2 * np.pi * var))
    assert float(reward_eval(rm, x).data[0]) == pytest.approx(want, rel=1e-14)


def test_unknown_kind_and_bad_config():
    with pytest.raises(ConfigError):
        RewardModel("aesthetic")
    with pytest.raises(ConfigError):
        RewardModel("halfplane", temperature=0.0)
    with pytest.raises(ConfigError):
        RewardModel.from_config({"kind": "radial", "color": 1})
    rm = RewardModel("hackable", bonus=0.1)
    assert RewardModel.from_config(rm.to_config()) == rm


@pytest.mark.parametrize("kind", REWARD_KINDS)
@given(seed=st.integers(0, 10_000))
def test_every_reward_is_differentiable(kind, seed):
    rng = np.random.default_rng(seed)
    rm = RewardModel(kind, target=list(rng.normal(size=2)), direction=list(rng.normal(size=2)))
    assert grad_check(lambda t: reward_eval(rm, t).sum(), rng.normal(size=(4, 2))) < 1e-6


def test_shape_is_per_sample(rng):
    for kind in REWARD_KINDS:
        assert reward_eval(RewardModel(kind), rng.normal(size=(9, 2))).shape == (9,)
