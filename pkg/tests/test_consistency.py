import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from rocmlab.consistency import (
    ConsistencyModel,
    DistillConfig,
    ModelConfig,
    distill,
    generate,
    load_checkpoint,
    save_checkpoint,
)
from rocmlab.diffusion import NULL, GaussianMixture, NoiseSchedule, pf_ode_solve
from rocmlab.tensor import Tensor, grad_check_params


def tiny(K=4, seed=0, **kw):
    return ConsistencyModel(ModelConfig(hidden=(8, 8), n_freq=2, cond_dim=3, K=K, **kw), seed=seed)


def test_boundary_scalings_exact():
    m = tiny()
    assert m.c_skip(0.0) == 1.0 and m.c_out(0.0) == 0.0
    # sigma_d = 0.5: at t = 1, c_skip = 0.25 / 1.25 and c_out = 0.5 / sqrt(1.25)
    assert abs(m.c_skip(1.0) - 0.2) < 1e-15
    assert abs(m.c_out(1.0) - 0.5 / np.sqrt(1.25)) < 1e-15


@given(st.integers(0, 10_000), st.floats(0, 4))
def test_identity_at_time_zero_for_any_parameters(seed, omega):
    m = tiny(seed=seed)
    x = np.random.default_rng(seed).normal(size=(5, 2)) * 3
    out = m(x, omega, [0, 1, NULL, 0, 1], 0.0)
    np.testing.assert_array_equal(out.data, x)


def test_zero_output_layer_gives_c_skip_times_x(rng):
    m = ConsistencyModel(ModelConfig(hidden=(8,), n_freq=2, cond_dim=3), zero_out=True)
    x = rng.normal(size=(4, 2))
    for t in (0.1, 0.5, 1.0):
        np.testing.assert_allclose(m(x, 1.0, None, t).data, m.c_skip(t) * x, rtol=0, atol=0)


def test_output_shape_and_time_range(rng):
    m = tiny()
    assert m(rng.normal(size=(7, 2)), 0.0, None, 0.3).shape == (7, 2)
    with pytest.raises(ValueError):
        m(rng.normal(size=(1, 2)), 0.0, None, 1.2)


@pytest.mark.parametrize("seed", range(3))
def test_apply_grad_wrt_parameters(seed):
    m = tiny(seed=seed)
    x = Tensor(np.random.default_rng(seed).normal(size=(3, 2)))
    err = grad_check_params(lambda: m(x, 1.5, [0, 1, NULL], 0.6).square().sum(), m.parameters())
    assert err < 1e-5


def test_generate_k1_is_single_model_call():
    m = tiny(K=1)
    s = NoiseSchedule(1)
    noise = np.random.default_rng(0).normal(size=(2, 6, 2))
    rec = generate(m, s, [0, 1, 0, 1, 0, 1], 0.5, noise=noise)
    np.testing.assert_array_equal(rec.x0.data, m(noise[1], 0.5, [0, 1, 0, 1, 0, 1], 1.0).data)


def test_record_invariants(small_model):
    s = NoiseSchedule(4)
    rec = generate(small_model, s, [0, 1, NULL], 2.0, seed=11)
    assert rec.K == 4 and rec.noise.shape == (5, 3, 2)
    for k in range(4, 0, -1):
        a, sg = s.alpha(rec.times[k - 1]), s.sigma(rec.times[k - 1])
        np.testing.assert_array_equal(rec.x[k - 1].data, rec.x_tilde[k].data * a + rec.noise[k - 1] * sg)
    np.testing.assert_array_equal(rec.x0.data, rec.x_tilde[1].data)


@given(st.integers(0, 2**32 - 1))
def test_replay_and_determinism(seed):
    m = tiny(seed=1)
    s = NoiseSchedule(4)
    a = generate(m, s, [0, 1], 1.0, seed=seed)
    b = generate(m, s, [0, 1], 1.0, seed=seed)
    c = generate(m, s, a.cond, a.omega, noise=a.noise)
    np.testing.assert_array_equal(a.x0.data, b.x0.data)
    np.testing.assert_array_equal(a.x0.data, c.x0.data)


def test_null_condition_equals_unconditional(small_model):
    s = NoiseSchedule(4)
    a = generate(small_model, s, None, 0.0, seed=3, batch=5)
    b = generate(small_model, s, np.full(5, NULL), 0.0, seed=3)
    np.testing.assert_array_equal(a.x0.data, b.x0.data)


def test_schedule_mismatch_raises(small_model):
    with pytest.raises(ValueError):
        generate(small_model, NoiseSchedule(8), None, 0.0, seed=0, batch=2)


class PerfectConsistency:
    """Analytic consistency function: the teacher ODE endpoint."""

    def __init__(self, gm, sched):
        self.gm, self.sched = gm, sched

    def __call__(self, x, omega, cond, t):
        return Tensor(pf_ode_solve(self.gm, self.sched, x.data, t, 0.0, 32))


def test_perfect_model_recovers_single_gaussian_data():
    gm = GaussianMixture([1.0], [[0.5, -0.5]], [[0.2, 0.6]])
    s = NoiseSchedule(8)
    n = 10_000
    noise = np.random.default_rng(5).standard_normal((9, n, 2))
    x0 = generate(PerfectConsistency(gm, s), s, None, 0.0, noise=noise).x0.data
    se_mean = np.sqrt(gm.covariances[0] / n)
    assert np.all(np.abs(x0.mean(0) - gm.means[0]) < 3 * se_mean)
    var = x0.var(0)
    assert np.all(np.abs(var - gm.covariances[0]) < 3 * gm.covariances[0] * np.sqrt(2 / n))


def test_unrolled_trajectory_is_differentiable():
    m = tiny(K=4, seed=7)
    s = NoiseSchedule(4)
    noise = np.random.default_rng(2).normal(size=(5, 3, 2))

    def loss():
        x0 = generate(m, s, [0, 1, NULL], 1.0, noise=noise).x0
        return (x0 * x0).sum() + x0.tanh().sum()

    assert grad_check_params(loss, m.parameters()) < 1e-4


def test_distill_zero_iterations_is_noop(gmm2):
    m = tiny(K=8)
    before = m.get_flat()
    m, losses = distill(m, gmm2, NoiseSchedule(8), DistillConfig(iterations=0))
    np.testing.assert_array_equal(m.get_flat(), before)
    assert losses == []


def test_distill_loss_is_finite_and_falls(gmm2):
    m = tiny(K=8)
    _, losses = distill(m, gmm2, NoiseSchedule(8),
                        DistillConfig(iterations=120, batch_size=64, lr=3e-3, log_every=20, teacher_substeps=8))
    vals = np.array([v for _, v in losses])
    assert np.all(np.isfinite(vals))
    assert [i for i, _ in losses] == [20, 40, 60, 80, 100, 120]
    assert vals[-1] < vals[0]


def test_checkpoint_roundtrip_bit_identical(tmp_path):
    m = tiny(seed=9)
    path = tmp_path / "m.ckpt"
    save_checkpoint(path, m, {"note": "x"})
    back, header = load_checkpoint(path)
    np.testing.assert_array_equal(back.get_flat(), m.get_flat())
    assert header["K"] == 4 and header["sigma_data"] == 0.5 and header["extra"] == {"note": "x"}
    assert path.read_bytes()[:8] == b"ROCMCKPT"
    bad = tmp_path / "bad.ckpt"
    bad.write_bytes(b"nope" * 10)
    with pytest.raises(ValueError):
        load_checkpoint(bad)


def test_copy_is_independent_and_frozen():
    m = tiny()
    ref = m.copy(frozen=True)
    assert all(not p.requires_grad for p in ref.parameters())
    m.parameters()[0].data = m.parameters()[0].data + 1.0
    assert not np.array_equal(ref.get_flat(), m.get_flat())
