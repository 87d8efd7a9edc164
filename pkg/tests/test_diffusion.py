import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from anchorgrpo.diffusion import (Generator, denoise_step, exploration_std, forward_diffuse, infer, infer_batch,
                                  inference_timesteps, likelihood_std, make_schedule, poly_basis,
                                  rollout, sample_group, squash, step_log_likelihood)
from anchorgrpo.nn import TrainingDivergence

from conftest import tiny_generator


def zero_net(gen):
    for w, b in zip(gen.net.weights, gen.net.biases):
        w[:] = 0.0
        b[:] = 0.0
    return gen


# -- schedule ----------------------------------------------------------------

def test_schedule_single_step():
    s = make_schedule(1, 0.5, 0.5)
    assert np.allclose(s.alpha_bar, [1.0, 0.5])


@given(st.integers(1, 60), st.floats(1e-4, 0.5), st.floats(0.0, 0.49))
def test_schedule_strictly_decreasing(T, lo, extra):
    s = make_schedule(T, lo, lo + extra)
    assert s.alpha_bar[0] == 1.0
    assert np.all(np.diff(s.alpha_bar) < 0)


def test_schedule_matches_running_product():
    s = make_schedule(8, 0.05, 0.4)
    acc = 1.0
    for t in range(1, 9):
        acc *= 1.0 - (0.05 + (0.4 - 0.05) * (t - 1) / 7)
        assert s.alpha_bar[t] == pytest.approx(acc, rel=1e-14)


@pytest.mark.parametrize("lo,hi", [(0.0, 0.1), (0.2, 0.1), (0.1, 1.0), (-0.1, 0.5)])
def test_schedule_rejects_bad_range(lo, hi):
    with pytest.raises(ValueError):
        make_schedule(4, lo, hi)


# -- forward diffusion ----------------------------------------------------------

def test_forward_diffuse_hand_example():
    s = make_schedule(1, 0.75, 0.75)
    out = forward_diffuse([[4.0, 0.0]], 1, s, [[1.0, 1.0]])
    assert np.allclose(out, [[2.0 + math.sqrt(0.75), math.sqrt(0.75)]], atol=1e-12)
    assert np.allclose(out, [[2.8660, 0.8660]], atol=1e-4)


def test_forward_diffuse_edges():
    s = make_schedule(8, 0.01, 0.05)
    a = np.array([[3.0, -1.0], [2.0, 5.0]])
    assert np.array_equal(forward_diffuse(a, 0, s, np.ones_like(a)), a)
    assert np.allclose(forward_diffuse(a, 5, s, np.zeros_like(a)), math.sqrt(s.alpha_bar[5]) * a)
    for bad in (-1, 9):
        with pytest.raises(ValueError):
            forward_diffuse(a, bad, s, np.zeros_like(a))


@given(st.integers(1, 8), st.integers(0, 10_000))
def test_forward_diffuse_identity(t, seed):
    s = make_schedule(8, 0.01, 0.05)
    rng = np.random.default_rng(seed)
    a, eps = rng.normal(size=(2, 16)) * 3
    tau = forward_diffuse(a, t, s, eps)
    lhs = np.linalg.norm(tau - math.sqrt(s.alpha_bar[t]) * a)
    rhs = math.sqrt(1 - s.alpha_bar[t]) * np.linalg.norm(eps)
    assert lhs == pytest.approx(rhs, rel=1e-12)


# -- reverse process ----------------------------------------------------------------

def test_eta0_step_is_deterministic():
    gen = tiny_generator()
    f = np.linspace(-1, 1, 5)
    tau = np.random.default_rng(0).normal(size=6)
    a = denoise_step(gen, f, 1, tau, 2, eta=0)
    b = denoise_step(gen, f, 1, tau, 2, eta=0)
    assert np.array_equal(a[0], b[0]) and a[3] == b[3]
    assert np.array_equal(a[0], a[1]) and a[2] == 0.0


def test_eta1_without_variance_returns_mean():
    gen = tiny_generator()
    gen.schedule = make_schedule(2, 1e-12, 1e-12)
    out, mean, std, _ = denoise_step(gen, np.zeros(5), 0, np.ones(6), 2, eta=1, rng=np.random.default_rng(0),
                                     floor=0.0)
    assert std < 1e-5
    assert np.allclose(out, mean, atol=1e-4)


def test_exploration_floor_is_enforced():
    gen = tiny_generator()
    gen.schedule = make_schedule(2, 1e-4, 1e-4)   # sqrt(1 - alpha_t) = 0.01
    assert float(exploration_std(gen.schedule, 2, floor=0.0)) == pytest.approx(0.01)
    rng = np.random.default_rng(1)
    draws = []
    for _ in range(3000):
        out, mean, std, _ = denoise_step(gen, np.zeros(5), 0, np.ones(6), 2, eta=1, rng=rng)
        draws.append(out - mean)
    assert std == pytest.approx(0.04)
    assert np.std(draws) == pytest.approx(0.04, rel=0.03)


def test_multiplicative_step_noise_scales_the_mean():
    gen = tiny_generator()
    out, mean, std, _ = denoise_step(gen, np.zeros(5), 0, np.ones(6), 2, eta=1, rng=np.random.default_rng(2),
                                     noise_type="multiplicative")
    ratio = out.reshape(-1, 2) / mean.reshape(-1, 2)
    assert np.allclose(ratio, ratio[0])
    with pytest.raises(ValueError):
        denoise_step(gen, np.zeros(5), 0, np.ones(6), 2, eta=1, rng=np.random.default_rng(2), noise_type="pink")
    with pytest.raises(ValueError):
        denoise_step(gen, np.zeros(5), 0, np.ones(6), 2, eta=0.5)


def test_non_finite_output_raises():
    gen = tiny_generator()
    gen.net.biases[-1][0] = np.nan
    with pytest.raises(TrainingDivergence):
        denoise_step(gen, np.zeros(5), 0, np.ones(6), 2)


@pytest.mark.parametrize("n_steps", [1, 2, 3, 5])
def test_zero_offset_net_returns_anchors(n_steps):
    gen = zero_net(tiny_generator(n_anchor=3, T=5, seed=4))
    trajs, _ = infer_batch(gen, np.ones((2, 5)), n_steps=n_steps, replicates=2, seed=9)
    want = np.tile(gen.anchors, (2, 1, 1))
    for s in range(2):
        assert np.abs(trajs[s] - want).max() < 1e-9
    # the same holds for noise-free stochastic-path chains
    ch = rollout(gen, np.ones((1, 5)), 2, np.random.default_rng(0), eta=0)
    assert np.abs(ch.final - np.repeat(gen.anchors, 2, axis=0)).max() < 1e-9


def test_full_inference_equals_manual_chain():
    gen = tiny_generator(n_anchor=2, T=4, seed=3)
    f = np.random.default_rng(5).normal(size=5)
    trajs, logits = infer_batch(gen, f, n_steps=4, seed=11)
    eps = np.random.default_rng(11).standard_normal((1, 2, gen.traj_dim))
    for k in range(2):
        x = forward_diffuse(gen.anchors_norm()[k], 4, gen.schedule, eps[0, k])
        for t in range(4, 0, -1):
            x, _, _, logit = denoise_step(gen, f, k, x, t, eta=0)
        assert np.allclose(gen.denormalize(x.reshape(-1, 2)), trajs[0, k], atol=1e-12)
        assert logit == pytest.approx(logits[0, k], abs=1e-12)


def test_inference_step_counts():
    gen = tiny_generator(T=8)
    _, _, evals = infer_batch(gen, np.zeros(5), return_evals=True)
    assert evals == 2
    assert list(inference_timesteps(8, 2)) == [8, 4, 0]
    assert list(inference_timesteps(8, 8)) == list(range(8, -1, -1))
    for bad in (0, 9):
        with pytest.raises(ValueError):
            infer(gen, np.zeros(5), n_steps=bad)
    out = infer(gen, np.zeros(5))
    assert len(out) == gen.n_anchor and out[0][0].wp.shape == (3, 2)


def test_inference_deterministic():
    gen = tiny_generator()
    a = infer_batch(gen, np.ones((3, 5)), replicates=3, seed=4)
    b = infer_batch(gen, np.ones((3, 5)), replicates=3, seed=4)
    assert np.array_equal(a[0], b[0]) and np.array_equal(a[1], b[1])


# -- likelihood ------------------------------------------------------------------

def test_log_likelihood_at_mean():
    assert step_log_likelihood(np.zeros(2), np.zeros(2), 1.0) == pytest.approx(-math.log(2 * math.pi), abs=1e-12)
    assert step_log_likelihood(np.zeros(2), np.zeros(2), 1.0) == pytest.approx(-1.83788, abs=1e-5)


def test_log_likelihood_decreases_with_distance():
    m = np.zeros(4)
    vals = [step_log_likelihood(np.full(4, d), m, 0.5) for d in (0.0, 0.1, 0.5, 2.0)]
    assert all(a > b for a, b in zip(vals, vals[1:]))


def test_likelihood_floor():
    x, m = np.array([0.3, -0.1, 0.2]), np.zeros(3)
    assert step_log_likelihood(x, m, 0.01) == step_log_likelihood(x, m, 0.1)
    assert float(likelihood_std(make_schedule(2, 1e-4, 1e-4), 1)) == pytest.approx(0.1)
    with pytest.raises(ValueError):
        step_log_likelihood(x, m, 0.0, floor=0.0)


@given(st.lists(st.floats(-3, 3), min_size=6, max_size=6), st.floats(1e-4, 5))
def test_likelihood_bounded_by_floored_peak(diff, std):
    d = np.array(diff)
    peak = -6 * math.log(0.1) - 3 * math.log(2 * math.pi)
    assert step_log_likelihood(d, np.zeros(6), std) <= peak + 1e-9


# -- group sampling ----------------------------------------------------------------

def test_sample_group_is_seeded():
    gen = tiny_generator(n_anchor=3, T=3)
    a = sample_group(gen, np.ones(5), 4, seed=7)
    b = sample_group(gen, np.ones(5), 4, seed=7)
    assert len(a) == 12
    for x, y in zip(a, b):
        assert x.anchor_index == y.anchor_index
        assert np.array_equal(x.outputs, y.outputs) and np.array_equal(x.means, y.means)
        assert x.final == y.final
    assert [c.anchor_index for c in a] == [0] * 4 + [1] * 4 + [2] * 4
    assert list(a[0].t) == [3, 2, 1]
    with pytest.raises(ValueError):
        sample_group(gen, np.ones(5), 1, seed=0)


def test_group_chains_start_in_the_anchor_noise_ball():
    gen = tiny_generator(n_anchor=2, T=8, n_f=8)
    gen.schedule = make_schedule(8, 0.01, 0.05)
    ch = rollout(gen, np.ones((1, 5)), 4000, np.random.default_rng(3), init_std=0.0, floor=0.0)
    ab = gen.schedule.alpha_bar[8]
    d = 16
    chi_mean = math.sqrt(2) * math.exp(math.lgamma((d + 1) / 2) - math.lgamma(d / 2))
    for k in range(2):
        x = ch.inputs[0][ch.anchor_index == k]
        r = np.linalg.norm(x - math.sqrt(ab) * gen.anchors_norm()[k], axis=1)
        se = r.std() / math.sqrt(len(r))
        assert abs(r.mean() - math.sqrt(1 - ab) * chi_mean) < 4 * se


def test_step_records_are_consistent():
    gen = tiny_generator(n_anchor=2, T=3)
    ch = rollout(gen, np.ones((2, 5)), 3, np.random.default_rng(0))
    assert ch.inputs.shape == (3, 12, 6)
    # each step's input is the previous step's output
    assert np.array_equal(ch.inputs[1:], ch.outputs[:-1])
    assert np.allclose(ch.final.reshape(12, -1), gen.denormalize(ch.outputs[-1].reshape(12, -1, 2)).reshape(12, -1))
    assert np.all(ch.stds >= 0.04)


# -- misc ------------------------------------------------------------------------------

def test_squash():
    assert squash(0.0) == 0.5
    v = squash(np.linspace(-60, 60, 101))
    assert np.all(np.diff(v) >= 0) and np.all((v >= 0) & (v <= 1))


def test_offset_bases():
    b = poly_basis(4, 2)
    assert b.shape == (8, 4)
    assert np.allclose(b[:, 0].reshape(4, 2)[:, 0], [0.25, 0.5, 0.75, 1.0])
    assert np.all(b[:, 0].reshape(4, 2)[:, 1] == 0)
    gen = tiny_generator()
    assert np.allclose(np.diag(gen.offset_basis), np.repeat([1 / 3, 2 / 3, 1.0], 2))
    with pytest.raises(ValueError):
        Generator.create(gen.anchors, gen.scales, gen.schedule, 5, basis=np.zeros((5, 2)))


@pytest.mark.parametrize("basis", [None, "poly"])
def test_generator_checkpoint_round_trip(tmp_path, basis):
    gen = tiny_generator(n_anchor=3, T=4, seed=2)
    if basis == "poly":
        gen = Generator.create(gen.anchors, gen.scales, gen.schedule, 5, hidden=(6,), seed=2,
                               basis=poly_basis(3, 2))
        gen.net.weights[-1][:] = np.random.default_rng(0).normal(size=gen.net.weights[-1].shape)
    gen.meta = {"note": "x"}
    path = tmp_path / "g.ckpt"
    gen.save(path)
    back = Generator.load(path)
    for a, b in zip(gen.net.params(), back.net.params()):
        assert np.array_equal(a, b)
    assert np.array_equal(back.anchors, gen.anchors) and np.array_equal(back.scales, gen.scales)
    assert np.array_equal(back.schedule.alpha_bar, gen.schedule.alpha_bar)
    assert back.meta == {"note": "x"}
    f = np.ones((2, 5))
    assert np.array_equal(infer_batch(gen, f)[0], infer_batch(back, f)[0])


def test_load_rejects_other_checkpoints(tmp_path):
    gen = tiny_generator()
    path = tmp_path / "n.ckpt"
    gen.net.save(path, extra={"kind": "selector"})
    with pytest.raises(ValueError):
        Generator.load(path)
