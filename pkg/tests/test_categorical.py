import numpy as np
import pytest

from twindiff import categorical as cat
from twindiff import nn
from twindiff.errors import ConfigError, ShapeError
from twindiff.schedule import linear_schedule

from helpers import fd_agreement, tiny_net


@pytest.fixture
def sched():
    return linear_schedule(50, 1e-5, 2e-2)


def onehot(idx, k):
    out = np.zeros((len(idx), k))
    out[np.arange(len(idx)), idx] = 1.0
    return out


# ---------------------------------------------------------------------------
# forward marginal

def test_marginal_no_noise_limit(sched):
    # beta ~ 1e-9 keeps the cumulative product at ~1: the marginal is ~x0
    s = linear_schedule(5, 1e-9, 1e-9)
    x0 = onehot([0, 2], 3)
    got = cat.forward_marginal_cat(x0, 5, s, (3,))
    assert np.allclose(got, x0, atol=1e-7)


def test_marginal_half_mixed():
    # schedule tuned so the cumulative product at t=1 is exactly 0.5
    s = linear_schedule(2, 0.5, 0.5)
    got = cat.forward_marginal_cat(onehot([0], 2), 1, s, (2,))
    assert np.allclose(got, [[0.75, 0.25]], atol=1e-15)


def test_marginal_rejects_non_onehot(sched):
    with pytest.raises(ConfigError):
        cat.forward_marginal_cat(np.array([[0.5, 0.5]]), 3, sched, (2,))


def test_marginal_matches_kernel_matrix_product(sched):
    # distribution identity: applying every single-step kernel matrix to a
    # one-hot start equals the closed-form marginal
    for k in (2, 5, 8):
        for t in (1, 10, 50):
            dist = np.eye(k)[0]
            for i in range(1, t + 1):
                a = sched.alpha_at(i)
                q_i = a * np.eye(k) + (1.0 - a) / k * np.ones((k, k))
                dist = dist @ q_i
            closed = cat.forward_marginal_cat(onehot([0], k), t, sched, (k,))[0]
            assert np.allclose(dist, closed, atol=1e-12)


def test_marginal_matches_simulated_chain():
    # empirical frequency of sampled single-step transitions vs closed form
    sched = linear_schedule(50, 1e-3, 0.15)
    rng = np.random.default_rng(42)
    n, k, t = 100_000, 3, 10
    x = np.tile(np.eye(k)[1], (n, 1))
    for i in range(1, t + 1):
        x = cat.sample_cat(cat.forward_step_cat(x, i, sched, (k,)), (k,), rng)
    freq = x.mean(axis=0)
    closed = cat.forward_marginal_cat(onehot([1], k), t, sched, (k,))[0]
    tv = 0.5 * np.abs(freq - closed).sum()
    assert tv < 0.01


# ---------------------------------------------------------------------------
# sampling

def test_sample_onehot_input_is_fixed_point(rng):
    x = onehot([0, 1, 2, 1], 3)
    got = cat.sample_cat(x, (3,), rng)
    assert np.array_equal(got, x)


def test_sample_uniform_frequencies():
    rng = np.random.default_rng(5)
    probs = cat.uniform_probs(100_000, (4,))
    draws = cat.sample_cat(probs, (4,), rng)
    assert np.allclose(draws.mean(axis=0), 0.25, atol=0.01)


def test_sample_deterministic_for_seed():
    probs = cat.uniform_probs(50, (3, 4))
    a = cat.sample_cat(probs, (3, 4), np.random.default_rng(3))
    b = cat.sample_cat(probs, (3, 4), np.random.default_rng(3))
    assert np.array_equal(a, b)


def test_argmax_onehot_tie_breaks_low():
    got = cat.argmax_onehot(np.array([[0.2, 0.2, 0.1]]), (3,))
    assert np.array_equal(got, [[1.0, 0.0, 0.0]])


# ---------------------------------------------------------------------------
# posterior

def _posterior_bayes_oracle(xt_idx, x0_idx, t, sched, k):
    """Exhaustive Bayes enumeration over the value at t-1."""
    b = sched.beta_at(t)
    ab_prev = sched.alpha_bar_at(t - 1)
    post = np.empty(k)
    for j in range(k):
        step = (1.0 - b) * (1.0 if xt_idx == j else 0.0) + b / k
        marg = ab_prev * (1.0 if x0_idx == j else 0.0) + (1.0 - ab_prev) / k
        post[j] = step * marg
    return post / post.sum()


def test_posterior_matches_bayes_enumeration(sched):
    for k in (2, 3, 4):
        for t in (2, 9, 50):
            for xt_i in range(k):
                for x0_i in range(k):
                    got = cat.posterior_cat(onehot([xt_i], k), onehot([x0_i], k),
                                            t, sched, (k,))[0]
                    want = _posterior_bayes_oracle(xt_i, x0_i, t, sched, k)
                    assert np.allclose(got, want, atol=1e-12), (k, t, xt_i, x0_i)


def test_posterior_concentrates_in_noiseless_limit():
    # beta ~ 0 and abar_{t-1} ~ 1: a noiseless chain has x_t = x_0, and the
    # posterior pins x_{t-1} to that same category
    s = linear_schedule(3, 1e-9, 1e-9)
    got = cat.posterior_cat(onehot([1], 2), onehot([1], 2), 2, s, (2,))
    assert got[0, 1] > 0.999


def test_posterior_follows_x0_when_history_is_clean():
    # abar_{t-1} ~ 1 with a noisy current step: x_{t-1} must match x_0 even
    # when the observed x_t disagrees
    s = linear_schedule(2, 1e-9, 0.3)
    got = cat.posterior_cat(onehot([0], 2), onehot([1], 2), 2, s, (2,))
    assert got[0, 1] > 0.999


def test_posterior_rows_normalized(sched):
    rng = np.random.default_rng(0)
    sizes = (2, 3, 4)
    width = sum(sizes)
    for _ in range(1000):
        xt = np.concatenate([onehot([rng.integers(k)], k)[0] for k in sizes])[None, :]
        x0 = np.concatenate([onehot([rng.integers(k)], k)[0] for k in sizes])[None, :]
        t = int(rng.integers(2, 51))
        post = cat.posterior_cat(xt, x0, t, sched, sizes)
        for j0, j1 in cat.block_slices(sizes):
            assert abs(post[0, j0:j1].sum() - 1.0) < 1e-12


def test_posterior_requires_t_ge_2(sched):
    with pytest.raises(ConfigError):
        cat.posterior_cat(onehot([0], 2), onehot([0], 2), 1, sched, (2,))


# ---------------------------------------------------------------------------
# parameterized reverse distribution

def test_reverse_dist_degenerate_mixture(sched, rng):
    # logits concentrated on one category equal the posterior at that one-hot
    k, t = 4, 7
    xt = onehot([2], k)
    logits = np.full((1, k), -1e3)
    logits[0, 1] = 1e3
    got = cat.reverse_dist_cat(xt, logits, t, sched, (k,))
    want = cat.posterior_cat(xt, onehot([1], k), t, sched, (k,))
    assert np.allclose(got, want, atol=1e-12)


def test_reverse_dist_explicit_sum_oracle(sched):
    # explicit sum over predicted x0 categories (mixing the unnormalized
    # Bayes numerators, one final normalization) vs the linear-in-x0
    # production shortcut
    rng = np.random.default_rng(8)
    k, t = 3, 13
    xt_idx = 0
    xt = onehot([xt_idx], k)
    logits = rng.standard_normal((1, k))
    p_x0 = cat.softmax_blocks(logits, (k,))[0]
    a = sched.alpha_at(t)
    ab_prev = sched.alpha_bar_at(t - 1)
    mix = np.zeros(k)
    for c in range(k):
        fac1 = a * np.eye(k)[xt_idx] + (1.0 - a) / k
        fac2 = ab_prev * np.eye(k)[c] + (1.0 - ab_prev) / k
        mix += p_x0[c] * fac1 * fac2
    explicit = mix / mix.sum()
    got = cat.reverse_dist_cat(xt, logits, t, sched, (k,))
    assert np.allclose(got[0], explicit, atol=1e-12)


def test_reverse_dist_normalized(sched, rng):
    sizes = (3, 5)
    xt = np.concatenate([onehot([1], 3), onehot([4], 5)], axis=1)
    got = cat.reverse_dist_cat(xt, rng.standard_normal((1, 8)), 6, sched, sizes)
    for j0, j1 in cat.block_slices(sizes):
        assert abs(got[0, j0:j1].sum() - 1.0) < 1e-12


def test_reverse_dist_block_mismatch(sched):
    with pytest.raises(ShapeError):
        cat.reverse_dist_cat(onehot([0], 3), np.zeros((1, 4)), 5, sched, (3,))


# ---------------------------------------------------------------------------
# training loss

def test_loss_kl_zero_when_model_equals_posterior(sched):
    # logits that put all x0 mass on the true category reproduce the true
    # posterior, so the divergence vanishes
    k, t = 4, 20
    x0 = onehot([2], k)
    xt = onehot([0], k)
    logits = np.full((1, k), -1e3)
    logits[0, 2] = 1e3
    loss = cat.loss_diff_d(x0, xt, logits, t, sched, (k,))
    assert float(loss.value) == pytest.approx(0.0, abs=1e-10)


def test_loss_t1_uniform_logits_is_log_k():
    sched = linear_schedule(50, 1e-5, 2e-2)
    k = 4
    x0 = onehot([3], k)
    x1 = onehot([1], k)
    loss = cat.loss_diff_d(x0, x1, np.zeros((1, k)), 1, sched, (k,))
    assert float(loss.value) == pytest.approx(np.log(k), rel=1e-12)


def test_loss_kl_matches_direct_sum(sched, rng):
    sizes = (3, 2)
    x0 = np.concatenate([onehot([0], 3), onehot([1], 2)], axis=1)
    xt = np.concatenate([onehot([2], 3), onehot([0], 2)], axis=1)
    logits = rng.standard_normal((1, 5))
    t = 15
    loss = float(cat.loss_diff_d(x0, xt, logits, t, sched, sizes).value)
    q = cat.posterior_cat(xt, x0, t, sched, sizes)
    p = cat.reverse_dist_cat(xt, logits, t, sched, sizes)
    direct = float((q * (np.log(q) - np.log(p))).sum())
    assert loss == pytest.approx(direct, abs=1e-12)


def test_loss_kl_nonnegative_randomized(sched):
    rng = np.random.default_rng(21)
    sizes = (2, 5)
    for _ in range(200):
        x0 = np.concatenate([onehot([rng.integers(2)], 2),
                             onehot([rng.integers(5)], 5)], axis=1)
        xt = np.concatenate([onehot([rng.integers(2)], 2),
                             onehot([rng.integers(5)], 5)], axis=1)
        t = int(rng.integers(2, 51))
        loss = cat.loss_diff_d(x0, xt, rng.standard_normal((1, 7)) * 3, t, sched, sizes)
        assert float(loss.value) >= -1e-12


def test_loss_batch_mean(sched, rng):
    sizes = (3,)
    x0 = onehot([0, 1], 3)
    xt = onehot([2, 2], 3)
    logits = rng.standard_normal((2, 3))
    t = 9
    batch = float(cat.loss_diff_d(x0, xt, logits, t, sched, sizes).value)
    singles = [
        float(cat.loss_diff_d(x0[i:i + 1], xt[i:i + 1], logits[i:i + 1],
                              t, sched, sizes).value)
        for i in range(2)
    ]
    assert batch == pytest.approx(np.mean(singles), rel=1e-12)


def test_loss_gradient_matches_central_differences(rng, sched):
    sizes = (2, 3)
    net = tiny_net(rng, in_dim=5, cond_dim=2, out_dim=5)
    x0 = np.concatenate([onehot([0, 1], 2), onehot([2, 0], 3)], axis=1)
    xt = np.concatenate([onehot([1, 1], 2), onehot([0, 2], 3)], axis=1)
    cond = rng.standard_normal((2, 2))

    for t in (1, 12):
        def build():
            logits = net.forward(xt, cond, t)
            return cat.loss_diff_d(x0, xt, logits, t, sched, sizes)

        ok, total = fd_agreement(build, net.params())
        assert ok / total >= 0.99, t


def test_loss_per_row_timesteps_matches_split(sched, rng):
    sizes = (3,)
    x0 = onehot([0, 1, 2], 3)
    xt = onehot([1, 0, 0], 3)
    logits_arr = rng.standard_normal((3, 3))
    t = np.array([1, 7, 30])
    mixed = float(cat.loss_diff_d(x0, xt, nn.as_var(logits_arr), t, sched, sizes).value)
    parts = [
        float(cat.loss_diff_d(x0[i:i + 1], xt[i:i + 1], logits_arr[i:i + 1],
                              int(t[i]), sched, sizes).value)
        for i in range(3)
    ]
    assert mixed == pytest.approx(np.mean(parts), rel=1e-12)


def test_prior_term_small_and_finite(sched):
    x0 = np.concatenate([onehot([0, 1], 2), onehot([3, 2], 5)], axis=1)
    v = cat.prior_kl(x0, sched, (2, 5))
    assert np.isfinite(v)
    assert v >= 0.0
    assert v < 1.0  # the chain has largely mixed by the final step
