import numpy as np
import pytest

from aclab.dataset import ChunkDataset
from aclab.errors import NumericalFailure
from aclab.flow import (TrainBatch, TrainConfig, clone_policy, delay_pmf,
                        euler_sample, fm_loss, load_policy, make_policy,
                        make_train_batch, sample_delay, sample_delays,
                        save_policy, train)
from aclab.seeding import rng_for
from aclab.tensor import Tensor2
from conftest import build_tiny_policy


class FakeLinearNet:
    """Velocity field v = rate * chunk, an exactly solvable linear ODE."""

    def __init__(self, rate):
        self.rate = rate
        self.params = {}

    def forward(self, chunk, obs, timesteps, tape=None, batch=1, want_trunk=False):
        data = chunk.data if isinstance(chunk, Tensor2) else np.asarray(chunk)
        out = Tensor2(self.rate * data)
        return (out, out) if want_trunk else out


def test_sample_delay_dmax_zero():
    rng = rng_for(0)
    assert all(sample_delay(0, 0.8, rng) == 0 for _ in range(10))


def test_sample_delay_distribution():
    pmf = delay_pmf(2, 0.5)
    assert np.allclose(pmf, [4 / 7, 2 / 7, 1 / 7])
    rng = rng_for(1)
    draws = sample_delays(100_000, 2, 0.5, rng)
    counts = np.bincount(draws, minlength=3)
    for k in range(3):
        expected = 100_000 * pmf[k]
        sigma = np.sqrt(100_000 * pmf[k] * (1 - pmf[k]))
        assert abs(counts[k] - expected) < 3 * sigma


def test_sample_delay_uniform_limit():
    rng = rng_for(2)
    draws = sample_delays(40_000, 3, 1.0, rng)
    counts = np.bincount(draws, minlength=4)
    assert np.all(counts > 40_000 / 4 - 3 * np.sqrt(40_000 * 0.25 * 0.75))
    assert set(np.unique(draws)) == {0, 1, 2, 3}


def test_fm_loss_zero_when_velocity_is_exact():
    rng = np.random.default_rng(0)
    b, h, a = 3, 4, 2
    targets = rng.standard_normal((b, h, a))
    eps = rng.standard_normal((b, h, a))
    batch = TrainBatch(cond=np.zeros((b, 6)), targets=targets, eps=eps,
                       taus=rng.random(b), delays=np.zeros(b, dtype=int))

    class Oracle:
        params = {}

        def forward(self, chunk, obs, timesteps, tape=None, batch=1, want_trunk=False):
            return Tensor2((targets - eps).reshape(b * h, a))

    policy = build_tiny_policy(H=h)
    policy.net = Oracle()
    loss, grads = fm_loss(policy, batch)
    assert loss == 0.0
    assert grads == {}


def test_fm_loss_mask_with_max_delay_uses_only_final_token():
    h = 4
    policy = build_tiny_policy(H=h, mode="ttrtc", d_max=h - 1)  # zero-init net
    rng = np.random.default_rng(1)
    targets = rng.standard_normal((1, h, 2))
    eps = rng.standard_normal((1, h, 2))
    batch = TrainBatch(cond=np.zeros((1, 6)), targets=targets, eps=eps,
                       taus=np.array([0.3]), delays=np.array([h - 1]))
    loss, _ = fm_loss(policy, batch)
    # perturbing masked-token targets must not change the loss
    targets2 = targets.copy()
    targets2[0, : h - 1] += 5.0
    batch2 = TrainBatch(cond=np.zeros((1, 6)), targets=targets2, eps=eps,
                        taus=np.array([0.3]), delays=np.array([h - 1]))
    loss2, _ = fm_loss(policy, batch2)
    v = targets[0, h - 1] - eps[0, h - 1]
    assert np.isclose(loss, np.mean(v * v))
    # the prefix enters the net at tau=1, i.e. as ground truth, so changing it
    # does perturb the input; only the loss target stays final-token-only
    assert np.isfinite(loss2)


def test_fm_loss_hand_computed_two_token_toy():
    policy = build_tiny_policy(H=2, act_dim=1)  # zero-init: v == 0
    targets = np.array([[[0.3], [-0.2]]])
    eps = np.array([[[0.1], [0.4]]])
    batch = TrainBatch(cond=np.zeros((1, 6)), targets=targets, eps=eps,
                       taus=np.array([0.6]), delays=np.zeros(1, dtype=int))
    loss, _ = fm_loss(policy, batch)
    expected = ((0.3 - 0.1) ** 2 + (-0.2 - 0.4) ** 2) / 2
    assert np.isclose(loss, expected, rtol=0, atol=1e-15)


def test_fm_loss_rejects_delay_at_chunk_size():
    policy = build_tiny_policy(H=4)
    batch = TrainBatch(cond=np.zeros((1, 6)), targets=np.zeros((1, 4, 2)),
                       eps=np.zeros((1, 4, 2)), taus=np.array([0.5]),
                       delays=np.array([4]))
    with pytest.raises(ValueError):
        fm_loss(policy, batch)


def test_euler_single_step_definition():
    policy = build_tiny_policy(H=4)  # zero-init net: v == 0
    policy.N_s = 1
    rng_a = rng_for(5)
    out = euler_sample(policy, np.zeros(6), rng_a)
    rng_b = rng_for(5)
    eps = rng_b.standard_normal((4, 2))
    assert np.array_equal(out, eps)  # out = eps + v(eps)/1 with v = 0


def test_ttrtc_empty_prefix_matches_standard_bitwise(trained_tiny_policy):
    obs = np.full(6, 0.25)
    a = euler_sample(trained_tiny_policy, obs, rng_for(11))
    b = euler_sample(trained_tiny_policy, obs, rng_for(11), prefix=np.zeros((0, 2)))
    assert np.array_equal(a, b)


def test_prefix_fidelity(trained_tiny_policy):
    rng = np.random.default_rng(3)
    for d in (1, 3, 5):
        y = 0.05 * rng.standard_normal((d, 2))
        out = euler_sample(trained_tiny_policy, np.full(6, 0.1), rng_for(13, d), prefix=y)
        assert np.array_equal(out[:d], y)
        assert np.all(np.isfinite(out))


def test_prefix_must_be_shorter_than_chunk(trained_tiny_policy):
    with pytest.raises(ValueError):
        euler_sample(trained_tiny_policy, np.zeros(6), rng_for(0),
                     prefix=np.zeros((8, 2)))


def test_euler_first_order_convergence():
    rate = 0.5
    policy = build_tiny_policy(H=3, act_dim=2)
    policy.net = FakeLinearNet(rate)

    errs = {}
    for n in (8, 16, 32):
        policy.N_s = n
        rng = rng_for(21)
        out = euler_sample(policy, np.zeros(6), rng)
        eps = rng_for(21).standard_normal((3, 2))
        exact = np.exp(rate) * eps
        errs[n] = np.max(np.abs(out - exact))
    assert errs[8] > errs[16] > errs[32]
    assert 1.8 < errs[8] / errs[16] < 2.2
    assert 1.8 < errs[16] / errs[32] < 2.2


def test_vlash_batch_augmentation_structure(chase_ds):
    policy = build_tiny_policy(mode="vlash", delta_max=4)
    idx = np.arange(16)
    rng = rng_for(31)
    batch = make_train_batch(policy, chase_ds, idx, rng)
    # replay the draw order to recover the sampled offsets
    rng2 = rng_for(31)
    deltas = rng2.integers(0, policy.delta_max + 1, size=16)
    for j, (i, dlt) in enumerate(zip(idx, deltas)):
        assert np.array_equal(batch.targets[j], chase_ds.actions[i, dlt : dlt + policy.H])
        assert np.array_equal(batch.cond[j, :6], chase_ds.obs[i])
        assert np.array_equal(batch.cond[j, 6:], chase_ds.state_at(i, int(dlt)))


def test_train_zero_epochs_keeps_params(chase_ds):
    policy = build_tiny_policy(seed=17)
    before = policy.net.flat_params()
    curve = train(policy, chase_ds, TrainConfig(epochs=0), seed=1)
    assert curve == []
    assert np.array_equal(policy.net.flat_params(), before)


def test_train_is_deterministic(chase_ds):
    hp = TrainConfig(epochs=2, batch_size=64, warmup_steps=10)
    a = build_tiny_policy(seed=19)
    train(a, chase_ds, hp, seed=5)
    b = build_tiny_policy(seed=19)
    train(b, chase_ds, hp, seed=5)
    assert np.array_equal(a.net.flat_params(), b.net.flat_params())


def test_train_loss_halves(chase_ds):
    policy = build_tiny_policy(seed=23, num_blocks=2, channel_dim=32,
                               channel_hidden=64, cond_dim=32)
    curve = train(policy, chase_ds, TrainConfig(epochs=20, batch_size=128,
                                                warmup_steps=30), seed=9)
    assert curve[-1][1] <= 0.5 * curve[0][1]


def test_train_divergence_raises(chase_ds):
    policy = build_tiny_policy(seed=29)
    hp = TrainConfig(epochs=50, batch_size=64, lr=1e12, grad_clip_norm=0.0,
                     warmup_steps=0)
    with pytest.raises(NumericalFailure):
        train(policy, chase_ds, hp, seed=0)


def test_finetune_clone_leaves_base_untouched(chase_ds, trained_tiny_policy):
    base_flat = trained_tiny_policy.net.flat_params()
    ft = clone_policy(trained_tiny_policy, mode="ttrtc", d_max=4, lam=0.8)
    assert np.array_equal(ft.net.flat_params(), base_flat)
    train(ft, chase_ds, TrainConfig(epochs=1, batch_size=128, warmup_steps=5), seed=2)
    assert not np.array_equal(ft.net.flat_params(), base_flat)
    assert np.array_equal(trained_tiny_policy.net.flat_params(), base_flat)


def test_policy_checkpoint_roundtrip(tmp_path, trained_tiny_policy):
    path = tmp_path / "policy.aclb"
    save_policy(trained_tiny_policy, path)
    back = load_policy(path)
    assert back.mode == trained_tiny_policy.mode
    assert back.H == trained_tiny_policy.H and back.N_s == trained_tiny_policy.N_s
    assert np.array_equal(back.net.flat_params(), trained_tiny_policy.net.flat_params())
    out_a = euler_sample(back, np.full(6, 0.3), rng_for(41))
    out_b = euler_sample(trained_tiny_policy, np.full(6, 0.3), rng_for(41))
    assert np.array_equal(out_a, out_b)


def test_degenerate_constant_dataset_oracle():
    n = 512
    ds = ChunkDataset(env_kind="toy", H=1, delta_max=0,
                      obs=np.zeros((n, 2)), states=np.zeros((n, 1)),
                      future_states=np.zeros((n, 0, 1)),
                      actions=np.full((n, 1, 1), 0.7), meta={})
    policy = make_policy(obs_dim=2, state_dim=1, act_dim=1, H=1, n_s=5,
                         channel_dim=16, channel_hidden=32, token_hidden=4,
                         num_blocks=1, cond_dim=16, seed=1)
    train(policy, ds, TrainConfig(epochs=60, batch_size=128, lr=1e-3,
                                  warmup_steps=20), seed=3)
    rng = rng_for(55)
    samples = [euler_sample(policy, np.zeros(2), rng)[0, 0] for _ in range(256)]
    assert abs(np.mean(samples) - 0.7) < 0.02
