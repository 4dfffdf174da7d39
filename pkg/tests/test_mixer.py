import numpy as np
import pytest

from aclab.mixer import MixerConfig, MixerNet, mixer_forward, sincos_embed
from aclab.seeding import rng_for
from aclab.tensor import FlopsCounter, NonFiniteError, Tape
from helpers import directional_gradcheck


def tiny_cfg(**over):
    base = dict(num_tokens=4, act_dim=2, obs_dim=5, channel_dim=8,
                channel_hidden=16, token_hidden=6, num_blocks=2, cond_dim=8)
    base.update(over)
    return MixerConfig(**base)


def randomized_net(cfg, seed=0):
    """Net with every parameter randomized, including the zero-init ones."""
    net = MixerNet(cfg, rng_for(seed))
    rng = np.random.default_rng(seed + 1)
    for t in net.params.values():
        t.data[...] = 0.1 * rng.standard_normal(t.data.shape)
    return net


def test_zero_init_output_is_exactly_zero():
    net = MixerNet(tiny_cfg(), rng_for(3))
    rng = np.random.default_rng(0)
    for _ in range(3):
        out = mixer_forward(net, rng.standard_normal((4, 2)),
                            rng.standard_normal(5), rng.random(4))
        assert np.all(out.data == 0.0)


def test_uniform_timesteps_match_scalar_conditioning():
    cfg_on = tiny_cfg(per_token_cond=True)
    cfg_off = tiny_cfg(per_token_cond=False)
    net_on = randomized_net(cfg_on, seed=5)
    net_off = MixerNet(cfg_off, rng_for(5))
    for name, t in net_off.params.items():
        t.data[...] = net_on.params[name].data
    rng = np.random.default_rng(2)
    chunk = rng.standard_normal((4, 2))
    obs = rng.standard_normal(5)
    tau = np.full(4, 0.37)
    a = mixer_forward(net_on, chunk, obs, tau)
    b = mixer_forward(net_off, chunk, obs, tau)
    assert np.array_equal(a.data, b.data)


def test_per_token_cond_disabled_rejects_distinct_timesteps():
    net = MixerNet(tiny_cfg(per_token_cond=False), rng_for(1))
    with pytest.raises(ValueError):
        mixer_forward(net, np.zeros((4, 2)), np.zeros(5), np.array([0.1, 0.2, 0.3, 0.4]))


def test_token_timestep_perturbation_is_local_without_token_mixing():
    net = randomized_net(tiny_cfg(), seed=9)
    # cut the token-mixing paths so tokens stay independent
    for i in range(net.cfg.num_blocks):
        net.params[f"w_tok1_{i}"].data[...] = 0.0
        net.params[f"b_tok1_{i}"].data[...] = 0.0
        net.params[f"w_tok2_{i}"].data[...] = 0.0
        net.params[f"b_tok2_{i}"].data[...] = 0.0
    rng = np.random.default_rng(4)
    chunk = rng.standard_normal((4, 2))
    obs = rng.standard_normal(5)
    tau = rng.random(4)
    base = mixer_forward(net, chunk, obs, tau).data
    perturbed = tau.copy()
    perturbed[2] += 0.21
    out = mixer_forward(net, chunk, obs, perturbed).data
    changed = np.any(out != base, axis=1)
    assert changed[2]
    assert not changed[0] and not changed[1] and not changed[3]


def test_token_timestep_perturbation_changes_full_net_output():
    net = randomized_net(tiny_cfg(), seed=11)
    rng = np.random.default_rng(6)
    chunk = rng.standard_normal((4, 2))
    obs = rng.standard_normal(5)
    tau = rng.random(4)
    base = mixer_forward(net, chunk, obs, tau).data
    perturbed = tau.copy()
    perturbed[1] += 0.15
    out = mixer_forward(net, chunk, obs, perturbed).data
    assert np.any(out != base)


def test_gradcheck_full_network():
    net = randomized_net(tiny_cfg(), seed=21)
    rng = np.random.default_rng(8)
    chunk = rng.standard_normal((4, 2))
    obs = rng.standard_normal((1, 5))
    tau = rng.random(4)
    g = rng.standard_normal((4, 2))

    tape = Tape()
    out = net.forward(chunk, obs, tau, tape=tape)
    grads = tape.backward({out: g})

    names = list(net.params)
    arrays = [net.params[k].data for k in names]
    glist = [grads.get(net.params[k], np.zeros_like(net.params[k].data)) for k in names]

    def scalar():
        return float(np.sum(g * net.forward(chunk, obs, tau).data))

    worst = directional_gradcheck(scalar, arrays, glist, rng, n_dirs=20, eps=1e-5, tol=1e-5)
    assert worst < 1e-5


def test_block_flops_scale_linearly():
    rng = np.random.default_rng(1)
    chunk = rng.standard_normal((4, 2))
    obs = rng.standard_normal((1, 5))
    tau = rng.random(4)

    def fwd_flops(num_blocks):
        net = MixerNet(tiny_cfg(num_blocks=num_blocks), rng_for(2))
        counter = FlopsCounter()
        with counter.scope("fwd"):
            net.forward(chunk, obs, tau)
        return counter.forward_flops

    f0, f1, f2, f3 = (fwd_flops(k) for k in range(4))
    per_block = f1 - f0
    assert per_block > 0
    assert f2 - f1 == per_block
    assert f3 - f2 == per_block


def test_forward_deterministic_and_seeded_init():
    a = MixerNet(tiny_cfg(), rng_for(77))
    b = MixerNet(tiny_cfg(), rng_for(77))
    assert np.array_equal(a.flat_params(), b.flat_params())
    rng = np.random.default_rng(0)
    chunk = rng.standard_normal((4, 2))
    obs = rng.standard_normal(5)
    tau = rng.random(4)
    o1 = mixer_forward(a, chunk, obs, tau).data
    o2 = mixer_forward(a, chunk, obs, tau).data
    assert np.array_equal(o1, o2)


def test_batched_forward_matches_per_sample():
    net = randomized_net(tiny_cfg(), seed=31)
    rng = np.random.default_rng(12)
    b = 3
    chunks = rng.standard_normal((b, 4, 2))
    obs = rng.standard_normal((b, 5))
    taus = rng.random((b, 4))
    batched = net.forward(chunks.reshape(b * 4, 2), obs, taus.reshape(-1), batch=b).data
    for i in range(b):
        single = net.forward(chunks[i], obs[i : i + 1], taus[i]).data
        assert np.allclose(batched[i * 4 : (i + 1) * 4], single, rtol=1e-12, atol=1e-14)


def test_non_finite_input_rejected():
    net = MixerNet(tiny_cfg(), rng_for(0))
    bad = np.zeros((4, 2))
    bad[0, 0] = np.inf
    with pytest.raises(NonFiniteError):
        mixer_forward(net, bad, np.zeros(5), np.zeros(4))


def test_flat_roundtrip():
    net = randomized_net(tiny_cfg(), seed=13)
    flat = net.flat_params()
    other = MixerNet(tiny_cfg(), rng_for(99))
    other.load_flat(flat)
    assert np.array_equal(other.flat_params(), flat)


def test_sincos_embed_shape_and_bounds():
    e = sincos_embed(np.linspace(0, 1, 7), 10)
    assert e.shape == (7, 10)
    assert np.all(np.abs(e) <= 1.0)
