"""Chunk-token mixer network with adaLN-Zero conditioning.

The denoiser maps an H x A action chunk plus conditioning (observation
vector and one flow timestep per token) to an H x A velocity field. Blocks
alternate token mixing and channel mixing; each branch is wrapped in
shift/scale/gate modulation predicted from the conditioning, with the
modulation and final projections zero-initialized so the freshly built
network outputs exactly zero.

Batched calls flatten samples into rows: chunks as (B*H, A), conditioning
observations as (B, obs_dim), timesteps as (B*H,).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .tensor import Tensor2


@dataclass(frozen=True)
class MixerConfig:
    num_tokens: int
    act_dim: int
    obs_dim: int
    channel_dim: int = 64
    channel_hidden: int = 128
    token_hidden: int = 32
    num_blocks: int = 2
    cond_dim: int = 64
    per_token_cond: bool = True

    def __post_init__(self):
        if self.cond_dim % 2:
            raise ValueError("cond_dim must be even for the sinusoidal embedding")


def sincos_embed(values, dim):
    """Sinusoidal features of shape (len(values), dim) for values in [0, 1]."""
    values = np.asarray(values, dtype=np.float64)
    half = dim // 2
    if half > 1:
        freqs = np.power(1000.0, np.arange(half) / (half - 1))
    else:
        freqs = np.ones(1)
    angles = values[:, None] * freqs[None, :]
    return np.ascontiguousarray(np.concatenate([np.sin(angles), np.cos(angles)], axis=1))


def _trunc_normal(rng, shape, fan_in):
    std = 1.0 / np.sqrt(fan_in)
    return np.clip(rng.standard_normal(shape), -2.0, 2.0) * std


class MixerNet:
    """Parameter container plus the forward pass."""

    def __init__(self, cfg, rng):
        self.cfg = cfg
        self.params = {}
        c, ch, th, cd = cfg.channel_dim, cfg.channel_hidden, cfg.token_hidden, cfg.cond_dim
        h, a, od = cfg.num_tokens, cfg.act_dim, cfg.obs_dim

        def p(name, arr):
            self.params[name] = Tensor2(arr)

        p("w_obs1", _trunc_normal(rng, (od, cd), od))
        p("b_obs1", np.zeros((1, cd)))
        p("w_obs2", _trunc_normal(rng, (cd, cd), cd))
        p("b_obs2", np.zeros((1, cd)))
        p("w_in", _trunc_normal(rng, (a, c), a))
        p("b_in", np.zeros((1, c)))
        for i in range(cfg.num_blocks):
            p(f"w_mod{i}", np.zeros((cd, 6 * c)))
            p(f"b_mod{i}", np.zeros((1, 6 * c)))
            p(f"w_tok1_{i}", _trunc_normal(rng, (h, th), h))
            p(f"b_tok1_{i}", np.zeros((1, th)))
            p(f"w_tok2_{i}", _trunc_normal(rng, (th, h), th))
            p(f"b_tok2_{i}", np.zeros((1, h)))
            p(f"w_ch1_{i}", _trunc_normal(rng, (c, ch), c))
            p(f"b_ch1_{i}", np.zeros((1, ch)))
            p(f"w_ch2_{i}", _trunc_normal(rng, (ch, c), ch))
            p(f"b_ch2_{i}", np.zeros((1, c)))
        p("w_modf", np.zeros((cd, 2 * c)))
        p("b_modf", np.zeros((1, 2 * c)))
        p("w_out", np.zeros((c, a)))
        p("b_out", np.zeros((1, a)))

    def num_params(self):
        return sum(t.data.size for t in self.params.values())

    def flat_params(self):
        return np.concatenate([t.data.ravel() for t in self.params.values()])

    def load_flat(self, flat):
        flat = np.asarray(flat, dtype=np.float64)
        if flat.size != self.num_params():
            raise ValueError(f"parameter count mismatch: {flat.size} vs {self.num_params()}")
        at = 0
        for t in self.params.values():
            n = t.data.size
            t.data[...] = flat[at : at + n].reshape(t.data.shape)
            at += n

    def _check_timesteps(self, tau, batch):
        tau = np.asarray(tau, dtype=np.float64).reshape(-1)
        if tau.size != batch * self.cfg.num_tokens:
            raise ValueError(f"expected {batch * self.cfg.num_tokens} timesteps, got {tau.size}")
        if not self.cfg.per_token_cond:
            per = tau.reshape(batch, self.cfg.num_tokens)
            if np.any(per != per[:, :1]):
                raise ValueError("per_token_cond is disabled but timesteps differ within a chunk")
        return tau

    def forward(self, chunk, obs, timesteps, tape=None, batch=1, want_trunk=False):
        """Velocity prediction for a (batch*H, A) chunk.

        chunk may be a Tensor2 (kept as the differentiable leaf) or an
        ndarray. obs is (batch, obs_dim); timesteps is (batch*H,).
        Returns a (batch*H, A) Tensor2, plus the pre-head token
        representations when want_trunk is set.
        """
        cfg = self.cfg
        P = self.params
        c = cfg.channel_dim

        x = chunk if isinstance(chunk, Tensor2) else Tensor2(chunk)
        if x.shape != (batch * cfg.num_tokens, cfg.act_dim):
            raise ValueError(f"chunk shape {x.shape} does not match net {cfg}")
        x.require_finite("chunk")
        obs_t = obs if isinstance(obs, Tensor2) else Tensor2(np.reshape(obs, (batch, cfg.obs_dim)))
        obs_t.require_finite("observation")
        tau = self._check_timesteps(timesteps, batch)
        if not np.all(np.isfinite(tau)):
            raise T.NonFiniteError("non-finite timesteps")

        t_emb = Tensor2(sincos_embed(tau, cfg.cond_dim))
        e = T.gelu(T.add_rowbcast(T.matmul(obs_t, P["w_obs1"], tape), P["b_obs1"], tape), tape)
        e = T.add_rowbcast(T.matmul(e, P["w_obs2"], tape), P["b_obs2"], tape)
        cond = T.add(t_emb, T.repeat_rows(e, cfg.num_tokens, tape), tape)

        x = T.add_rowbcast(T.matmul(x, P["w_in"], tape), P["b_in"], tape)
        for i in range(cfg.num_blocks):
            mod = T.add_rowbcast(T.matmul(cond, P[f"w_mod{i}"], tape), P[f"b_mod{i}"], tape)
            sh_t = T.slice_cols(mod, 0, c, tape)
            sc_t = T.slice_cols(mod, c, 2 * c, tape)
            g_t = T.slice_cols(mod, 2 * c, 3 * c, tape)
            sh_c = T.slice_cols(mod, 3 * c, 4 * c, tape)
            sc_c = T.slice_cols(mod, 4 * c, 5 * c, tape)
            g_c = T.slice_cols(mod, 5 * c, 6 * c, tape)

            y = T.modulate(T.layernorm(x, tape), sc_t, sh_t, tape)
            y = T.batched_transpose(y, batch, tape)
            y = T.gelu(T.add_rowbcast(T.matmul(y, P[f"w_tok1_{i}"], tape), P[f"b_tok1_{i}"], tape), tape)
            y = T.add_rowbcast(T.matmul(y, P[f"w_tok2_{i}"], tape), P[f"b_tok2_{i}"], tape)
            y = T.batched_transpose(y, batch, tape)
            x = T.gated_add(x, g_t, y, tape)

            y = T.modulate(T.layernorm(x, tape), sc_c, sh_c, tape)
            y = T.gelu(T.add_rowbcast(T.matmul(y, P[f"w_ch1_{i}"], tape), P[f"b_ch1_{i}"], tape), tape)
            y = T.add_rowbcast(T.matmul(y, P[f"w_ch2_{i}"], tape), P[f"b_ch2_{i}"], tape)
            x = T.gated_add(x, g_c, y, tape)

        trunk = x
        modf = T.add_rowbcast(T.matmul(cond, P["w_modf"], tape), P["b_modf"], tape)
        y = T.modulate(
            T.layernorm(x, tape),
            T.slice_cols(modf, c, 2 * c, tape),
            T.slice_cols(modf, 0, c, tape),
            tape,
        )
        out = T.add_rowbcast(T.matmul(y, P["w_out"], tape), P["b_out"], tape)
        if want_trunk:
            return out, trunk
        return out


def mixer_forward(net, chunk, obs, timesteps, tape=None):
    """Single-chunk convenience wrapper: (H, A) in, (H, A) velocity out."""
    out = net.forward(chunk, np.reshape(obs, (1, net.cfg.obs_dim)), timesteps, tape=tape, batch=1)
    return out
