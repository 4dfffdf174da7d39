"""The asynchronous-inference methods as uniform chunk generators.

Every generator consumes an InferenceRequest and returns a GenResult; the
simulator never branches on method identity. Methods:

* naive: sample the policy on the captured observation, ignore the prefix.
* it_rtc: inference-time pseudoinverse guidance that inpaints the committed
  prefix onto the chunk during denoising (one VJP backward per Euler step).
* tt_rtc: prefix-conditioned policy; the prefix rows are pinned during
  sampling at zero extra cost.
* vlash: condition on the proprioceptive state rolled forward over the
  committed actions (or the simulator's true arrival state in oracle mode).
* a2c2: a per-step residual head over a frozen base, applied by the
  simulator at every executed action.
"""

from __future__ import annotations

import contextlib
import logging
import math
from dataclasses import dataclass, field

import numpy as np

from . import checkpoint as ckpt
from .envs import rollforward
from .errors import NumericalFailure
from .flow import euler_sample
from .mixer import _trunc_normal
from .optim import AdamW, AdamWConfig
from .seeding import rng_for
from .tensor import (SCOPE_DENOISE, SCOPE_RESIDUAL, Tape, Tensor2, add_rowbcast,
                     gelu, matmul, scale_add)

log = logging.getLogger(__name__)


@dataclass
class InferenceRequest:
    observation: np.ndarray  # captured (possibly stale) observation
    state: np.ndarray  # proprioceptive state at capture
    prefix: np.ndarray  # (d, A) committed actions over the overlap window
    delay: int
    chunk_index: int
    true_future_state: np.ndarray | None = None  # filled at arrival time


@dataclass
class GenResult:
    chunk: np.ndarray  # (H, A)
    trunk: np.ndarray | None = None  # (H, C) pre-head token features


def _scope(counter, label):
    return counter.scope(label) if counter is not None else contextlib.nullcontext()


def _check_prefix(req):
    y = np.asarray(req.prefix, dtype=np.float64)
    if y.size == 0:
        y = y.reshape(0, 0)
    if y.shape[0] != req.delay:
        raise ValueError(f"prefix length {y.shape[0]} != delay {req.delay}")
    return y


# --- soft mask and guidance --------------------------------------------------


def soft_mask(d, h):
    """Exponentially decaying blend weights over chunk positions.

    W_i = c_i * (e^{c_i} - 1) / (e - 1) with c_i = max(0, 1 - i/d); the
    fully frozen position gets weight 1, positions at or past d get 0.
    """
    if not 0 <= d <= h:
        raise ValueError(f"need 0 <= d <= H, got d={d}, H={h}")
    if d == 0:
        return np.zeros(h)
    c = np.maximum(0.0, 1.0 - np.arange(h, dtype=np.float64) / d)
    return c * np.expm1(c) / np.expm1(1.0)


@dataclass
class GuidanceConfig:
    beta: float = 5.0
    r_schedule: str = "pigdm"  # pigdm | unit
    clip_tau0_to_beta: bool = False

    def r_squared(self, tau):
        if self.r_schedule == "pigdm":
            return (1.0 - tau) ** 2 / ((1.0 - tau) ** 2 + tau**2)
        if self.r_schedule == "unit":
            return 1.0
        raise ValueError(f"unknown r_schedule {self.r_schedule!r}")

    def coefficient(self, tau):
        """min(beta, (1-tau)/(tau r^2)); zero at tau=0 unless clipping is on."""
        if self.beta <= 0:
            return 0.0
        if tau == 0.0:
            return self.beta if self.clip_tau0_to_beta else 0.0
        return min(self.beta, (1.0 - tau) / (tau * self.r_squared(tau)))


def itrtc_generate(policy, req, cfg, rng, counter=None):
    """Guided Euler sampling that inpaints the committed prefix.

    Uses an unmodified standard policy. Each step forms the denoised
    estimate A_hat = A^tau + (1-tau) v and adds
    coef * (Y - A_hat)^T diag(W) dA_hat/dA^tau to the velocity, where the
    VJP runs through the full denoiser. Forward plus backward are recorded
    every step, so the denoise-loop scope costs exactly 3x the naive loop.
    """
    y = _check_prefix(req)
    d = req.delay
    h, a, n = policy.H, policy.A, policy.N_s
    if d >= h:
        raise ValueError(f"prefix length {d} must be < chunk size {h}")
    if d == 0 or cfg.beta <= 0.0:
        with _scope(counter, SCOPE_DENOISE):
            chunk, trunk = euler_sample(policy, req.observation, rng, want_trunk=True)
        return GenResult(chunk, trunk)

    w_col = soft_mask(d, h)[:, None]
    y_full = np.zeros((h, a))
    y_full[:d] = y
    cond = np.asarray(req.observation, dtype=np.float64).reshape(1, -1)
    with _scope(counter, SCOPE_DENOISE):
        cur = rng.standard_normal((h, a))
        tvec = np.empty(h)
        trunk = None
        for k in range(n):
            tau = k / n
            tvec[:] = tau
            tape = Tape()
            leaf = Tensor2(cur)
            v, trunk_t = policy.net.forward(leaf, cond, tvec, tape=tape, want_trunk=True)
            a_hat = scale_add(leaf, v, 1.0 - tau, tape)
            seed = w_col * (y_full - a_hat.data)
            grads = tape.backward({a_hat: seed})
            coef = cfg.coefficient(tau)
            v_guided = v.data if coef == 0.0 else v.data + coef * grads[leaf]
            cur = cur + v_guided / n
            trunk = trunk_t.data
    if not np.all(np.isfinite(cur)):
        raise NumericalFailure("guided sampler produced non-finite actions")
    return GenResult(cur, trunk)


def ttrtc_generate(policy, req, rng, counter=None):
    """Prefix-pinned sampling with a prefix-conditioned policy."""
    if policy.mode != "ttrtc":
        raise ValueError("ttrtc_generate requires a policy trained in ttrtc mode")
    y = _check_prefix(req)
    with _scope(counter, SCOPE_DENOISE):
        chunk, trunk = euler_sample(policy, req.observation, rng,
                                    prefix=y if req.delay > 0 else None, want_trunk=True)
    return GenResult(chunk, trunk)


def vlash_generate(policy, req, env, rng, model_mismatch=1.0, oracle_mode=False,
                   counter=None):
    """Sampling conditioned on the rolled-forward proprioceptive state."""
    if policy.mode != "vlash":
        raise ValueError("vlash_generate requires a policy trained in vlash mode")
    y = _check_prefix(req)
    if oracle_mode:
        if req.true_future_state is None:
            raise ValueError("oracle mode needs the simulator's arrival-time state")
        s_hat = np.asarray(req.true_future_state, dtype=np.float64)
    else:
        if req.delay > 0 and y.size == 0:
            raise ValueError("missing committed actions for rollforward")
        s_hat = rollforward(env, req.state, y, model_mismatch)
    cond = np.concatenate([np.asarray(req.observation, dtype=np.float64), s_hat])
    with _scope(counter, SCOPE_DENOISE):
        chunk, trunk = euler_sample(policy, cond, rng, want_trunk=True)
    return GenResult(chunk, trunk)


def naive_generate(policy, req, rng, counter=None):
    """Plain sampling on the captured observation; the prefix is ignored."""
    with _scope(counter, SCOPE_DENOISE):
        chunk, trunk = euler_sample(policy, req.observation, rng, want_trunk=True)
    return GenResult(chunk, trunk)


# --- generator objects (picklable, uniform interface) ------------------------


@dataclass
class NaiveGenerator:
    policy: object
    name: str = "naive"

    def generate(self, req, rng, counter=None):
        return naive_generate(self.policy, req, rng, counter)


@dataclass
class ITRTCGenerator:
    policy: object
    cfg: GuidanceConfig = field(default_factory=GuidanceConfig)
    name: str = "it_rtc"

    def generate(self, req, rng, counter=None):
        return itrtc_generate(self.policy, req, self.cfg, rng, counter)


@dataclass
class TTRTCGenerator:
    policy: object
    name: str = "tt_rtc"

    def generate(self, req, rng, counter=None):
        return ttrtc_generate(self.policy, req, rng, counter)


@dataclass
class VLASHGenerator:
    policy: object
    env: object
    model_mismatch: float = 1.0
    oracle_mode: bool = False
    name: str = "vlash"

    def generate(self, req, rng, counter=None):
        return vlash_generate(self.policy, req, self.env, rng,
                              self.model_mismatch, self.oracle_mode, counter)


# --- A2C2 residual correction -------------------------------------------------


class ResidualHead:
    """Small MLP producing per-step action residuals.

    Input: current observation, base action, (sin, cos) time-in-chunk, and
    optionally the base trunk features for that token. The output layer is
    zero-initialized, so an untrained head is an exact identity correction.
    """

    def __init__(self, obs_dim, act_dim, trunk_dim, hidden1=64, hidden2=128, seed=0):
        self.obs_dim = obs_dim
        self.act_dim = act_dim
        self.trunk_dim = trunk_dim
        self.hidden = (hidden1, hidden2)
        in_dim = obs_dim + act_dim + 2 + trunk_dim
        self.in_dim = in_dim
        rng = rng_for(seed, "residual-head")
        self.params = {
            "w1": Tensor2(_trunc_normal(rng, (in_dim, hidden1), in_dim)),
            "b1": Tensor2(np.zeros((1, hidden1))),
            "w2": Tensor2(_trunc_normal(rng, (hidden1, hidden2), hidden1)),
            "b2": Tensor2(np.zeros((1, hidden2))),
            "w3": Tensor2(np.zeros((hidden2, act_dim))),
            "b3": Tensor2(np.zeros((1, act_dim))),
        }

    def forward(self, feats, tape=None):
        p = self.params
        x = feats if isinstance(feats, Tensor2) else Tensor2(feats)
        x = gelu(add_rowbcast(matmul(x, p["w1"], tape), p["b1"], tape), tape)
        x = gelu(add_rowbcast(matmul(x, p["w2"], tape), p["b2"], tape), tape)
        return add_rowbcast(matmul(x, p["w3"], tape), p["b3"], tape)

    def flat_params(self):
        return np.concatenate([t.data.ravel() for t in self.params.values()])

    def load_flat(self, flat):
        at = 0
        for t in self.params.values():
            n = t.data.size
            t.data[...] = np.asarray(flat[at : at + n]).reshape(t.data.shape)
            at += n


def chunk_phase(k, h):
    """Sinusoidal time-in-chunk feature (sin, cos)(2 pi k / H)."""
    ang = 2.0 * math.pi * k / h
    return math.sin(ang), math.cos(ang)


def a2c2_correct(head, current_obs, base_action, k, h, trunk=None, counter=None):
    """Executed action = base + head(obs, base, phase(k), trunk)."""
    if not 0 <= k < h:
        raise ValueError(f"position {k} outside [0, {h})")
    obs = np.asarray(current_obs, dtype=np.float64).reshape(-1)
    base = np.asarray(base_action, dtype=np.float64).reshape(-1)
    parts = [obs, base, np.array(chunk_phase(k, h))]
    if head.trunk_dim:
        if trunk is None:
            raise ValueError("head expects trunk features")
        parts.append(np.asarray(trunk, dtype=np.float64).reshape(-1))
    feats = np.concatenate(parts).reshape(1, -1)
    with _scope(counter, SCOPE_RESIDUAL):
        delta = head.forward(feats)
    return base + delta.data[0]


@dataclass
class A2C2Corrector:
    """Per-step corrector state handed to the simulator."""

    head: ResidualHead
    tau_from_chunk_start: bool = False

    def correct(self, obs, base_action, idx_in_chunk, first_exec_idx, h,
                trunk_row=None, counter=None):
        k = idx_in_chunk if self.tau_from_chunk_start else idx_in_chunk - first_exec_idx
        return a2c2_correct(self.head, obs, base_action, k, h,
                            trunk=trunk_row if self.head.trunk_dim else None,
                            counter=counter)


@dataclass
class A2C2Config:
    episodes: int = 64
    epochs: int = 10
    batch_size: int = 256
    lr: float = 1e-3
    weight_decay: float = 1e-3
    grad_clip_norm: float = 10.0
    warmup_steps: int = 50
    collect_s: int = 0  # 0 means the full chunk size
    use_trunk_features: bool = True
    hidden1: int = 64
    hidden2: int = 128


def a2c2_collect(base_policy, env, expert, cfg, seed):
    """Roll the frozen base synchronously and record residual targets.

    At each step the base chunk position k supplies a_base; the target is
    the expert's (clipped) action at the current state minus a_base.
    Returns (features, targets, positions, base_solve_rate).
    """
    h = base_policy.H
    s = cfg.collect_s or h
    if not 1 <= s <= h:
        raise ValueError(f"collect_s must lie in [1, {h}]")
    feats, targets, ks = [], [], []
    solves = 0
    for ep in range(cfg.episodes):
        rng_env = rng_for(seed, "a2c2-env", env.kind, ep)
        rng_gen = rng_for(seed, "a2c2-gen", env.kind, ep)
        e = env.clone()
        e.reset(rng_env)
        obs = e.observation()
        done = False
        w = 0
        chunk = trunk = None
        while not done:
            if w % s == 0:
                chunk, trunk = euler_sample(base_policy, obs, rng_gen, want_trunk=True)
            k = w % s
            a_base = chunk[k]
            target = e.clip_action(expert.act(obs, e)) - a_base
            row = [obs, a_base, np.array(chunk_phase(k, h))]
            if cfg.use_trunk_features:
                row.append(trunk[k])
            feats.append(np.concatenate([np.asarray(p, dtype=np.float64).reshape(-1) for p in row]))
            targets.append(target)
            ks.append(k)
            obs, _, solved, done = e.step(e.clip_action(a_base))
            w += 1
        solves += int(e.solved)
    rate = solves / cfg.episodes
    return (np.asarray(feats), np.asarray(targets).reshape(len(targets), -1),
            np.asarray(ks, dtype=np.int64), rate)


def a2c2_collect_and_train(base_policy, env, expert, cfg, seed):
    """Full residual pipeline: rollout collection plus L2 regression.

    Aborts when the frozen base solves fewer than 20% of the collection
    episodes, since residual targets from a failing base are degenerate.
    Returns (head, info dict with solve rate, position counts, loss curve).
    """
    feats, targets, ks, rate = a2c2_collect(base_policy, env, expert, cfg, seed)
    if rate < 0.2:
        raise NumericalFailure(
            f"base policy solve rate {rate:.0%} is below 20%; residual data too degenerate")
    trunk_dim = base_policy.net.cfg.channel_dim if cfg.use_trunk_features else 0
    head = ResidualHead(env.obs_dim, env.act_dim, trunk_dim,
                        hidden1=cfg.hidden1, hidden2=cfg.hidden2, seed=seed)
    opt = AdamW(head.params, AdamWConfig(
        lr=cfg.lr, weight_decay=cfg.weight_decay,
        grad_clip_norm=cfg.grad_clip_norm, warmup_steps=cfg.warmup_steps))
    rng = rng_for(seed, "a2c2-train")
    n = feats.shape[0]
    curve = []
    for epoch in range(cfg.epochs):
        order = rng.permutation(n)
        losses = []
        for lo in range(0, n, cfg.batch_size):
            idx = order[lo : lo + cfg.batch_size]
            tape = Tape()
            out = head.forward(feats[idx], tape)
            diff = out.data - targets[idx]
            loss = float(np.mean(diff * diff))
            grads = tape.backward({out: 2.0 * diff / diff.size})
            opt.step({k: grads.get(t, np.zeros_like(t.data))
                      for k, t in head.params.items()})
            losses.append(loss)
        curve.append((epoch, float(np.mean(losses))))
        log.info("a2c2 epoch %d loss %.6f", epoch, curve[-1][1])
    info = {"base_solve_rate": rate,
            "position_counts": np.bincount(ks, minlength=cfg.collect_s or base_policy.H),
            "loss_curve": curve}
    return head, info


def save_head(head, path):
    meta = {"obs_dim": head.obs_dim, "act_dim": head.act_dim,
            "trunk_dim": head.trunk_dim, "hidden": list(head.hidden)}
    ckpt.save_checkpoint(path, "residual_head", meta, head.flat_params())


def load_head(path):
    kind, meta, flat = ckpt.load_checkpoint(path)
    if kind != "residual_head":
        raise ValueError(f"{path}: expected a residual_head checkpoint, got {kind}")
    head = ResidualHead(meta["obs_dim"], meta["act_dim"], meta["trunk_dim"],
                        hidden1=meta["hidden"][0], hidden2=meta["hidden"][1])
    head.load_flat(flat)
    return head
