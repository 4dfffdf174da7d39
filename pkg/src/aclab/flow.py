"""Flow-matching chunk policy: training and Euler sampling.

Convention: tau=0 is pure noise, tau=1 is data. The interpolant is
A^tau = (1-tau)*eps + tau*A1 and the regression target is A1 - eps.
Prefix-conditioned training holds prefix tokens at the ground-truth chunk
with per-token timestep 1 and masks them out of the loss; sampling with a
prefix pins those rows throughout the Euler walk, so the one sampler
serves every training mode.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, replace

import numpy as np

from . import checkpoint as ckpt
from .errors import NumericalFailure
from .mixer import MixerConfig, MixerNet
from .optim import AdamW, AdamWConfig
from .seeding import rng_for
from .tensor import Tape

log = logging.getLogger(__name__)

MODES = ("standard", "ttrtc", "vlash")


@dataclass
class FlowPolicy:
    net: MixerNet
    H: int
    A: int
    N_s: int
    obs_dim: int
    state_dim: int
    mode: str = "standard"
    d_max: int = 0
    lam: float = 0.8
    delta_max: int = 0

    @property
    def cond_width(self):
        return self.obs_dim + (self.state_dim if self.mode == "vlash" else 0)


def make_policy(obs_dim, state_dim, act_dim, H, mode="standard", n_s=5,
                d_max=0, lam=0.8, delta_max=0, channel_dim=64,
                channel_hidden=128, token_hidden=32, num_blocks=2,
                cond_dim=64, per_token_cond=True, seed=0):
    if mode not in MODES:
        raise ValueError(f"unknown training mode {mode!r}")
    if mode == "ttrtc" and not 0 <= d_max < H:
        raise ValueError(f"ttrtc requires 0 <= d_max < H, got d_max={d_max}")
    if mode == "vlash" and delta_max < 0:
        raise ValueError("vlash requires delta_max >= 0")
    cond_width = obs_dim + (state_dim if mode == "vlash" else 0)
    cfg = MixerConfig(
        num_tokens=H, act_dim=act_dim, obs_dim=cond_width,
        channel_dim=channel_dim, channel_hidden=channel_hidden,
        token_hidden=token_hidden, num_blocks=num_blocks, cond_dim=cond_dim,
        per_token_cond=per_token_cond,
    )
    net = MixerNet(cfg, rng_for(seed, "mixer-init", mode))
    return FlowPolicy(net=net, H=H, A=act_dim, N_s=n_s, obs_dim=obs_dim,
                      state_dim=state_dim, mode=mode, d_max=d_max, lam=lam,
                      delta_max=delta_max)


def clone_policy(policy, mode=None, d_max=None, lam=None, delta_max=None):
    """Deep-copy a policy, optionally switching mode fields.

    Used to start prefix-conditioned fine-tuning from a standard
    checkpoint; the conditioning width must be unchanged, so a switch to
    vlash mode is only possible when state_dim is 0.
    """
    out = replace(policy)
    if mode is not None:
        out.mode = mode
    if d_max is not None:
        out.d_max = d_max
    if lam is not None:
        out.lam = lam
    if delta_max is not None:
        out.delta_max = delta_max
    if out.cond_width != policy.net.cfg.obs_dim:
        raise ValueError("mode switch would change the conditioning width")
    net = MixerNet(policy.net.cfg, rng_for(0, "clone"))
    net.load_flat(policy.net.flat_params())
    out.net = net
    return out


def sample_delay(d_max, lam, rng):
    """One draw from p(d) proportional to lam**d on {0..d_max}."""
    return int(sample_delays(1, d_max, lam, rng)[0])


def sample_delays(n, d_max, lam, rng):
    if d_max < 0 or lam <= 0:
        raise ValueError("need d_max >= 0 and lam > 0")
    if d_max == 0:
        return np.zeros(n, dtype=np.int64)
    if lam == 1.0:
        return rng.integers(0, d_max + 1, size=n)
    w = lam ** np.arange(d_max + 1)
    cdf = np.cumsum(w / w.sum())
    return np.searchsorted(cdf, rng.random(n), side="right").astype(np.int64)


def delay_pmf(d_max, lam):
    """Exact probabilities of the truncated-exponential delay distribution."""
    if lam == 1.0:
        return np.full(d_max + 1, 1.0 / (d_max + 1))
    w = lam ** np.arange(d_max + 1)
    return w / w.sum()


@dataclass
class TrainBatch:
    cond: np.ndarray  # (B, cond_width)
    targets: np.ndarray  # (B, H, A)
    eps: np.ndarray  # (B, H, A)
    taus: np.ndarray  # (B,)
    delays: np.ndarray  # (B,) prefix lengths; zeros outside ttrtc


def make_train_batch(policy, ds, idx, rng):
    """Assemble a TrainBatch for the policy's training mode.

    Draw order is fixed (shift/delay, tau, eps) so runs are reproducible.
    """
    b = len(idx)
    h, a = policy.H, policy.A
    obs = ds.obs[idx]
    if policy.mode == "vlash":
        deltas = rng.integers(0, policy.delta_max + 1, size=b)
        states = np.empty((b, ds.state_dim))
        targets = np.empty((b, h, a))
        for j, (i, dlt) in enumerate(zip(idx, deltas)):
            states[j] = ds.state_at(i, int(dlt))
            targets[j] = ds.chunk_at(i, int(dlt))
        cond = np.concatenate([obs, states], axis=1)
        delays = np.zeros(b, dtype=np.int64)
    else:
        cond = obs
        targets = ds.actions[idx, : h]
        if policy.mode == "ttrtc":
            delays = sample_delays(b, policy.d_max, policy.lam, rng)
        else:
            delays = np.zeros(b, dtype=np.int64)
    taus = rng.random(b)
    eps = rng.standard_normal((b, h, a))
    return TrainBatch(cond=cond, targets=np.ascontiguousarray(targets),
                      eps=eps, taus=taus, delays=delays)


def fm_loss(policy, batch):
    """Masked flow-matching loss and parameter gradients for one batch."""
    b, h, a = batch.targets.shape
    if np.any(batch.delays >= h):
        raise ValueError("prefix delay must be smaller than the chunk size")
    tvec = np.repeat(batch.taus[:, None], h, axis=1)
    mask = np.ones((b, h))
    for j, d in enumerate(batch.delays):
        if d > 0:
            tvec[j, :d] = 1.0
            mask[j, :d] = 0.0
    interp = (1.0 - tvec)[..., None] * batch.eps + tvec[..., None] * batch.targets
    tape = Tape()
    out = policy.net.forward(interp.reshape(b * h, a), batch.cond,
                             tvec.reshape(-1), tape=tape, batch=b)
    target_v = (batch.targets - batch.eps).reshape(b * h, a)
    diff = (out.data - target_v) * mask.reshape(-1, 1)
    n_unmasked = mask.sum() * a
    with np.errstate(over="ignore", invalid="ignore"):
        loss = float(np.sum(diff * diff) / n_unmasked)
    grads = tape.backward({out: 2.0 * diff / n_unmasked})
    return loss, {name: grads.get(t, np.zeros_like(t.data))
                  for name, t in policy.net.params.items()}


def euler_sample(policy, cond_vec, rng, prefix=None, want_trunk=False):
    """Sample one H x A chunk with N_s uniform Euler steps.

    cond_vec is the full conditioning vector (observation, plus the state
    estimate for shifted-state policies). With a prefix (Y, committed
    actions), those rows are pinned to Y with per-token timestep 1 for the
    whole walk, so they are returned exactly. want_trunk additionally
    returns the final step's pre-head token features.
    """
    h, a, n = policy.H, policy.A, policy.N_s
    d = 0
    if prefix is not None:
        y = np.asarray(prefix, dtype=np.float64).reshape(-1, a)
        d = y.shape[0]
        if d >= h:
            raise ValueError(f"prefix length {d} must be < chunk size {h}")
    cond = np.asarray(cond_vec, dtype=np.float64).reshape(1, -1)
    cur = rng.standard_normal((h, a))
    tvec = np.empty(h)
    trunk = None
    if d:
        cur[:d] = y
    for k in range(n):
        tvec[:] = k / n
        if d:
            tvec[:d] = 1.0
        v, trunk_t = policy.net.forward(cur, cond, tvec, want_trunk=True)
        cur = cur + v.data / n
        if d:
            cur[:d] = y
        trunk = trunk_t.data
    if not np.all(np.isfinite(cur)):
        raise NumericalFailure("sampler produced non-finite actions")
    if want_trunk:
        return cur, trunk
    return cur


@dataclass
class TrainConfig:
    epochs: int = 20
    batch_size: int = 256
    lr: float = 3e-4
    weight_decay: float = 1e-2
    grad_clip_norm: float = 10.0
    warmup_steps: int = 100
    checkpoint_every: int = 0
    adam_betas: tuple = (0.9, 0.999)


def train(policy, ds, hp, seed, checkpoint_cb=None):
    """Train in place; returns the per-epoch mean loss curve.

    Deterministic given (policy params, dataset, hp, seed). Raises
    NumericalFailure if the loss diverges.
    """
    if ds.H < policy.H:
        raise ValueError(f"dataset chunks ({ds.H}) shorter than policy chunks ({policy.H})")
    if policy.mode == "vlash" and ds.delta_max < policy.delta_max:
        raise ValueError(
            f"vlash needs stored future states up to {policy.delta_max}, dataset has {ds.delta_max}")
    if policy.cond_width != policy.net.cfg.obs_dim:
        raise ValueError("policy conditioning width does not match its network")
    rng = rng_for(seed, "train", policy.mode, policy.d_max, policy.delta_max)
    opt = AdamW(policy.net.params, AdamWConfig(
        lr=hp.lr, beta1=hp.adam_betas[0], beta2=hp.adam_betas[1],
        weight_decay=hp.weight_decay, grad_clip_norm=hp.grad_clip_norm,
        warmup_steps=hp.warmup_steps))
    n = len(ds)
    curve = []
    for epoch in range(hp.epochs):
        order = rng.permutation(n)
        losses = []
        for lo in range(0, n, hp.batch_size):
            idx = order[lo : lo + hp.batch_size]
            batch = make_train_batch(policy, ds, idx, rng)
            with np.errstate(over="ignore", invalid="ignore"):
                loss, grads = fm_loss(policy, batch)
            if not np.isfinite(loss):
                raise NumericalFailure(
                    f"training diverged: loss={loss} at epoch {epoch} step {lo // hp.batch_size}")
            opt.step(grads)
            losses.append(loss)
        mean_loss = float(np.mean(losses)) if losses else float("nan")
        curve.append((epoch, mean_loss))
        log.info("epoch %d mean loss %.6f", epoch, mean_loss)
        if checkpoint_cb and hp.checkpoint_every and (epoch + 1) % hp.checkpoint_every == 0:
            checkpoint_cb(epoch, policy)
    return curve


def write_loss_curve(curve, path):
    with open(path, "w", encoding="utf-8") as f:
        f.write("epoch,mean_loss\n")
        for epoch, loss in curve:
            f.write(f"{epoch},{loss!r}\n")


def save_policy(policy, path):
    cfg = policy.net.cfg
    meta = {
        "H": policy.H, "A": policy.A, "N_s": policy.N_s,
        "obs_dim": policy.obs_dim, "state_dim": policy.state_dim,
        "mode": policy.mode, "d_max": policy.d_max, "lam": policy.lam,
        "delta_max": policy.delta_max,
        "mixer": {
            "num_tokens": cfg.num_tokens, "act_dim": cfg.act_dim,
            "obs_dim": cfg.obs_dim, "channel_dim": cfg.channel_dim,
            "channel_hidden": cfg.channel_hidden, "token_hidden": cfg.token_hidden,
            "num_blocks": cfg.num_blocks, "cond_dim": cfg.cond_dim,
            "per_token_cond": cfg.per_token_cond,
        },
    }
    ckpt.save_checkpoint(path, "flow_policy", meta, policy.net.flat_params())


def load_policy(path):
    kind, meta, flat = ckpt.load_checkpoint(path)
    if kind != "flow_policy":
        raise ValueError(f"{path}: expected a flow_policy checkpoint, got {kind}")
    cfg = MixerConfig(**meta["mixer"])
    net = MixerNet(cfg, rng_for(0, "load"))
    net.load_flat(flat)
    return FlowPolicy(net=net, H=meta["H"], A=meta["A"], N_s=meta["N_s"],
                      obs_dim=meta["obs_dim"], state_dim=meta["state_dim"],
                      mode=meta["mode"], d_max=meta["d_max"], lam=meta["lam"],
                      delta_max=meta["delta_max"])
