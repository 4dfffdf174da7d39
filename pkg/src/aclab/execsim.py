"""Asynchronous execution state machine.

Logical-time simulation of a fixed-period control loop where chunk
inference takes d control steps. Two modes:

* pipelined: observation for chunk k+1 is captured s steps after chunk k's
  capture; the new chunk arrives d steps later and starts executing at
  index d (its first d entries cover already-elapsed steps). The actions
  executed during the inference window are exactly the prefix handed to
  the generator. The very first chunk is computed before the clock starts
  (zero delay) and is active at wall step 0.
* stale_feed: every s steps the generator sees the observation from
  max(0, now-d) and the next s actions are the new chunk's indices [0, s).

Generation happens at arrival time in simulation order, which lets oracle
variants read the true arrival-time state; the committed prefix is fixed
at capture time either way.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .methods import InferenceRequest
from .seeding import rng_for


@dataclass(frozen=True)
class AsyncConfig:
    d: int
    s: int
    mode: str = "pipelined"
    H: int = 16
    idle_bootstrap: bool = False  # alternative start: idle for d steps instead

    def validate(self):
        if self.mode == "pipelined":
            if self.s < 1 or self.d < 0:
                raise ValueError(f"need s >= 1 and d >= 0, got s={self.s}, d={self.d}")
            if self.d >= 1 and self.s < self.d:
                raise ValueError(f"pipelined mode needs s >= d, got s={self.s}, d={self.d}")
            if self.s + self.d > self.H:
                raise ValueError(f"pipelined mode needs s + d <= H, got {self.s}+{self.d} > {self.H}")
        elif self.mode == "stale_feed":
            if not 1 <= self.s <= self.H:
                raise ValueError(f"stale_feed mode needs 1 <= s <= H, got s={self.s}")
            if self.d < 0:
                raise ValueError("d must be >= 0")
        else:
            raise ValueError(f"unknown mode {self.mode!r}")
        return self


@dataclass
class ChunkSlot:
    chunk: np.ndarray
    trunk: np.ndarray | None
    capture_step: int
    arrival_step: int
    index: int

    def action_at(self, wall):
        return self.chunk[wall - self.capture_step]


@dataclass
class StepRecord:
    wall: int
    chunk_id: int
    idx_in_chunk: int
    action: np.ndarray
    state: np.ndarray
    solved: bool


@dataclass
class EpisodeTrace:
    steps: list = field(default_factory=list)
    solved: bool = False
    steps_to_solve: int | None = None
    chunks_generated: int = 0

    def __len__(self):
        return len(self.steps)

    def executed_actions(self):
        return np.asarray([r.action for r in self.steps])

    def to_csv(self, path):
        with open(path, "w", encoding="utf-8") as f:
            n_a = self.steps[0].action.size if self.steps else 0
            n_s = self.steps[0].state.size if self.steps else 0
            cols = ["step", "chunk_id", "idx_in_chunk"]
            cols += [f"action{i}" for i in range(n_a)]
            cols += [f"state{i}" for i in range(n_s)]
            cols.append("solved")
            f.write(",".join(cols) + "\n")
            for r in self.steps:
                vals = [str(r.wall), str(r.chunk_id), str(r.idx_in_chunk)]
                vals += [repr(float(x)) for x in r.action]
                vals += [repr(float(x)) for x in r.state]
                vals.append("1" if r.solved else "0")
                f.write(",".join(vals) + "\n")


def run_episode(env, generator, cfg, corrector=None, seed=0, counter=None):
    """Run one episode under the asynchronous schedule; returns its trace.

    env must be freshly constructed or cloned; it is reset here from a
    seed-derived stream. The corrector, when present, adjusts every
    executed action using the current observation and the action's
    position within its chunk.
    """
    cfg.validate()
    rng_env = rng_for(seed, "env")
    rng_gen = rng_for(seed, "gen")
    env.reset(rng_env)
    if cfg.mode == "pipelined":
        return _run_pipelined(env, generator, cfg, corrector, rng_gen, counter)
    return _run_stale_feed(env, generator, cfg, corrector, rng_gen, counter)


def _generate(env, generator, req, rng, counter):
    """Generate a chunk and clip it to env limits.

    The slot holds the committed, executable actions, so prefix slices
    match the executed steps bit for bit.
    """
    res = generator.generate(req, rng, counter=counter)
    raw = np.asarray(res.chunk, dtype=np.float64)
    chunk = np.stack([env.clip_action(row) for row in raw])
    return chunk, res.trunk


def _run_pipelined(env, generator, cfg, corrector, rng_gen, counter):
    trace = EpisodeTrace()
    d, s, h = cfg.d, cfg.s, cfg.H
    w = 0
    done = False

    if cfg.idle_bootstrap and d > 0:
        # capture chunk 0 at wall 0, idle while its inference is in flight
        req0 = InferenceRequest(env.observation(), env.proprio(),
                                np.zeros((0, env.act_dim)), 0, 0)
        zero = np.zeros(env.act_dim)
        while w < d and not done:
            _, state, solved, done = env.step(zero)
            trace.steps.append(StepRecord(w, -1, -1, zero.copy(), state, solved))
            w += 1
        req0.true_future_state = env.proprio()
        bootstrap_first_exec = d
    else:
        # default bootstrap: chunk 0 is computed before the clock starts
        req0 = InferenceRequest(env.observation(), env.proprio(),
                                np.zeros((0, env.act_dim)), 0, 0,
                                true_future_state=env.proprio())
        bootstrap_first_exec = 0
    chunk0, trunk0 = _generate(env, generator, req0, rng_gen, counter)
    active = ChunkSlot(chunk0, trunk0, 0, w, 0)
    trace.chunks_generated = 1
    pending = None  # (request, arrival_step)

    while not done:
        # arrival first, then capture: with s == d both land on the same step
        while True:
            if pending is not None and w == pending[1]:
                req, arrival = pending
                req.true_future_state = env.proprio()
                chunk, trunk = _generate(env, generator, req, rng_gen, counter)
                active = ChunkSlot(chunk, trunk, arrival - d, arrival, req.chunk_index)
                trace.chunks_generated += 1
                pending = None
                continue
            if pending is None and w == active.capture_step + s:
                y = active.chunk[s : s + d].copy()
                req = InferenceRequest(env.observation(), env.proprio(), y, d,
                                       active.index + 1)
                pending = (req, w + d)
                continue
            break
        idx = w - active.capture_step
        base = active.chunk[idx]
        if corrector is not None:
            first_exec = d if active.index > 0 else bootstrap_first_exec
            trunk_row = active.trunk[idx] if active.trunk is not None else None
            base = corrector.correct(env.observation(), base, idx, first_exec, h,
                                     trunk_row=trunk_row, counter=counter)
        action = env.clip_action(base)
        _, state, solved, done = env.step(action)
        trace.steps.append(StepRecord(w, active.index, idx, action, state, solved))
        w += 1
    trace.solved = env.solved
    if trace.solved:
        trace.steps_to_solve = len(trace.steps)
    return trace


def _run_stale_feed(env, generator, cfg, corrector, rng_gen, counter):
    trace = EpisodeTrace()
    d, s, h = cfg.d, cfg.s, cfg.H
    obs_hist = [env.observation()]
    state_hist = [env.proprio()]
    executed = []

    active = None
    w = 0
    done = False
    while not done:
        if w % s == 0:
            capture = max(0, w - d)
            d_eff = w - capture
            y = (np.asarray(executed[capture:w]).reshape(d_eff, env.act_dim)
                 if d_eff else np.zeros((0, env.act_dim)))
            req = InferenceRequest(obs_hist[capture], state_hist[capture], y, d_eff,
                                   trace.chunks_generated,
                                   true_future_state=env.proprio())
            chunk, trunk = _generate(env, generator, req, rng_gen, counter)
            active = ChunkSlot(chunk, trunk, w, w, trace.chunks_generated)
            trace.chunks_generated += 1
        idx = w - active.capture_step
        base = active.chunk[idx]
        if corrector is not None:
            trunk_row = active.trunk[idx] if active.trunk is not None else None
            base = corrector.correct(env.observation(), base, idx, 0, h,
                                     trunk_row=trunk_row, counter=counter)
        action = env.clip_action(base)
        _, state, solved, done = env.step(action)
        executed.append(action)
        obs_hist.append(env.observation())
        state_hist.append(env.proprio())
        trace.steps.append(StepRecord(w, active.index, idx, action, state, solved))
        w += 1
    trace.solved = env.solved
    if trace.solved:
        trace.steps_to_solve = len(trace.steps)
    return trace


def wilson_interval(successes, n, z=1.959964):
    """Wilson score interval for a binomial proportion."""
    if n < 1:
        raise ValueError("n must be >= 1")
    if not 0 <= successes <= n:
        raise ValueError(f"successes {successes} outside [0, {n}]")
    p = successes / n
    z2 = z * z
    denom = 1.0 + z2 / n
    center = (p + z2 / (2 * n)) / denom
    margin = z * math.sqrt((p * (1.0 - p) + z2 / (4 * n)) / n) / denom
    return max(0.0, center - margin), min(1.0, center + margin)
