"""Expert demonstration datasets of action chunks.

Each record holds the observation and proprioceptive state at time t, the
true visited states for the next delta_max steps, and the executed action
stream a_t .. a_{t+H+delta_max-1}. Storing H+delta_max actions lets
offset-augmented training read the chunk starting at any shift
delta <= delta_max without padding.

File layout (little-endian): magic "ACDS1", uint32 header length, UTF-8
JSON header, then fixed-stride float64 records (obs | state | future
states | actions). A human-readable key=value sidecar is written next to
the binary file.
"""

from __future__ import annotations

import json
import logging
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .seeding import rng_for

log = logging.getLogger(__name__)

MAGIC = b"ACDS1"


@dataclass
class ChunkDataset:
    env_kind: str
    H: int
    delta_max: int
    obs: np.ndarray  # (N, obs_dim)
    states: np.ndarray  # (N, state_dim)
    future_states: np.ndarray  # (N, delta_max, state_dim)
    actions: np.ndarray  # (N, H + delta_max, act_dim)
    meta: dict

    def __len__(self):
        return self.obs.shape[0]

    @property
    def obs_dim(self):
        return self.obs.shape[1]

    @property
    def state_dim(self):
        return self.states.shape[1]

    @property
    def act_dim(self):
        return self.actions.shape[2]

    def chunk_at(self, i, delta=0):
        """Target chunk for record i shifted by delta steps."""
        if not 0 <= delta <= self.delta_max:
            raise ValueError(f"delta {delta} outside [0, {self.delta_max}]")
        return self.actions[i, delta : delta + self.H]

    def state_at(self, i, delta=0):
        """True state delta steps after record i's capture time."""
        if delta == 0:
            return self.states[i]
        return self.future_states[i, delta - 1]


def collect_dataset(env, expert, n_episodes, H, delta_max, sigma_e, seed,
                    run_to_horizon=True):
    """Roll the expert with exploration noise and cut sliding windows.

    Episodes run to the full horizon by default so that late windows exist;
    solve statistics are still tracked against the env's solve predicate.
    Stored actions are the executed (noisy, clipped) ones.
    """
    L = env.episode_len
    if H + delta_max > L:
        raise ValueError(f"H + delta_max = {H + delta_max} exceeds episode length {L}")
    obs_rows, state_rows, fut_rows, act_rows = [], [], [], []
    solves = 0
    for ep in range(n_episodes):
        rng = rng_for(seed, env.kind, ep)
        e = env.clone()
        e.reset(rng)
        obs_l = [e.observation()]
        state_l = [e.proprio()]
        acts_l = []
        solved = False
        for _ in range(L):
            raw = expert.act(obs_l[-1], e)
            if sigma_e > 0.0:
                raw = raw + sigma_e * rng.standard_normal(raw.shape)
            a = e.clip_action(raw)
            obs, state, is_solved, done = e.step(a)
            acts_l.append(a)
            obs_l.append(obs)
            state_l.append(state)
            solved = solved or is_solved
            if done and not run_to_horizon:
                break
        solves += int(solved)
        n_steps = len(acts_l)
        acts = np.asarray(acts_l)
        states = np.asarray(state_l)
        obs_arr = np.asarray(obs_l)
        window = H + delta_max
        for t in range(0, n_steps - window + 1):
            obs_rows.append(obs_arr[t])
            state_rows.append(states[t])
            fut_rows.append(states[t + 1 : t + 1 + delta_max])
            act_rows.append(acts[t : t + window])
    solve_rate = solves / n_episodes if n_episodes else 0.0
    if solve_rate < 0.5:
        log.warning("expert solved only %.0f%% of collection episodes", 100 * solve_rate)
    n = len(obs_rows)
    state_dim = env.state_dim
    act_dim = env.act_dim
    ds = ChunkDataset(
        env_kind=env.kind,
        H=H,
        delta_max=delta_max,
        obs=np.asarray(obs_rows).reshape(n, env.obs_dim),
        states=np.asarray(state_rows).reshape(n, state_dim),
        future_states=np.asarray(fut_rows).reshape(n, delta_max, state_dim),
        actions=np.asarray(act_rows).reshape(n, H + delta_max, act_dim),
        meta={
            "seed": int(seed),
            "sigma_e": float(sigma_e),
            "n_episodes": int(n_episodes),
            "expert_solve_rate": solve_rate,
            "run_to_horizon": bool(run_to_horizon),
        },
    )
    return ds


def save_dataset(ds, path):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    n = len(ds)
    header = {
        "env_kind": ds.env_kind,
        "H": ds.H,
        "delta_max": ds.delta_max,
        "obs_dim": ds.obs_dim,
        "state_dim": ds.state_dim,
        "act_dim": ds.act_dim,
        "n_records": n,
        "meta": ds.meta,
    }
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<I", len(blob)))
        f.write(blob)
        for i in range(n):
            rec = np.concatenate([
                ds.obs[i],
                ds.states[i],
                ds.future_states[i].ravel(),
                ds.actions[i].ravel(),
            ]).astype("<f8")
            f.write(rec.tobytes())
    with open(str(path) + ".meta.txt", "w", encoding="utf-8") as f:
        for key in ("env_kind", "H", "delta_max", "obs_dim", "state_dim", "act_dim", "n_records"):
            f.write(f"{key}={header[key]}\n")
        for key in sorted(ds.meta):
            f.write(f"meta.{key}={ds.meta[key]}\n")


def load_dataset(path):
    with open(path, "rb") as f:
        if f.read(len(MAGIC)) != MAGIC:
            raise ValueError(f"{path}: not an ACDS1 dataset")
        (hlen,) = struct.unpack("<I", f.read(4))
        header = json.loads(f.read(hlen).decode("utf-8"))
        data = np.frombuffer(f.read(), dtype="<f8").astype(np.float64)
    n = header["n_records"]
    od, sd, ad = header["obs_dim"], header["state_dim"], header["act_dim"]
    h, dm = header["H"], header["delta_max"]
    stride = od + sd + dm * sd + (h + dm) * ad
    if data.size != n * stride:
        raise ValueError(f"{path}: payload size {data.size} != {n} records of stride {stride}")
    data = data.reshape(n, stride)
    at = 0
    obs = data[:, at : at + od]; at += od
    states = data[:, at : at + sd]; at += sd
    fut = data[:, at : at + dm * sd].reshape(n, dm, sd); at += dm * sd
    acts = data[:, at:].reshape(n, h + dm, ad)
    return ChunkDataset(header["env_kind"], h, dm, np.ascontiguousarray(obs),
                        np.ascontiguousarray(states), np.ascontiguousarray(fut),
                        np.ascontiguousarray(acts), header.get("meta", {}))
