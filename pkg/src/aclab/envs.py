"""Toy control environments with scripted experts.

Two deterministic environments, chosen so that inference delay hurts in
measurably different ways:

* ChaseEnv: a point agent chases a drifting target; actions are position
  displacements, so rolling the proprioceptive state forward over committed
  actions is exact (a plain sum).
* PendulumEnv: torque-limited swing-up; rolling forward requires
  integrating the dynamics, so a state estimate is only as good as the
  model behind it.

Actions must be clipped through clip_action before step(); the simulator
and collector do this so that stored action streams reproduce trajectories
bit-for-bit.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np

log = logging.getLogger(__name__)

TWO_PI = 2.0 * math.pi


def wrap_angle(x):
    """Map an angle to (-pi, pi]."""
    y = math.fmod(x + math.pi, TWO_PI)
    if y <= 0.0:
        y += TWO_PI
    return y - math.pi


@dataclass
class ChaseEnv:
    episode_len: int = 100
    eps_solve: float = 0.05
    k_hold: int = 5
    a_max: float = 0.1
    v_max: float = 0.05
    resample_every: int = 25

    obs_dim = 6
    state_dim = 2
    act_dim = 2
    kind = "chase"

    agent_pos: np.ndarray = field(default_factory=lambda: np.zeros(2))
    target_pos: np.ndarray = field(default_factory=lambda: np.zeros(2))
    target_vel: np.ndarray = field(default_factory=lambda: np.zeros(2))
    step_count: int = 0
    hold: int = 0
    solved: bool = False
    _rng: np.random.Generator | None = None

    def clone(self):
        return ChaseEnv(self.episode_len, self.eps_solve, self.k_hold, self.a_max,
                        self.v_max, self.resample_every)

    def reset(self, rng):
        self._rng = rng
        self.agent_pos = rng.uniform(0.0, 1.0, 2)
        self.target_pos = rng.uniform(0.0, 1.0, 2)
        self.target_vel = self._draw_velocity()
        self.step_count = 0
        self.hold = 0
        self.solved = False
        return self.observation()

    def _draw_velocity(self):
        # full speed, random heading: keeps the target motion informative
        phi = self._rng.uniform(0.0, TWO_PI)
        return self.v_max * np.array([math.cos(phi), math.sin(phi)])

    def observation(self):
        return np.concatenate([self.agent_pos, self.target_pos, self.target_vel])

    def proprio(self):
        return self.agent_pos.copy()

    def clip_action(self, a):
        a = np.asarray(a, dtype=np.float64)
        n = float(np.sqrt(a @ a))
        while n > self.a_max:
            a = a * (self.a_max / n)
            n = float(np.sqrt(a @ a))
        return a

    def step(self, action):
        action = np.asarray(action, dtype=np.float64)
        if not np.all(np.isfinite(action)):
            raise ValueError("non-finite action")
        action = self.clip_action(action)
        self.agent_pos = self.agent_pos + action
        self.target_pos = self.target_pos + self.target_vel
        self.step_count += 1
        if self.step_count % self.resample_every == 0:
            self.target_vel = self._draw_velocity()
        err = self.agent_pos - self.target_pos
        if float(np.sqrt(err @ err)) <= self.eps_solve:
            self.hold += 1
        else:
            self.hold = 0
        if not self.solved and self.hold >= self.k_hold:
            self.solved = True
        done = self.solved or self.step_count >= self.episode_len
        return self.observation(), self.proprio(), self.solved, done


def _pendulum_accel(theta, theta_dot, u, m, l, g, c):
    # gravity via the offset from upright: sin(theta) = -sin(theta - pi),
    # which makes the inverted equilibrium exact in floating point
    return (g / l) * math.sin(wrap_angle(theta - math.pi)) + u / (m * l * l) - c * theta_dot


def _pendulum_step(theta, theta_dot, u, m, l, g, c, dt):
    """Semi-implicit Euler: velocity first, then position."""
    theta_dot = theta_dot + dt * _pendulum_accel(theta, theta_dot, u, m, l, g, c)
    theta = theta + dt * theta_dot
    return theta, theta_dot


@dataclass
class PendulumEnv:
    episode_len: int = 300
    u_max: float = 2.0
    mass: float = 1.0
    length: float = 1.0
    gravity: float = 9.81
    friction: float = 0.05
    dt: float = 0.05
    eps_theta: float = 0.15
    eps_omega: float = 0.6
    k_hold: int = 5

    obs_dim = 3
    state_dim = 2
    act_dim = 1
    kind = "pendulum"

    theta: float = 0.0
    theta_dot: float = 0.0
    step_count: int = 0
    hold: int = 0
    solved: bool = False

    def clone(self):
        return PendulumEnv(self.episode_len, self.u_max, self.mass, self.length,
                           self.gravity, self.friction, self.dt, self.eps_theta,
                           self.eps_omega, self.k_hold)

    def reset(self, rng):
        self.theta = float(rng.uniform(-0.3, 0.3))
        self.theta_dot = float(rng.uniform(-0.5, 0.5))
        self.step_count = 0
        self.hold = 0
        self.solved = False
        return self.observation()

    def observation(self):
        return np.array([math.sin(self.theta), math.cos(self.theta), self.theta_dot])

    def proprio(self):
        return np.array([self.theta, self.theta_dot])

    def clip_action(self, a):
        return np.clip(np.asarray(a, dtype=np.float64), -self.u_max, self.u_max)

    def energy(self):
        m, l, g = self.mass, self.length, self.gravity
        return 0.5 * m * l * l * self.theta_dot**2 - m * g * l * math.cos(self.theta)

    def step(self, action):
        action = np.asarray(action, dtype=np.float64).reshape(-1)
        if not np.all(np.isfinite(action)):
            raise ValueError("non-finite action")
        u = float(self.clip_action(action)[0])
        self.theta, self.theta_dot = _pendulum_step(
            self.theta, self.theta_dot, u, self.mass, self.length, self.gravity,
            self.friction, self.dt)
        self.step_count += 1
        upright = abs(wrap_angle(self.theta - math.pi)) <= self.eps_theta
        if upright and abs(self.theta_dot) <= self.eps_omega:
            self.hold += 1
        else:
            self.hold = 0
        if not self.solved and self.hold >= self.k_hold:
            self.solved = True
        done = self.solved or self.step_count >= self.episode_len
        return self.observation(), self.proprio(), self.solved, done


def env_step(env, action):
    """Free-function form of the transition."""
    return env.step(action)


def make_env(kind, **overrides):
    if kind == "chase":
        return ChaseEnv(**overrides)
    if kind == "pendulum":
        return PendulumEnv(**overrides)
    raise ValueError(f"unknown env kind {kind!r}")


def rollforward(env, state, actions, model_mismatch=1.0):
    """Estimate the proprioceptive state after applying committed actions.

    Chase: exact additive rollforward (mismatch ignored). Pendulum:
    integrates the nominal model with gravity and friction scaled by
    model_mismatch. Actions must already be clipped to env limits.
    """
    state = np.asarray(state, dtype=np.float64)
    if env.kind == "chase":
        s = state
        for a in actions:
            s = s + np.asarray(a, dtype=np.float64)
        return s
    if env.kind == "pendulum":
        theta, theta_dot = float(state[0]), float(state[1])
        g = env.gravity * model_mismatch
        c = env.friction * model_mismatch
        for a in actions:
            u = float(np.asarray(a, dtype=np.float64).reshape(-1)[0])
            theta, theta_dot = _pendulum_step(
                theta, theta_dot, u, env.mass, env.length, g, c, env.dt)
        return np.array([theta, theta_dot])
    raise ValueError(f"unknown env kind {env.kind!r}")


@dataclass
class ExpertPolicy:
    """Scripted analytic controller for one env kind.

    Chase: proportional pursuit of the velocity-extrapolated target.
    Pendulum: energy pumping toward the upright energy level, with a PD
    catch controller near the top.
    """

    kind: str
    k_p: float = 1.0
    lookahead: float = 2.0
    k_energy: float = 1.5
    energy_margin: float = 1.0  # pump past the upright level to cover climb losses
    k_p_bal: float = 14.0
    k_d_bal: float = 4.0
    catch_angle: float = 0.25
    catch_rate: float = 1.6

    def act(self, obs, env):
        """Raw expert action for an observation vector; caller clips."""
        obs = np.asarray(obs, dtype=np.float64)
        if self.kind == "chase":
            agent, target, vel = obs[0:2], obs[2:4], obs[4:6]
            aim = target + self.lookahead * vel - agent
            return self.k_p * aim
        if self.kind == "pendulum":
            sin_t, cos_t, theta_dot = obs
            theta = math.atan2(sin_t, cos_t)
            m, l, g = env.mass, env.length, env.gravity
            phi = wrap_angle(theta - math.pi)
            if abs(phi) < self.catch_angle and abs(theta_dot) < self.catch_rate:
                u = -self.k_p_bal * phi - self.k_d_bal * theta_dot
            else:
                e = 0.5 * m * l * l * theta_dot**2 - m * g * l * cos_t
                e_target = m * g * l + self.energy_margin
                direction = 1.0 if theta_dot >= 0.0 else -1.0
                u = self.k_energy * (e_target - e) * direction
                if abs(theta_dot) < 1e-3 and cos_t > 0.9:
                    u = env.u_max  # kick out of the bottom rest point
            return np.array([u])
        raise ValueError(f"unknown expert kind {self.kind!r}")


def make_expert(kind, **overrides):
    return ExpertPolicy(kind=kind, **overrides)
