"""Toy planar control tasks and their scripted experts.

Both tasks are point-mass integrators: the action is a commanded planar
velocity, clamped to ``max_speed`` in norm, integrated with ``dt = 0.1``.

reach2d
    state = (agent xy, velocity xy, goal xy); success once the agent is
    within ``tolerance`` of the goal.
pusht_lite
    state = (agent xy, block xy, block angle, goal xy, goal angle); the
    agent pushes a disk-shaped block.  Contact moves the block along the
    contact normal and turns it in proportion to the tangential sliding
    speed.  Success once the block centre is within ``tolerance`` of the goal
    and its angle within ``angle_tolerance``.
"""

from __future__ import annotations

import numpy as np

from .errors import ConfigError


def _clamp_speed(action, max_speed):
    action = np.asarray(action, dtype=np.float64)
    speed = np.linalg.norm(action)
    if speed > max_speed:
        return action * (max_speed / speed)
    return action


class ToyEnv:
    variant = ""
    obs_dim = 0
    action_dim = 2
    dt = 0.1
    max_speed = 1.0
    tolerance = 0.05
    max_episode_steps = 100

    def __init__(self, max_episode_steps=None):
        if max_episode_steps:
            self.max_episode_steps = int(max_episode_steps)
        self.state = None

    def reset(self, seed):
        self.state = self.initial_state(np.random.default_rng(seed))
        return self.state.copy()

    def step(self, action):
        self.state = self.transition(self.state, action)
        return self.state.copy(), self.is_success(self.state)

    def initial_state(self, rng):
        raise NotImplementedError

    def transition(self, state, action):
        raise NotImplementedError

    def is_success(self, state):
        raise NotImplementedError

    def expert(self, state):
        raise NotImplementedError

    def action_bounds(self):
        return -self.max_speed * np.ones(self.action_dim), self.max_speed * np.ones(self.action_dim)


class Reach2D(ToyEnv):
    variant = "reach2d"
    obs_dim = 6
    max_speed = 0.5
    tolerance = 0.05
    max_episode_steps = 100
    expert_gain = 3.0

    def initial_state(self, rng):
        while True:
            agent = rng.uniform(-1.0, 1.0, 2)
            goal = rng.uniform(-1.0, 1.0, 2)
            if np.linalg.norm(goal - agent) > 0.5:
                return np.concatenate([agent, np.zeros(2), goal])

    def transition(self, state, action):
        vel = _clamp_speed(action, self.max_speed)
        agent = np.clip(state[:2] + self.dt * vel, -1.5, 1.5)
        return np.concatenate([agent, vel, state[4:6]])

    def is_success(self, state):
        return bool(np.linalg.norm(state[:2] - state[4:6]) < self.tolerance)

    def expert(self, state):
        delta = state[4:6] - state[:2]
        dist = np.linalg.norm(delta)
        if dist == 0:
            return np.zeros(2)
        return delta / dist * min(self.max_speed, self.expert_gain * dist)


class PushTLite(ToyEnv):
    variant = "pusht_lite"
    obs_dim = 8
    tolerance = 0.05
    angle_tolerance = 0.3
    max_episode_steps = 250
    block_radius = 0.15
    agent_radius = 0.05
    spin = 3.0

    def initial_state(self, rng):
        while True:
            agent = rng.uniform(-1.0, 1.0, 2)
            block = rng.uniform(-0.6, 0.6, 2)
            goal = rng.uniform(-0.6, 0.6, 2)
            angle = rng.uniform(-np.pi, np.pi)
            if (np.linalg.norm(goal - block) > 0.3
                    and np.linalg.norm(agent - block) > self.block_radius + self.agent_radius + 0.1):
                return np.concatenate([agent, block, [angle], goal, [angle]])

    def transition(self, state, action):
        vel = _clamp_speed(action, self.max_speed)
        agent = state[:2] + self.dt * vel
        block = state[2:4].copy()
        angle = state[4]
        reach = self.block_radius + self.agent_radius
        offset = block - agent
        dist = np.linalg.norm(offset)
        if dist < reach:
            normal = offset / dist if dist > 0 else np.array([1.0, 0.0])
            block = block + (reach - dist) * normal
            tangential = normal[0] * vel[1] - normal[1] * vel[0]
            angle = angle + self.spin * tangential * self.dt * (reach - dist) / reach
        agent = np.clip(agent, -1.5, 1.5)
        block = np.clip(block, -1.2, 1.2)
        return np.concatenate([agent, block, [angle], state[5:8]])

    def is_success(self, state):
        pos_ok = np.linalg.norm(state[2:4] - state[5:7]) < self.tolerance
        dangle = (state[4] - state[7] + np.pi) % (2 * np.pi) - np.pi
        return bool(pos_ok and abs(dangle) < self.angle_tolerance)

    def expert(self, state):
        agent, block, goal = state[:2], state[2:4], state[5:7]
        to_goal = goal - block
        gdist = np.linalg.norm(to_goal)
        u = to_goal / max(gdist, 1e-9)
        reach = self.block_radius + self.agent_radius
        behind = block - (reach + 0.03) * u
        rel = agent - block
        along = rel @ u
        lateral = rel - along * u
        aligned = along < 0 and np.linalg.norm(lateral) < 0.03 and np.linalg.norm(rel) < reach + 0.08
        if aligned:
            # push through the block centre toward the goal
            target = block + u * min(gdist, 0.3)
            aim = target - agent
            speed = min(self.max_speed, 4.0 * gdist + 0.05)
            return aim / max(np.linalg.norm(aim), 1e-9) * speed
        if along > -reach * 0.5:
            # on the wrong side: swing around the block at a safe radius
            side = lateral / np.linalg.norm(lateral) if np.linalg.norm(lateral) > 1e-9 else np.array([-u[1], u[0]])
            waypoint = block + (reach + 0.12) * side - 0.1 * u
        else:
            waypoint = behind
        aim = waypoint - agent
        dist = np.linalg.norm(aim)
        return aim / max(dist, 1e-9) * min(self.max_speed, 5.0 * dist + 0.05)


ENVS = {"reach2d": Reach2D, "pusht_lite": PushTLite}


def make_env(variant, max_episode_steps=None):
    try:
        return ENVS[variant](max_episode_steps)
    except KeyError:
        raise ConfigError(f"unknown environment {variant!r}; choose from {sorted(ENVS)}") from None


def run_expert(env, seed):
    """Closed-loop expert episode; returns (obs rows, action rows, success)."""
    state = env.reset(seed)
    obs, actions = [], []
    for _ in range(env.max_episode_steps):
        action = env.expert(state)
        obs.append(state)
        actions.append(action)
        state, done = env.step(action)
        if done:
            return np.array(obs), np.array(actions), True
    return np.array(obs), np.array(actions), False
