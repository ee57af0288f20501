"""Deterministic, seedable toy continuous-control MDPs with bounded actions.

Roster: pendulum swingup (dense + sparse), planar two-joint reacher
(dense + sparse), point mass (dense). All actions live in [-1, 1]^dim.
Physics: semi-implicit Euler at dt = 0.05 s; per-tick rewards in [0, 1],
summed over ``action_repeat`` ticks per control step; fixed-length episodes
with no early termination.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

DT = 0.05
GRAVITY = 10.0
TORQUE_SCALE = 2.0
PENDULUM_MAX_SPEED = 8.0
PENDULUM_RESET_ANGLE_SPREAD = math.pi  # uniform perturbation around hanging, radians
PENDULUM_RESET_SPEED_SPREAD = 6.0      # initial angular velocity, uniform +/- this
SPARSE_ANGLE_THRESHOLD = 0.15       # |theta| from upright, radians
SPARSE_SPEED_THRESHOLD = 1.0

REACHER_LINK = 0.5
REACHER_DAMPING = 1.0
REACHER_MAX_SPEED = 8.0
REACHER_TARGET_RADIUS = (0.3, 0.9)
REACHER_HIT_DIST = 0.1

POINT_MASS_MAX_SPEED = 2.0
POINT_MASS_ACCEL = 1.0


@dataclass(frozen=True)
class EnvSpec:
    name: str
    state_dim: int
    action_dim: int
    episode_len: int        # physics ticks per episode
    action_repeat: int
    reward_kind: str        # "dense" | "sparse"

    @property
    def control_steps(self) -> int:
        return self.episode_len // self.action_repeat


@dataclass
class EnvState:
    phys: np.ndarray  # physical coordinates, documented per env
    t: int = 0        # control-step counter


@dataclass
class StepResult:
    next: EnvState
    reward: float
    done: bool


_SPECS = {
    # pendulum phys = (theta from upright in [-pi,pi), angular velocity)
    "pendulum": EnvSpec("pendulum", 3, 1, 400, 2, "dense"),
    "pendulum_sparse": EnvSpec("pendulum_sparse", 3, 1, 400, 2, "sparse"),
    # reacher phys = (q1, q2, w1, w2, target_x, target_y)
    "reacher": EnvSpec("reacher", 8, 2, 400, 2, "dense"),
    "reacher_sparse": EnvSpec("reacher_sparse", 8, 2, 400, 2, "sparse"),
    # point mass phys = (x, y, vx, vy)
    "point_mass": EnvSpec("point_mass", 4, 2, 400, 2, "dense"),
}


def env_spec(name: str) -> EnvSpec:
    try:
        return _SPECS[name]
    except KeyError:
        raise ValueError(f"unknown env {name!r}; known: {sorted(_SPECS)}") from None


def _wrap_angle(theta: float) -> float:
    return (theta + math.pi) % (2.0 * math.pi) - math.pi


def env_reset(spec: EnvSpec, rng: np.random.Generator) -> EnvState:
    """Deterministic initial state from the generator's current stream."""
    base = spec.name.split("_sparse")[0]
    if base == "pendulum":
        theta = _wrap_angle(math.pi + rng.uniform(-PENDULUM_RESET_ANGLE_SPREAD,
                                                  PENDULUM_RESET_ANGLE_SPREAD))
        omega = rng.uniform(-PENDULUM_RESET_SPEED_SPREAD, PENDULUM_RESET_SPEED_SPREAD)
        return EnvState(np.array([theta, omega]))
    if base == "reacher":
        q1 = rng.uniform(-math.pi, math.pi)
        q2 = rng.uniform(-math.pi, math.pi)
        r = rng.uniform(*REACHER_TARGET_RADIUS)
        phi = rng.uniform(-math.pi, math.pi)
        return EnvState(np.array([q1, q2, 0.0, 0.0, r * math.cos(phi), r * math.sin(phi)]))
    if base == "point_mass":
        x = rng.uniform(-0.8, 0.8)
        y = rng.uniform(-0.8, 0.8)
        return EnvState(np.array([x, y, 0.0, 0.0]))
    raise ValueError(f"unknown env {spec.name!r}")


def observe(spec: EnvSpec, state: EnvState) -> np.ndarray:
    """Network-facing observation vector of length spec.state_dim."""
    p = state.phys
    base = spec.name.split("_sparse")[0]
    # Velocities are fed raw (not rescaled to [-1, 1]): observation scale is
    # part of the learning problem this lab studies, and taming it would hide
    # the large-activation failure mode.
    if base == "pendulum":
        return np.array([math.cos(p[0]), math.sin(p[0]), p[1]])
    if base == "reacher":
        return np.array([math.cos(p[0]), math.sin(p[0]),
                         math.cos(p[1]), math.sin(p[1]),
                         p[2], p[3],
                         p[4], p[5]])
    return p.copy()


def _fingertip(q1: float, q2: float) -> tuple[float, float]:
    x = REACHER_LINK * (math.cos(q1) + math.cos(q1 + q2))
    y = REACHER_LINK * (math.sin(q1) + math.sin(q1 + q2))
    return x, y


def _tick(spec: EnvSpec, phys: np.ndarray, action: np.ndarray) -> tuple[np.ndarray, float]:
    """One physics tick (semi-implicit Euler); returns (next phys, reward in [0,1])."""
    base = spec.name.split("_sparse")[0]
    sparse = spec.reward_kind == "sparse"
    if base == "pendulum":
        theta, omega = phys
        # theta measured from upright; gravity accelerates away from upright
        omega = omega + DT * (GRAVITY * math.sin(theta) + TORQUE_SCALE * action[0])
        omega = min(max(omega, -PENDULUM_MAX_SPEED), PENDULUM_MAX_SPEED)
        theta = _wrap_angle(theta + DT * omega)
        if sparse:
            r = 1.0 if (abs(theta) < SPARSE_ANGLE_THRESHOLD
                        and abs(omega) < SPARSE_SPEED_THRESHOLD) else 0.0
        else:
            r = (1.0 + math.cos(theta)) / 2.0
        return np.array([theta, omega]), r
    if base == "reacher":
        q1, q2, w1, w2, tx, ty = phys
        w1 = w1 + DT * (TORQUE_SCALE * action[0] - REACHER_DAMPING * w1)
        w2 = w2 + DT * (TORQUE_SCALE * action[1] - REACHER_DAMPING * w2)
        w1 = min(max(w1, -REACHER_MAX_SPEED), REACHER_MAX_SPEED)
        w2 = min(max(w2, -REACHER_MAX_SPEED), REACHER_MAX_SPEED)
        q1 = _wrap_angle(q1 + DT * w1)
        q2 = _wrap_angle(q2 + DT * w2)
        fx, fy = _fingertip(q1, q2)
        dist = math.hypot(fx - tx, fy - ty)
        r = (1.0 if dist < REACHER_HIT_DIST else 0.0) if sparse else max(0.0, 1.0 - dist)
        return np.array([q1, q2, w1, w2, tx, ty]), r
    # point mass
    x, y, vx, vy = phys
    vx = vx + DT * POINT_MASS_ACCEL * action[0]
    vy = vy + DT * POINT_MASS_ACCEL * action[1]
    vx = min(max(vx, -POINT_MASS_MAX_SPEED), POINT_MASS_MAX_SPEED)
    vy = min(max(vy, -POINT_MASS_MAX_SPEED), POINT_MASS_MAX_SPEED)
    x += DT * vx
    y += DT * vy
    r = max(0.0, 1.0 - math.hypot(x, y))
    return np.array([x, y, vx, vy]), r


def env_step(spec: EnvSpec, state: EnvState, action: np.ndarray) -> StepResult:
    """Apply the action for ``action_repeat`` physics ticks, summing rewards."""
    action = np.asarray(action, dtype=np.float64)
    if action.shape != (spec.action_dim,):
        raise ValueError(f"action shape {action.shape} != ({spec.action_dim},)")
    if not np.all(np.isfinite(action)):
        raise ValueError(f"non-finite action {action}")
    phys = state.phys
    reward = 0.0
    for _ in range(spec.action_repeat):
        phys, r = _tick(spec, phys, action)
        reward += r
    t = state.t + 1
    return StepResult(EnvState(phys, t), reward, t >= spec.control_steps)


def pendulum_energy(phys: np.ndarray) -> float:
    """Total mechanical energy of the pendulum (m = l = 1, zero at the pivot)."""
    theta, omega = phys
    return 0.5 * omega * omega + GRAVITY * math.cos(theta)


def rollout(
    spec: EnvSpec,
    policy,
    seed,
    max_steps: int | None = None,
) -> tuple[list[tuple[np.ndarray, np.ndarray, float]], float]:
    """Run one episode with ``policy(obs) -> action``; returns (trajectory, return).

    ``seed`` may be an int or a prepared Generator. The trajectory is a list of
    (obs, action, reward).
    """
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    state = env_reset(spec, rng)
    limit = spec.control_steps if max_steps is None else min(max_steps, spec.control_steps)
    traj = []
    total = 0.0
    for _ in range(limit):
        obs = observe(spec, state)
        action = np.clip(np.asarray(policy(obs), dtype=np.float64), -1.0, 1.0)
        res = env_step(spec, state, action)
        traj.append((obs, action, res.reward))
        total += res.reward
        state = res.next
        if res.done:
            break
    return traj, total
