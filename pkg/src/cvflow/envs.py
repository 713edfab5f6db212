"""Desk-scale constrained control environments with known dynamics.

Environments are functional: step(s, a) -> (s2, reward, done) and reset(rng)
-> s0 carry no hidden state, so rollouts are reproducible from the rng alone.
The ball tasks expose per-state cost functions c_i(s) <= 0 (a margin inside
the hard safety region) for the state-wise constraint pipeline and terminate
on safety violations.  The point-mass task attaches an analytic action
constraint family from the catalog and runs to a fixed horizon.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .autodiff import ShapeError

BALL_STEP = 0.2       # position change per unit action
BALL_MARGIN = 0.05    # cost margin inside the hard safety region [0, 1]
PM_DT = 0.5           # point-mass integration step


def _check_box(a: np.ndarray, d: int):
    a = np.asarray(a, dtype=np.float64).reshape(-1)
    if a.shape != (d,):
        raise ShapeError(f"action shape {a.shape} != ({d},)")
    if np.any(np.abs(a) > 1.0 + 1e-9):
        raise ValueError(f"action {a} outside the box [-1, 1]^{d}")
    return a


class Environment:
    """Bundle of dynamics, reward, costs, and episode policy for one task."""

    def __init__(self, id, state_dim, action_dim, horizon, step_fn, reset_fn,
                 terminate_on_violation=False, constraint_id=None,
                 costs_fn=None, n_costs=0, violation_fn=None):
        self.id = id
        self.state_dim = state_dim
        self.action_dim = action_dim
        self.horizon = horizon
        self._step = step_fn
        self._reset = reset_fn
        self.terminate_on_violation = terminate_on_violation
        self.constraint_id = constraint_id
        self._costs = costs_fn
        self.n_costs = n_costs
        self._violation = violation_fn

    def reset(self, rng: np.random.Generator) -> np.ndarray:
        return self._reset(rng)

    def step(self, s, a):
        a = _check_box(a, self.action_dim)
        s = np.asarray(s, dtype=np.float64)
        if s.shape != (self.state_dim,):
            raise ShapeError(f"state shape {s.shape} != ({self.state_dim},)")
        return self._step(s, a)

    def costs(self, s) -> np.ndarray:
        """Per-state safety costs c_i(s); feasible states satisfy c_i <= 0."""
        if self._costs is None:
            raise ValueError(f"environment {self.id!r} has no per-state costs")
        return self._costs(np.asarray(s, dtype=np.float64))

    def state_violation(self, s) -> bool:
        """True when s lies outside the hard safety region."""
        if self._violation is None:
            return False
        return bool(self._violation(np.asarray(s, dtype=np.float64)))

    def __repr__(self):
        return f"Environment(id={self.id!r}, state_dim={self.state_dim}, action_dim={self.action_dim})"


# -- ball tasks ----------------------------------------------------------------


def _make_ball(dim: int) -> Environment:
    # state = (pos (dim), target (dim)); velocity-delta actions move the ball;
    # safe region is [0, 1]^dim, costs carry a BALL_MARGIN buffer inside it
    d = dim

    def reset(rng):
        pos = rng.uniform(BALL_MARGIN, 1.0 - BALL_MARGIN, size=d)
        target = rng.uniform(BALL_MARGIN, 1.0 - BALL_MARGIN, size=d)
        return np.concatenate([pos, target])

    def step(s, a):
        pos, target = s[:d], s[d:]
        pos2 = pos + BALL_STEP * a
        s2 = np.concatenate([pos2, target])
        reward = -float(np.linalg.norm(pos2 - target))
        done = bool(np.any(pos2 < 0.0) | np.any(pos2 > 1.0))
        return s2, reward, done

    def costs(s):
        pos = s[:d]
        # interleaved upper/lower margins per coordinate
        out = np.empty(2 * d)
        out[0::2] = pos - (1.0 - BALL_MARGIN)
        out[1::2] = BALL_MARGIN - pos
        return out

    def violation(s):
        pos = s[:d]
        return np.any(pos < 0.0) or np.any(pos > 1.0)

    return Environment(
        id=f"ball{d}d", state_dim=2 * d, action_dim=d, horizon=100,
        step_fn=step, reset_fn=reset, terminate_on_violation=True,
        costs_fn=costs, n_costs=2 * d, violation_fn=violation)


# -- point-mass task -------------------------------------------------------------


def _make_pointmass(constraint: str) -> Environment:
    # state = (px, py, vx, vy, gx, gy); double integrator toward the goal

    def reset(rng):
        p = rng.uniform(-1.0, 1.0, size=2)
        g = rng.uniform(-0.5, 0.5, size=2)
        return np.concatenate([p, np.zeros(2), g])

    def step(s, a):
        p, v, g = s[:2], s[2:4], s[4:]
        v2 = v + PM_DT * a
        p2 = p + PM_DT * v2
        s2 = np.concatenate([p2, v2, g])
        reward = -float(np.linalg.norm(p2 - g)) - 0.01 * float(a @ a)
        return s2, reward, False

    return Environment(
        id="pointmass2d", state_dim=6, action_dim=2, horizon=200,
        step_fn=step, reset_fn=reset, terminate_on_violation=False,
        constraint_id=constraint)


def make_env(id: str, constraint: str | None = None) -> Environment:
    """Build a named environment; pointmass2d accepts a catalog constraint id
    (default R+L2)."""
    if id == "ball1d":
        return _make_ball(1)
    if id == "ball3d":
        return _make_ball(3)
    if id == "pointmass2d":
        return _make_pointmass(constraint or "R+L2")
    raise ValueError(f"unknown environment id {id!r}")


# -- rollouts --------------------------------------------------------------------


@dataclass
class RolloutStats:
    """Aggregate episode bookkeeping for one rollout call."""

    total_steps: int = 0
    episode_returns: list = field(default_factory=list)
    episode_lengths: list = field(default_factory=list)
    violation_episodes: int = 0
    episodes: int = 0
    cv_pre_events: int = 0
    cv_post_events: int = 0
    cv_pre_magnitude: float = 0.0
    cv_post_magnitude: float = 0.0
    projections_fired: int = 0

    @property
    def mean_return(self) -> float:
        return float(np.mean(self.episode_returns)) if self.episode_returns else 0.0

    @property
    def violation_fraction(self) -> float:
        return self.violation_episodes / self.episodes if self.episodes else 0.0

    @property
    def cv_pre_rate(self) -> float:
        return self.cv_pre_events / self.total_steps if self.total_steps else 0.0

    @property
    def cv_post_rate(self) -> float:
        return self.cv_post_events / self.total_steps if self.total_steps else 0.0


@dataclass
class Transition:
    s: np.ndarray
    a: np.ndarray
    r: float
    s2: np.ndarray
    done: bool


def rollout(env: Environment, policy, steps: int, rng: np.random.Generator):
    """Run policy for a step budget, cutting episodes at env.horizon.

    policy(s, rng) returns an action, or (action, info) where info may carry
    per-step bookkeeping keys cv_pre, cv_post, projected.  Returns
    (transitions, RolloutStats); episode returns cover completed episodes
    plus the final partial one when the budget cuts it short.
    """
    transitions: list[Transition] = []
    stats = RolloutStats()
    s = env.reset(rng)
    ep_return = 0.0
    ep_len = 0
    ep_violated = False

    def close_episode():
        stats.episodes += 1
        stats.episode_returns.append(ep_return)
        stats.episode_lengths.append(ep_len)
        if ep_violated:
            stats.violation_episodes += 1

    for _ in range(steps):
        out = policy(s, rng)
        if isinstance(out, tuple):
            a, info = out
        else:
            a, info = out, {}
        s2, r, done = env.step(s, a)
        transitions.append(Transition(s, np.asarray(a, dtype=np.float64), r, s2, done))
        stats.total_steps += 1
        ep_return += r
        ep_len += 1
        cv_pre = float(info.get("cv_pre", 0.0))
        cv_post = float(info.get("cv_post", 0.0))
        if cv_pre > 0.0:
            stats.cv_pre_events += 1
            stats.cv_pre_magnitude += cv_pre
        if cv_post > 0.0:
            stats.cv_post_events += 1
            stats.cv_post_magnitude += cv_post
        if info.get("projected"):
            stats.projections_fired += 1
        if env.state_violation(s2):
            ep_violated = True
        if done or ep_len >= env.horizon:
            close_episode()
            s = env.reset(rng)
            ep_return = 0.0
            ep_len = 0
            ep_violated = False
        else:
            s = s2
    if ep_len > 0:
        close_episode()
    return transitions, stats
