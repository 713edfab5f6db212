"""Latent-space actor-critic agents over a frozen conditional flow.

SAC here learns a diagonal-Gaussian policy over the flow's latent space: the
replay buffer stores latent actions, the critics score (state, latent) pairs,
and the policy's density term uses the surrogate log mu(a|s) + ||a||^2/2,
which absorbs the flow change-of-variables up to an action-independent
constant.  DDPG instead replays environment actions and is the one algorithm
that backpropagates through the flow map (in its policy update).  A flow-free
SAC baseline acts directly in action space with projection and a violation
penalty, for paired comparisons on the same seeds.
"""

from __future__ import annotations

import json
import math
import os
import warnings
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from . import constraints as cn
from . import projection as pj
from .autodiff import Value
from .envs import Environment
from .flow import FlowModel, _arrays_payload, _arrays_from_payload, _squash_logdet_term
from .seeding import derived_rng

LOG_STD_MIN = -5.0
LOG_STD_MAX = 2.0
LATENT_CLIP = 3.0
LOG_2PI = math.log(2.0 * math.pi)
AGENT_CHECKPOINT_VERSION = 1

RUNLOG_COLUMNS = ("step", "eval_return", "cv_count_pct", "cv_magnitude",
                  "projections_fired")


@dataclass
class AgentConfig:
    """Hyperparameters shared by the SAC/DDPG loops."""

    steps: int = 20_000
    gamma: float = 0.99
    tau: float = 0.005
    alpha: float = 0.2
    lr: float = 3e-4
    batch: int = 256
    learning_starts: int = 1000
    buffer_capacity: int = 100_000
    hidden: int = 64
    eval_every: int = 1000
    eval_episodes: int = 5
    seed: int = 0
    entropy_correction: bool = True
    single_critic: bool = False
    penalty_beta: float = 1.0

    def __post_init__(self):
        if self.steps < 0:
            raise ValueError(f"steps must be >= 0, got {self.steps}")
        for name in ("batch", "buffer_capacity", "hidden", "eval_every",
                     "eval_episodes"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if not 0.0 <= self.gamma <= 1.0:
            raise ValueError(f"gamma must lie in [0, 1], got {self.gamma}")
        if not 0.0 < self.tau <= 1.0:
            raise ValueError(f"tau must lie in (0, 1], got {self.tau}")
        if self.alpha < 0 or self.lr <= 0 or self.learning_starts < 0:
            raise ValueError("alpha >= 0, lr > 0, learning_starts >= 0 required")


class ReplayBuffer:
    """Fixed-capacity ring buffer of transitions as flat float arrays."""

    def __init__(self, capacity: int, state_dim: int, action_dim: int):
        self.capacity = capacity
        self.s = np.zeros((capacity, state_dim))
        self.a = np.zeros((capacity, action_dim))
        self.r = np.zeros(capacity)
        self.s2 = np.zeros((capacity, state_dim))
        self.done = np.zeros(capacity)
        self.size = 0
        self.pos = 0

    def add(self, s, a, r, s2, done):
        i = self.pos
        self.s[i] = s
        self.a[i] = a
        self.r[i] = r
        self.s2[i] = s2
        self.done[i] = float(done)
        self.pos = (i + 1) % self.capacity
        self.size = min(self.size + 1, self.capacity)

    def sample(self, rng: np.random.Generator, batch: int):
        if self.size == 0:
            raise ValueError("cannot sample from an empty replay buffer")
        idx = rng.integers(0, self.size, size=batch)
        return (self.s[idx], self.a[idx], self.r[idx], self.s2[idx],
                self.done[idx])

    def __len__(self):
        return self.size


# -- networks -------------------------------------------------------------------


class GaussianPolicy:
    """MLP mapping state to a diagonal Gaussian (mean, log-std) over actions."""

    def __init__(self, tape: ad.Tape, state_dim: int, action_dim: int,
                 hidden: int, rng: np.random.Generator):
        self.tape = tape
        self.state_dim = state_dim
        self.action_dim = action_dim
        self.mlp = ad.MLP(tape, [state_dim, hidden, hidden, 2 * action_dim],
                          rng, name="policy")

    def forward(self, s: Value) -> tuple[Value, Value]:
        out = self.mlp(s)
        mean, log_std = ad.split(out, (self.action_dim, self.action_dim))
        return mean, ad.clamp(log_std, LOG_STD_MIN, LOG_STD_MAX)

    def log_prob(self, mean: Value, log_std: Value, a: Value) -> Value:
        """Diagonal-Gaussian log density, one column entry per batch row."""
        z = ad.mul(ad.sub(a, mean), ad.exp(ad.negate(log_std)))
        inner = ad.add(log_std, ad.scalar_mul(ad.square(z), 0.5))
        return ad.negate(ad.vsum(inner, axis=-1)) + (-0.5 * LOG_2PI * self.action_dim)

    def rsample(self, s: Value, noise: np.ndarray) -> tuple[Value, Value, Value]:
        """Reparameterized draw a = mean + exp(log_std) * noise."""
        mean, log_std = self.forward(s)
        a = ad.add(mean, ad.mul(ad.exp(log_std), self.tape.constant(noise)))
        return a, mean, log_std

    def act(self, s: np.ndarray, rng: np.random.Generator | None = None) -> np.ndarray:
        """Single-state numpy draw; rng=None returns the mean action."""
        with self.tape.no_grad():
            mean, log_std = self.forward(self.tape.constant(
                np.asarray(s, dtype=np.float64).reshape(1, -1)))
        mu = mean.data[0]
        if rng is None:
            return mu.copy()
        return mu + np.exp(log_std.data[0]) * rng.standard_normal(self.action_dim)

    def params(self):
        return self.mlp.params()

    def state_arrays(self):
        return self.mlp.state_arrays()

    def load_arrays(self, arrays):
        self.mlp.load_arrays(arrays)


class DeterministicPolicy:
    """MLP mapping state straight to an action (DDPG actor)."""

    def __init__(self, tape: ad.Tape, state_dim: int, action_dim: int,
                 hidden: int, rng: np.random.Generator):
        self.tape = tape
        self.state_dim = state_dim
        self.action_dim = action_dim
        self.mlp = ad.MLP(tape, [state_dim, hidden, hidden, action_dim], rng,
                          name="policy")

    def __call__(self, s: Value) -> Value:
        return self.mlp(s)

    def act(self, s: np.ndarray, rng: np.random.Generator | None = None) -> np.ndarray:
        with self.tape.no_grad():
            mu = self.mlp(self.tape.constant(
                np.asarray(s, dtype=np.float64).reshape(1, -1))).data[0].copy()
        if rng is not None:
            mu = mu + rng.standard_normal(self.action_dim)
        return np.clip(mu, -LATENT_CLIP, LATENT_CLIP)

    def params(self):
        return self.mlp.params()

    def state_arrays(self):
        return self.mlp.state_arrays()

    def load_arrays(self, arrays):
        self.mlp.load_arrays(arrays)


class Critic:
    """Q network over concatenated (state, action) rows."""

    def __init__(self, tape: ad.Tape, state_dim: int, action_dim: int,
                 hidden: int, rng: np.random.Generator, name: str = "q"):
        self.tape = tape
        self.mlp = ad.MLP(tape, [state_dim + action_dim, hidden, hidden, 1],
                          rng, name=name)

    def __call__(self, s: Value, a: Value) -> Value:
        return self.mlp(ad.concat([s, a]))

    def value_np(self, s: np.ndarray, a: np.ndarray) -> np.ndarray:
        with self.tape.no_grad():
            return self(self.tape.constant(s), self.tape.constant(a)).data.ravel().copy()

    def params(self):
        return self.mlp.params()

    def state_arrays(self):
        return self.mlp.state_arrays()

    def load_arrays(self, arrays):
        self.mlp.load_arrays(arrays)


def polyak_update(source_params: list[Value], target_params: list[Value],
                  tau: float) -> None:
    """In-place target <- tau * source + (1 - tau) * target."""
    for p, pt in zip(source_params, target_params):
        pt.data[...] = tau * p.data + (1.0 - tau) * pt.data


def entropy_surrogate(logp: Value, a: Value, correction: bool = True) -> Value:
    """Policy density term log mu(a|s) + ||a||^2/2 (flag drops the norm term)."""
    if not correction:
        return logp
    return ad.add(logp, ad.scalar_mul(ad.vsum(ad.square(a), axis=-1), 0.5))


def _gaussian_logp_np(a: np.ndarray, mean: np.ndarray,
                      log_std: np.ndarray) -> np.ndarray:
    z = (a - mean) * np.exp(-log_std)
    return -(log_std + 0.5 * z * z).sum(axis=1) - 0.5 * LOG_2PI * a.shape[1]


# -- acting through the flow -----------------------------------------------------


@dataclass
class ActResult:
    latent: np.ndarray
    action: np.ndarray
    projected: bool
    cv_pre: float
    cv_post: float


def _flow_action(latent: np.ndarray, s_env, flow: FlowModel,
                 cs: cn.ConstraintSet, features_fn=None) -> ActResult:
    """Map a latent through the frozen flow and project if infeasible."""
    feats = features_fn(s_env) if features_fn is not None else None
    with flow.tape.no_grad():
        av, _ = flow.forward(np.asarray(latent, dtype=np.float64).reshape(1, -1),
                             feats)
    a = av.data[0].copy()
    cv_pre = float(cn.cv(a, feats, cs))
    cv_post = 0.0
    projected = cv_pre > 0.0
    if projected:
        res = pj.project(a, feats, cs)
        a = res.action
        cv_post = res.residual_cv
        if cv_post > pj.FEAS_TOL:
            warnings.warn(
                f"projection left residual violation {cv_post:.3e} on {cs.id}",
                RuntimeWarning)
    return ActResult(np.asarray(latent, dtype=np.float64), a, projected,
                     cv_pre, cv_post)


def act_sac(s_env, policy: GaussianPolicy, flow: FlowModel,
            cs: cn.ConstraintSet, rng: np.random.Generator | None = None,
            features_fn=None) -> ActResult:
    """Draw a latent from the policy (mean if rng is None), clip to the
    3-sigma box, and run it through the flow with projection fallback."""
    latent = np.clip(policy.act(s_env, rng), -LATENT_CLIP, LATENT_CLIP)
    return _flow_action(latent, s_env, flow, cs, features_fn)


# -- losses -----------------------------------------------------------------------


def sac_policy_loss(s: np.ndarray, policy: GaussianPolicy, critics,
                    cfg: AgentConfig, noise: np.ndarray) -> Value:
    """E[alpha * (log mu + ||a||^2/2) - Q(s, a)] with reparameterized a."""
    tape = policy.tape
    sv = tape.constant(s)
    a, mean, log_std = policy.rsample(sv, noise)
    logp = policy.log_prob(mean, log_std, a)
    surr = entropy_surrogate(logp, a, cfg.entropy_correction)
    if cfg.single_critic:
        q = critics[0](sv, a)
    else:
        q = ad.minimum(critics[0](sv, a), critics[1](sv, a))
    return ad.mean(ad.sub(ad.scalar_mul(surr, cfg.alpha), q))


def sac_critic_loss(batch, policy: GaussianPolicy, critics, targets,
                    cfg: AgentConfig, noise: np.ndarray) -> Value:
    """Squared Bellman error summed over critics; the backup target is
    computed off-graph with a fresh next-state action."""
    s, a, r, s2, done = batch
    tape = policy.tape
    with tape.no_grad():
        mean2, log_std2 = policy.forward(tape.constant(s2))
    m2, ls2 = mean2.data, log_std2.data
    a2 = m2 + np.exp(ls2) * noise
    logp2 = _gaussian_logp_np(a2, m2, ls2)
    if cfg.entropy_correction:
        logp2 = logp2 + 0.5 * np.sum(a2 * a2, axis=1)
    q_next = targets[0].value_np(s2, a2)
    if not cfg.single_critic:
        q_next = np.minimum(q_next, targets[1].value_np(s2, a2))
    y = r + cfg.gamma * (1.0 - done) * (q_next - cfg.alpha * logp2)

    sv, av = tape.constant(s), tape.constant(a)
    yv = tape.constant(y.reshape(-1, 1))
    loss = ad.mean(ad.square(ad.sub(critics[0](sv, av), yv)))
    if not cfg.single_critic:
        loss = ad.add(loss, ad.mean(ad.square(ad.sub(critics[1](sv, av), yv))))
    return loss


def ddpg_policy_loss(s: np.ndarray, policy: DeterministicPolicy, critic: Critic,
                     flow: FlowModel, feats) -> Value:
    """-E[Q(s, f(mu(s), s))]: gradients chain through the flow into the actor."""
    tape = policy.tape
    sv = tape.constant(s)
    latent = policy(sv)
    action, _ = flow.forward(latent, feats)
    return ad.negate(ad.mean(critic(sv, action)))


def ddpg_critic_loss(batch, policy: DeterministicPolicy, critic: Critic,
                     target: Critic, flow: FlowModel, feats2,
                     cfg: AgentConfig) -> Value:
    """Squared error against the deterministic one-step backup."""
    s, a, r, s2, done = batch
    tape = policy.tape
    with tape.no_grad():
        mu2 = policy(tape.constant(s2))
        a2, _ = flow.forward(mu2, feats2)
        q_next = target(tape.constant(s2), a2).data.ravel()
    y = r + cfg.gamma * (1.0 - done) * q_next
    sv, av = tape.constant(s), tape.constant(a)
    yv = tape.constant(y.reshape(-1, 1))
    return ad.mean(ad.square(ad.sub(critic(sv, av), yv)))


# -- squashed-Gaussian helpers for the flow-free baseline ---------------------------


def _squashed_rsample(policy: GaussianPolicy, sv: Value, noise: np.ndarray):
    """tanh-squashed reparameterized draw with its exact log density."""
    u, mean, log_std = policy.rsample(sv, noise)
    a = ad.tanh(u)
    logp = ad.sub(policy.log_prob(mean, log_std, u), _squash_logdet_term(u))
    return a, logp


def _squashed_sample_np(policy: GaussianPolicy, s2: np.ndarray,
                        noise: np.ndarray):
    with policy.tape.no_grad():
        mean2, log_std2 = policy.forward(policy.tape.constant(s2))
    m2, ls2 = mean2.data, log_std2.data
    u2 = m2 + np.exp(ls2) * noise
    logp2 = _gaussian_logp_np(u2, m2, ls2)
    logp2 -= (2.0 * (math.log(2.0) - u2 - np.logaddexp(0.0, -2.0 * u2))).sum(axis=1)
    return np.tanh(u2), logp2


def baseline_policy_loss(s: np.ndarray, policy: GaussianPolicy, critics,
                         cfg: AgentConfig, noise: np.ndarray) -> Value:
    tape = policy.tape
    sv = tape.constant(s)
    a, logp = _squashed_rsample(policy, sv, noise)
    if cfg.single_critic:
        q = critics[0](sv, a)
    else:
        q = ad.minimum(critics[0](sv, a), critics[1](sv, a))
    return ad.mean(ad.sub(ad.scalar_mul(logp, cfg.alpha), q))


def baseline_critic_loss(batch, policy: GaussianPolicy, critics, targets,
                         cfg: AgentConfig, noise: np.ndarray) -> Value:
    s, a, r, s2, done = batch
    tape = policy.tape
    a2, logp2 = _squashed_sample_np(policy, s2, noise)
    q_next = targets[0].value_np(s2, a2)
    if not cfg.single_critic:
        q_next = np.minimum(q_next, targets[1].value_np(s2, a2))
    y = r + cfg.gamma * (1.0 - done) * (q_next - cfg.alpha * logp2)
    sv, av = tape.constant(s), tape.constant(a)
    yv = tape.constant(y.reshape(-1, 1))
    loss = ad.mean(ad.square(ad.sub(critics[0](sv, av), yv)))
    if not cfg.single_critic:
        loss = ad.add(loss, ad.mean(ad.square(ad.sub(critics[1](sv, av), yv))))
    return loss


# -- run bookkeeping ---------------------------------------------------------------


@dataclass
class RunTracker:
    """Cumulative training counters behind the periodic runlog rows."""

    steps: int = 0
    cv_events: int = 0
    cv_magnitude_sum: float = 0.0
    projections_fired: int = 0
    episodes: int = 0
    violation_episodes: int = 0
    episode_returns: list = field(default_factory=list)

    def record_step(self, cv_pre: float, projected: bool):
        self.steps += 1
        if cv_pre > 0.0:
            self.cv_events += 1
            self.cv_magnitude_sum += cv_pre
        if projected:
            self.projections_fired += 1

    def close_episode(self, ep_return: float, violated: bool):
        self.episodes += 1
        self.episode_returns.append(float(ep_return))
        if violated:
            self.violation_episodes += 1

    @property
    def cv_count_pct(self) -> float:
        return 100.0 * self.cv_events / self.steps if self.steps else 0.0

    @property
    def cv_magnitude(self) -> float:
        return self.cv_magnitude_sum / self.cv_events if self.cv_events else 0.0

    @property
    def violation_fraction(self) -> float:
        return self.violation_episodes / self.episodes if self.episodes else 0.0

    @property
    def mean_return(self) -> float:
        return float(np.mean(self.episode_returns)) if self.episode_returns else 0.0


@dataclass
class AgentResult:
    algo: str
    policy: object
    critics: dict
    tracker: RunTracker
    runlog: list
    checkpoint_path: str | None
    buffer: "ReplayBuffer | None" = None


def evaluate(env: Environment, act_fn, episodes: int,
             rng: np.random.Generator) -> list[float]:
    """Episode returns under a fixed greedy action function."""
    returns = []
    for _ in range(episodes):
        s = env.reset(rng)
        total = 0.0
        for _ in range(env.horizon):
            s, r, done = env.step(s, act_fn(s))
            total += r
            if done:
                break
        returns.append(total)
    return returns


def greedy_act_fn(algo: str, policy, flow: FlowModel | None,
                  cs: cn.ConstraintSet, features_fn=None):
    """Deterministic action function used for evaluation rollouts."""
    if algo in ("sac-cvflow", "ddpg-cvflow"):
        if flow is None:
            raise ValueError(f"{algo} evaluation requires a flow model")

        def act(s):
            latent = np.clip(policy.act(s, None), -LATENT_CLIP, LATENT_CLIP)
            return _flow_action(latent, s, flow, cs, features_fn).action

    elif algo == "sac-proj":

        def act(s):
            a = np.tanh(policy.act(s, None))
            feats = features_fn(s) if features_fn is not None else None
            if cn.cv(a, feats, cs) > 0.0:
                a = pj.project(a, feats, cs).action
            return a

    else:
        raise ValueError(f"unknown algorithm {algo!r}")
    return act


def _write_runlog(outdir: str, rows: list[dict]) -> str:
    path = os.path.join(outdir, "runlog.csv")
    tmp = path + ".tmp"
    with open(tmp, "w") as fh:
        fh.write(",".join(RUNLOG_COLUMNS) + "\n")
        for row in rows:
            fh.write(",".join(repr(row[k]) if isinstance(row[k], float)
                              else str(row[k]) for k in RUNLOG_COLUMNS) + "\n")
    os.replace(tmp, path)
    return path


def _zero_grads(params: list[Value]):
    for p in params:
        p.zero_grad()


# -- agent checkpoints ---------------------------------------------------------------


def save_agent(path: str, algo: str, policy, critics: dict,
               state_dim: int, action_dim: int, hidden: int,
               cfg: AgentConfig) -> None:
    doc = {
        "version": AGENT_CHECKPOINT_VERSION,
        "kind": "agent",
        "algo": algo,
        "state_dim": state_dim,
        "action_dim": action_dim,
        "hidden": hidden,
        "entropy_correction": cfg.entropy_correction,
        "single_critic": cfg.single_critic,
        "nets": {"policy": _arrays_payload(policy.state_arrays()),
                 **{name: _arrays_payload(critic.state_arrays())
                    for name, critic in critics.items()}},
    }
    tmp = path + ".tmp"
    with open(tmp, "w") as fh:
        json.dump(doc, fh)
    os.replace(tmp, path)


def load_agent(path: str, tape: ad.Tape | None = None):
    """Rebuild (algo, policy, critics) from an agent checkpoint."""
    try:
        with open(path) as fh:
            doc = json.load(fh)
    except json.JSONDecodeError as exc:
        raise ValueError(f"corrupt agent checkpoint {path!r}: {exc}") from exc
    if not isinstance(doc, dict) or doc.get("kind") != "agent":
        raise ValueError(f"{path!r} is not an agent checkpoint")
    if doc.get("version") != AGENT_CHECKPOINT_VERSION:
        raise ValueError(
            f"agent checkpoint version {doc.get('version')} unsupported "
            f"(expected {AGENT_CHECKPOINT_VERSION})")
    tape = tape if tape is not None else ad.Tape()
    rng = np.random.default_rng(0)
    sd, d, hidden = doc["state_dim"], doc["action_dim"], doc["hidden"]
    if doc["algo"] == "ddpg-cvflow":
        policy = DeterministicPolicy(tape, sd, d, hidden, rng)
    else:
        policy = GaussianPolicy(tape, sd, d, hidden, rng)
    policy.load_arrays(_arrays_from_payload(doc["nets"]["policy"]))
    critics = {}
    for name, payload in doc["nets"].items():
        if name == "policy":
            continue
        critic = Critic(tape, sd, d, hidden, rng, name=name)
        critic.load_arrays(_arrays_from_payload(payload))
        critics[name] = critic
    return doc["algo"], policy, critics


# -- training loops ---------------------------------------------------------------


def _episode_seed_streams(seed: int):
    return (derived_rng(seed, "agent-init"), derived_rng(seed, "agent-env"),
            derived_rng(seed, "agent-policy"), derived_rng(seed, "agent-batch"),
            derived_rng(seed, "agent-eval"))


def train_sac(env: Environment, flow: FlowModel, cs: cn.ConstraintSet,
              cfg: AgentConfig, features_fn=None,
              outdir: str | None = None) -> AgentResult:
    """SAC over flow latents: act through the frozen flow, replay latents."""
    if flow.action_dim != env.action_dim:
        raise ValueError(
            f"flow action_dim {flow.action_dim} != env action_dim {env.action_dim}")
    tape = flow.tape
    rng_init, rng_env, rng_policy, rng_batch, rng_eval = _episode_seed_streams(cfg.seed)
    d = env.action_dim
    policy = GaussianPolicy(tape, env.state_dim, d, cfg.hidden, rng_init)
    q1 = Critic(tape, env.state_dim, d, cfg.hidden, rng_init, name="q1")
    q2 = Critic(tape, env.state_dim, d, cfg.hidden, rng_init, name="q2")
    q1t = Critic(tape, env.state_dim, d, cfg.hidden, rng_init, name="q1t")
    q2t = Critic(tape, env.state_dim, d, cfg.hidden, rng_init, name="q2t")
    q1t.load_arrays(q1.state_arrays())
    q2t.load_arrays(q2.state_arrays())
    policy_opt = ad.Adam(policy.params(), lr=cfg.lr)
    critic_opt = ad.Adam(q1.params() + q2.params(), lr=cfg.lr)
    buffer = ReplayBuffer(cfg.buffer_capacity, env.state_dim, d)
    tracker = RunTracker()
    runlog = []
    eval_fn = greedy_act_fn("sac-cvflow", policy, flow, cs, features_fn)

    s = env.reset(rng_env)
    ep_return, ep_len, ep_violated = 0.0, 0, False
    for step in range(1, cfg.steps + 1):
        if step <= cfg.learning_starts:
            latent = np.clip(rng_policy.standard_normal(d), -LATENT_CLIP,
                             LATENT_CLIP)
            act = _flow_action(latent, s, flow, cs, features_fn)
        else:
            act = act_sac(s, policy, flow, cs, rng_policy, features_fn)
        s2, r, done = env.step(s, act.action)
        ep_return += r
        ep_len += 1
        ep_violated = ep_violated or env.state_violation(s2)
        buffer.add(s, act.latent, r, s2, done)
        tracker.record_step(act.cv_pre, act.projected)

        truncated = (not done) and ep_len >= env.horizon
        if done or truncated:
            tracker.close_episode(ep_return, ep_violated)
            s = env.reset(rng_env)
            ep_return, ep_len, ep_violated = 0.0, 0, False
        else:
            s = s2

        if step > cfg.learning_starts:
            batch = buffer.sample(rng_batch, cfg.batch)
            noise_t = rng_batch.standard_normal((cfg.batch, d))
            closs = sac_critic_loss(batch, policy, (q1, q2), (q1t, q2t), cfg,
                                    noise_t)
            tape.backward(closs)
            critic_opt.step()
            noise_p = rng_batch.standard_normal((cfg.batch, d))
            ploss = sac_policy_loss(batch[0], policy, (q1, q2), cfg, noise_p)
            tape.backward(ploss)
            policy_opt.step()
            # the policy loss deposits gradients in the critics too
            _zero_grads(q1.params() + q2.params())
            tape.clear()
            polyak_update(q1.params(), q1t.params(), cfg.tau)
            polyak_update(q2.params(), q2t.params(), cfg.tau)

        if step % cfg.eval_every == 0 or step == cfg.steps:
            rets = evaluate(env, eval_fn, cfg.eval_episodes, rng_eval)
            runlog.append({"step": step, "eval_return": float(np.mean(rets)),
                           "cv_count_pct": tracker.cv_count_pct,
                           "cv_magnitude": tracker.cv_magnitude,
                           "projections_fired": tracker.projections_fired})
            tape.clear()

    checkpoint_path = None
    critics = {"q1": q1, "q2": q2, "q1t": q1t, "q2t": q2t}
    if outdir is not None:
        os.makedirs(outdir, exist_ok=True)
        _write_runlog(outdir, runlog)
        checkpoint_path = os.path.join(outdir, "agent.json")
        save_agent(checkpoint_path, "sac-cvflow", policy, critics,
                   env.state_dim, d, cfg.hidden, cfg)
    return AgentResult("sac-cvflow", policy, critics, tracker, runlog,
                       checkpoint_path, buffer)


def train_ddpg(env: Environment, flow: FlowModel, cs: cn.ConstraintSet,
               cfg: AgentConfig, features_fn=None, features_batch_fn=None,
               outdir: str | None = None) -> AgentResult:
    """DDPG through the flow: replay environment actions, differentiate the
    actor objective through the flow map."""
    if flow.action_dim != env.action_dim:
        raise ValueError(
            f"flow action_dim {flow.action_dim} != env action_dim {env.action_dim}")
    tape = flow.tape
    rng_init, rng_env, rng_policy, rng_batch, rng_eval = _episode_seed_streams(cfg.seed)
    d = env.action_dim
    if features_batch_fn is None and features_fn is not None:
        def features_batch_fn(states):
            return np.stack([features_fn(row) for row in states])
    policy = DeterministicPolicy(tape, env.state_dim, d, cfg.hidden, rng_init)
    q1 = Critic(tape, env.state_dim, d, cfg.hidden, rng_init, name="q1")
    q1t = Critic(tape, env.state_dim, d, cfg.hidden, rng_init, name="q1t")
    q1t.load_arrays(q1.state_arrays())
    policy_opt = ad.Adam(policy.params(), lr=cfg.lr)
    critic_opt = ad.Adam(q1.params(), lr=cfg.lr)
    buffer = ReplayBuffer(cfg.buffer_capacity, env.state_dim, d)
    tracker = RunTracker()
    runlog = []
    eval_fn = greedy_act_fn("ddpg-cvflow", policy, flow, cs, features_fn)

    s = env.reset(rng_env)
    ep_return, ep_len, ep_violated = 0.0, 0, False
    for step in range(1, cfg.steps + 1):
        if step <= cfg.learning_starts:
            latent = np.clip(rng_policy.standard_normal(d), -LATENT_CLIP,
                             LATENT_CLIP)
        else:
            latent = policy.act(s, rng_policy)
        act = _flow_action(latent, s, flow, cs, features_fn)
        s2, r, done = env.step(s, act.action)
        ep_return += r
        ep_len += 1
        ep_violated = ep_violated or env.state_violation(s2)
        # DDPG replays the executed environment action, not the latent
        buffer.add(s, act.action, r, s2, done)
        tracker.record_step(act.cv_pre, act.projected)

        truncated = (not done) and ep_len >= env.horizon
        if done or truncated:
            tracker.close_episode(ep_return, ep_violated)
            s = env.reset(rng_env)
            ep_return, ep_len, ep_violated = 0.0, 0, False
        else:
            s = s2

        if step > cfg.learning_starts:
            batch = buffer.sample(rng_batch, cfg.batch)
            feats = features_batch_fn(batch[0]) if features_batch_fn else None
            feats2 = features_batch_fn(batch[3]) if features_batch_fn else None
            closs = ddpg_critic_loss(batch, policy, q1, q1t, flow, feats2, cfg)
            tape.backward(closs)
            critic_opt.step()
            ploss = ddpg_policy_loss(batch[0], policy, q1, flow, feats)
            tape.backward(ploss)
            policy_opt.step()
            # actor loss deposits gradients in the critic and the frozen flow
            _zero_grads(q1.params() + flow.params())
            tape.clear()
            polyak_update(q1.params(), q1t.params(), cfg.tau)

        if step % cfg.eval_every == 0 or step == cfg.steps:
            rets = evaluate(env, eval_fn, cfg.eval_episodes, rng_eval)
            runlog.append({"step": step, "eval_return": float(np.mean(rets)),
                           "cv_count_pct": tracker.cv_count_pct,
                           "cv_magnitude": tracker.cv_magnitude,
                           "projections_fired": tracker.projections_fired})
            tape.clear()

    checkpoint_path = None
    critics = {"q1": q1, "q1t": q1t}
    if outdir is not None:
        os.makedirs(outdir, exist_ok=True)
        _write_runlog(outdir, runlog)
        checkpoint_path = os.path.join(outdir, "agent.json")
        save_agent(checkpoint_path, "ddpg-cvflow", policy, critics,
                   env.state_dim, d, cfg.hidden, cfg)
    return AgentResult("ddpg-cvflow", policy, critics, tracker, runlog,
                       checkpoint_path, buffer)


def train_baseline_sproj(env: Environment, cs: cn.ConstraintSet,
                         cfg: AgentConfig, features_fn=None,
                         outdir: str | None = None) -> AgentResult:
    """Flow-free SAC in action space with projection and a violation penalty
    of penalty_beta * cv on the stored reward."""
    tape = ad.Tape()
    rng_init, rng_env, rng_policy, rng_batch, rng_eval = _episode_seed_streams(cfg.seed)
    d = env.action_dim
    policy = GaussianPolicy(tape, env.state_dim, d, cfg.hidden, rng_init)
    q1 = Critic(tape, env.state_dim, d, cfg.hidden, rng_init, name="q1")
    q2 = Critic(tape, env.state_dim, d, cfg.hidden, rng_init, name="q2")
    q1t = Critic(tape, env.state_dim, d, cfg.hidden, rng_init, name="q1t")
    q2t = Critic(tape, env.state_dim, d, cfg.hidden, rng_init, name="q2t")
    q1t.load_arrays(q1.state_arrays())
    q2t.load_arrays(q2.state_arrays())
    policy_opt = ad.Adam(policy.params(), lr=cfg.lr)
    critic_opt = ad.Adam(q1.params() + q2.params(), lr=cfg.lr)
    buffer = ReplayBuffer(cfg.buffer_capacity, env.state_dim, d)
    tracker = RunTracker()
    runlog = []
    eval_fn = greedy_act_fn("sac-proj", policy, None, cs, features_fn)

    s = env.reset(rng_env)
    ep_return, ep_len, ep_violated = 0.0, 0, False
    for step in range(1, cfg.steps + 1):
        if step <= cfg.learning_starts:
            a_pre = np.tanh(rng_policy.standard_normal(d))
        else:
            a_pre = np.tanh(policy.act(s, rng_policy))
        feats = features_fn(s) if features_fn is not None else None
        cv_pre = float(cn.cv(a_pre, feats, cs))
        a_exec = a_pre
        projected = cv_pre > 0.0
        if projected:
            a_exec = pj.project(a_pre, feats, cs).action
        s2, r, done = env.step(s, a_exec)
        ep_return += r
        ep_len += 1
        ep_violated = ep_violated or env.state_violation(s2)
        # the critic sees the policy's own action and the penalized reward
        buffer.add(s, a_pre, r - cfg.penalty_beta * cv_pre, s2, done)
        tracker.record_step(cv_pre, projected)

        truncated = (not done) and ep_len >= env.horizon
        if done or truncated:
            tracker.close_episode(ep_return, ep_violated)
            s = env.reset(rng_env)
            ep_return, ep_len, ep_violated = 0.0, 0, False
        else:
            s = s2

        if step > cfg.learning_starts:
            batch = buffer.sample(rng_batch, cfg.batch)
            noise_t = rng_batch.standard_normal((cfg.batch, d))
            closs = baseline_critic_loss(batch, policy, (q1, q2), (q1t, q2t),
                                         cfg, noise_t)
            tape.backward(closs)
            critic_opt.step()
            noise_p = rng_batch.standard_normal((cfg.batch, d))
            ploss = baseline_policy_loss(batch[0], policy, (q1, q2), cfg,
                                         noise_p)
            tape.backward(ploss)
            policy_opt.step()
            _zero_grads(q1.params() + q2.params())
            tape.clear()
            polyak_update(q1.params(), q1t.params(), cfg.tau)
            polyak_update(q2.params(), q2t.params(), cfg.tau)

        if step % cfg.eval_every == 0 or step == cfg.steps:
            rets = evaluate(env, eval_fn, cfg.eval_episodes, rng_eval)
            runlog.append({"step": step, "eval_return": float(np.mean(rets)),
                           "cv_count_pct": tracker.cv_count_pct,
                           "cv_magnitude": tracker.cv_magnitude,
                           "projections_fired": tracker.projections_fired})
            tape.clear()

    checkpoint_path = None
    critics = {"q1": q1, "q2": q2, "q1t": q1t, "q2t": q2t}
    if outdir is not None:
        os.makedirs(outdir, exist_ok=True)
        _write_runlog(outdir, runlog)
        checkpoint_path = os.path.join(outdir, "agent.json")
        save_agent(checkpoint_path, "sac-proj", policy, critics,
                   env.state_dim, d, cfg.hidden, cfg)
    return AgentResult("sac-proj", policy, critics, tracker, runlog,
                       checkpoint_path, buffer)
