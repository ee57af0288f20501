"""DDPG-style learner: actor, twin critics with a shared state trunk, targets,
n-step replay, and every stabilization method as an independently switchable
option (penultimate/layer/spectral/output normalization, pre-tanh penalty,
lr warmup, gradient clipping, scale-down init, asymmetric clipping,
nonzero-reward gate, self-supervised auxiliary loss).
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from . import nets
from .envs import EnvSpec, env_reset, env_step, observe
from .nets import (
    AdamState,
    Layer,
    LinearSchedule,
    MlpParams,
    NonFiniteError,
    adam_step,
    apply_spectral,
    clip_grad_norm,
    global_norm,
    init_mlp,
    mlp_backward,
    mlp_forward,
    orthogonal,
    scale_down_init,
    soft_update_arrays,
)


class AbortRunError(RuntimeError):
    """Raised when a training update produces a non-finite loss."""

    def __init__(self, message: str, diagnostics: dict | None = None):
        super().__init__(message)
        self.diagnostics = diagnostics or {}


def _default_noise_sched() -> LinearSchedule:
    return LinearSchedule(1.0, 0.1, 25000)


@dataclass
class AgentConfig:
    lr: float = 1e-4
    tau: float = 1e-2
    update_every: int = 2
    gamma: float = 0.99
    n_step: int = 3
    batch: int = 256
    seed_frames: int = 4000
    noise_sched: LinearSchedule = field(default_factory=_default_noise_sched)
    noise_clip: float = 0.3
    # stabilization flags
    actor_pnorm: bool = False
    critic_pnorm: bool = False
    layer_norm: bool = False
    spectral: bool = False
    output_norm: bool = False
    penalty_lambda: float = 0.0
    warmup_steps: int = 0
    grad_clip: float | None = None
    scale_down: float | None = None
    asym_clip: bool = False
    nz_gate: bool = False
    ssl_steps: int = 0
    # architecture / plumbing
    feature_dim: int = 50
    hidden_dim: int = 64
    ssl_hidden: int = 512
    ssl_noise: float = 0.01
    replay_capacity: int = 100_000
    use_actor_target: bool = False
    spectral_iters: int = 1

    def __post_init__(self):
        if self.penalty_lambda < 0:
            raise ValueError("penalty_lambda must be >= 0")
        if self.spectral and (self.actor_pnorm or self.critic_pnorm or self.layer_norm):
            raise ValueError("spectral conflicts with pnorm/layer_norm")
        if self.layer_norm and (self.actor_pnorm or self.critic_pnorm):
            raise ValueError("layer_norm conflicts with pnorm")

    def actor_penult_mode(self) -> str:
        if self.actor_pnorm:
            return "pnorm"
        if self.layer_norm:
            return "layer_norm"
        if self.spectral:
            return "spectral"
        return "none"

    def critic_penult_mode(self) -> str:
        if self.critic_pnorm:
            return "pnorm"
        if self.layer_norm:
            return "layer_norm"
        if self.spectral:
            return "spectral"
        return "none"


@dataclass
class UpdateMetrics:
    actor_grad_norm: float = 0.0
    critic_loss: float = 0.0
    avg_abs_action: float = 0.0
    avg_q: float = 0.0
    delta_q: float = 0.0
    fnz_qtarget: float = 0.0
    fnz_reward: float = 0.0
    ssl_loss: float = 0.0

    FIELDS = ("actor_grad_norm", "critic_loss", "avg_abs_action", "avg_q",
              "delta_q", "fnz_qtarget", "fnz_reward", "ssl_loss")

    def as_dict(self) -> dict[str, float]:
        return {k: getattr(self, k) for k in self.FIELDS}


@dataclass
class Batch:
    s: np.ndarray       # (B, state_dim)
    a: np.ndarray       # (B, action_dim)
    r_sum: np.ndarray   # (B,) discounted n-step reward sum
    disc: np.ndarray    # (B,) gamma^n, or 0 for windows truncated by episode end
    s_n: np.ndarray     # (B, state_dim) state n steps ahead
    s1: np.ndarray      # (B, state_dim) state one step ahead (for the SSL views)


class ReplayBuffer:
    """Ring of assembled n-step transitions with an in-flight assembly window."""

    def __init__(self, capacity: int, state_dim: int, action_dim: int,
                 n_step: int, gamma: float):
        self.capacity = capacity
        self.n_step = n_step
        self.gamma = gamma
        self.s = np.zeros((capacity, state_dim))
        self.a = np.zeros((capacity, action_dim))
        self.r_sum = np.zeros(capacity)
        self.disc = np.zeros(capacity)
        self.s_n = np.zeros((capacity, state_dim))
        self.s1 = np.zeros((capacity, state_dim))
        self.size = 0
        self.pos = 0
        self.pending: list[tuple[np.ndarray, np.ndarray, float, np.ndarray]] = []
        self.seen_nonzero_reward = False

    def _emit(self, window: list, disc: float) -> None:
        obs, action, _, next_obs = window[0]
        r_sum = 0.0
        g = 1.0
        for _, _, r, _ in window:
            r_sum += g * r
            g *= self.gamma
        i = self.pos
        self.s[i] = obs
        self.a[i] = action
        self.r_sum[i] = r_sum
        self.disc[i] = disc
        self.s_n[i] = window[-1][3]
        self.s1[i] = next_obs
        self.pos = (self.pos + 1) % self.capacity
        self.size = min(self.size + 1, self.capacity)

    def add_step(self, obs: np.ndarray, action: np.ndarray, reward: float,
                 next_obs: np.ndarray, done: bool) -> None:
        if reward != 0.0:
            self.seen_nonzero_reward = True
        self.pending.append((obs, action, reward, next_obs))
        if len(self.pending) >= self.n_step:
            self._emit(self.pending[: self.n_step], self.gamma ** self.n_step)
            self.pending.pop(0)
        if done:
            while self.pending:
                self._emit(self.pending, 0.0)
                self.pending.pop(0)

    def sample(self, batch: int, rng: np.random.Generator) -> Batch:
        return buffer_sample(self, batch, rng)


def buffer_sample(buf: ReplayBuffer, batch: int, rng: np.random.Generator) -> Batch:
    """Uniform sample without replacement within the batch; deterministic per rng."""
    if buf.size < batch:
        raise ValueError(f"buffer holds {buf.size} transitions, need {batch}")
    if buf.size == batch:
        idx = rng.permutation(batch)
    else:
        # rejection sampling keeps cost independent of buffer size
        idx = rng.integers(0, buf.size, size=batch)
        seen = set()
        for j in range(batch):
            while int(idx[j]) in seen:
                idx[j] = rng.integers(0, buf.size)
            seen.add(int(idx[j]))
    return Batch(buf.s[idx], buf.a[idx], buf.r_sum[idx], buf.disc[idx],
                 buf.s_n[idx], buf.s1[idx])


# ---------------------------------------------------------------------------
# twin critic with shared state trunk


@dataclass
class Critic:
    trunk: Layer                 # state -> feature_dim, ReLU
    head1: MlpParams             # (feature_dim + action_dim) -> 1
    head2: MlpParams

    def arrays(self) -> list[np.ndarray]:
        return [self.trunk.w, self.trunk.b] + self.head1.arrays() + self.head2.arrays()

    def array_names(self) -> list[str]:
        return (["trunk.w", "trunk.b"]
                + [f"head1.{n}" for n in self.head1.array_names()]
                + [f"head2.{n}" for n in self.head2.array_names()])

    def copy(self) -> "Critic":
        return Critic(Layer(self.trunk.w.copy(), self.trunk.b.copy()),
                      self.head1.copy(), self.head2.copy())


@dataclass
class CriticTape:
    s: np.ndarray
    fpre: np.ndarray
    x: np.ndarray
    t1: nets.MlpTape
    t2: nets.MlpTape


def critic_forward(critic: Critic, s: np.ndarray, a: np.ndarray):
    fpre = s @ critic.trunk.w.T + critic.trunk.b
    f = np.maximum(fpre, 0.0)
    x = np.concatenate([f, a], axis=1)
    q1, t1 = mlp_forward(critic.head1, x)
    q2, t2 = mlp_forward(critic.head2, x)
    return q1[:, 0], q2[:, 0], CriticTape(s, fpre, x, t1, t2)


def critic_backward(critic: Critic, tape: CriticTape,
                    gq1: np.ndarray, gq2: np.ndarray):
    """Backprop per-sample output grads gq1, gq2 (shape (B,)).

    Returns (grads in arrays() order, grad w.r.t. actions, grad w.r.t. states).
    """
    feat_dim = critic.trunk.w.shape[0]
    g1, gx1 = mlp_backward(critic.head1, tape.t1, gq1[:, None])
    g2, gx2 = mlp_backward(critic.head2, tape.t2, gq2[:, None])
    gx = gx1 + gx2
    gf = gx[:, :feat_dim]
    ga = gx[:, feat_dim:]
    gfpre = gf * (tape.fpre > 0.0)
    gtw = gfpre.T @ tape.s
    gtb = gfpre.sum(axis=0)
    gs = gfpre @ critic.trunk.w
    return [gtw, gtb] + g1 + g2, ga, gs


def _trunk_features(trunk: Layer, s: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    fpre = s @ trunk.w.T + trunk.b
    return fpre, np.maximum(fpre, 0.0)


def _row_normalize(h: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    n = np.maximum(np.linalg.norm(h, axis=1, keepdims=True), nets.NORM_FLOOR)
    return h / n, n


# ---------------------------------------------------------------------------


@dataclass
class RunStreams:
    """Named deterministic RNG streams for one training run.

    Paired runs share the ``init`` / ``seed_action`` / ``seed_env`` streams but
    draw everything else from arm-specific streams.
    """
    init: np.random.Generator
    seed_action: np.random.Generator
    seed_env: np.random.Generator
    env: np.random.Generator
    noise: np.random.Generator
    sample: np.random.Generator
    ssl: np.random.Generator
    eval_entropy: tuple  # entropy prefix for per-eval-point generators

    _TAGS = {"init": 1, "seed_action": 2, "seed_env": 3, "env": 4,
             "noise": 5, "sample": 6, "ssl": 7}

    @staticmethod
    def _gen(entropy: tuple) -> np.random.Generator:
        return np.random.default_rng(np.random.SeedSequence(list(entropy)))

    @classmethod
    def from_seed(cls, seed: int) -> "RunStreams":
        t = cls._TAGS
        return cls(
            init=cls._gen((seed, t["init"])),
            seed_action=cls._gen((seed, t["seed_action"])),
            seed_env=cls._gen((seed, t["seed_env"])),
            env=cls._gen((seed, t["env"])),
            noise=cls._gen((seed, t["noise"])),
            sample=cls._gen((seed, t["sample"])),
            ssl=cls._gen((seed, t["ssl"])),
            eval_entropy=(seed, 8),
        )

    @classmethod
    def paired(cls, pair_seed: int, arm: int) -> "RunStreams":
        """Arms share initialization and seed-phase experience only."""
        t = cls._TAGS
        return cls(
            init=cls._gen((pair_seed, t["init"])),
            seed_action=cls._gen((pair_seed, t["seed_action"])),
            seed_env=cls._gen((pair_seed, t["seed_env"])),
            env=cls._gen((pair_seed, 100 + arm, t["env"])),
            noise=cls._gen((pair_seed, 100 + arm, t["noise"])),
            sample=cls._gen((pair_seed, 100 + arm, t["sample"])),
            ssl=cls._gen((pair_seed, 100 + arm, t["ssl"])),
            eval_entropy=(pair_seed, 100 + arm, 8),
        )


class Agent:
    """One learner instance bound to an environment spec and RNG streams."""

    def __init__(self, cfg: AgentConfig, spec: EnvSpec, streams: RunStreams):
        self.cfg = cfg
        self.spec = spec
        self.streams = streams
        sd, ad, fd, hd = spec.state_dim, spec.action_dim, cfg.feature_dim, cfg.hidden_dim
        rng = streams.init

        self.actor = init_mlp(rng, [sd, fd, hd, hd, ad],
                              penult_mode=cfg.actor_penult_mode(),
                              output_mode="output_norm" if cfg.output_norm else "identity")
        cm = cfg.critic_penult_mode()
        self.critic = Critic(
            trunk=Layer(orthogonal(rng, fd, sd, math.sqrt(2.0)), np.zeros(fd)),
            head1=init_mlp(rng, [fd + ad, hd, hd, 1], penult_mode=cm),
            head2=init_mlp(rng, [fd + ad, hd, hd, 1], penult_mode=cm),
        )
        if cfg.scale_down is not None:
            scale_down_init(self.actor, cfg.scale_down)
            scale_down_init(self.critic.head1, cfg.scale_down)
            scale_down_init(self.critic.head2, cfg.scale_down)
        if cfg.spectral:
            apply_spectral(self.actor, cfg.spectral_iters)
            apply_spectral(self.critic.head1, cfg.spectral_iters)
            apply_spectral(self.critic.head2, cfg.spectral_iters)

        self.actor_target = self.actor.copy() if cfg.use_actor_target else None
        self.critic_target = self.critic.copy()

        self.actor_opt = AdamState.for_arrays(self.actor.arrays())
        self.critic_opt = AdamState.for_arrays(self.critic.arrays())

        self.ssl_head: MlpParams | None = None
        self.ssl_opt: AdamState | None = None
        if cfg.ssl_steps != 0:
            self.ssl_head = init_mlp(rng, [fd, cfg.ssl_hidden, fd])
            self.ssl_opt = AdamState.for_arrays(self.ssl_head.arrays())

        self.buffer = ReplayBuffer(cfg.replay_capacity, sd, ad, cfg.n_step, cfg.gamma)
        self.env_state = env_reset(spec, streams.seed_env)

    # -- acting ------------------------------------------------------------

    def policy_action(self, obs: np.ndarray) -> np.ndarray:
        """Deterministic evaluation action tanh(a_pre)."""
        apre, _ = mlp_forward(self.actor, obs)
        if not np.all(np.isfinite(apre)):
            raise NonFiniteError(f"non-finite actor output {apre} for obs {obs}")
        return np.tanh(apre)

    def select_action(self, obs: np.ndarray, step: int, mode: str) -> np.ndarray:
        if step < 0:
            raise ValueError("step must be >= 0")
        if mode == "eval":
            return self.policy_action(obs)
        if mode != "explore":
            raise ValueError(f"unknown mode {mode!r}")
        if step < self.cfg.seed_frames:
            return self.streams.seed_action.uniform(-1.0, 1.0, self.spec.action_dim)
        a = self.policy_action(obs)
        sigma = self.cfg.noise_sched.value(step)
        a = a + self.streams.noise.normal(0.0, 1.0, a.shape) * sigma
        return np.clip(a, -1.0, 1.0)

    # -- learning ----------------------------------------------------------

    def _lr(self, step: int) -> float:
        lr = self.cfg.lr
        if self.cfg.warmup_steps > 0:
            lr *= min(1.0, step / self.cfg.warmup_steps)
        return lr

    def _ssl_active(self, step: int) -> bool:
        return self.ssl_head is not None and (self.cfg.ssl_steps < 0
                                              or step < self.cfg.ssl_steps)

    def td_target(self, batch: Batch, step: int) -> np.ndarray:
        cfg = self.cfg
        actor = self.actor_target if self.actor_target is not None else self.actor
        apre, _ = mlp_forward(actor, batch.s_n)
        sigma = cfg.noise_sched.value(step)
        eps = self.streams.noise.normal(0.0, 1.0, apre.shape) * sigma
        eps = np.clip(eps, -cfg.noise_clip, cfg.noise_clip)
        a_next = np.clip(np.tanh(apre) + eps, -1.0, 1.0)
        q1, q2, _ = critic_forward(self.critic_target, batch.s_n, a_next)
        qhat = 0.5 * (q1 + q2) if cfg.asym_clip else np.minimum(q1, q2)
        return batch.r_sum + batch.disc * qhat

    def critic_update(self, batch: Batch, step: int) -> UpdateMetrics:
        cfg = self.cfg
        y = self.td_target(batch, step)
        q1, q2, tape = critic_forward(self.critic, batch.s, batch.a)
        b = len(y)
        loss = float(np.mean((q1 - y) ** 2 + (q2 - y) ** 2))
        if not math.isfinite(loss):
            raise AbortRunError("non-finite critic loss", {
                "step": step, "critic_loss": loss,
                "q1_max": float(np.max(np.abs(q1))), "q2_max": float(np.max(np.abs(q2))),
                "y_max": float(np.max(np.abs(y))),
            })
        grads, _, _ = critic_backward(self.critic, tape,
                                      2.0 * (q1 - y) / b, 2.0 * (q2 - y) / b)
        m = UpdateMetrics(
            critic_loss=loss,
            avg_q=float(np.mean(0.5 * (q1 + q2))),
            fnz_qtarget=float(np.mean(np.abs(y) > 1e-12)),
            fnz_reward=float(np.mean(batch.r_sum != 0.0)),
        )
        lr = self._lr(step)
        if self._ssl_active(step):
            ssl_loss, (gtw, gtb), head_grads = self.ssl_update_terms(batch)
            m.ssl_loss = ssl_loss
            grads[0] = grads[0] + gtw
            grads[1] = grads[1] + gtb
            if cfg.grad_clip is not None:
                head_grads = clip_grad_norm(head_grads, cfg.grad_clip)
            adam_step(self.ssl_opt, self.ssl_head.arrays(), head_grads, lr,
                      names=[f"ssl.{n}" for n in self.ssl_head.array_names()])
        if cfg.grad_clip is not None:
            grads = clip_grad_norm(grads, cfg.grad_clip)
        adam_step(self.critic_opt, self.critic.arrays(), grads, lr,
                  names=[f"critic.{n}" for n in self.critic.array_names()])
        if cfg.spectral:
            apply_spectral(self.critic.head1, cfg.spectral_iters)
            apply_spectral(self.critic.head2, cfg.spectral_iters)
        q1a, q2a, _ = critic_forward(self.critic, batch.s, batch.a)
        m.delta_q = float(np.mean(np.abs(0.5 * (q1a + q2a) - 0.5 * (q1 + q2))))
        soft_update_arrays(self.critic_target.arrays(), self.critic.arrays(), cfg.tau)
        return m

    def actor_loss_and_grads(self, batch: Batch):
        """Actor loss mean[-min(Q1,Q2) + lambda * ||a_pre||^2] and its gradients.

        The min is used here regardless of asym_clip; critic weights are frozen
        (gradient reaches the actor only through the action input).
        """
        cfg = self.cfg
        apre, atape = mlp_forward(self.actor, batch.s)
        a = np.tanh(apre)
        q1, q2, ctape = critic_forward(self.critic, batch.s, a)
        minq = np.minimum(q1, q2)
        b = len(minq)
        pen = cfg.penalty_lambda * float(np.mean(np.sum(apre * apre, axis=1)))
        loss = float(np.mean(-minq)) + pen
        pick1 = (q1 <= q2).astype(np.float64)
        _, ga, _ = critic_backward(self.critic, ctape,
                                   -pick1 / b, -(1.0 - pick1) / b)
        g_apre = ga * (1.0 - a * a) + (2.0 * cfg.penalty_lambda / b) * apre
        grads, _ = mlp_backward(self.actor, atape, g_apre)
        return loss, grads, a

    def actor_update(self, batch: Batch, step: int) -> UpdateMetrics:
        cfg = self.cfg
        loss, grads, a = self.actor_loss_and_grads(batch)
        if not math.isfinite(loss):
            raise AbortRunError("non-finite actor loss", {"step": step})
        m = UpdateMetrics(actor_grad_norm=global_norm(grads),
                          avg_abs_action=float(np.mean(np.abs(a))))
        if cfg.grad_clip is not None:
            grads = clip_grad_norm(grads, cfg.grad_clip)
        adam_step(self.actor_opt, self.actor.arrays(), grads, self._lr(step),
                  names=[f"actor.{n}" for n in self.actor.array_names()])
        if cfg.spectral:
            apply_spectral(self.actor, cfg.spectral_iters)
        if self.actor_target is not None:
            soft_update_arrays(self.actor_target.arrays(), self.actor.arrays(), cfg.tau)
        return m

    def ssl_update_terms(self, batch: Batch):
        """Self-supervised loss on trunk features of adjacent states.

        Views are trunk features of s_t and s_{t+1} plus Gaussian noise; the
        online view passes through the prediction head, the target view through
        the EMA trunk. Squared distance of unit-normalized embeddings,
        symmetrized (averaged over both time directions).
        """
        cfg = self.cfg
        trunk = self.critic.trunk
        t_trunk = self.critic_target.trunk
        b = len(batch.s)
        gtw = np.zeros_like(trunk.w)
        gtb = np.zeros_like(trunk.b)
        head_grads = [np.zeros_like(x) for x in self.ssl_head.arrays()]
        total = 0.0
        for src, dst in ((batch.s, batch.s1), (batch.s1, batch.s)):
            fpre, f = _trunk_features(trunk, src)
            _, ft = _trunk_features(t_trunk, dst)
            v = f + self.streams.ssl.normal(0.0, cfg.ssl_noise, f.shape)
            vt = ft + self.streams.ssl.normal(0.0, cfg.ssl_noise, ft.shape)
            h, htape = mlp_forward(self.ssl_head, v)
            p, pn = _row_normalize(h)
            z, _ = _row_normalize(vt)
            d = p - z
            total += float(np.mean(np.sum(d * d, axis=1)))
            # averaged over the two directions: d(loss)/dp = (2/b) * d * 1/2
            gp = d / b
            gh = (gp - p * np.sum(p * gp, axis=1, keepdims=True)) / pn
            hg, gv = mlp_backward(self.ssl_head, htape, gh)
            for acc, g in zip(head_grads, hg):
                acc += g
            gfpre = gv * (fpre > 0.0)
            gtw += gfpre.T @ src
            gtb += gfpre.sum(axis=0)
        return total / 2.0, (gtw, gtb), head_grads

    # -- environment interaction + train gate ------------------------------

    def _env_rng(self, step: int) -> np.random.Generator:
        return (self.streams.seed_env if step < self.cfg.seed_frames
                else self.streams.env)

    def can_train(self, step: int) -> bool:
        cfg = self.cfg
        if step < cfg.seed_frames or self.buffer.size < cfg.batch:
            return False
        if (step - cfg.seed_frames) % cfg.update_every != cfg.update_every - 1:
            return False
        if cfg.nz_gate and not self.buffer.seen_nonzero_reward:
            return False
        return True

    def step(self, step: int) -> UpdateMetrics | None:
        """Act once in the environment; train when the gate is open."""
        obs = observe(self.spec, self.env_state)
        action = self.select_action(obs, step, "explore")
        res = env_step(self.spec, self.env_state, action)
        next_obs = observe(self.spec, res.next)
        self.buffer.add_step(obs, action, res.reward, next_obs, res.done)
        self.env_state = env_reset(self.spec, self._env_rng(step)) if res.done else res.next

        if not self.can_train(step):
            return None
        batch = self.buffer.sample(self.cfg.batch, self.streams.sample)
        cm = self.critic_update(batch, step)
        am = self.actor_update(batch, step)
        cm.actor_grad_norm = am.actor_grad_norm
        cm.avg_abs_action = am.avg_abs_action
        return cm
