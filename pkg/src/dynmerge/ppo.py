"""Offline PPO for the merge actor, with the larger critic trained alongside.

One episode is one image; one step is one backbone block. The actor and critic
are updated with decoupled learning rates by fixed-step SGD (optionally with
momentum) or Adam, selected by ``PPOConfig.optimizer``.
"""
from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from . import agent as A
from .backbone import BackboneWeights, block_forward, patch_embed
from .merge import apply_merge
from .num import autodiff as ad
from .num import kernels as K
from .num.autodiff import Graph
from .num.kernels import NumericFault
from .num.rng import Rng
from .reward import RewardConfig, episode_return, kd_loss, step_reward, teacher_trace

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class PPOConfig:
    clip_eps: float = 0.2
    gae_lambda: float = 0.95
    epochs: int = 4
    minibatch_size: int = 16
    actor_lr: float = 1e-4
    critic_lr: float = 1e-3
    value_coef: float = 0.5
    entropy_coef: float = 0.01
    episodes_per_batch: int = 16
    total_batches: int = 200
    seed: int = 0
    momentum: float = 0.0
    normalize_advantages: bool = True
    optimizer: str = "adam"

    def __post_init__(self):
        if not 0 < self.clip_eps < 1:
            raise ValueError("clip_eps must lie in (0, 1)")
        if not 0 <= self.gae_lambda <= 1:
            raise ValueError("gae_lambda must lie in [0, 1]")
        if self.epochs < 0 or self.minibatch_size < 1 or self.episodes_per_batch < 1:
            raise ValueError("epochs >= 0, minibatch_size >= 1, episodes_per_batch >= 1 required")
        if self.total_batches < 0:
            raise ValueError("total_batches must be >= 0")
        if self.actor_lr < 0 or self.critic_lr < 0 or not 0 <= self.momentum < 1:
            raise ValueError("learning rates must be >= 0 and momentum in [0, 1)")
        if self.optimizer not in OPTIMIZERS:
            raise ValueError(f"optimizer must be one of {sorted(OPTIMIZERS)}")


@dataclass
class Transition:
    episode: int
    block: int
    tokens: np.ndarray  # pre-action sequence, so log-probs can be recomputed
    mask: np.ndarray
    logprob: float
    reward: float
    value: float
    done: bool
    n_merge: int = 0
    kd: float = 0.0


@dataclass
class TrajectoryBuffer:
    transitions: list = field(default_factory=list)
    advantages: Optional[np.ndarray] = None
    returns: Optional[np.ndarray] = None
    episode_returns: list = field(default_factory=list)
    episode_reductions: list = field(default_factory=list)

    def __len__(self):
        return len(self.transitions)


# -- rollouts ---------------------------------------------------------------

def run_episode(image, w: BackboneWeights, actor: dict, critic: Optional[dict],
                reward_cfg: RewardConfig, rng: Optional[Rng], mode: str = "sample",
                episode: int = 0, proportional_attention: bool = False):
    """Play one image through the merge MDP; returns (transitions, token_counts)."""
    cfg = w.cfg
    teacher = teacher_trace(image, w, proportional_attention)
    policy = A.AgentPolicy(actor)
    seq = patch_embed(image, w)
    prev_kd = 0.0
    out, counts = [], []
    for l in range(cfg.depth):
        value = A.critic_value(seq, l, critic) if critic is not None else 0.0
        snapshot = seq.tokens
        step = policy.step(seq, l, mode=mode, rng=rng)
        seq = apply_merge(seq, step.assignment)
        counts.append(seq.n)
        try:
            seq = block_forward(seq, w.block(l), cfg.heads, proportional_attention)
        except NumericFault as err:
            raise NumericFault(f"episode {episode}: {err}", block=l) from err
        kd = kd_loss(seq, teacher[l])
        outcome = step_reward(step.assignment.n_src, kd, prev_kd, reward_cfg)
        prev_kd = kd
        if not np.isfinite(outcome.reward):
            raise NumericFault(f"episode {episode}: non-finite reward at block {l}", block=l)
        out.append(Transition(episode, l, snapshot, step.mask, step.logprob, outcome.reward,
                              value, l == cfg.depth - 1, outcome.n_merge, kd))
    return out, counts


def collect_rollouts(images, w, actor, critic, reward_cfg: RewardConfig, rng: Rng,
                     proportional_attention: bool = False) -> TrajectoryBuffer:
    buf = TrajectoryBuffer()
    n0 = w.cfg.n_tokens
    for e, image in enumerate(images):
        trs, counts = run_episode(image, w, actor, critic, reward_cfg, rng.split(e), "sample", e,
                                  proportional_attention)
        buf.transitions.extend(trs)
        buf.episode_returns.append(episode_return([t.reward for t in trs], reward_cfg.gamma))
        buf.episode_reductions.append(100.0 * np.mean([(n0 - c) / n0 for c in counts]))
    return buf


def compute_gae(buf: TrajectoryBuffer, gamma: float, lam: float) -> TrajectoryBuffer:
    """Generalized advantage estimates; terminal bootstrap value is 0."""
    n = len(buf)
    adv = np.zeros(n)
    next_value, next_adv = 0.0, 0.0
    for i in reversed(range(n)):
        t = buf.transitions[i]
        live = 0.0 if t.done else 1.0
        delta = t.reward + gamma * next_value * live - t.value
        next_adv = delta + gamma * lam * next_adv * live
        adv[i] = next_adv
        next_value = t.value
    buf.advantages = adv
    buf.returns = adv + np.array([t.value for t in buf.transitions])
    return buf


# -- loss -------------------------------------------------------------------

@dataclass
class Batch:
    tokens: np.ndarray
    valid: np.ndarray
    layers: np.ndarray
    masks: np.ndarray
    old_logprob: np.ndarray
    advantages: np.ndarray
    returns: np.ndarray


def make_batch(transitions, advantages, returns) -> Batch:
    tokens, valid = A.pad_batch([t.tokens for t in transitions])
    masks = np.zeros(valid.shape, np.int8)
    for b, t in enumerate(transitions):
        masks[b, :len(t.mask)] = t.mask
    return Batch(tokens, valid, np.array([t.block for t in transitions]), masks,
                 np.array([t.logprob for t in transitions], np.float64),
                 np.asarray(advantages, np.float64), np.asarray(returns, np.float64))


def ppo_loss(graph: Graph, p: dict, batch: Batch, cfg: PPOConfig):
    """Clipped surrogate + value regression - entropy bonus. Returns (loss node, stats)."""
    live = batch.valid.copy()
    live[:, 0] = False  # class token never acts
    live_c = graph.const(live)
    sign = graph.const(np.where(batch.masks == 1, 1.0, -1.0))

    z = A.actor_raw_logits(graph, p, batch.tokens, batch.layers, batch.valid)
    logp = ad.sum(ad.log_sigmoid(z * sign) * live_c, axis=-1)
    ratio = ad.exp(logp - graph.const(batch.old_logprob))
    adv = graph.const(batch.advantages)
    surr = ad.minimum(ratio * adv, ad.clip(ratio, 1.0 - cfg.clip_eps, 1.0 + cfg.clip_eps) * adv)
    policy_loss = -ad.mean(surr)

    prob = ad.sigmoid(z)
    tok_ent = -(prob * ad.log_sigmoid(z) + (1.0 - prob) * ad.log_sigmoid(-z))
    entropy = ad.mean(ad.sum(tok_ent * live_c, axis=-1))

    v = A.critic_values(graph, p, batch.tokens, batch.layers, batch.valid)
    value_loss = ad.mean(ad.square(v - graph.const(batch.returns)))

    loss = policy_loss + ad.scale(value_loss, cfg.value_coef) - ad.scale(entropy, cfg.entropy_coef)
    r = ratio.data.astype(np.float64)
    log_r = logp.data.astype(np.float64) - batch.old_logprob
    stats = {
        "policy_loss": float(policy_loss.data),
        "value_loss": float(value_loss.data),
        "entropy": float(entropy.data),
        "clip_frac": float(np.mean(np.abs(r - 1.0) > cfg.clip_eps)),
        "approx_kl": float(np.mean(np.expm1(log_r) - log_r)),
    }
    return loss, stats


class SGD:
    """Fixed-step gradient descent with optional heavy-ball momentum."""

    def __init__(self, lr: float, momentum: float = 0.0):
        self.lr = lr
        self.momentum = momentum
        self.velocity: dict[str, np.ndarray] = {}

    def step(self, params: dict, grads: dict) -> dict:
        out = dict(params)
        for name, g in grads.items():
            if name not in params:
                continue
            if self.momentum:
                v = self.momentum * self.velocity.get(name, 0.0) + g
                self.velocity[name] = v
            else:
                v = g
            out[name] = (params[name].astype(np.float64) - self.lr * v).astype(params[name].dtype)
        return out


class Adam:
    """Adam with bias correction; ``momentum`` is unused and kept for a uniform signature."""

    def __init__(self, lr: float, momentum: float = 0.0, b1: float = 0.9, b2: float = 0.999,
                 eps: float = 1e-8):
        self.lr, self.b1, self.b2, self.eps = lr, b1, b2, eps
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}
        self.t = 0

    def step(self, params: dict, grads: dict) -> dict:
        self.t += 1
        c1, c2 = 1 - self.b1 ** self.t, 1 - self.b2 ** self.t
        out = dict(params)
        for name, g in grads.items():
            if name not in params:
                continue
            g = np.asarray(g, np.float64)
            m = self.b1 * self.m.get(name, 0.0) + (1 - self.b1) * g
            v = self.b2 * self.v.get(name, 0.0) + (1 - self.b2) * g * g
            self.m[name], self.v[name] = m, v
            upd = self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)
            out[name] = (params[name].astype(np.float64) - upd).astype(params[name].dtype)
        return out


OPTIMIZERS = {"sgd": SGD, "adam": Adam}


def make_optimizers(cfg: PPOConfig):
    cls = OPTIMIZERS[cfg.optimizer]
    return cls(cfg.actor_lr, cfg.momentum), cls(cfg.critic_lr, cfg.momentum)


def ppo_update(buf: TrajectoryBuffer, actor: dict, critic: dict, cfg: PPOConfig,
               rng: Optional[Rng] = None, optimizers=None):
    """Run the configured epochs of minibatch PPO. Returns (actor, critic, stats)."""
    if buf.advantages is None:
        raise ValueError("buffer has no advantages; run compute_gae first")
    if optimizers is None:
        optimizers = make_optimizers(cfg)
    opt_a, opt_c = optimizers
    rng = rng or Rng(cfg.seed, 0x70706F)
    adv = buf.advantages.astype(np.float64)
    if cfg.normalize_advantages and len(adv) > 1:
        adv = (adv - adv.mean()) / (adv.std() + 1e-8)
    n = len(buf)
    totals: dict[str, list] = {}
    for epoch in range(cfg.epochs):
        order = rng.split(epoch).permutation(n)
        for start in range(0, n, cfg.minibatch_size):
            idx = order[start:start + cfg.minibatch_size]
            batch = make_batch([buf.transitions[i] for i in idx], adv[idx], buf.returns[idx])
            g = Graph()
            p = {**A.bind(g, actor, True), **A.bind(g, critic, True)}
            loss, stats = ppo_loss(g, p, batch, cfg)
            if not np.isfinite(loss.data):
                raise NumericFault(f"non-finite PPO loss (epoch {epoch}): {stats}")
            grads = ad.backward(g, loss)
            actor = opt_a.step(actor, {k: v for k, v in grads.items() if k.startswith("actor.")})
            critic = opt_c.step(critic, {k: v for k, v in grads.items() if k.startswith("critic.")})
            for k, v in stats.items():
                totals.setdefault(k, []).append(v)
    return actor, critic, {k: float(np.mean(v)) for k, v in totals.items()}


# -- training loop ----------------------------------------------------------

@dataclass
class TrainBundle:
    backbone: BackboneWeights
    images: list
    reward: RewardConfig = field(default_factory=RewardConfig)
    ppo: PPOConfig = field(default_factory=PPOConfig)
    d_prime: int = 64
    d_critic: int = 256
    head_bias: float = -3.0
    head_std: float = 0.5
    proportional_attention: bool = False


@dataclass
class TrainResult:
    actor: dict
    critic: dict
    history: list


def init_agent(bundle: TrainBundle):
    cfg = bundle.backbone.cfg
    actor = A.init_actor(cfg.dim, cfg.depth, bundle.d_prime, bundle.ppo.seed, bundle.head_bias,
                          bundle.head_std)
    critic = A.init_critic(cfg.dim, cfg.depth, bundle.d_critic, bundle.ppo.seed)
    return actor, critic


def train(bundle: TrainBundle, emit: Optional[Callable[[str], None]] = None) -> TrainResult:
    """Alternate rollouts, GAE and PPO updates; the returned actor is the inference checkpoint."""
    if not bundle.images:
        raise ValueError("training needs at least one image")
    cfg = bundle.ppo
    actor, critic = init_agent(bundle)
    opts = make_optimizers(cfg)
    root = Rng(cfg.seed, 0x747261696E)
    history = []
    for b in range(cfg.total_batches):
        brng = root.split(b)
        pick = brng.split(0).integers(cfg.episodes_per_batch, len(bundle.images))
        images = [bundle.images[i] for i in pick]
        buf = collect_rollouts(images, bundle.backbone, actor, critic, bundle.reward, brng.split(1),
                               bundle.proportional_attention)
        compute_gae(buf, bundle.reward.gamma, cfg.gae_lambda)
        actor, critic, stats = ppo_update(buf, actor, critic, cfg, brng.split(2), opts)
        rec = {"batch": b, "mean_return": float(np.mean(buf.episode_returns)),
               "mean_reduction": float(np.mean(buf.episode_reductions)), **stats}
        history.append(rec)
        if emit is not None:
            emit(json.dumps(rec, sort_keys=True))
    return TrainResult(actor, critic, history)


def evaluate_returns(images, w, actor, reward_cfg: RewardConfig, mode: str = "sample",
                     seed: int = 0, proportional_attention: bool = False):
    """Mean discounted return, reduction % and per-block merge means over fresh episodes."""
    root = Rng(seed, 0x6576616C)
    n0 = w.cfg.n_tokens
    rets, reds, merges = [], [], []
    for e, image in enumerate(images):
        trs, counts = run_episode(image, w, actor, None, reward_cfg, root.split(e), mode, e,
                                  proportional_attention)
        rets.append(episode_return([t.reward for t in trs], reward_cfg.gamma))
        reds.append(100.0 * np.mean([(n0 - c) / n0 for c in counts]))
        merges.append([t.n_merge for t in trs])
    return float(np.mean(rets)), float(np.mean(reds)), np.mean(merges, axis=0)


# -- gradient check ---------------------------------------------------------

def _rel_err(a, b, floor=1e-6):
    return abs(a - b) / max(abs(a), abs(b), floor)


def grad_check(net: str = "actor", probes: int = 16, h: float = 1e-4, seed: int = 0,
               d_in: int = 8, depth: int = 3, width: Optional[int] = None, n_trans: int = 3) -> float:
    """Worst relative error between autodiff and central differences on the PPO loss.

    ``net`` is ``actor``, ``critic`` or ``linear`` (a linear toy loss, exact
    under central differences). Runs in float64 storage.
    """
    if probes <= 0:
        return 0.0
    stream = Rng(seed, 0x67636B)
    with K.float64_mode():
        if net == "linear":
            wv = stream.normal((d_in, 3))
            x = stream.normal((5, d_in))

            def loss_fn(params):
                g = Graph()
                p = A.bind(g, params, True)
                return g, ad.sum(ad.scale(ad.matmul(g.const(x), p["w"]), 0.5))

            params = {"w": wv}
        elif net in ("actor", "critic"):
            width = width or (8 if net == "actor" else 16)
            actor = A.init_params(A.AgentConfig(d_in, depth, width if net == "actor" else 8),
                                  "actor", seed, std=0.5)
            critic = A.init_params(A.AgentConfig(d_in, depth, width if net == "critic" else 16),
                                   "critic", seed + 1, std=0.5)
            # random biases and gains so every parameter carries gradient signal
            for pr in (actor, critic):
                for k in pr:
                    pr[k] = pr[k].astype(np.float64) + 0.3 * stream.normal(pr[k].shape)
            trs = []
            for i in range(n_trans):
                n = 3 + i
                trs.append(Transition(i, i % depth, stream.normal((n, d_in)),
                                      np.concatenate([[0], stream.bernoulli(np.full(n - 1, 0.5))]),
                                      0.0, 0.0, 0.0, False))
            cfg = PPOConfig(clip_eps=0.2, entropy_coef=0.05, value_coef=0.5)
            # old log-probs offset from the current ones so ratios straddle the clip band
            g0 = Graph()
            b0 = make_batch(trs, np.zeros(n_trans), np.zeros(n_trans))
            z0 = A.actor_raw_logits(g0, A.bind(g0, actor), b0.tokens, b0.layers, b0.valid).data
            for i, t in enumerate(trs):
                lp = A.bernoulli_logprob(np.concatenate([[A.CLS_LOGIT], z0[i, 1:len(t.mask)]]), t.mask)
                t.logprob = lp + (0.5 if i % 2 else -0.05) * (1 + 0.1 * i)
            batch = make_batch(trs, stream.normal((n_trans,)), stream.normal((n_trans,)))
            both = {**actor, **critic}

            def loss_fn(params):
                g = Graph()
                return g, ppo_loss(g, A.bind(g, params, True), batch, cfg)[0]

            params = {k: v for k, v in both.items()}
        else:
            raise ValueError(f"unknown net selector {net!r}")

        g, loss = loss_fn(params)
        grads = ad.backward(g, loss)
        names = [k for k in params if net == "linear" or k.startswith(net + ".")]
        worst = 0.0
        for i in range(probes):
            name = names[int(stream.integers(1, len(names))[0])]
            flat = int(stream.integers(1, params[name].size)[0])
            orig = params[name].reshape(-1)[flat]
            vals = []
            for sgn in (1, -1):
                trial = dict(params)
                arr = params[name].copy().reshape(-1)
                arr[flat] = orig + sgn * h
                trial[name] = arr.reshape(params[name].shape)
                vals.append(float(loss_fn(trial)[1].data))
            numeric = (vals[0] - vals[1]) / (2 * h)
            worst = max(worst, _rel_err(float(grads[name].reshape(-1)[flat]), numeric))
        return worst
