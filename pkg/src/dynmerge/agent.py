"""Depth-aware state encoder, per-token merge actor, and the offline-only critic.

Both networks share one layout: a linear projection of the backbone tokens,
a learnable per-block embedding row added to every token, and a single
pre-LN transformer encoder layer (single-head attention, 4x MLP). The actor
ends in a per-token logit head; the critic mean-pools and regresses a value.

The forward pass is written once against the autodiff ops and runs batched
over padded sequences: ``tokens`` is [B, N, d], ``valid`` marks real tokens.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .backbone import TokenSequence
from .merge import MergeAssignment, MergeStep, match_sources, partition
from .num import autodiff as ad
from .num import kernels as K
from .num.autodiff import Graph
from .num.rng import Rng

CLS_LOGIT = -1e30  # stands in for -inf: sigmoid underflows to exactly 0
PAD_BIAS = -1e9


class AgentError(ValueError):
    pass


@dataclass(frozen=True)
class AgentConfig:
    d_in: int
    depth: int
    width: int

    def shapes(self, prefix: str, head_out: int = 1) -> dict[str, tuple]:
        d, w, h = self.d_in, self.width, 4 * self.width
        return {
            f"{prefix}.proj.w": (d, w), f"{prefix}.proj.b": (w,),
            f"{prefix}.layer_embed": (self.depth, w),
            f"{prefix}.enc.ln1.g": (w,), f"{prefix}.enc.ln1.b": (w,),
            f"{prefix}.enc.qkv.w": (w, 3 * w), f"{prefix}.enc.qkv.b": (3 * w,),
            f"{prefix}.enc.out.w": (w, w), f"{prefix}.enc.out.b": (w,),
            f"{prefix}.enc.ln2.g": (w,), f"{prefix}.enc.ln2.b": (w,),
            f"{prefix}.enc.fc1.w": (w, h), f"{prefix}.enc.fc1.b": (h,),
            f"{prefix}.enc.fc2.w": (h, w), f"{prefix}.enc.fc2.b": (w,),
            f"{prefix}.head.w": (w, head_out), f"{prefix}.head.b": (head_out,),
        }


def init_params(cfg: AgentConfig, prefix: str, seed: int, head_bias: float = 0.0,
                std: float | None = None, head_std: float | None = None) -> dict[str, np.ndarray]:
    """Unit LayerNorm gains, zero biases except the head bias, truncated-normal matrices.

    Matrices use fan-in scaling (std = 1/sqrt(fan_in)) unless ``std`` is given;
    layer embeddings use std 0.02. ``head_std`` overrides the head matrix scale
    (a near-zero head makes every token's logit nearly equal; a wider one
    gives the threshold rule a per-token spread to work with).
    """
    stream = Rng(seed, int.from_bytes(prefix.encode(), "little"))
    out = {}
    for name, shape in cfg.shapes(prefix).items():
        leaf = name.rsplit(".", 1)[-1]
        if leaf == "g":
            out[name] = np.ones(shape, np.float32)
        elif name.endswith("head.b"):
            out[name] = np.full(shape, head_bias, np.float32)
        elif leaf == "b":
            out[name] = np.zeros(shape, np.float32)
        else:
            if name.endswith("layer_embed"):
                s = 0.02
            elif name.endswith("head.w") and head_std is not None:
                s = head_std
            else:
                s = std if std is not None else 1.0 / np.sqrt(shape[0])
            out[name] = stream.truncated_normal(shape, std=s).astype(np.float32)
    return out


def init_actor(d_in, depth, d_prime=64, seed=0, head_bias=0.0, head_std=0.5):
    return init_params(AgentConfig(d_in, depth, d_prime), "actor", seed, head_bias, head_std=head_std)


def init_critic(d_in, depth, d_critic=256, seed=0):
    return init_params(AgentConfig(d_in, depth, d_critic), "critic", seed + 1)


def config_of(params: dict, prefix: str) -> AgentConfig:
    d_in, width = params[f"{prefix}.proj.w"].shape
    depth = params[f"{prefix}.layer_embed"].shape[0]
    return AgentConfig(d_in, depth, width)


# -- batched graph forward --------------------------------------------------

def pad_batch(seqs: list[np.ndarray]):
    """Stack [N_i, d] token arrays into [B, N_max, d] with a validity mask."""
    n = max(s.shape[0] for s in seqs)
    d = seqs[0].shape[1]
    tokens = np.zeros((len(seqs), n, d), K.dtype())
    valid = np.zeros((len(seqs), n), bool)
    for b, s in enumerate(seqs):
        tokens[b, :s.shape[0]] = s
        valid[b, :s.shape[0]] = True
    return tokens, valid


def _encoder(x, p, prefix, key_bias):
    q = lambda k: p[f"{prefix}.enc.{k}"]  # noqa: E731
    w = x.shape[-1]
    h = ad.layernorm(x, q("ln1.g"), q("ln1.b"))
    qkv = ad.matmul(h, q("qkv.w")) + q("qkv.b")
    qs, ks, vs = (qkv[..., i * w:(i + 1) * w] for i in range(3))
    scores = ad.scale(ad.matmul(qs, ad.transpose(ks)), 1.0 / np.sqrt(w)) + key_bias
    att = ad.softmax(scores)
    x = x + ad.matmul(ad.matmul(att, vs), q("out.w")) + q("out.b")
    h = ad.layernorm(x, q("ln2.g"), q("ln2.b"))
    return x + ad.matmul(ad.gelu(ad.matmul(h, q("fc1.w")) + q("fc1.b")), q("fc2.w")) + q("fc2.b")


def encode(graph: Graph, p: dict, prefix: str, tokens, layers, valid):
    """S = Encoder(Proj(X) + E[l]) for a padded batch; returns a [B, N, w] node."""
    x = graph.const(tokens)
    rows = ad.index(p[f"{prefix}.layer_embed"], np.asarray(layers)[:, None])  # [B, 1, w]
    x = ad.matmul(x, p[f"{prefix}.proj.w"]) + p[f"{prefix}.proj.b"] + rows
    key_bias = graph.const(np.where(valid, 0.0, PAD_BIAS)[:, None, :])
    return _encoder(x, p, prefix, key_bias)


def actor_raw_logits(graph, p, tokens, layers, valid):
    s = encode(graph, p, "actor", tokens, layers, valid)
    return ad.sum(ad.matmul(s, p["actor.head.w"]), axis=-1) + p["actor.head.b"]


def critic_values(graph, p, tokens, layers, valid):
    s = encode(graph, p, "critic", tokens, layers, valid)
    counts = valid.sum(axis=1, keepdims=True).astype(np.float64)
    pooled = ad.sum(s * graph.const(valid[..., None]), axis=1) * graph.const(1.0 / counts)
    return ad.sum(ad.matmul(pooled, p["critic.head.w"]), axis=-1) + p["critic.head.b"]


def bind(graph: Graph, params: dict, trainable: bool = False) -> dict:
    return {k: graph.param(k, v, trainable) for k, v in params.items()}


# -- single-sequence API ----------------------------------------------------

@dataclass
class AgentState:
    features: np.ndarray  # [N_cur, width]
    block_idx: int


def _check_layer(l, depth):
    if not 0 <= l < depth:
        raise AgentError(f"block index {l} outside [0, {depth})")


def extract_state(seq: TokenSequence, l: int, params: dict, prefix: str = "actor") -> AgentState:
    cfg = config_of(params, prefix)
    _check_layer(l, cfg.depth)
    g = Graph()
    tokens = seq.tokens[None].astype(K.dtype())
    valid = np.ones((1, seq.n), bool)
    s = encode(g, bind(g, params), prefix, tokens, [l], valid)
    return AgentState(s.data[0], l)


def actor_logits(state: AgentState, params: dict) -> np.ndarray:
    """Per-token logits from the actor head; index 0 is forced to CLS_LOGIT."""
    out = K.matmul(state.features, params["actor.head.w"])[:, 0] + params["actor.head.b"][0]
    out = K.asarray(out)
    out[0] = CLS_LOGIT
    return out


def sequence_logits(seq: TokenSequence, l: int, params: dict) -> np.ndarray:
    return actor_logits(extract_state(seq, l, params, "actor"), params)


def bernoulli_logprob(logits, mask) -> float:
    """Joint log-probability of ``mask`` under independent Bernoulli(sigmoid(logits)).

    The class token is excluded: its merge probability is 0 and its bit is 0.
    """
    z = np.asarray(logits, np.float64)[1:]
    m = np.asarray(mask)[1:]
    x = np.where(m == 1, z, -z)
    return float((np.minimum(x, 0.0) - np.log1p(np.exp(-np.abs(x)))).sum())


def act(logits, mode: str = "threshold", rng: Rng | None = None):
    """Returns (mask, logprob). Threshold mode reports logprob 0 and consumes no randomness."""
    logits = np.asarray(logits)
    probs = K.sigmoid(logits).astype(np.float64)
    probs[0] = 0.0
    if mode == "threshold":
        # sigmoid(z) > 0.5 exactly when z > 0; compare logits to avoid float32 rounding at 0.5
        mask = (logits > 0).astype(np.int8)
        mask[0] = 0
        return mask, 0.0
    if mode == "sample":
        if rng is None:
            raise AgentError("sample mode needs an rng")
        mask = rng.bernoulli(probs)
        mask[0] = 0
        return mask, bernoulli_logprob(logits, mask)
    raise AgentError(f"unknown action mode {mode!r}")


def critic_value(seq: TokenSequence, l: int, params: dict) -> float:
    cfg = config_of(params, "critic")
    _check_layer(l, cfg.depth)
    g = Graph()
    v = critic_values(g, bind(g, params), seq.tokens[None].astype(K.dtype()), [l],
                      np.ones((1, seq.n), bool))
    return float(v.data[0])


class AgentPolicy:
    """Actor-driven merge policy: state -> mask -> match -> assignment.

    Matching is skipped when the mask selects no sources.
    """

    def __init__(self, actor_params: dict):
        self.params = actor_params
        self.cfg = config_of(actor_params, "actor")

    def step(self, seq, l, mode="threshold", rng=None) -> MergeStep:
        logits = sequence_logits(seq, l, self.params)
        mask, logprob = act(logits, mode, rng)
        src, dst = partition(seq, mask)
        if len(src) == 0:
            return MergeStep(mask, MergeAssignment.empty(len(dst)), logprob)
        return MergeStep(mask, match_sources(seq, src, dst), logprob)
