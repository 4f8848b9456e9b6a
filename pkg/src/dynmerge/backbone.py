"""Frozen forward-only ViT operating on size-weighted, variable-length token sequences."""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .num import kernels as K
from .num.kernels import NumericFault
from .num.rng import Rng


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class BackboneConfig:
    img_size: int = 16
    patch: int = 4
    channels: int = 3
    dim: int = 32
    depth: int = 4
    heads: int = 2
    mlp_ratio: int = 4
    num_classes: int = 10

    def __post_init__(self):
        for f in dataclasses.fields(self):
            if getattr(self, f.name) < 1:
                raise ConfigError(f"{f.name} must be >= 1")
        if self.img_size % self.patch:
            raise ConfigError("img_size must be divisible by patch")
        if self.dim % self.heads:
            raise ConfigError("dim must be divisible by heads")

    @property
    def grid(self) -> int:
        return self.img_size // self.patch

    @property
    def n_patches(self) -> int:
        return self.grid**2

    @property
    def n_tokens(self) -> int:
        return self.n_patches + 1

    @property
    def patch_dim(self) -> int:
        return self.patch * self.patch * self.channels

    @property
    def hidden(self) -> int:
        return self.dim * self.mlp_ratio


def weight_shapes(cfg: BackboneConfig) -> dict[str, tuple]:
    d, h = cfg.dim, cfg.hidden
    shapes = {
        "patch.w": (cfg.patch_dim, d),
        "patch.b": (d,),
        "cls": (d,),
        "pos": (cfg.n_tokens, d),
    }
    for i in range(cfg.depth):
        p = f"blocks.{i}."
        shapes.update({
            p + "ln1.g": (d,), p + "ln1.b": (d,),
            p + "qkv.w": (d, 3 * d), p + "qkv.b": (3 * d,),
            p + "proj.w": (d, d), p + "proj.b": (d,),
            p + "ln2.g": (d,), p + "ln2.b": (d,),
            p + "fc1.w": (d, h), p + "fc1.b": (h,),
            p + "fc2.w": (h, d), p + "fc2.b": (d,),
        })
    shapes.update({"norm.g": (d,), "norm.b": (d,), "head.w": (d, cfg.num_classes),
                   "head.b": (cfg.num_classes,)})
    return shapes


class BackboneWeights:
    """Named read-only weight arrays plus the config they were built for."""

    def __init__(self, cfg: BackboneConfig, tensors: dict[str, np.ndarray]):
        expected = weight_shapes(cfg)
        missing = set(expected) - set(tensors)
        if missing:
            raise ConfigError(f"missing backbone tensors: {sorted(missing)[:5]}")
        self.cfg = cfg
        self.tensors = {}
        for name, shape in expected.items():
            arr = np.array(tensors[name], dtype=np.float32)
            if arr.shape != shape:
                raise ConfigError(f"{name}: shape {arr.shape} != expected {shape}")
            arr.flags.writeable = False
            self.tensors[name] = arr
        self._blocks = []
        for i in range(cfg.depth):
            p = f"blocks.{i}."
            self._blocks.append({k[len(p):]: v for k, v in self.tensors.items() if k.startswith(p)})

    def __getitem__(self, name):
        return self.tensors[name]

    def block(self, i: int) -> dict[str, np.ndarray]:
        return self._blocks[i]


def gen_backbone(cfg: BackboneConfig, seed: int) -> BackboneWeights:
    """Truncated-normal (std 0.02) weights, zero biases, unit LayerNorm gains."""
    stream = Rng(seed, 0x6261636B)
    tensors = {}
    for name, shape in weight_shapes(cfg).items():
        leaf = name.rsplit(".", 1)[-1]
        if leaf == "g":
            tensors[name] = np.ones(shape, np.float32)
        elif leaf == "b":
            tensors[name] = np.zeros(shape, np.float32)
        else:
            tensors[name] = stream.truncated_normal(shape, std=0.02).astype(np.float32)
    return BackboneWeights(cfg, tensors)


@dataclass
class TokenSequence:
    """Current tokens with their sizes and the original-index lineage.

    ``lineage[o]`` is the current index representing original token ``o``;
    ``origin[j]`` is the original index that current token ``j`` started as.
    """

    tokens: np.ndarray
    sizes: np.ndarray
    lineage: np.ndarray
    origin: np.ndarray
    block_idx: int = 0

    @property
    def n(self) -> int:
        return self.tokens.shape[0]

    @property
    def n0(self) -> int:
        return self.lineage.shape[0]

    def validate(self):
        n = self.n
        if self.sizes.shape != (n,) or self.origin.shape != (n,):
            raise ValueError("sizes/origin length must match token count")
        if np.any(self.sizes <= 0):
            raise ValueError("token sizes must be positive")
        if self.sizes.sum() != self.n0:
            raise ValueError(f"sizes sum {self.sizes.sum()} != N0 {self.n0}")
        if self.lineage.min() < 0 or self.lineage.max() >= n:
            raise ValueError("lineage maps outside the live sequence")
        if self.origin[0] != 0 or self.lineage[0] != 0:
            raise ValueError("index 0 must be the class token")


def patchify(image: np.ndarray, cfg: BackboneConfig) -> np.ndarray:
    """[C, H, W] -> [n_patches, C*P*P], patches in row-major grid order."""
    c, p, g = cfg.channels, cfg.patch, cfg.grid
    x = image.reshape(c, g, p, g, p)
    return x.transpose(1, 3, 0, 2, 4).reshape(g * g, c * p * p)


def patch_embed(image, w: BackboneWeights) -> TokenSequence:
    cfg = w.cfg
    image = np.asarray(image, dtype=np.float32)
    if image.shape != (cfg.channels, cfg.img_size, cfg.img_size):
        raise K.ShapeError(
            f"image shape {image.shape} != {(cfg.channels, cfg.img_size, cfg.img_size)}")
    patches = K.matmul(patchify(image, cfg), w["patch.w"]) + w["patch.b"]
    tokens = np.concatenate([w["cls"][None, :], patches], axis=0) + w["pos"]
    n0 = cfg.n_tokens
    return TokenSequence(
        tokens=K.asarray(tokens),
        sizes=np.ones(n0),
        lineage=np.arange(n0),
        origin=np.arange(n0),
        block_idx=0,
    )


def attention(x, bw, heads, sizes=None):
    n, d = x.shape
    dh = d // heads
    qkv = K.matmul(x, bw["qkv.w"]) + bw["qkv.b"]
    q, k, v = (qkv[:, i * d:(i + 1) * d].reshape(n, heads, dh).transpose(1, 0, 2) for i in range(3))
    logits = K.matmul(q, k.transpose(0, 2, 1)) * K.asarray(1.0 / np.sqrt(dh))
    if sizes is not None:
        logits = logits + K.asarray(np.log(sizes))[None, None, :]
    att = K.softmax_rows(logits)
    out = K.matmul(att, v).transpose(1, 0, 2).reshape(n, d)
    return K.matmul(out, bw["proj.w"]) + bw["proj.b"]


def mlp(x, bw):
    return K.matmul(K.gelu(K.matmul(x, bw["fc1.w"]) + bw["fc1.b"]), bw["fc2.w"]) + bw["fc2.b"]


def block_forward(seq: TokenSequence, bw: dict, heads: int,
                  proportional_attention: bool = False) -> TokenSequence:
    """Pre-LN transformer block; sizes and lineage pass through unchanged."""
    x = seq.tokens
    sizes = seq.sizes if proportional_attention else None
    x = K.asarray(x + attention(K.layernorm(x, bw["ln1.g"], bw["ln1.b"]), bw, heads, sizes))
    x = K.asarray(x + mlp(K.layernorm(x, bw["ln2.g"], bw["ln2.b"]), bw))
    if not np.all(np.isfinite(x)):
        raise NumericFault(f"non-finite activations in block {seq.block_idx}", block=seq.block_idx)
    return dataclasses.replace(seq, tokens=x, block_idx=seq.block_idx + 1)


def classify(seq: TokenSequence, w: BackboneWeights) -> np.ndarray:
    cls = K.layernorm(seq.tokens[:1], w["norm.g"], w["norm.b"])
    return (K.matmul(cls, w["head.w"]) + w["head.b"])[0]


@dataclass
class EpisodeTrace:
    n0: int
    token_counts: list = field(default_factory=list)     # tokens processed by each block
    observed_counts: list = field(default_factory=list)  # tokens seen by the policy at each block
    merge_counts: list = field(default_factory=list)
    masks: list = field(default_factory=list)            # per-block mask, or None when no policy
    match_sizes: list = field(default_factory=list)      # (|src|, |dst|) of each matching run
    retained: list = field(default_factory=list)         # per-block bool[N0]: original still a live token
    logprobs: list = field(default_factory=list)
    block_outputs: list = field(default_factory=list)


def full_forward(image, w: BackboneWeights, policy=None, mode: str = "threshold",
                 rng: Optional[Rng] = None, proportional_attention: bool = False,
                 record_outputs: bool = False):
    """Run the backbone, letting ``policy`` merge tokens at each block input.

    ``policy.step(seq, l, mode=..., rng=...)`` must return an object with
    ``mask``, ``assignment`` and ``logprob``; see ``agent.AgentPolicy`` and
    ``merge.FixedRPolicy``.
    """
    from .merge import apply_merge

    cfg = w.cfg
    seq = patch_embed(image, w)
    trace = EpisodeTrace(n0=seq.n0)
    for l in range(cfg.depth):
        trace.observed_counts.append(seq.n)
        if policy is not None:
            step = policy.step(seq, l, mode=mode, rng=rng)
            trace.masks.append(step.mask)
            trace.logprobs.append(step.logprob)
            if step.assignment.n_src:
                trace.match_sizes.append((step.assignment.n_src, step.assignment.n_dst))
                seq = apply_merge(seq, step.assignment)
            trace.merge_counts.append(step.assignment.n_src)
        else:
            trace.masks.append(None)
            trace.merge_counts.append(0)
        alive = np.zeros(seq.n0, dtype=bool)
        alive[seq.origin] = True
        trace.retained.append(alive)
        trace.token_counts.append(seq.n)
        seq = block_forward(seq, w.block(l), cfg.heads, proportional_attention)
        if record_outputs:
            trace.block_outputs.append(seq.tokens)
    return classify(seq, w), trace
