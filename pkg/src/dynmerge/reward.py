"""Dense per-block reward: merge count minus a one-sided squared distillation penalty."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .backbone import BackboneWeights, TokenSequence, full_forward


@dataclass(frozen=True)
class RewardConfig:
    alpha: float = 1.0
    beta: float = 5e7
    gamma: float = 0.99

    def __post_init__(self):
        if not self.alpha > 0:
            raise ValueError("alpha must be > 0")
        if not self.beta >= 0:
            raise ValueError("beta must be >= 0")
        if not 0 < self.gamma <= 1:
            raise ValueError("gamma must lie in (0, 1]")


@dataclass(frozen=True)
class StepOutcome:
    n_merge: int
    kd_loss: float
    delta_kd: float
    reward: float


def teacher_trace(image, w: BackboneWeights, proportional_attention: bool = False) -> list[np.ndarray]:
    """Per-block outputs of the unpruned forward pass."""
    _, trace = full_forward(image, w, None, proportional_attention=proportional_attention,
                            record_outputs=True)
    return trace.block_outputs


def kd_loss(seq: TokenSequence, teacher_block: np.ndarray) -> float:
    """Mean squared error between each original token's current representative and the teacher."""
    lineage = np.asarray(seq.lineage)
    n0, d = teacher_block.shape
    if lineage.shape != (n0,) or lineage.min() < 0 or lineage.max() >= seq.n:
        raise ValueError("lineage is not a total map onto the live sequence")
    diff = seq.tokens[lineage].astype(np.float64) - teacher_block.astype(np.float64)
    return float(np.sum(diff * diff) / (n0 * d))


def step_reward(n_merge: int, kd: float, prev_kd: float, cfg: RewardConfig) -> StepOutcome:
    delta = kd - prev_kd
    penalty = max(0.0, delta) ** 2
    return StepOutcome(int(n_merge), kd, delta, cfg.alpha * n_merge - cfg.beta * penalty)


def episode_return(rewards, gamma: float) -> float:
    g = 0.0
    for r in reversed(list(rewards)):
        g = r + gamma * g
    return g
