"""Mask-driven many-to-one token merging and the fixed-r bipartite baseline."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .backbone import TokenSequence
from .num import kernels as K


class MergeError(ValueError):
    pass


@dataclass(frozen=True)
class MergeAssignment:
    src: np.ndarray   # current indices being absorbed
    dst: np.ndarray   # matched destination for each entry of src
    n_dst: int = 0    # size of the candidate destination set (for cost accounting)

    @property
    def n_src(self) -> int:
        return len(self.src)

    @property
    def pairs(self):
        return list(zip(self.src.tolist(), self.dst.tolist()))

    @classmethod
    def empty(cls, n_dst=0):
        return cls(np.zeros(0, np.int64), np.zeros(0, np.int64), n_dst)


@dataclass
class MergeStep:
    mask: np.ndarray
    assignment: MergeAssignment
    logprob: float = 0.0


def validate_mask(mask, n: int) -> np.ndarray:
    mask = np.asarray(mask).astype(np.int8)
    if mask.shape != (n,):
        raise MergeError(f"mask length {mask.shape} != sequence length {n}")
    if mask[0]:
        raise MergeError("class token (index 0) cannot be a merge source")
    if np.any((mask != 0) & (mask != 1)):
        raise MergeError("mask must be binary")
    return mask


def partition(seq: TokenSequence, mask):
    mask = validate_mask(mask, seq.n)
    return np.flatnonzero(mask == 1), np.flatnonzero(mask == 0)


def cosine_matrix(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Pairwise cosine similarity; rows with zero norm get similarity 0."""
    a = np.asarray(a, np.float64)
    b = np.asarray(b, np.float64)
    na = np.linalg.norm(a, axis=1)
    nb = np.linalg.norm(b, axis=1)
    denom = na[:, None] * nb[None, :]
    dots = a @ b.T
    out = np.zeros_like(dots)
    np.divide(dots, denom, out=out, where=denom > 0)
    return out


def match_sources(seq: TokenSequence, src, dst) -> MergeAssignment:
    """Pair every source with its most cosine-similar destination (lowest index on ties)."""
    src = np.asarray(src, np.int64)
    dst = np.sort(np.asarray(dst, np.int64))
    if len(dst) == 0:
        raise MergeError("empty destination set")
    if len(src) == 0:
        return MergeAssignment.empty(len(dst))
    sims = cosine_matrix(seq.tokens[src], seq.tokens[dst])
    return MergeAssignment(src, dst[np.argmax(sims, axis=1)], len(dst))


def apply_merge(seq: TokenSequence, assignment: MergeAssignment) -> TokenSequence:
    """Size-weighted average of each destination with all sources routed to it."""
    if assignment.n_src == 0:
        return seq
    src, dst = assignment.src, assignment.dst
    n = seq.n
    is_src = np.zeros(n, dtype=bool)
    is_src[src] = True
    if is_src.sum() != len(src) or is_src[dst].any() or is_src[0]:
        raise MergeError("invalid assignment: repeated source, source used as destination, or class token")

    sizes = seq.sizes.copy()
    tokens = seq.tokens.copy()
    targets = np.unique(dst)
    num = tokens[targets].astype(np.float64) * sizes[targets, None]
    den = sizes[targets].copy()
    slot = np.searchsorted(targets, dst)
    np.add.at(num, slot, seq.tokens[src].astype(np.float64) * seq.sizes[src, None])
    np.add.at(den, slot, seq.sizes[src])
    tokens[targets] = K.asarray(num / den[:, None])
    sizes[targets] = den

    redirect = np.arange(n)
    redirect[src] = dst
    keep = ~is_src
    new_index = np.cumsum(keep) - 1
    return TokenSequence(
        tokens=tokens[keep],
        sizes=sizes[keep],
        lineage=new_index[redirect[seq.lineage]],
        origin=seq.origin[keep],
        block_idx=seq.block_idx,
    )


def bipartite_assignment(seq: TokenSequence, r: int) -> MergeAssignment:
    """Top-r edges of alternating A/B split over non-class tokens."""
    n = seq.n
    max_r = (n - 1) // 2
    if not 0 <= r <= max_r:
        raise MergeError(f"r={r} outside [0, {max_r}] for {n} tokens")
    rest = np.arange(1, n)
    a, b = rest[0::2], rest[1::2]
    if r == 0:
        return MergeAssignment.empty(len(b))
    sims = cosine_matrix(seq.tokens[a], seq.tokens[b])
    best = np.argmax(sims, axis=1)
    score = sims[np.arange(len(a)), best]
    top = np.argsort(-score, kind="stable")[:r]
    top = np.sort(top)
    return MergeAssignment(a[top], b[best[top]], len(b))


def bipartite_fixed_r(seq: TokenSequence, r: int) -> TokenSequence:
    return apply_merge(seq, bipartite_assignment(seq, r))


class FixedRPolicy:
    """Merge min(r, max allowed) tokens at every block input."""

    def __init__(self, r: int):
        if r < 0:
            raise MergeError("r must be non-negative")
        self.r = int(r)

    def step(self, seq, l, mode="threshold", rng=None) -> MergeStep:
        r = min(self.r, (seq.n - 1) // 2)
        asg = bipartite_assignment(seq, r)
        mask = np.zeros(seq.n, np.int8)
        mask[asg.src] = 1
        return MergeStep(mask, asg, 0.0)


class MaskPolicy:
    """Replays fixed per-block masks, e.g. for tests and the zero-merge policy."""

    def __init__(self, masks_fn):
        self.masks_fn = masks_fn

    def step(self, seq, l, mode="threshold", rng=None) -> MergeStep:
        mask = validate_mask(self.masks_fn(seq, l), seq.n)
        src, dst = partition(seq, mask)
        asg = match_sources(seq, src, dst) if len(src) else MergeAssignment.empty(len(dst))
        return MergeStep(mask, asg, 0.0)


def zero_merge_policy() -> MaskPolicy:
    return MaskPolicy(lambda seq, l: np.zeros(seq.n, np.int8))
