"""Analytic MAC counts, one multiply-accumulate counted as one FLOP.

Only matrix products are counted; LayerNorm, softmax, activations and the
merge's weighted average are free. With this convention the ViT-Tiny/16 at
224 px comes to 1.254e9, the figure usually quoted as 1.25 GFLOPs.
"""
from __future__ import annotations

from dataclasses import dataclass, field

from .backbone import BackboneConfig

# reference overhead figures (GFLOPs, % of unpruned) for the standard model sizes
REFERENCE_OVERHEAD = {
    "tiny": (0.032, 2.59),
    "small": (0.038, 0.83),
    "base": (0.050, 0.28),
    "large": (0.097, 0.16),
}

STANDARD_SHAPES = {
    "tiny": BackboneConfig(img_size=224, patch=16, dim=192, depth=12, heads=3, num_classes=1000),
    "small": BackboneConfig(img_size=224, patch=16, dim=384, depth=12, heads=6, num_classes=1000),
    "base": BackboneConfig(img_size=224, patch=16, dim=768, depth=12, heads=12, num_classes=1000),
    "large": BackboneConfig(img_size=224, patch=16, dim=1024, depth=24, heads=16, num_classes=1000),
}


def block_macs(n: int, d: int, mlp_ratio: int = 4) -> int:
    """qkv 3Nd^2 + proj Nd^2 + MLP 2*ratio*Nd^2 + scores N^2 d + weighted sum N^2 d."""
    return (4 + 2 * mlp_ratio) * n * d * d + 2 * n * n * d


def encoder_macs(n: int, w: int) -> int:
    return block_macs(n, w, 4)


@dataclass
class FlopsReport:
    patch_embed: int = 0
    blocks: list = field(default_factory=list)
    head: int = 0
    agent: list = field(default_factory=list)
    matching: list = field(default_factory=list)
    unpruned_backbone: int = 0

    @property
    def backbone_total(self) -> int:
        return self.patch_embed + sum(self.blocks) + self.head

    @property
    def agent_total(self) -> int:
        return sum(self.agent)

    @property
    def matching_total(self) -> int:
        return sum(self.matching)

    @property
    def overhead(self) -> int:
        return self.agent_total + self.matching_total

    @property
    def total(self) -> int:
        return self.backbone_total + self.overhead

    @property
    def overhead_ratio(self) -> float:
        """(agent + matching) / unpruned backbone."""
        return self.overhead / self.unpruned_backbone if self.unpruned_backbone else 0.0

    def table(self) -> str:
        rows = [("patch_embed", self.patch_embed)]
        rows += [(f"block{i + 1}", b) for i, b in enumerate(self.blocks)]
        rows += [("head", self.head), ("backbone_total", self.backbone_total)]
        rows += [(f"agent{i + 1}", a) for i, a in enumerate(self.agent)]
        rows += [("matching_total", self.matching_total), ("total", self.total),
                 ("unpruned_backbone", self.unpruned_backbone)]
        width = max(len(r[0]) for r in rows)
        lines = [f"{name:<{width}}  {val:>16,d}" for name, val in rows]
        lines.append(f"{'overhead_ratio':<{width}}  {100 * self.overhead_ratio:>15.4f}%")
        return "\n".join(lines)


def flops_backbone(cfg: BackboneConfig, token_counts=None) -> FlopsReport:
    counts = [cfg.n_tokens] * cfg.depth if token_counts is None else [int(c) for c in token_counts]
    if len(counts) != cfg.depth or any(c < 1 for c in counts):
        raise ValueError(f"need {cfg.depth} token counts, each >= 1; got {counts}")
    d = cfg.dim
    rep = FlopsReport(
        patch_embed=cfg.n_patches * cfg.patch_dim * d,
        blocks=[block_macs(n, d, cfg.mlp_ratio) for n in counts],
        head=d * cfg.num_classes,
    )
    rep.unpruned_backbone = (rep.patch_embed + cfg.depth * block_macs(cfg.n_tokens, d, cfg.mlp_ratio)
                             + rep.head)
    return rep


def agent_block_macs(n: int, d: int, d_prime: int) -> int:
    return n * d * d_prime + encoder_macs(n, d_prime) + n * d_prime


def flops_agent(cfg: BackboneConfig, d_prime: int, observed_counts, match_sizes=()) -> tuple[list, list]:
    """Per-block actor MACs (paid at every block) and per-event matching MACs |src|*|dst|*d."""
    agent = [agent_block_macs(int(n), cfg.dim, d_prime) for n in observed_counts]
    matching = [int(s) * int(t) * cfg.dim for s, t in match_sizes]
    return agent, matching


def flops_trace(cfg: BackboneConfig, trace, d_prime: int = 0) -> FlopsReport:
    """Full accounting of one traced forward pass; d_prime=0 for a policy-free or baseline run."""
    rep = flops_backbone(cfg, trace.token_counts)
    if d_prime:
        rep.agent, _ = flops_agent(cfg, d_prime, trace.observed_counts)
    rep.matching = [int(s) * int(t) * cfg.dim for s, t in trace.match_sizes]
    return rep


def overhead_reference(scale: str, d_prime: int = 64) -> dict:
    """Analytic actor overhead at full token count vs the reference figure for a model size."""
    cfg = STANDARD_SHAPES[scale]
    base = flops_backbone(cfg)
    agent, _ = flops_agent(cfg, d_prime, [cfg.n_tokens] * cfg.depth)
    ref_g, ref_pct = REFERENCE_OVERHEAD[scale]
    analytic = sum(agent)
    return {
        "scale": scale,
        "unpruned_gflops": base.backbone_total / 1e9,
        "analytic_overhead_gflops": analytic / 1e9,
        "analytic_overhead_pct": 100.0 * analytic / base.backbone_total,
        "reference_overhead_gflops": ref_g,
        "reference_overhead_pct": ref_pct,
        "exceeds_reference": analytic / 1e9 > ref_g,
    }
