"""Reduction metric, agreement proxy, corruptions and the matched comparison sweep."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.ndimage import gaussian_filter

from .backbone import full_forward
from .merge import FixedRPolicy
from .num.rng import Rng

NOISE_STD = (0.0, 0.04, 0.08, 0.12, 0.18, 0.26)
BLUR_SIGMA = (0.0, 0.5, 1.0, 1.5, 2.0, 3.0)
CONTRAST = (1.0, 0.75, 0.6, 0.45, 0.3, 0.2)
CORRUPTIONS = ("gauss_noise", "gauss_blur", "contrast")


class EvalError(ValueError):
    pass


def token_reduction_rate(token_counts, n0: int, include_cls: bool = True) -> float:
    """Mean over blocks of (N0 - N_l) / N0, in percent.

    With ``include_cls=False`` the class token is taken out of both N0 and
    every N_l; it is never merged, so this only rescales the denominator.
    """
    counts = np.asarray(token_counts, dtype=np.int64)
    if counts.size == 0:
        raise EvalError("empty token-count trace")
    if not include_cls:
        n0, counts = n0 - 1, counts - 1
    if n0 <= 0 or counts.min() < 0 or counts.max() > n0:
        raise EvalError(f"token counts {counts.tolist()} inconsistent with N0={n0}")
    return float(100.0 * (n0 - counts).sum() / (n0 * counts.size))


@dataclass
class EvalReport:
    reduction: float
    agreement: float
    n_images: int
    merge_hist: list = field(default_factory=list)  # mean merges per block
    per_corruption: dict = field(default_factory=dict)

    def row(self) -> dict:
        return {"reduction": self.reduction, "agreement": self.agreement, "n": self.n_images}


def agreement(images, w, policy=None, *, mode="threshold", include_cls=True,
              proportional_attention=False, reference_logits=None) -> EvalReport:
    """Top-1 agreement (%) of the reduced model with the unpruned one.

    ``reference_logits`` lets a sweep reuse the unpruned pass; argmax ties go
    to the lowest class index.
    """
    images = list(images)
    if not images:
        raise EvalError("empty dataset")
    hits, reds, merges = 0, [], np.zeros(w.cfg.depth)
    for i, img in enumerate(images):
        ref = (reference_logits[i] if reference_logits is not None
               else full_forward(img, w, None, proportional_attention=proportional_attention)[0])
        logits, trace = full_forward(img, w, policy, mode=mode,
                                     proportional_attention=proportional_attention)
        hits += int(np.argmax(logits) == np.argmax(ref))
        reds.append(token_reduction_rate(trace.token_counts, trace.n0, include_cls))
        merges += np.asarray(trace.merge_counts, dtype=np.float64)
    n = len(images)
    return EvalReport(float(np.mean(reds)), 100.0 * hits / n, n, (merges / n).tolist())


def corrupt(image, kind: str, severity: int, seed: int = 0) -> np.ndarray:
    if kind not in CORRUPTIONS:
        raise EvalError(f"unknown corruption {kind!r}; expected one of {CORRUPTIONS}")
    if not isinstance(severity, (int, np.integer)) or not 0 <= severity <= 5:
        raise EvalError(f"severity must be an integer in [0, 5], got {severity!r}")
    img = np.asarray(image)
    if severity == 0:
        return img.copy()
    x = img.astype(np.float64)
    if kind == "gauss_noise":
        x = x + Rng(seed, 0x6E6F6973).normal(x.shape, 0.0, NOISE_STD[severity])
    elif kind == "gauss_blur":
        s = BLUR_SIGMA[severity]
        # blur each channel spatially only
        x = gaussian_filter(x, sigma=(0.0,) + (s,) * (x.ndim - 1), mode="reflect")
    else:
        m = x.mean()
        x = m + CONTRAST[severity] * (x - m)
    return np.clip(x, 0.0, 1.0).astype(img.dtype)


def _parse_setting(setting):
    if setting in (None, "clean"):
        return "clean", 0
    kind, sev = setting
    return kind, int(sev)


def pareto_sweep(images, w, policy, r_grid, corruptions=(None,), *, seed=0,
                 include_cls=True, proportional_attention=False) -> list[dict]:
    """Matched-reduction and matched-accuracy comparisons of a policy against fixed-r.

    For every corruption setting: (a) the r whose mean reduction is closest to
    the policy's (a match if within one token per block), and (b) the smallest r
    whose agreement reaches the policy's. Each returned record holds one
    setting with both comparisons plus the full per-r grid.
    """
    r_grid = sorted({int(r) for r in r_grid})
    if not r_grid:
        raise EvalError("empty r grid")
    images = list(images)
    if not images:
        raise EvalError("empty dataset")
    n0 = w.cfg.n_tokens
    n0_eff = n0 if include_cls else n0 - 1
    records = []
    for setting in corruptions:
        kind, sev = _parse_setting(setting)
        imgs = images if kind == "clean" else [corrupt(im, kind, sev, seed + i) for i, im in enumerate(images)]
        ref = [full_forward(im, w, None, proportional_attention=proportional_attention)[0] for im in imgs]
        kw = dict(include_cls=include_cls, proportional_attention=proportional_attention, reference_logits=ref)
        agent = agreement(imgs, w, policy, **kw)
        grid = {r: agreement(imgs, w, FixedRPolicy(r), **kw) for r in r_grid}

        # (a) matched reduction: closest mean tokens-per-block, lowest r on ties
        gap = {r: abs(rep.reduction - agent.reduction) * n0_eff / 100.0 for r, rep in grid.items()}
        r_a = min(r_grid, key=lambda r: (gap[r], r))
        # (b) matched accuracy: smallest r that is at least as faithful
        ok = [r for r in r_grid if grid[r].agreement >= agent.agreement]
        r_b = ok[0] if ok else None
        records.append({
            "setting": "clean" if kind == "clean" else f"{kind}:{sev}",
            "agent_reduction": agent.reduction,
            "agent_agreement": agent.agreement,
            "agent_merge_hist": agent.merge_hist,
            "match_red_r": r_a,
            "match_red_gap_tokens": gap[r_a],
            "match_red_within_1": gap[r_a] <= 1.0,
            "match_red_base_reduction": grid[r_a].reduction,
            "match_red_base_agreement": grid[r_a].agreement,
            "match_acc_r": r_b,
            "match_acc_base_reduction": None if r_b is None else grid[r_b].reduction,
            "match_acc_base_agreement": None if r_b is None else grid[r_b].agreement,
            "grid": {r: rep.row() for r, rep in grid.items()},
        })
    return records


RED_HEADER = "setting,agent_reduction,agent_agreement,base_r,base_reduction,base_agreement,gap_tokens,within_1"
ACC_HEADER = "setting,agent_reduction,agent_agreement,base_r,base_reduction,base_agreement"


def _fmt(v):
    if v is None:
        return "NA"
    if isinstance(v, bool):
        return "1" if v else "0"
    if isinstance(v, float):
        return f"{v:.4f}"
    return str(v)


def sweep_csv(records) -> tuple[str, str]:
    """(matched-reduction CSV, matched-accuracy CSV), header line first, '\\n' endings."""
    red = [RED_HEADER] + [",".join(_fmt(v) for v in (
        r["setting"], r["agent_reduction"], r["agent_agreement"], r["match_red_r"],
        r["match_red_base_reduction"], r["match_red_base_agreement"],
        r["match_red_gap_tokens"], r["match_red_within_1"])) for r in records]
    acc = [ACC_HEADER] + [",".join(_fmt(v) for v in (
        r["setting"], r["agent_reduction"], r["agent_agreement"], r["match_acc_r"],
        r["match_acc_base_reduction"], r["match_acc_base_agreement"])) for r in records]
    return "\n".join(red) + "\n", "\n".join(acc) + "\n"


def text_table(csv_text: str) -> str:
    rows = [line.split(",") for line in csv_text.strip().split("\n")]
    widths = [max(len(r[i]) for r in rows) for i in range(len(rows[0]))]
    return "\n".join("  ".join(c.rjust(wd) for c, wd in zip(r, widths)) for r in rows)
