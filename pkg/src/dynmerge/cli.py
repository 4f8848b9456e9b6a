"""Command-line entry point.

Exit codes: 0 success, 1 usage error, 2 data/format error, 3 numeric fault.
Every output file is written to a temporary name and renamed into place, so a
failed command never leaves a partial file behind.
"""
from __future__ import annotations

import argparse
import dataclasses
import os
import sys
import tempfile
from pathlib import Path

import numpy as np

from . import agent as A
from . import evaluate as E
from . import flops as F
from .backbone import BackboneConfig, BackboneWeights, ConfigError as BackboneConfigError, full_forward, gen_backbone
from .data import load_dataset, synth_images, write_dataset
from .io.config import ConfigError, RunConfig, load_config
from .io.container import ContainerError, read_container, write_container
from .io.ppm import PPMError, read_ppm
from .merge import FixedRPolicy, MergeError
from .num.kernels import NumericFault, ShapeError
from .num.rng import Rng
from .ppo import TrainBundle, grad_check, train

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3

EVAL_HEADER = "image,pred,ref_pred,agree,reduction,merges"


class UsageError(Exception):
    pass


class DataError(Exception):
    pass


# -- file helpers -----------------------------------------------------------

def write_text_atomic(path, text: str) -> None:
    path = Path(path)
    fd, tmp = tempfile.mkstemp(dir=path.parent if str(path.parent) else ".", prefix=".tmp-")
    try:
        with os.fdopen(fd, "w", encoding="utf-8", newline="\n") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def save_backbone(path, w: BackboneWeights) -> None:
    meta = {f"meta.{f.name}": np.array([getattr(w.cfg, f.name)], np.float32)
            for f in dataclasses.fields(w.cfg)}
    write_container(path, {**meta, **w.tensors})


def load_backbone(path) -> BackboneWeights:
    raw = read_container(path)
    meta = {k[5:]: int(v[0]) for k, v in raw.items() if k.startswith("meta.")}
    try:
        cfg = BackboneConfig(**meta)
        return BackboneWeights(cfg, {k: v for k, v in raw.items() if not k.startswith("meta.")})
    except (TypeError, BackboneConfigError, ValueError) as err:
        raise DataError(f"{path}: not a backbone checkpoint: {err}") from err


def load_policy(path) -> dict:
    raw = read_container(path)
    actor = {k: v for k, v in raw.items() if k.startswith("actor.")}
    try:
        A.config_of(actor, "actor")
    except (KeyError, A.AgentError, ValueError) as err:
        raise DataError(f"{path}: not a policy checkpoint: {err}") from err
    return actor


def _dataset(directory):
    items = load_dataset(directory)
    if not items:
        raise DataError(f"{directory}: no .ppm images")
    return items


def _config(path) -> RunConfig:
    return load_config(path) if path else RunConfig()


def _check_image(img, cfg: BackboneConfig, name=""):
    want = (cfg.channels, cfg.img_size, cfg.img_size)
    if img.shape != want:
        raise DataError(f"{name}: image shape {img.shape} does not match backbone input {want}")


# -- subcommands ------------------------------------------------------------

def cmd_gen_backbone(args, out):
    cfg = _config(args.config)
    save_backbone(args.out, gen_backbone(cfg.backbone, args.seed))
    print(f"wrote {args.out}", file=out)


def cmd_gen_data(args, out):
    Path(args.out).mkdir(parents=True, exist_ok=True)
    cfg = _config(args.config)
    paths = write_dataset(args.out, synth_images(args.n, cfg.backbone.img_size, args.seed))
    print(f"wrote {len(paths)} images to {args.out}", file=out)


def cmd_train(args, out):
    cfg = _config(args.config)
    w = load_backbone(args.backbone)
    if w.cfg != cfg.backbone:
        raise DataError("backbone checkpoint shape differs from the config's backbone.* keys")
    items = _dataset(args.data)
    for name, img in items:
        _check_image(img, w.cfg, name)
    images = [img for _, img in items]
    bundle = TrainBundle(w, images, cfg.reward, cfg.ppo, cfg.d_prime, cfg.d_critic, cfg.head_bias,
                         cfg.head_std, cfg.proportional_attention)
    lines = []
    res = train(bundle, lines.append)
    write_container(args.out, res.actor)
    if args.log:
        write_text_atomic(args.log, "".join(s + "\n" for s in lines))
    last = res.history[-1] if res.history else {}
    print(f"wrote {args.out}; final mean_return={last.get('mean_return', 0.0):.4f} "
          f"mean_reduction={last.get('mean_reduction', 0.0):.2f}%", file=out)


def _policy_from(args):
    if getattr(args, "policy", None) and getattr(args, "fixed_r", None) is not None:
        raise UsageError("give at most one of --policy and --fixed-r")
    if getattr(args, "policy", None):
        actor = load_policy(args.policy)
        return A.AgentPolicy(actor), A.config_of(actor, "actor").width
    if getattr(args, "fixed_r", None) is not None:
        return FixedRPolicy(args.fixed_r), 0
    return None, 0


def cmd_infer(args, out):
    cfg = _config(args.config)
    w = load_backbone(args.backbone)
    img = read_ppm(args.image)
    _check_image(img, w.cfg, args.image)
    policy, d_prime = _policy_from(args)
    rng = Rng(args.seed, 0x696E6672) if args.mode == "sample" else None
    logits, trace = full_forward(img, w, policy, mode=args.mode, rng=rng,
                                 proportional_attention=cfg.proportional_attention)
    red = E.token_reduction_rate(trace.token_counts, trace.n0, cfg.include_cls_in_reduction)
    rep = F.flops_trace(w.cfg, trace, d_prime)
    print(f"class {int(np.argmax(logits))}", file=out)
    print(f"reduction {red:.2f}%", file=out)
    print(f"macs {rep.total}", file=out)


def _parse_corrupt(text):
    try:
        kind, sev = text.split(":")
        sev = int(sev)
    except ValueError as err:
        raise UsageError(f"--corrupt expects kind:severity, got {text!r}") from err
    if kind not in E.CORRUPTIONS or not 0 <= sev <= 5:
        raise UsageError(f"bad corruption {text!r}; kinds {E.CORRUPTIONS}, severity 0..5")
    return kind, sev


def eval_records(items, w, policy, corruption=None, seed=0, include_cls=True,
                 proportional_attention=False) -> str:
    """Per-image CSV: image,pred,ref_pred,agree,reduction,merges (merges is ';'-joined per block)."""
    rows = [EVAL_HEADER]
    for i, (name, img) in enumerate(items):
        if corruption is not None:
            img = E.corrupt(img, corruption[0], corruption[1], seed + i)
        ref, _ = full_forward(img, w, None, proportional_attention=proportional_attention)
        logits, trace = full_forward(img, w, policy, proportional_attention=proportional_attention)
        red = E.token_reduction_rate(trace.token_counts, trace.n0, include_cls)
        p, q = int(np.argmax(logits)), int(np.argmax(ref))
        rows.append(f"{name},{p},{q},{int(p == q)},{red:.4f},{';'.join(map(str, trace.merge_counts))}")
    return "\n".join(rows) + "\n"


def cmd_eval(args, out):
    cfg = _config(args.config)
    w = load_backbone(args.backbone)
    items = _dataset(args.data)
    for name, img in items:
        _check_image(img, w.cfg, name)
    policy, _ = _policy_from(args)
    corruptions = [_parse_corrupt(c) for c in args.corrupt or []]
    if args.r_grid is not None:
        if policy is None:
            raise UsageError("--r-grid needs --policy or --fixed-r")
        try:
            grid = [int(x) for x in args.r_grid.split(",") if x.strip()]
        except ValueError as err:
            raise UsageError(f"--r-grid expects comma-separated integers: {err}") from err
        records = E.pareto_sweep([img for _, img in items], w, policy, grid, [None] + corruptions,
                                 seed=args.seed, include_cls=cfg.include_cls_in_reduction,
                                 proportional_attention=cfg.proportional_attention)
        red_csv, acc_csv = E.sweep_csv(records)
        print("matched reduction", file=out)
        print(E.text_table(red_csv), file=out)
        print("matched accuracy", file=out)
        print(E.text_table(acc_csv), file=out)
        if args.out:
            write_text_atomic(f"{args.out}_reduction.csv", red_csv)
            write_text_atomic(f"{args.out}_accuracy.csv", acc_csv)
        return
    if len(corruptions) > 1:
        raise UsageError("give at most one --corrupt without --r-grid")
    csv = eval_records(items, w, policy, corruptions[0] if corruptions else None, args.seed,
                       cfg.include_cls_in_reduction, cfg.proportional_attention)
    rows = [r.split(",") for r in csv.strip().split("\n")[1:]]
    agree = 100.0 * np.mean([int(r[3]) for r in rows])
    red = float(np.mean([float(r[4]) for r in rows]))
    print(f"images {len(rows)} agreement {agree:.2f}% reduction {red:.2f}%", file=out)
    if args.out:
        write_text_atomic(args.out, csv)


def _read_counts(path):
    try:
        return [int(t) for t in Path(path).read_text().split()]
    except ValueError as err:
        raise DataError(f"{path}: token counts must be integers") from err


def cmd_flops(args, out):
    cfg = _config(args.config)
    counts = _read_counts(args.counts) if args.counts else None
    try:
        rep = F.flops_backbone(cfg.backbone, counts)
    except ValueError as err:
        raise DataError(str(err)) from err
    # actor runs at every block on the count it observes, i.e. the previous block's output
    full = [cfg.backbone.n_tokens] * cfg.backbone.depth
    observed = [cfg.backbone.n_tokens] + (counts or full)[:-1]
    rep.agent, _ = F.flops_agent(cfg.backbone, cfg.d_prime, observed)
    print(rep.table(), file=out)


def mask_grids(trace, grid: int) -> list[str]:
    """Per-block text grids: 'C' line, then grid rows of '.' (kept) / 'M' (merged away)."""
    out = []
    for alive in trace.retained:
        cells = np.where(alive[1:], ".", "M").reshape(grid, grid)
        out.append("C\n" + "\n".join("".join(r) for r in cells) + "\n")
    return out


def cmd_masks(args, out):
    w = load_backbone(args.backbone)
    img = read_ppm(args.image)
    _check_image(img, w.cfg, args.image)
    policy = A.AgentPolicy(load_policy(args.policy))
    _, trace = full_forward(img, w, policy)
    Path(args.out).mkdir(parents=True, exist_ok=True)
    for l, text in enumerate(mask_grids(trace, w.cfg.grid)):
        write_text_atomic(Path(args.out) / f"block{l + 1:02d}.txt", text)
    print(f"wrote {len(trace.retained)} grids to {args.out}", file=out)


def cmd_grad_check(args, out):
    cfg = _config(args.config)
    bb = cfg.backbone
    worst = 0.0
    for net, width in (("actor", cfg.d_prime), ("critic", cfg.d_critic)):
        err = grad_check(net, probes=args.probes, seed=args.seed, d_in=bb.dim, depth=bb.depth, width=width)
        print(f"{net} max_rel_err {err:.3e}", file=out)
        worst = max(worst, err)
    if worst >= args.tol:
        raise NumericFault(f"gradient check failed: {worst:.3e} >= {args.tol:g}")


# -- parser -----------------------------------------------------------------

class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="dynmerge", description="Learned token merging for a forward-only ViT.")
    sub = p.add_subparsers(dest="cmd", required=True, parser_class=_Parser)

    s = sub.add_parser("gen-backbone", help="random backbone checkpoint")
    s.add_argument("--config")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", required=True)
    s.set_defaults(fn=cmd_gen_backbone)

    s = sub.add_parser("gen-data", help="synthetic PPM dataset")
    s.add_argument("--config")
    s.add_argument("--n", type=int, default=64)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", required=True)
    s.set_defaults(fn=cmd_gen_data)

    s = sub.add_parser("train", help="PPO training; writes the actor checkpoint")
    s.add_argument("--config")
    s.add_argument("--backbone", required=True)
    s.add_argument("--data", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--log")
    s.set_defaults(fn=cmd_train)

    s = sub.add_parser("infer", help="classify one image")
    s.add_argument("--config")
    s.add_argument("--backbone", required=True)
    s.add_argument("--policy")
    s.add_argument("--fixed-r", type=int)
    s.add_argument("--image", required=True)
    s.add_argument("--mode", choices=("threshold", "sample"), default="threshold")
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(fn=cmd_infer)

    s = sub.add_parser("eval", help="agreement and reduction over a dataset")
    s.add_argument("--config")
    s.add_argument("--backbone", required=True)
    s.add_argument("--policy")
    s.add_argument("--fixed-r", type=int)
    s.add_argument("--data", required=True)
    s.add_argument("--corrupt", action="append", help="kind:severity; repeatable with --r-grid")
    s.add_argument("--r-grid", help="comma-separated fixed-r values for the matched comparison")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out")
    s.set_defaults(fn=cmd_eval)

    s = sub.add_parser("flops", help="analytic MAC report")
    s.add_argument("--config")
    s.add_argument("--counts")
    s.set_defaults(fn=cmd_flops)

    s = sub.add_parser("masks", help="per-block merge grids for one image")
    s.add_argument("--backbone", required=True)
    s.add_argument("--policy", required=True)
    s.add_argument("--image", required=True)
    s.add_argument("--out", required=True)
    s.set_defaults(fn=cmd_masks)

    s = sub.add_parser("grad-check", help="finite-difference check of the PPO loss gradients")
    s.add_argument("--config")
    s.add_argument("--probes", type=int, default=16)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--tol", type=float, default=1e-4)
    s.set_defaults(fn=cmd_grad_check)
    return p


def main(argv=None, out=None, err=None) -> int:
    out = out or sys.stdout
    err = err or sys.stderr
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        args.fn(args, out)
        return EXIT_OK
    except UsageError as e:
        print(f"usage error: {e}", file=err)
        print(parser.format_usage(), file=err, end="")
        return EXIT_USAGE
    except (NumericFault, FloatingPointError) as e:
        print(f"numeric fault: {e}", file=err)
        return EXIT_NUMERIC
    except (DataError, ConfigError, ContainerError, PPMError, MergeError, A.AgentError,
            ShapeError, E.EvalError, BackboneConfigError, OSError) as e:
        print(f"data error: {e}", file=err)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
