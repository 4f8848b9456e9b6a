import io

import numpy as np
import pytest

from dynmerge import agent as A
from dynmerge.cli import EVAL_HEADER, main
from dynmerge.io.container import read_container, write_container

SMALL = """\
agent.d_prime = 8
agent.d_critic = 16
ppo.total_batches = 2
ppo.episodes_per_batch = 2
ppo.epochs = 1
ppo.minibatch_size = 8
"""


def run(*argv):
    out, err = io.StringIO(), io.StringIO()
    code = main([str(a) for a in argv], out, err)
    return code, out.getvalue(), err.getvalue()


@pytest.fixture(scope="module")
def ws(tmp_path_factory):
    d = tmp_path_factory.mktemp("ws")
    (d / "small.cfg").write_text(SMALL)
    assert run("gen-backbone", "--seed", 7, "--out", d / "bb.dtc")[0] == 0
    assert run("gen-data", "--n", 5, "--seed", 2, "--out", d / "data")[0] == 0
    return d


def _policy(path, bias):
    actor = A.init_actor(32, 4, 8, 0)
    actor["actor.head.w"][:] = 0
    actor["actor.head.b"][:] = bias
    write_container(path, actor)
    return path


def test_gen_backbone_deterministic(ws):
    run("gen-backbone", "--seed", 7, "--out", ws / "bb2.dtc")
    assert (ws / "bb.dtc").read_bytes() == (ws / "bb2.dtc").read_bytes()
    meta = read_container(ws / "bb.dtc")
    assert meta["meta.dim"][0] == 32 and meta["patch.w"].shape == (48, 32)


def test_train_writes_actor_only_and_log(ws):
    code, out, _ = run("train", "--config", ws / "small.cfg", "--backbone", ws / "bb.dtc",
                       "--data", ws / "data", "--out", ws / "pol.dtc", "--log", ws / "train.log")
    assert code == 0, out
    ck = read_container(ws / "pol.dtc")
    assert ck and all(k.startswith("actor.") for k in ck)
    assert len((ws / "train.log").read_text().splitlines()) == 2
    run("train", "--config", ws / "small.cfg", "--backbone", ws / "bb.dtc",
        "--data", ws / "data", "--out", ws / "pol2.dtc")
    assert (ws / "pol.dtc").read_bytes() == (ws / "pol2.dtc").read_bytes()


def test_infer_zero_merge(ws):
    pol = _policy(ws / "zero.dtc", -1e30)
    code, out, _ = run("infer", "--backbone", ws / "bb.dtc", "--policy", pol, "--image", ws / "data/img00000.ppm")
    assert code == 0
    lines = out.splitlines()
    assert lines[0].startswith("class ") and lines[1] == "reduction 0.00%"
    assert int(lines[2].split()[1]) > 0


def test_masks_all_merge_block(ws):
    pol = _policy(ws / "all.dtc", 1e30)
    code, _, _ = run("masks", "--backbone", ws / "bb.dtc", "--policy", pol,
                     "--image", ws / "data/img00001.ppm", "--out", ws / "masks")
    assert code == 0
    grids = sorted((ws / "masks").iterdir())
    assert len(grids) == 4
    text = grids[0].read_text()
    assert text == "C\n" + "MMMM\n" * 4
    for g in grids:
        cells = g.read_text().replace("\n", "")
        assert cells.count("C") == 1 and len(cells) == 17


def test_eval_identity_corruption(ws):
    a = run("eval", "--backbone", ws / "bb.dtc", "--fixed-r", 3, "--data", ws / "data", "--out", ws / "a.csv")
    b = run("eval", "--backbone", ws / "bb.dtc", "--fixed-r", 3, "--data", ws / "data",
            "--corrupt", "gauss_noise:0", "--out", ws / "b.csv")
    assert a[0] == b[0] == 0
    ta, tb = (ws / "a.csv").read_text(), (ws / "b.csv").read_text()
    assert ta == tb and ta.split("\n")[0] == EVAL_HEADER and "\r" not in ta
    assert len(ta.strip().split("\n")) == 6


def test_eval_sweep_outputs(ws):
    code, out, _ = run("eval", "--backbone", ws / "bb.dtc", "--fixed-r", 2, "--data", ws / "data",
                       "--r-grid", "0,1,2", "--corrupt", "contrast:2", "--out", ws / "sw")
    assert code == 0 and "matched reduction" in out and "matched accuracy" in out
    assert (ws / "sw_reduction.csv").exists() and (ws / "sw_accuracy.csv").exists()


def test_flops_with_counts(ws):
    (ws / "counts.txt").write_text("17 13 9 5\n")
    code, out, _ = run("flops", "--counts", ws / "counts.txt")
    assert code == 0 and "backbone_total" in out and "overhead_ratio" in out
    assert run("flops", "--counts", ws / "small.cfg")[0] == 2


def test_grad_check_command(ws):
    code, out, _ = run("grad-check", "--config", ws / "small.cfg", "--probes", 4)
    assert code == 0 and "actor max_rel_err" in out and "critic max_rel_err" in out


def test_exit_codes(ws):
    assert run()[0] == 1
    assert run("frobnicate")[0] == 1
    assert run("infer", "--backbone", ws / "bb.dtc")[0] == 1
    assert run("eval", "--backbone", ws / "bb.dtc", "--data", ws / "data", "--corrupt", "fog:1")[0] == 1
    (ws / "junk.dtc").write_bytes(b"nope")
    assert run("infer", "--backbone", ws / "junk.dtc", "--image", ws / "data/img00000.ppm")[0] == 2
    assert run("gen-backbone", "--config", ws / "missing.cfg", "--out", ws / "x.dtc")[0] == 2
    (ws / "empty").mkdir()
    assert run("eval", "--backbone", ws / "bb.dtc", "--data", ws / "empty")[0] == 2


def test_numeric_fault_exit_code(ws):
    raw = read_container(ws / "bb.dtc")
    raw["blocks.1.fc2.b"] = np.full(32, np.inf, np.float32)
    write_container(ws / "nan.dtc", raw)
    code, _, err = run("infer", "--backbone", ws / "nan.dtc", "--image", ws / "data/img00000.ppm")
    assert code == 3 and "block 1" in err


def test_failure_leaves_no_output(ws):
    target = ws / "never.dtc"
    code, _, _ = run("train", "--config", ws / "small.cfg", "--backbone", ws / "junk.dtc",
                     "--data", ws / "data", "--out", target)
    assert code == 2 and not target.exists()
    assert not [p for p in ws.iterdir() if p.name.startswith(".tmp-") or p.name.startswith(".dtc1-")]
