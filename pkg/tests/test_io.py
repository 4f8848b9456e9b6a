import json
import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from dynmerge.data import load_dataset, synth_images, write_dataset
from dynmerge.io import config as C
from dynmerge.io import container as D
from dynmerge.io.ppm import PPMError, parse_ppm, read_ppm, write_ppm


# -- container --------------------------------------------------------------

def test_empty_container(tmp_path):
    blob = D.encode({})
    assert blob[:4] == b"DTC1"
    (mlen,) = struct.unpack("<I", blob[4:8])
    assert json.loads(blob[8:8 + mlen]) == []
    D.write_container(tmp_path / "e.dtc", {})
    assert D.read_container(tmp_path / "e.dtc") == {}


def test_layout_is_bit_exact():
    a = np.array([[1.0, -2.5]], np.float32)
    blob = D.encode({"a": a, "s": np.array(3.0, np.float32)})
    (mlen,) = struct.unpack("<I", blob[4:8])
    man = json.loads(blob[8:8 + mlen].decode("utf-8"))
    assert man == [{"name": "a", "dtype": "f32", "shape": [1, 2], "offset": 0, "length": 8},
                   {"name": "s", "dtype": "f32", "shape": [], "offset": 8, "length": 4}]
    assert blob[8 + mlen:] == struct.pack("<3f", 1.0, -2.5, 3.0)


@settings(max_examples=40, deadline=None)
@given(st.dictionaries(st.text("abcxyz._", min_size=1, max_size=8),
                       hnp.arrays(np.float32, hnp.array_shapes(min_dims=0, max_dims=3, max_side=4)),
                       max_size=4))
def test_round_trip_bitwise(tensors):
    back = D.decode(D.encode(tensors))
    assert list(back) == list(tensors)
    for k, v in tensors.items():
        assert back[k].shape == v.shape and back[k].tobytes() == v.tobytes()


def test_bad_magic():
    with pytest.raises(D.BadMagicError):
        D.decode(b"DTC2" + D.encode({})[4:])


def test_truncated_names_entry():
    blob = D.encode({"first": np.ones(4, np.float32), "second": np.ones(8, np.float32)})
    with pytest.raises(D.TruncatedError, match="second"):
        D.decode(blob[:-5])
    with pytest.raises(D.TruncatedError):
        D.decode(blob[:12])


def _forge(entries, data):
    man = json.dumps(entries).encode()
    return b"DTC1" + struct.pack("<I", len(man)) + man + data


def test_overlap_and_shape_length():
    e = [{"name": "a", "dtype": "f32", "shape": [2], "offset": 0, "length": 8},
         {"name": "b", "dtype": "f32", "shape": [2], "offset": 4, "length": 8}]
    with pytest.raises(D.OverlapError):
        D.decode(_forge(e, bytes(16)))
    e = [{"name": "a", "dtype": "f32", "shape": [3], "offset": 0, "length": 8}]
    with pytest.raises(D.ShapeLengthError):
        D.decode(_forge(e, bytes(16)))
    e = [{"name": "a", "dtype": "f64", "shape": [1], "offset": 0, "length": 8}]
    with pytest.raises(D.ManifestError):
        D.decode(_forge(e, bytes(8)))
    with pytest.raises(D.ManifestError):
        D.decode(_forge([{"name": "a"}], b""))


def test_error_kinds_distinct():
    kinds = {D.BadMagicError, D.TruncatedError, D.OverlapError, D.ShapeLengthError}
    assert len(kinds) == 4 and all(issubclass(k, D.ContainerError) for k in kinds)


def test_write_is_atomic(tmp_path):
    path = tmp_path / "x.dtc"
    D.write_container(path, {"a": np.ones(2, np.float32)})
    with pytest.raises(Exception):
        D.write_container(path, {"a": object()})
    assert D.read_container(path)["a"].tolist() == [1.0, 1.0]
    assert sorted(p.name for p in tmp_path.iterdir()) == ["x.dtc"]


# -- ppm --------------------------------------------------------------------

def test_white_pixel(tmp_path):
    (tmp_path / "w.ppm").write_bytes(b"P6\n1 1\n255\n\xff\xff\xff")
    assert read_ppm(tmp_path / "w.ppm").tolist() == [[[1.0]], [[1.0]], [[1.0]]]


def test_two_pixels_channel_planes():
    img = parse_ppm(b"P6 2 1 255\n" + bytes([255, 0, 0, 0, 0, 255]))
    assert img.shape == (3, 1, 2)
    assert img[0].tolist() == [[1.0, 0.0]] and img[2].tolist() == [[0.0, 1.0]] and not img[1].any()


def test_header_comments_and_whitespace():
    img = parse_ppm(b"P6\n# made by hand\n 1\t# width\n1 \n255\n" + bytes([0, 51, 255]))
    assert img[:, 0, 0].tolist() == pytest.approx([0.0, 0.2, 1.0])


@pytest.mark.parametrize("blob", [b"P3\n1 1\n255\n0 0 0", b"P6\n1 1\n65535\n" + bytes(6),
                                  b"P6\n2 2\n255\n" + bytes(11)])
def test_ppm_rejections(blob):
    with pytest.raises(PPMError):
        parse_ppm(blob)


def test_ppm_round_trip(tmp_path):
    img = np.round(np.random.default_rng(0).uniform(size=(3, 5, 4)) * 255) / 255
    write_ppm(tmp_path / "r.ppm", img)
    np.testing.assert_array_equal(read_ppm(tmp_path / "r.ppm"), img.astype(np.float32))


def test_dataset_alphabetical(tmp_path):
    imgs = synth_images(3, seed=1)
    write_dataset(tmp_path, imgs)
    (tmp_path / "notes.txt").write_text("ignored")
    items = load_dataset(tmp_path)
    assert [n for n, _ in items] == sorted(n for n, _ in items)
    assert len(items) == 3
    np.testing.assert_allclose(items[0][1], imgs[0], atol=0.5 / 255 + 1e-7)


def test_synth_images_deterministic():
    a, b = synth_images(4, seed=9), synth_images(4, seed=9)
    assert all(x.tobytes() == y.tobytes() for x, y in zip(a, b))
    assert a[0].shape == (3, 16, 16) and a[0].min() >= 0 and a[0].max() <= 1


# -- config -----------------------------------------------------------------

def test_config_defaults_and_overrides():
    cfg = C.parse_config("# comment\nbackbone.dim = 64\nbackbone.heads=4\nppo.epochs = 2  # trailing\n"
                         "reward.beta = 3.5\neval.include_cls_in_reduction = false\n")
    assert cfg.backbone.dim == 64 and cfg.ppo.epochs == 2 and cfg.reward.beta == 3.5
    assert cfg.include_cls_in_reduction is False
    assert cfg.d_prime == 64 and cfg.d_critic == 256


@pytest.mark.parametrize("text", ["nope.key = 1", "backbone.dim = 3.5", "backbone.dim 32",
                                  "ppo.epochs = 1\nppo.epochs = 2", "backbone.img_size = 15",
                                  "eval.proportional_attention = maybe", "backbone.channels = 1"])
def test_config_rejections(text):
    with pytest.raises(C.ConfigError):
        C.parse_config(text)


def test_config_dump_round_trip():
    cfg = C.parse_config("backbone.depth = 6\nagent.d_prime = 16\nppo.momentum = 0.5\nppo.optimizer = sgd\n")
    assert C.parse_config(C.dump_config(cfg)) == cfg
