import struct

import numpy as np
import pytest
from hypothesis import given, strategies as st
from hypothesis.extra.numpy import array_shapes, arrays

from tendo.io import (FormatError, load_checkpoint, load_tensor, read_dataset, read_metrics_csv, read_pgm,
                      roc_svg, save_checkpoint, save_tensor, tensor_from_bytes, tensor_to_bytes, write_dataset,
                      write_metrics_csv, write_pgm, write_roc_csv)
from tendo.synthdata import classification_spec, generate_dataset


def test_tensor_layout():
    a = np.arange(6, dtype=np.float32).reshape(2, 3)
    buf = tensor_to_bytes(a)
    assert buf[:4] == b"TND1"
    assert struct.unpack_from("<3I", buf, 4) == (2, 2, 3)
    assert buf[16:] == a.astype("<f4").tobytes()


@given(arrays(np.float32, array_shapes(min_dims=0, max_dims=4, max_side=5),
              elements=st.floats(-1e6, 1e6, width=32)))
def test_tensor_round_trip(a):
    b, end = tensor_from_bytes(tensor_to_bytes(a))
    np.testing.assert_array_equal(a, b)
    assert b.shape == a.shape and end == len(tensor_to_bytes(a))


def test_bad_magic(tmp_path):
    with pytest.raises(FormatError):
        tensor_from_bytes(b"XXXX" + bytes(8))
    p = tmp_path / "t.tnd"
    save_tensor(p, np.ones((2, 2)))
    np.testing.assert_array_equal(load_tensor(p), np.ones((2, 2), np.float32))


def test_checkpoint_round_trip(tmp_path):
    state = {"param/a": np.arange(4, dtype=np.float32), "buffer/b": np.ones((2, 3), np.float32)}
    save_checkpoint(tmp_path / "c.ckpt", state)
    back = load_checkpoint(tmp_path / "c.ckpt")
    assert list(back) == list(state)
    for k in state:
        np.testing.assert_array_equal(back[k], state[k])
    raw = (tmp_path / "c.ckpt").read_bytes()
    (tmp_path / "bad.ckpt").write_bytes(raw[:-4] + struct.pack("<I", 3))
    with pytest.raises(FormatError):
        load_checkpoint(tmp_path / "bad.ckpt")


def test_pgm_round_trip(tmp_path):
    img = np.random.default_rng(0).integers(0, 256, (5, 7)).astype(np.uint8)
    write_pgm(tmp_path / "a.pgm", img)
    assert (tmp_path / "a.pgm").read_bytes().startswith(b"P5\n7 5\n255\n")
    np.testing.assert_array_equal(read_pgm(tmp_path / "a.pgm"), img)
    (tmp_path / "c.pgm").write_bytes(b"P5\n# comment\n2 1\n255\n" + bytes([3, 250]))
    assert read_pgm(tmp_path / "c.pgm").tolist() == [[3, 250]]


def test_metrics_csv(tmp_path):
    write_metrics_csv(tmp_path / "m.csv", [("acc", 0.5), ("sen", None)])
    assert (tmp_path / "m.csv").read_text().splitlines()[0] == "metric,value"
    assert read_metrics_csv(tmp_path / "m.csv") == {"acc": 0.5, "sen": None}


def test_roc_outputs(tmp_path):
    pts = [(float("inf"), 0.0, 0.0), (0.5, 0.25, 0.75), (0.1, 1.0, 1.0)]
    write_roc_csv(tmp_path / "r.csv", pts)
    assert (tmp_path / "r.csv").read_text().splitlines()[0] == "threshold,fpr,tpr"
    svg = roc_svg(pts, 0.8125)
    assert svg.startswith("<svg") and "polyline" in svg and "0.8125" in svg


def test_dataset_round_trip(tmp_path):
    data = generate_dataset(classification_spec(), 12, 0, k=2)
    write_dataset(tmp_path / "d", data, "spec")
    back = read_dataset(tmp_path / "d")
    assert [s.id for s in back] == [s.id for s in data]
    for a, b in zip(data, back):
        np.testing.assert_array_equal(a.image, b.image)
        np.testing.assert_array_equal(a.mask, b.mask)
        assert (a.label, a.fold) == (b.label, b.fold)
