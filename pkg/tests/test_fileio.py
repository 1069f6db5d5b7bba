import os

import numpy as np
import pytest

from sparseloc import fileio as slio
from sparseloc.model import GridGeometry, MeasurementOperator
from sparseloc.simulate import Emitter
from sparseloc.unrolled import conv_net_forward, init_conv_net, init_lista_from_model, lista_forward


def test_frames_round_trip_bit_exact(tmp_path):
    frames = np.random.default_rng(0).random((3, 4, 4)).astype(np.float32).astype(np.float64)
    path = tmp_path / "f.slfr"
    slio.write_frames(path, frames, 8)
    back, n = slio.read_frames(path)
    assert n == 8
    np.testing.assert_array_equal(back, frames)
    assert slio.read_frame_header(path) == (4, 8, 3)


def test_frame_header_layout():
    data = slio.encode_frames(np.zeros((2, 3, 3)), 6)
    assert data[:4] == b"SLFR"
    assert int.from_bytes(data[4:6], "little") == 1
    assert [int.from_bytes(data[i:i + 4], "little") for i in (6, 10, 14)] == [3, 6, 2]
    assert len(data) == 18 + 4 * 2 * 9


def test_single_frame_is_promoted():
    back, n = slio.decode_frames(slio.encode_frames(np.ones((5, 5))))
    assert back.shape == (1, 5, 5) and n == 5


@pytest.mark.parametrize("bad", [np.zeros((2, 3, 4)), np.full((1, 2, 2), np.nan)])
def test_encode_rejects_bad_frames(bad):
    with pytest.raises(ValueError):
        slio.encode_frames(bad)


def test_decode_rejects_corrupt_files():
    good = slio.encode_frames(np.zeros((1, 2, 2)))
    for data in (good[:10], b"XXXX" + good[4:], good + b"\0", good[:4] + b"\x09\x00" + good[6:]):
        with pytest.raises(slio.FormatError):
            slio.decode_frames(data)
    nan = bytearray(good)
    nan[-4:] = np.array([np.nan], dtype="<f4").tobytes()
    with pytest.raises(slio.FormatError):
        slio.decode_frames(bytes(nan))


def test_format_error_is_io_error():
    assert issubclass(slio.FormatError, OSError)


@pytest.mark.parametrize("kind", ["ulm-conv", "lsparcom-conv"])
def test_conv_net_round_trip_reproduces_outputs(tmp_path, kind):
    net = init_conv_net(kind, GridGeometry(4, 2), K=3, rng_seed=1, train_beta=False)
    path = tmp_path / "n.slnt"
    slio.write_net(path, net)
    back = slio.read_net(path)
    assert (back.kind, back.n_layers, back.geometry, back.trainable) == \
        (net.kind, net.n_layers, net.geometry, net.trainable)
    x = np.random.default_rng(2).random((2, 4, 4) if kind == "ulm-conv" else (2, 8, 8))
    np.testing.assert_array_equal(conv_net_forward(back, x), conv_net_forward(net, x))


def test_dense_net_round_trip_without_geometry():
    a = np.random.default_rng(3).random((4, 9))
    net = init_lista_from_model(MeasurementOperator.from_matrix(a), 0.1, 2)
    back = slio.decode_net(slio.encode_net(net))
    assert back.geometry is None
    y = np.random.default_rng(4).random(4)
    np.testing.assert_array_equal(lista_forward(back, y), lista_forward(net, y))
    assert slio.encode_net(back) == slio.encode_net(net)


def test_decode_net_rejects_corrupt():
    data = slio.encode_net(init_conv_net("ulm-conv", GridGeometry(4, 2), K=1))
    for bad in (data[:20], b"NOPE" + data[4:], data[:-3], data + b"\0"):
        with pytest.raises(slio.FormatError):
            slio.decode_net(bad)


def test_atomic_write_leaves_no_temp_files(tmp_path):
    slio.atomic_write(tmp_path / "a.bin", b"abc")
    slio.atomic_write(tmp_path / "a.bin", b"xyz")
    assert os.listdir(tmp_path) == ["a.bin"]
    assert (tmp_path / "a.bin").read_bytes() == b"xyz"


def test_emitters_csv_round_trip(tmp_path):
    em = [Emitter((1.25, 3.5), 800.0, 0.2), Emitter((0.1, 7.0 / 3), 1000.0, 1.0)]
    path = tmp_path / "e.csv"
    slio.write_emitters_csv(path, em)
    assert path.read_text().splitlines()[0] == "id,x,y,mean_photons,on_probability"
    back = slio.read_emitters_csv(path)
    np.testing.assert_array_equal(back, [[1.25, 3.5, 800.0, 0.2], [0.1, 7.0 / 3, 1000.0, 1.0]])


def test_empty_emitters_csv(tmp_path):
    slio.write_emitters_csv(tmp_path / "e.csv", [])
    assert slio.read_emitters_csv(tmp_path / "e.csv").shape == (0, 4)


def test_points_csv_round_trip_keeps_empty_frames(tmp_path):
    pts = [np.array([[1.0, 2.0, 1.0]]), np.zeros((0, 3)), np.array([[3.0, 4.0, 1.0], [5.0, 6.5, 2.0]])]
    slio.write_points_csv(tmp_path / "p.csv", pts)
    back = slio.read_points_csv(tmp_path / "p.csv", 4)
    assert len(back) == 4
    for a, b in zip(back, pts + [np.zeros((0, 3))]):
        np.testing.assert_array_equal(a, b)


def test_loss_csv(tmp_path):
    slio.write_loss_csv(tmp_path / "l.csv", [0.5, 0.1])
    assert (tmp_path / "l.csv").read_text() == "epoch,loss\n0,0.5\n1,0.1\n"


def test_json_is_canonical(tmp_path):
    slio.write_json(tmp_path / "a.json", {"b": 1, "a": [1.5]})
    assert (tmp_path / "a.json").read_text() == '{\n  "a": [\n    1.5\n  ],\n  "b": 1\n}\n'
    assert slio.read_json(tmp_path / "a.json") == {"a": [1.5], "b": 1}
    with pytest.raises(ValueError):
        slio.write_json(tmp_path / "b.json", {"x": float("nan")})
