import numpy as np
import pytest

from lappyr import imageio
from lappyr.checkpoint import CheckpointError, load_nets, read_tensors, save_nets, write_tensors
from lappyr.network import NetConfig, build_pair


def test_tensor_round_trip(tmp_path):
    rng = np.random.default_rng(0)
    tensors = {"a": rng.random((2, 3)).astype(np.float32), "b.c": rng.random(5), "s": np.float64(2.5) * np.ones(())}
    write_tensors(tmp_path / "t.ckpt", {"k": 1}, tensors)
    cfg, back = read_tensors(tmp_path / "t.ckpt")
    assert cfg == {"k": 1}
    assert list(back) == list(tensors)
    for k in tensors:
        assert back[k].dtype == tensors[k].dtype and back[k].tobytes() == tensors[k].tobytes()


def test_header_layout(tmp_path):
    write_tensors(tmp_path / "t.ckpt", {}, {"x": np.zeros(2, np.float32)})
    blob = (tmp_path / "t.ckpt").read_bytes()
    assert blob[:4] == b"LPYR" and blob[4:8] == (1).to_bytes(4, "little")


@pytest.mark.parametrize("mutate", ["magic", "truncate", "trailing", "version", "empty"])
def test_corrupt_checkpoints(tmp_path, mutate):
    path = tmp_path / "t.ckpt"
    write_tensors(path, {"a": 1}, {"x": np.arange(6.0)})
    blob = bytearray(path.read_bytes())
    if mutate == "magic":
        blob[:4] = b"NOPE"
    elif mutate == "truncate":
        blob = blob[:-5]
    elif mutate == "trailing":
        blob += b"\0"
    elif mutate == "version":
        blob[4] = 9
    else:
        blob = bytearray()
    path.write_bytes(bytes(blob))
    with pytest.raises(CheckpointError):
        read_tensors(path)


def test_missing_checkpoint(tmp_path):
    with pytest.raises(CheckpointError):
        read_tensors(tmp_path / "none.ckpt")


def test_nets_round_trip(tmp_path):
    net_a, net_s = build_pair(NetConfig(K=2, width=4, substructures=1, seed=3))
    save_nets(tmp_path / "n.ckpt", net_a, net_s, {"step": 7})
    la, ls, cfg = load_nets(tmp_path / "n.ckpt")
    assert cfg["step"] == 7 and la.config == net_a.config and ls.config == net_s.config
    x = np.random.default_rng(0).random((1, 3, 16, 16)).astype(np.float32)
    assert la(x).output.data.tobytes() == net_a(x).output.data.tobytes()
    assert ls(x).output.data.tobytes() == net_s(x).output.data.tobytes()


def test_pfm_round_trip_exact(tmp_path):
    img = np.random.default_rng(1).standard_normal((3, 5, 7)).astype(np.float32) * 10
    imageio.write_pfm(tmp_path / "x.pfm", img)
    assert imageio.read_pfm(tmp_path / "x.pfm").tobytes() == img.tobytes()
    assert imageio.image_extents(tmp_path / "x.pfm") == (5, 7)
    gray = img[:1]
    imageio.write_pfm(tmp_path / "g.pfm", gray)
    assert imageio.read_image(tmp_path / "g.pfm").shape == (3, 5, 7)


def test_pfm_is_little_endian_bottom_up(tmp_path):
    img = np.zeros((1, 2, 1), np.float32)
    img[0, 0, 0] = 1.0  # top row
    imageio.write_pfm(tmp_path / "x.pfm", img)
    blob = (tmp_path / "x.pfm").read_bytes()
    assert blob.startswith(b"Pf\n1 2\n-1.0\n")
    assert np.frombuffer(blob[-8:], "<f4").tolist() == [0.0, 1.0]


def test_png_quantizes_and_clamps(tmp_path):
    img = np.array([[[-0.5, 0.5, 2.0]]] * 3, np.float32)
    imageio.write_png(tmp_path / "x.png", img)
    back = imageio.read_image(tmp_path / "x.png")
    np.testing.assert_allclose(back[0, 0], [0.0, 128 / 255, 1.0], atol=1e-7)
    assert imageio.image_extents(tmp_path / "x.png") == (1, 3)


def test_bad_image_file(tmp_path):
    (tmp_path / "bad.pfm").write_bytes(b"P6\n1 1\n")
    with pytest.raises(imageio.ImageFormatError):
        imageio.read_pfm(tmp_path / "bad.pfm")
