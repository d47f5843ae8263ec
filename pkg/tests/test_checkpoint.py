import json
import struct

import numpy as np
import pytest

from pingo.checkpoint import FORMAT, load_checkpoint, save_checkpoint


def test_round_trip(tmp_path):
    arrays = {"a": np.arange(6.0).reshape(2, 3), "b": np.array(3.5), "c": np.zeros((0, 4))}
    path = save_checkpoint(tmp_path / "x.ckpt", arrays, {"epoch": 3})
    out, meta = load_checkpoint(path)
    assert meta == {"epoch": 3}
    assert list(out) == ["a", "b", "c"]
    for k in arrays:
        np.testing.assert_array_equal(out[k], arrays[k])
        assert out[k].shape == arrays[k].shape


def test_layout_is_header_manifest_blob(tmp_path):
    path = save_checkpoint(tmp_path / "x.ckpt", {"w": np.array([1.0, 2.0])})
    raw = path.read_bytes()
    (n,) = struct.unpack("<Q", raw[:8])
    manifest = json.loads(raw[8 : 8 + n])
    assert manifest["format"] == FORMAT
    assert manifest["entries"][0] == {"name": "w", "shape": [2], "dtype": "float64", "offset": 0, "nbytes": 16}
    np.testing.assert_array_equal(np.frombuffer(raw[8 + n :], "<f8"), [1.0, 2.0])


def test_bit_exact_values(tmp_path):
    x = np.random.default_rng(0).normal(size=100)
    out, _ = load_checkpoint(save_checkpoint(tmp_path / "x.ckpt", {"x": x}))
    assert out["x"].tobytes() == x.tobytes()


def test_truncated_file_is_rejected(tmp_path):
    path = save_checkpoint(tmp_path / "x.ckpt", {"x": np.ones(10)})
    path.write_bytes(path.read_bytes()[:-8])
    with pytest.raises(ValueError, match="past the end"):
        load_checkpoint(path)


def test_wrong_format_is_rejected(tmp_path):
    manifest = json.dumps({"format": "other", "entries": [], "metadata": {}}).encode()
    p = tmp_path / "x.ckpt"
    p.write_bytes(struct.pack("<Q", len(manifest)) + manifest)
    with pytest.raises(ValueError, match="unsupported"):
        load_checkpoint(p)


def test_missing_file_is_an_os_error(tmp_path):
    with pytest.raises(OSError):
        load_checkpoint(tmp_path / "nope.ckpt")
