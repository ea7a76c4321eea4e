import json

import numpy as np
import pytest

from spectemp.checkpoint import ContainerError, read_container, write_container


def test_roundtrip_bitwise(tmp_path, rng):
    tensors = {"a": rng.standard_normal((3, 4)).astype(np.float32), "b": np.float32([1.5]),
               "empty": np.zeros((0, 2), np.float32)}
    write_container(tmp_path / "c", tensors, {"k": 1})
    back, meta = read_container(tmp_path / "c")
    assert meta == {"k": 1}
    for k in tensors:
        assert back[k].shape == tensors[k].shape and back[k].tobytes() == tensors[k].tobytes()


def test_overwrite_is_atomic_replacement(tmp_path):
    write_container(tmp_path / "c", {"x": np.ones(2, np.float32)}, {})
    write_container(tmp_path / "c", {"y": np.zeros(3, np.float32)}, {})
    back, _ = read_container(tmp_path / "c")
    assert list(back) == ["y"]
    assert sorted(p.name for p in tmp_path.iterdir()) == ["c"]


def test_errors(tmp_path):
    with pytest.raises(ContainerError):
        read_container(tmp_path / "missing")
    write_container(tmp_path / "c", {"x": np.ones(8, np.float32)}, {})
    (tmp_path / "c" / "tensors.bin").write_bytes(b"\0" * 4)
    with pytest.raises(ContainerError):
        read_container(tmp_path / "c")
    write_container(tmp_path / "d", {"x": np.ones(8, np.float32)}, {})
    man = json.loads((tmp_path / "d" / "manifest.json").read_text())
    man["version"] = 99
    (tmp_path / "d" / "manifest.json").write_text(json.dumps(man))
    with pytest.raises(ContainerError):
        read_container(tmp_path / "d")
