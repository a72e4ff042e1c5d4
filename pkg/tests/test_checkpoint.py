import json

import numpy as np
import pytest

from mrmil import checkpoint
from mrmil.model import Model, ModelConfig


@pytest.fixture
def model():
    m = Model(ModelConfig.tiny(seed=4))
    rng = np.random.default_rng(0)
    for p in m.params.values():
        p.data += rng.normal(0, 0.1, p.shape)
    return m


def test_reload_reproduces_forward_bit_exactly(model, tmp_path):
    path = tmp_path / "m.bin"
    checkpoint.save(model, path)
    loaded = checkpoint.load(path)
    x = np.random.default_rng(1).uniform(0, 1, (3, 1, 16, 16))
    a, b = model.forward(x), loaded.forward(x)
    np.testing.assert_array_equal(a.P.data, b.P.data)
    np.testing.assert_array_equal(a.S.data, b.S.data)
    assert loaded.config == model.config


def test_same_model_same_bytes(model, tmp_path):
    checkpoint.save(model, tmp_path / "a.bin", extra={"step": 3})
    checkpoint.save(model, tmp_path / "b.bin", extra={"step": 3})
    assert (tmp_path / "a.bin").read_bytes() == (tmp_path / "b.bin").read_bytes()


def test_header_lists_every_parameter(model, tmp_path):
    checkpoint.save(model, tmp_path / "m.bin", extra={"best_epoch": 2})
    header, arrays = checkpoint.read(tmp_path / "m.bin")
    assert [a["name"] for a in header["arrays"]] == list(model.params)
    assert header["extra"] == {"best_epoch": 2}
    assert set(arrays) == set(model.params)


def test_rejects_foreign_file(tmp_path):
    (tmp_path / "x.bin").write_bytes(b"hello\n")
    with pytest.raises(checkpoint.CheckpointError, match="not a checkpoint"):
        checkpoint.read(tmp_path / "x.bin")


def test_rejects_truncated(model, tmp_path):
    path = tmp_path / "m.bin"
    checkpoint.save(model, path)
    path.write_bytes(path.read_bytes()[:-16])
    with pytest.raises(checkpoint.CheckpointError, match="truncated"):
        checkpoint.read(path)


def test_rejects_unknown_version(model, tmp_path):
    path = tmp_path / "m.bin"
    checkpoint.save(model, path)
    magic, header, body = path.read_bytes().split(b"\n", 2)
    h = json.loads(header)
    h["version"] = 99
    path.write_bytes(magic + b"\n" + json.dumps(h).encode() + b"\n" + body)
    with pytest.raises(checkpoint.CheckpointError, match="version"):
        checkpoint.read(path)
