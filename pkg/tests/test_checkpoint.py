import json

import numpy as np
import pytest

from partalign import checkpoint as ck
from partalign import partnet as pn
from conftest import tiny_model


def test_round_trip_exact(tmp_path):
    m = tiny_model(parts=3, seed=5)
    ck.save(tmp_path / "m.ckpt", m)
    back = ck.load(tmp_path / "m.ckpt")
    assert ck.params_equal(m.params, back.params)
    assert back.config_dict() == m.config_dict()
    side = json.loads((tmp_path / "m.ckpt.json").read_text())
    assert side["partnet"]["parts"] == 3


def test_load_into_compatible_model(tmp_path):
    m = tiny_model(seed=1)
    ck.save(tmp_path / "m.ckpt", m)
    other = tiny_model(seed=2)
    ck.load(tmp_path / "m.ckpt", other)
    assert ck.params_equal(m.params, other.params)


def test_shape_mismatch_names_parameters(tmp_path):
    ck.save(tmp_path / "m.ckpt", tiny_model(parts=2))
    with pytest.raises(ck.CheckpointError, match="detector.w"):
        ck.load(tmp_path / "m.ckpt", tiny_model(parts=3))


@pytest.mark.parametrize("cut", [3, 20, -7])
def test_truncated_file_rejected(tmp_path, cut):
    ck.save(tmp_path / "m.ckpt", tiny_model())
    data = (tmp_path / "m.ckpt").read_bytes()
    (tmp_path / "bad.ckpt").write_bytes(data[:cut])
    with pytest.raises(ck.CheckpointError):
        ck.load(tmp_path / "bad.ckpt")


def test_bad_magic_and_trailing_bytes(tmp_path):
    ck.save(tmp_path / "m.ckpt", tiny_model())
    data = (tmp_path / "m.ckpt").read_bytes()
    (tmp_path / "a.ckpt").write_bytes(b"XXXX" + data[4:])
    with pytest.raises(ck.CheckpointError, match="magic"):
        ck.load(tmp_path / "a.ckpt")
    (tmp_path / "b.ckpt").write_bytes(data + b"\0")
    with pytest.raises(ck.CheckpointError, match="trailing"):
        ck.load(tmp_path / "b.ckpt")


def test_loaded_model_embeds_identically(tmp_path):
    m = tiny_model(seed=7)
    ck.save(tmp_path / "m.ckpt", m)
    x = np.random.default_rng(0).random((3, 12, 6, 3))
    np.testing.assert_array_equal(pn.embed_numpy(x, m), pn.embed_numpy(x, ck.load(tmp_path / "m.ckpt")))
