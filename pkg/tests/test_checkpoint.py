from dataclasses import replace

import numpy as np
import pytest

from blrmoe import checkpoint as ckpt
from blrmoe.config import ModelConfig
from blrmoe.errors import ConfigurationError
from blrmoe.model import init_model

CFG = ModelConfig(num_layers=2, num_shared=1, d_model=8, num_heads=2, d_ffn=12,
                  languages=("zh", "en"), vocab_size=5, feature_dim=4, tdnn_channels=6)


@pytest.mark.parametrize("kind", ["linear", "tdnn"])
def test_load_then_save_is_bit_exact(tmp_path, kind):
    model = init_model(replace(CFG, router_kind=kind), 3)
    path = tmp_path / "m.ckpt"
    ckpt.save(path, model, {"seed": 3, "note": "x"})
    first = path.read_bytes()
    loaded = ckpt.load(path)
    ckpt.save(tmp_path / "again.ckpt", loaded.model, loaded.metadata)
    assert (tmp_path / "again.ckpt").read_bytes() == first
    assert loaded.model.config == model.config
    for name, p in model.params.items():
        assert p.data.tobytes() == loaded.model.params[name].data.tobytes()


def test_special_values_survive(tmp_path):
    model = init_model(CFG, 0)
    model.params["output.b"].data[:] = [np.inf, -0.0, 5e-324, np.nan, 1e308]
    buf = ckpt.to_bytes(model)
    back = ckpt.from_bytes(buf).model.params["output.b"].data
    assert back.tobytes() == model.params["output.b"].data.tobytes()


def test_same_model_same_bytes():
    assert ckpt.to_bytes(init_model(CFG, 1)) == ckpt.to_bytes(init_model(CFG, 1))
    assert ckpt.to_bytes(init_model(CFG, 1)) != ckpt.to_bytes(init_model(CFG, 2))


def test_corrupt_inputs_raise(tmp_path):
    buf = ckpt.to_bytes(init_model(CFG, 0))
    with pytest.raises(ConfigurationError):
        ckpt.from_bytes(b"NOTACKPT" + buf[8:])
    with pytest.raises(ConfigurationError):
        ckpt.from_bytes(buf[:-8])
    with pytest.raises(ConfigurationError):
        ckpt.from_bytes(buf[:10])
    with pytest.raises(ConfigurationError):
        ckpt.load(tmp_path / "missing.ckpt")
