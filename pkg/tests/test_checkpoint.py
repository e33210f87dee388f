import numpy as np
import pytest

from rednet.checkpoint import CheckpointError, load_arrays, load_model, save_arrays, save_model
from rednet.model import build_model, default_config
from rednet.tensor import Tensor


def test_array_container_roundtrip_bitwise(tmp_path, rng):
    arrays = {
        "a/w": rng.standard_normal((3, 4)).astype(np.float64),
        "b/v": rng.standard_normal((2, 2, 5)).astype(np.float32),
        "count": np.asarray(42, dtype=np.int64),
    }
    meta = {"kind": "test", "note": "hello"}
    path = save_arrays(tmp_path / "x.ckpt", arrays, meta)
    loaded, loaded_meta = load_arrays(path)
    assert loaded_meta == meta
    assert set(loaded) == set(arrays)
    for k in arrays:
        assert loaded[k].dtype == arrays[k].dtype
        assert loaded[k].tobytes() == arrays[k].tobytes()


def test_save_is_deterministic(tmp_path, rng):
    arrays = {"w": rng.standard_normal((8, 8))}
    p1 = save_arrays(tmp_path / "a.ckpt", arrays, {"x": 1})
    p2 = save_arrays(tmp_path / "b.ckpt", arrays, {"x": 1})
    assert p1.read_bytes() == p2.read_bytes()


def test_model_roundtrip_bitwise(tmp_path, rng):
    params = build_model(default_config(0.125), seed=5, dtype=np.float32)
    # mark the running stats so the roundtrip is non-trivial
    for st in params.bn_stats.values():
        st.mean[...] = rng.standard_normal(st.mean.shape)
        st.var[...] = rng.random(st.var.shape) + 0.5
        st.updates = 3
    path = save_model(tmp_path / "model.ckpt", params)
    restored, leftovers, meta = load_model(path)
    assert leftovers == {}
    assert meta["kind"] == "model"
    assert restored.config == params.config
    assert restored.dtype == params.dtype
    for p, t in params.items():
        assert restored[p].data.tobytes() == t.data.tobytes()
    for bn, st in params.bn_stats.items():
        assert restored.bn_stats[bn].mean.tobytes() == st.mean.tobytes()
        assert restored.bn_stats[bn].var.tobytes() == st.var.tobytes()
        assert restored.bn_stats[bn].updates == st.updates


def test_load_missing_file_names_path(tmp_path):
    with pytest.raises(FileNotFoundError, match="nope.ckpt"):
        load_arrays(tmp_path / "nope.ckpt")


def test_load_rejects_garbage(tmp_path):
    bad = tmp_path / "bad.ckpt"
    bad.write_bytes(b"not a checkpoint at all")
    with pytest.raises(CheckpointError, match="magic"):
        load_arrays(bad)


def test_model_load_rejects_missing_parameter(tmp_path):
    params = build_model(default_config(0.125), seed=0)
    arrays = {p: t.data for p, t in params.items()}
    some_key = next(iter(arrays))
    del arrays[some_key]
    from rednet.checkpoint import _stats_arrays
    arrays.update(_stats_arrays(params))
    from rednet.model import config_to_dict
    save_arrays(tmp_path / "m.ckpt", arrays, {"kind": "model", "config": config_to_dict(params.config), "dtype": "float64"})
    with pytest.raises(CheckpointError, match="missing parameter"):
        load_model(tmp_path / "m.ckpt")
