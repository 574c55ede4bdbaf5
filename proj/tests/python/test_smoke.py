import json

import numpy as np
import pytest

import peftlab


def test_methods():
    assert peftlab.methods() == [
        "lora", "alpha_lora", "adalora", "s2lora", "bitfit", "ia3", "glora", "full_ft",
    ]


def test_whisper_counts():
    assert peftlab.count_trainable("lora", "whisper-medium-dims", 8)[0] == 2359296
    assert peftlab.count_trainable("adalora", "whisper-medium-dims", 8)[0] == 3540672
    assert peftlab.count_trainable("s2lora", "whisper-medium-dims", 8)[0] == 134144
    count, fraction = peftlab.count_trainable("full_ft")
    assert count == peftlab.base_parameter_count() and fraction == 1.0


def test_params_command():
    rc, out, _ = peftlab.params(arch="whisper-medium-dims", method="lora")
    assert (rc, out) == (0, "2359296 (0.31%)\n")
    rc, out, err = peftlab.params(method="nope")
    assert rc == 2 and out == "" and "lora" in err


def test_unknown_method_raises():
    with pytest.raises(ValueError):
        peftlab.count_trainable("prefix")


def test_checkpoint_round_trip(tmp_path):
    rng = np.random.default_rng(0)
    arrays = {"a": rng.normal(size=(3, 4)), "b": rng.normal(size=5)}
    path = tmp_path / "x.ckpt"
    peftlab.save_checkpoint(path, arrays)
    back = peftlab.load_checkpoint(path)
    assert set(back) == {"a", "b"}
    for k, v in arrays.items():
        assert back[k].shape == v.shape
        assert np.array_equal(back[k], v)
    peftlab.save_checkpoint(path, arrays, dtype="f32")
    back = peftlab.load_checkpoint(path)
    assert np.array_equal(back["a"], arrays["a"].astype(np.float32).astype(np.float64))


def test_corrupt_checkpoint_rejected(tmp_path):
    path = tmp_path / "x.ckpt"
    peftlab.save_checkpoint(path, {"a": np.ones(4)})
    data = bytearray(path.read_bytes())
    data[10] ^= 0xFF
    path.write_bytes(bytes(data))
    with pytest.raises(peftlab.CheckpointError):
        peftlab.load_checkpoint(path)


def test_adapt_merge_report(tmp_path):
    # A base model straight from a tiny pretraining run.
    cfg = {
        "arch": {"preset": "toy-small", "d_model": 16, "n_heads": 2, "d_ffn": 32,
                 "n_enc_layers": 1, "n_dec_layers": 1},
        "task": {"n_pretrain": 16, "n_adapt_small": 8, "n_eval": 4},
        "pretrain": {"epochs": 1, "batch_size": 4, "grad_accumulation": 1, "max_steps": 2},
        "train": {"epochs": 1, "batch_size": 4, "grad_accumulation": 1, "max_steps": 2},
    }
    config = tmp_path / "run.json"
    config.write_text(json.dumps(cfg))
    base = tmp_path / "base.ckpt"
    rc, _, err = peftlab.pretrain(base, config=config)
    assert rc == 0, err

    adapter = tmp_path / "s2.ckpt"
    rc, _, err = peftlab.adapt(base, adapter, config=config, method="s2lora", rank=2)
    assert rc == 0, err
    assert all(k.startswith("adapter/s2lora/") for k in peftlab.load_checkpoint(adapter))
    metrics = json.loads((tmp_path / "s2.ckpt.metrics.json").read_text())
    assert metrics["method"] == "s2lora" and metrics["total_steps"] == 2

    rc, out, err = peftlab.merge(base, adapter, tmp_path / "merged.ckpt")
    assert rc == 0, err
    assert float(out.split(":")[1].split()[0]) < 1e-6

    rc, _, err = peftlab.report(adapter, tmp_path / "ranks.csv", threshold=0.0)
    assert rc == 0, err
    lines = (tmp_path / "ranks.csv").read_bytes().split(b"\r\n")
    assert lines[0].startswith(b"Enc-SAM")
