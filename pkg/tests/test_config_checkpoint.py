import numpy as np
import pytest
import torch

from pgvton import tpim
from pgvton.checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from pgvton.config import Config
from pgvton.errors import CheckpointError, ValidationError
from pgvton.training import LossLog, load_model_state, make_checkpoint


def test_defaults_are_the_full_scale_settings():
    c = Config()
    assert (c.lambda1, c.lambda2, c.lambda3, c.lambda4) == (2.0, 2.0, 3.0, 0.3)
    assert (c.lambda5, c.lambda6, c.lambda7, c.lambda8) == (6.0, 0.2, 6.0, 0.2)
    assert (c.tau, c.xi) == (0.2, 0.3)
    assert (c.tpim_lr, c.tpim_batch, c.tpim_iterations) == (1e-4, 16, 72_000)
    assert (c.ptm_lr, c.ptm_batch, c.ptm_iterations) == (2e-4, 4, 145_000)
    assert (c.rsim_lr, c.rsim_batch, c.rsim_iterations) == (1e-5, 32, 36_000)
    assert c.erasure_level == 5 and c.max_offset == 0.5


@pytest.mark.parametrize("changes", [dict(tau=1.5), dict(xi=-0.1), dict(lambda3=-1.0), dict(ptm_batch=0),
                                     dict(erasure_level=10), dict(height=60), dict(max_offset=0.0)])
def test_invalid_values_rejected(changes):
    with pytest.raises(ValidationError):
        Config(**changes)


def test_text_round_trip_and_hash():
    c = Config(seed=9, tau=0.35, demodulate=True, dataset="/tmp/x")
    back = Config.from_text(c.to_text())
    assert back == c
    assert back.hash() == c.hash()
    assert Config().hash() != c.hash()


def test_text_parsing_details():
    c = Config.from_text("# comment\n\ntau = 0.4  # trailing\ntpim_iterations = 1_000\ndemodulate = yes\n")
    assert c.tau == 0.4 and c.tpim_iterations == 1000 and c.demodulate is True


@pytest.mark.parametrize("text,match", [("bogus = 1\n", "bogus"), ("tau 0.3\n", "key = value"),
                                        ("ptm_batch = four\n", "ptm_batch")])
def test_bad_config_text(text, match):
    with pytest.raises(ValidationError, match=match):
        Config.from_text(text)


# checkpoints ------------------------------------------------------------------


def _ckpt():
    arrays = {"model.w": np.arange(12, dtype=np.float32).reshape(3, 4),
              "model.n": np.array([7], dtype=np.int64),
              "model.s": np.array(2.5, dtype=np.float64)}
    return Checkpoint("tpim", "abc123", arrays, {"iterations": 5, "note": "x"})


def test_checkpoint_round_trip_is_bit_exact(tmp_path):
    ck = _ckpt()
    save_checkpoint(ck, tmp_path / "a.ckpt")
    back = load_checkpoint(tmp_path / "a.ckpt", "tpim")
    assert back.module_id == "tpim" and back.config_hash == "abc123"
    assert back.metadata == ck.metadata
    assert back.arrays.keys() == ck.arrays.keys()
    for k, v in ck.arrays.items():
        assert back.arrays[k].dtype == v.dtype and back.arrays[k].shape == v.shape
        assert back.arrays[k].tobytes() == v.tobytes()


def test_model_checkpoint_restores_weights(tmp_path):
    from conftest import smoke_config

    cfg = smoke_config()
    model = tpim.build_model(cfg)
    with torch.no_grad():
        next(model.parameters()).add_(1.0)
    save_checkpoint(make_checkpoint("tpim", cfg, model, None, LossLog(tpim.LOG_COLUMNS), 0), tmp_path / "m.ckpt")
    back = tpim.load_tpim(load_checkpoint(tmp_path / "m.ckpt"))
    assert all(torch.equal(a, b) for a, b in zip(model.state_dict().values(), back.state_dict().values()))
    other = tpim.build_model(cfg)
    load_model_state(other, load_checkpoint(tmp_path / "m.ckpt"))
    assert torch.equal(next(other.parameters()), next(model.parameters()))


def test_truncated_checkpoint(tmp_path):
    save_checkpoint(_ckpt(), tmp_path / "a.ckpt")
    data = (tmp_path / "a.ckpt").read_bytes()
    (tmp_path / "a.ckpt").write_bytes(data[:-5])
    with pytest.raises(CheckpointError, match="truncated"):
        load_checkpoint(tmp_path / "a.ckpt")


def test_bad_magic(tmp_path):
    (tmp_path / "a.ckpt").write_bytes(b"NOTACKPT" + bytes(32))
    with pytest.raises(CheckpointError, match="magic"):
        load_checkpoint(tmp_path / "a.ckpt")


def test_wrong_version(tmp_path):
    save_checkpoint(_ckpt(), tmp_path / "a.ckpt")
    data = bytearray((tmp_path / "a.ckpt").read_bytes())
    data[8] = 99
    (tmp_path / "a.ckpt").write_bytes(bytes(data))
    with pytest.raises(CheckpointError, match="version"):
        load_checkpoint(tmp_path / "a.ckpt")


def test_wrong_module(tmp_path):
    save_checkpoint(_ckpt(), tmp_path / "a.ckpt")
    with pytest.raises(CheckpointError, match="rsim"):
        load_checkpoint(tmp_path / "a.ckpt", "rsim")


def test_missing_file(tmp_path):
    with pytest.raises(CheckpointError):
        load_checkpoint(tmp_path / "nope.ckpt")
