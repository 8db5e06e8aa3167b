import json

import numpy as np
import pytest

from upstream_debias.checkpoint import Checkpoint, dumps, load_checkpoint, loads, save_checkpoint
from upstream_debias.downstream import transfer_init
from upstream_debias.errors import CheckpointError
from upstream_debias.model import add_adv_head

from conftest import tiny_model

V = 30


def _ckpt(vocab=None, kind="mean-pool-mlp"):
    m = tiny_model(V, seed=2, n_classes=3, harmful=(1, 2), encoder_kind=kind)
    add_adv_head(m, "T/1", 5)
    m.encoder["w1"].data[0, 0] = 1 / 3  # not exactly representable in decimal
    return Checkpoint(m, step=42, val_metric=0.8125, vocab=vocab, config={"method": "UBM_Reg", "seed": 7})


def _bytes(params):
    return {n: t.data.tobytes() for n, t in params.named_tensors()}


@pytest.mark.parametrize("kind", ["mean-pool-mlp", "single-head-attention"])
def test_roundtrip_is_bit_exact(tmp_path, small_vocab, kind):
    ck = _ckpt(small_vocab, kind)
    path = tmp_path / "a" / "model.ckpt.json"
    save_checkpoint(path, ck)
    back = load_checkpoint(path)
    assert _bytes(back.params) == _bytes(ck.params)
    assert back.params.config == ck.params.config
    assert back.params.heads["T"].harmful == (1, 2) and set(back.params.adv_heads) == {"T/1"}
    assert (back.step, back.val_metric, back.config) == (42, 0.8125, {"method": "UBM_Reg", "seed": 7})
    assert back.vocab.tokens == small_vocab.tokens
    # Saving again reproduces the file byte for byte.
    assert dumps(back) == path.read_text()
    assert not list(path.parent.glob("*.tmp"))


def test_loaded_checkpoint_feeds_transfer(tmp_path):
    ck = _ckpt()
    save_checkpoint(tmp_path / "c.json", ck)
    out = transfer_init(load_checkpoint(tmp_path / "c.json").params, "B", 2, (1,), 3)
    assert {k: t.data.tobytes() for k, t in out.encoder.items()} == {k: t.data.tobytes() for k, t in ck.params.encoder.items()}
    assert not out.adv_heads


def test_truncated_file(tmp_path):
    text = dumps(_ckpt())
    path = tmp_path / "t.json"
    path.write_text(text[: len(text) // 2])
    with pytest.raises(CheckpointError, match="truncated"):
        load_checkpoint(path)


def test_edited_value_fails_checksum():
    payload = json.loads(dumps(_ckpt()))
    payload["tensors"][0]["data"][0] += 1e-9
    with pytest.raises(CheckpointError, match="checksum"):
        loads(json.dumps(payload))


def test_version_and_format_mismatch():
    payload = json.loads(dumps(_ckpt()))
    with pytest.raises(CheckpointError, match="version"):
        loads(json.dumps({**payload, "version": 999}))
    with pytest.raises(CheckpointError, match="not a checkpoint"):
        loads(json.dumps({"hello": 1}))


def test_missing_file_and_non_finite(tmp_path):
    with pytest.raises(CheckpointError):
        load_checkpoint(tmp_path / "nope.json")
    ck = _ckpt()
    ck.params.encoder["b1"].data[0] = np.nan
    with pytest.raises(CheckpointError):
        dumps(ck)


def test_wrong_encoder_tensor_set_rejected():
    from upstream_debias.checkpoint import _digest

    payload = json.loads(dumps(_ckpt()))
    payload.pop("checksum")
    payload["tensors"] = [t for t in payload["tensors"] if t["name"] != "encoder.b2"]
    payload["checksum"] = _digest(payload)
    with pytest.raises(CheckpointError, match="encoder tensors"):
        loads(json.dumps(payload))
