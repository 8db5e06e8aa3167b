"""Checkpoints as self-describing JSON: named tensors with shapes and decimal floats.

Floats are written with ``repr``, which round-trips every float64 exactly, so
save -> load -> save reproduces the file byte for byte.
"""

from __future__ import annotations

import hashlib
import json
import os
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Optional, Union

import numpy as np

from .autodiff import Tensor
from .corpus import Vocab
from .errors import CheckpointError
from .model import EncoderConfig, Head, ModelParams

FORMAT = "upstream-debias-checkpoint"
VERSION = 1


@dataclass
class Checkpoint:
    params: ModelParams
    step: int = 0
    val_metric: Optional[float] = None
    vocab: Optional[Vocab] = None
    config: dict[str, Any] = field(default_factory=dict)


def _tensor_entry(name: str, t: Tensor) -> dict:
    return {"name": name, "shape": list(t.shape), "data": [float(x) for x in t.data.ravel()]}


def _payload(ckpt: Checkpoint) -> dict:
    p = ckpt.params
    return {
        "format": FORMAT,
        "version": VERSION,
        "encoder_config": asdict(p.config),
        "config": ckpt.config,
        "step": int(ckpt.step),
        "val_metric": None if ckpt.val_metric is None else float(ckpt.val_metric),
        "vocab": None if ckpt.vocab is None else ckpt.vocab.to_dict(),
        "heads": {tid: {"harmful": list(h.harmful)} for tid, h in sorted(p.heads.items())},
        "adv_heads": sorted(p.adv_heads),
        "tensors": [_tensor_entry(name, t) for name, t in p.named_tensors()],
    }


def _digest(payload: dict) -> str:
    body = json.dumps(payload, sort_keys=True, separators=(",", ":"), allow_nan=False)
    return hashlib.sha256(body.encode()).hexdigest()


def dumps(ckpt: Checkpoint) -> str:
    try:
        payload = _payload(ckpt)
        payload["checksum"] = _digest(payload)
        return json.dumps(payload, sort_keys=True, indent=1, allow_nan=False) + "\n"
    except (TypeError, ValueError) as exc:
        raise CheckpointError(f"checkpoint is not serializable: {exc}") from exc


def save_checkpoint(path: Union[str, os.PathLike], ckpt: Checkpoint) -> None:
    """Write atomically: a crash never leaves a half-written checkpoint at ``path``."""
    path = Path(path)
    text = dumps(ckpt)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(text)
    os.replace(tmp, path)


def _tensor(entry: dict) -> Tensor:
    shape = tuple(int(s) for s in entry["shape"])
    data = np.asarray(entry["data"], dtype=np.float64)
    if data.size != int(np.prod(shape)):
        raise CheckpointError(f"tensor {entry['name']}: {data.size} values for shape {shape}")
    return Tensor(data.reshape(shape), requires_grad=True)


def loads(text: str) -> Checkpoint:
    try:
        payload = json.loads(text)
    except json.JSONDecodeError as exc:
        raise CheckpointError(f"checkpoint is truncated or malformed: {exc}") from exc
    if not isinstance(payload, dict) or payload.get("format") != FORMAT:
        raise CheckpointError("not a checkpoint file")
    if payload.get("version") != VERSION:
        raise CheckpointError(f"checkpoint version {payload.get('version')!r} != supported {VERSION}")
    checksum = payload.pop("checksum", None)
    if checksum != _digest(payload):
        raise CheckpointError("checkpoint checksum mismatch (file corrupted or edited)")
    try:
        config = EncoderConfig(**payload["encoder_config"])
        tensors = {e["name"]: _tensor(e) for e in payload["tensors"]}
        encoder = {n.split(".", 1)[1]: t for n, t in tensors.items() if n.startswith("encoder.")}
        heads = {
            tid: Head(tensors[f"head.{tid}.weight"], tensors[f"head.{tid}.bias"], tuple(h["harmful"]))
            for tid, h in payload["heads"].items()
        }
        adv = {k: Head(tensors[f"adv.{k}.weight"], tensors[f"adv.{k}.bias"], (1,)) for k in payload["adv_heads"]}
        vocab = None if payload["vocab"] is None else Vocab.from_dict(payload["vocab"])
    except (KeyError, TypeError, ValueError) as exc:
        raise CheckpointError(f"checkpoint content invalid: {exc!r}") from exc
    expected = {"embedding", "w1", "b1", "w2", "b2"}
    if config.encoder_kind == "single-head-attention":
        expected |= {"wq", "wk", "wv"}
    if set(encoder) != expected:
        raise CheckpointError(f"encoder tensors {sorted(encoder)} do not match kind {config.encoder_kind!r}")
    params = ModelParams(config=config, encoder=encoder, heads=heads, adv_heads=adv)
    return Checkpoint(params, payload["step"], payload["val_metric"], vocab, payload["config"])


def load_checkpoint(path: Union[str, os.PathLike]) -> Checkpoint:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    return loads(text)
