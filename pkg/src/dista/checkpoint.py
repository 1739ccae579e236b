"""Checkpoint save/load on top of the tensor-record container."""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from . import records
from .records import FormatError
from .training import OptimState


class CompatError(ValueError):
    """Checkpoint and model disagree on parameter names or shapes."""


@dataclass
class Checkpoint:
    config_text: str
    epoch: int
    optim_step: int
    rng_state: dict
    tensors: dict[str, np.ndarray] = field(repr=False)
    order: list[str] = field(default_factory=list, repr=False)


def _header(config_text: str, epoch: int, step: int, rng_state: dict) -> str:
    meta = f"epoch = {epoch}\noptim_step = {step}\nrng = {json.dumps(rng_state, sort_keys=True)}\n"
    return meta + "---\n" + config_text


def checkpoint_tensors(model, optim: OptimState):
    out = []
    for name, p in model.named_parameters():
        out.append((f"param/{name}", p.data))
    for name, bn in model.named_buffers():
        out.append((f"buffer/{name}.running_mean", bn.running_mean))
        out.append((f"buffer/{name}.running_var", bn.running_var))
    for name, _ in model.named_parameters():
        if name in optim.m:
            out.append((f"optim.m/{name}", optim.m[name]))
            out.append((f"optim.v/{name}", optim.v[name]))
    return out


def save_checkpoint(path, model, optim: OptimState, epoch: int, rng_state: dict, config_text: str) -> int:
    header = _header(config_text, epoch, optim.step, rng_state)
    return records.write(path, header, checkpoint_tensors(model, optim))


def parse_checkpoint(raw: bytes) -> Checkpoint:
    header, tensors = records.decode(raw)
    meta, sep, config_text = header.partition("---\n")
    if not sep:
        raise FormatError("checkpoint header lacks a config block")
    kv = {}
    for line in meta.splitlines():
        k, _, v = line.partition(" = ")
        kv[k] = v
    try:
        epoch = int(kv["epoch"])
        step = int(kv["optim_step"])
        rng_state = json.loads(kv["rng"])
    except (KeyError, ValueError) as exc:
        raise FormatError(f"malformed checkpoint metadata: {exc}") from None
    names = [n for n, _ in tensors]
    return Checkpoint(config_text, epoch, step, rng_state, dict(tensors), names)


def load_checkpoint(path) -> Checkpoint:
    with open(path, "rb") as fh:
        return parse_checkpoint(fh.read())


def apply_checkpoint(ckpt: Checkpoint, model, optim: OptimState | None = None):
    """Copy checkpoint tensors into ``model`` (and ``optim``).

    Every name and shape is checked before anything is modified.
    """
    params = dict(model.named_parameters())
    buffers = dict(model.named_buffers())
    expected = {f"param/{n}": p.data.shape for n, p in params.items()}
    for n, bn in buffers.items():
        expected[f"buffer/{n}.running_mean"] = bn.running_mean.shape
        expected[f"buffer/{n}.running_var"] = bn.running_var.shape
    for key, shape in expected.items():
        if key not in ckpt.tensors:
            raise CompatError(f"checkpoint lacks {key}")
        if ckpt.tensors[key].shape != shape:
            raise CompatError(f"{key}: checkpoint shape {ckpt.tensors[key].shape} != model shape {shape}")
    extra = [k for k in ckpt.tensors if k.startswith(("param/", "buffer/")) and k not in expected]
    if extra:
        raise CompatError(f"checkpoint has unknown tensors: {extra[:3]}")

    for n, p in params.items():
        p.data[...] = ckpt.tensors[f"param/{n}"].astype(p.data.dtype)
    for n, bn in buffers.items():
        bn.running_mean = ckpt.tensors[f"buffer/{n}.running_mean"].astype(bn.running_mean.dtype)
        bn.running_var = ckpt.tensors[f"buffer/{n}.running_var"].astype(bn.running_var.dtype)
    if optim is not None:
        optim.step = ckpt.optim_step
        optim.m.clear()
        optim.v.clear()
        for n in params:
            if f"optim.m/{n}" in ckpt.tensors:
                optim.m[n] = ckpt.tensors[f"optim.m/{n}"].copy()
                optim.v[n] = ckpt.tensors[f"optim.v/{n}"].copy()
    return model, optim
