"""Flat ``key = value`` run configuration."""

from __future__ import annotations

import dataclasses
import os
from dataclasses import dataclass, fields
from pathlib import Path

import numpy as np

from .attention import AttentionConfig
from .data import SyntheticSpec, default_cifar_dir
from .model import ModelConfig
from .training import TrainHyper


class ConfigError(ValueError):
    def __init__(self, key: str, message: str):
        super().__init__(f"{key}: {message}")
        self.key = key


@dataclass
class RunConfig:
    # data
    dataset: str = "synthetic"
    data_dir: str = ""
    cifar_classes: str = ""
    train_limit: int = 0
    test_limit: int = 0
    syn_classes: int = 4
    syn_frames: int = 4
    syn_frame_size: int = 8
    syn_noise: float = 0.05
    syn_train: int = 4000
    syn_test: int = 1000
    syn_random_phase: bool = True
    # output
    out_dir: str = "runs/dista"
    checkpoint: str = ""
    checkpoint_every: int = 1
    record_wall_time: bool = False
    # model
    seed: int = 0
    dtype: str = "float32"
    blocks: int = 1
    dim: int = 32
    timesteps: int = 8
    heads: int = 2
    mlp_ratio: int = 4
    patch_size: int = 4
    taw_size: int = 8
    denoise_threshold: float = 3.0
    adn: bool = True
    adn_blocks: int = -1
    attn_scale: float = 0.125
    theta: float = 1.0
    surrogate_width: float = 1.0
    tau_init: float = 2.0
    learn_tau: bool = True
    # optimization
    lr: float = 0.003
    lr_floor_ratio: float = 0.125
    beta1: float = 0.9
    beta2: float = 0.999
    weight_decay: float = 0.01
    grad_clip: float = 0.0
    epochs: int = 10
    batch_size: int = 64

    # -- derived objects ---------------------------------------------------

    @property
    def np_dtype(self):
        return np.dtype(self.dtype)

    @property
    def checkpoint_path(self) -> Path:
        return Path(self.checkpoint) if self.checkpoint else Path(self.out_dir) / "checkpoint.dsta"

    @property
    def cifar_dir(self) -> str:
        return self.data_dir or default_cifar_dir()

    def class_list(self):
        if not self.cifar_classes.strip():
            return None
        return [int(c) for c in self.cifar_classes.split(",") if c.strip()]

    def num_classes(self) -> int:
        if self.dataset == "synthetic":
            return self.syn_classes
        cl = self.class_list()
        return 10 if cl is None else len(cl)

    def synthetic_spec(self) -> SyntheticSpec:
        return SyntheticSpec(num_classes=self.syn_classes, num_frames=self.syn_frames,
                             frame_size=self.syn_frame_size, timesteps=self.timesteps,
                             noise_rate=self.syn_noise, train_size=self.syn_train,
                             test_size=self.syn_test, seed=self.seed,
                             random_phase=self.syn_random_phase)

    def attention_config(self) -> AttentionConfig:
        return AttentionConfig(taw_size=self.taw_size, denoise_threshold=self.denoise_threshold,
                               adn_enabled=self.adn, heads=self.heads, attn_scale=self.attn_scale)

    def model_config(self) -> ModelConfig:
        common = dict(blocks=self.blocks, dim=self.dim, timesteps=self.timesteps,
                      num_classes=self.num_classes(), mlp_ratio=self.mlp_ratio,
                      attention=self.attention_config(),
                      adn_blocks=None if self.adn_blocks < 0 else self.adn_blocks,
                      theta=self.theta, surrogate_width=self.surrogate_width,
                      tau_init=self.tau_init, learn_tau=self.learn_tau)
        if self.dataset == "synthetic":
            return ModelConfig.for_sequences(tokens=self.syn_frame_size, in_features=self.syn_frame_size, **common)
        return ModelConfig.for_images(image_size=32, channels=3, patch_size=self.patch_size, **common)

    def train_hyper(self) -> TrainHyper:
        return TrainHyper(lr=self.lr, lr_floor_ratio=self.lr_floor_ratio, betas=(self.beta1, self.beta2),
                          weight_decay=self.weight_decay, epochs=self.epochs, batch_size=self.batch_size,
                          seed=self.seed, grad_clip=self.grad_clip or None)

    # -- validation and text form -------------------------------------------

    def validate(self, check_paths: bool = True) -> "RunConfig":
        def need(cond, key, msg):
            if not cond:
                raise ConfigError(key, msg)

        need(self.dataset in ("synthetic", "cifar10"), "dataset", "must be synthetic or cifar10")
        need(self.dtype in ("float32", "float64"), "dtype", "must be float32 or float64")
        for key in ("blocks", "dim", "timesteps", "heads", "mlp_ratio", "patch_size", "epochs",
                    "checkpoint_every", "syn_classes", "syn_frames", "syn_frame_size"):
            need(getattr(self, key) >= 1, key, "must be >= 1")
        need(self.dim % self.heads == 0, "heads", f"must divide dim ({self.dim})")
        need(1 <= self.taw_size <= self.timesteps, "taw_size",
             f"must lie in [1, timesteps={self.timesteps}]")
        need(self.denoise_threshold >= 0, "denoise_threshold", "must be >= 0")
        need(self.adn_blocks <= self.blocks, "adn_blocks", f"must not exceed blocks ({self.blocks})")
        need(self.batch_size >= 2, "batch_size", "must be >= 2")
        need(self.lr > 0, "lr", "must be positive")
        need(0 <= self.lr_floor_ratio <= 1, "lr_floor_ratio", "must lie in [0, 1]")
        need(self.tau_init > 1.0, "tau_init", "must exceed 1")
        need(self.theta > 0, "theta", "must be positive")
        need(self.surrogate_width > 0, "surrogate_width", "must be positive")
        need(0 <= self.syn_noise < 0.5, "syn_noise", "must lie in [0, 0.5)")
        need(self.grad_clip >= 0, "grad_clip", "must be >= 0")
        if self.dataset == "cifar10":
            need(32 % self.patch_size == 0, "patch_size", "must divide 32")
            cl = self.class_list() if self.cifar_classes.strip() else None
            if cl is not None:
                need(all(0 <= c <= 9 for c in cl) and len(set(cl)) == len(cl) and len(cl) >= 2,
                     "cifar_classes", "must list at least two distinct labels in 0..9")
            if check_paths:
                need(Path(self.cifar_dir).is_dir(), "data_dir", f"directory {self.cifar_dir} does not exist")
        if self.dataset == "synthetic":
            need(self.syn_classes >= 2, "syn_classes", "must be >= 2")
        if check_paths:
            out = Path(self.out_dir)
            parent = next((p for p in [out, *out.parents] if p.exists()), None)
            need(parent is not None and os.access(parent, os.W_OK), "out_dir", "is not creatable")
        return self

    def to_text(self) -> str:
        lines = []
        for f in fields(self):
            v = getattr(self, f.name)
            if isinstance(v, bool):
                v = "true" if v else "false"
            lines.append(f"{f.name} = {v}")
        return "\n".join(lines) + "\n"

    def replace(self, **kw) -> "RunConfig":
        return dataclasses.replace(self, **kw)


_FIELDS = {f.name: f for f in fields(RunConfig)}


def _convert(key: str, raw: str):
    kind = _FIELDS[key].type
    try:
        if kind == "bool":
            low = raw.lower()
            if low in ("true", "yes", "1", "on"):
                return True
            if low in ("false", "no", "0", "off"):
                return False
            raise ValueError(raw)
        if kind == "int":
            return int(raw)
        if kind == "float":
            return float(raw)
        return raw
    except ValueError:
        raise ConfigError(key, f"cannot parse {raw!r} as {kind}") from None


def parse_config(text: str, validate: bool = True, check_paths: bool = True) -> RunConfig:
    values = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}", "expected 'key = value'")
        key, raw = (s.strip() for s in line.split("=", 1))
        if key not in _FIELDS:
            raise ConfigError(key, "unknown key")
        values[key] = _convert(key, raw)
    cfg = RunConfig(**values)
    return cfg.validate(check_paths) if validate else cfg


def load_config(path, validate: bool = True, check_paths: bool = True) -> RunConfig:
    """Read a config file; missing keys take the dataclass defaults."""
    with open(path, encoding="utf-8") as fh:
        return parse_config(fh.read(), validate, check_paths)
