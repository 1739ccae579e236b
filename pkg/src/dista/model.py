"""The full spiking transformer: patch embedding, encoder blocks, head."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .attention import AttentionConfig, AttentionParams, mdssa_forward
from .neuron import NeuronParams, TauParams, lif_sequence
from .numerics import BatchNormState, Tensor, add, as_tensor, batchnorm, matmul, tmean


class ModelConfigError(ValueError):
    pass


@dataclass
class ModelConfig:
    """Architecture hyperparameters.

    ``in_features`` is the per-token input width: ``channels * patch_size**2``
    for images, or the feature width of a precomputed token sequence when
    ``patch_size`` is ``None``.
    """

    blocks: int = 2
    dim: int = 64
    timesteps: int = 4
    tokens: int = 64
    in_features: int = 48
    num_classes: int = 10
    mlp_ratio: int = 4
    patch_size: int | None = 4
    image_size: int | None = 32
    channels: int | None = 3
    attention: AttentionConfig = field(default_factory=AttentionConfig)
    adn_blocks: int | None = None
    theta: float = 1.0
    surrogate_width: float = 1.0
    tau_init: float = 2.0
    learn_tau: bool = True

    @classmethod
    def for_images(cls, image_size=32, channels=3, patch_size=4, **kw):
        if image_size % patch_size:
            raise ModelConfigError(f"image side {image_size} not divisible by patch size {patch_size}")
        tokens = (image_size // patch_size) ** 2
        return cls(tokens=tokens, in_features=channels * patch_size * patch_size,
                   patch_size=patch_size, image_size=image_size, channels=channels, **kw)

    @classmethod
    def for_sequences(cls, tokens, in_features, **kw):
        return cls(tokens=tokens, in_features=in_features, patch_size=None,
                   image_size=None, channels=None, **kw)

    @property
    def hidden(self) -> int:
        return self.mlp_ratio * self.dim

    def block_attention(self, index: int) -> AttentionConfig:
        a = self.attention
        n_adn = self.blocks if self.adn_blocks is None else self.adn_blocks
        return AttentionConfig(a.taw_size, a.denoise_threshold, a.adn_enabled and index < n_adn,
                               a.heads, a.attn_scale)

    def validate(self):
        if self.patch_size is not None:
            if self.image_size % self.patch_size:
                raise ModelConfigError("image side not divisible by patch size")
            if (self.image_size // self.patch_size) ** 2 != self.tokens:
                raise ModelConfigError("token count does not match image and patch size")
            if self.channels * self.patch_size ** 2 != self.in_features:
                raise ModelConfigError("in_features does not match channels * patch_size^2")
        self.attention.validate(self.dim, self.timesteps)


@dataclass
class Linear:
    w: Tensor
    b: Tensor | None = None

    @classmethod
    def init(cls, fan_in, fan_out, rng, dtype, name, bias=False):
        w = rng.normal(0.0, np.sqrt(2.0 / fan_in), size=(fan_in, fan_out)).astype(dtype)
        b = Tensor(np.zeros(fan_out, dtype=dtype), requires_grad=True, name=f"{name}.b") if bias else None
        return cls(Tensor(w, requires_grad=True, name=f"{name}.w"), b)

    def __call__(self, x):
        y = matmul(x, self.w)
        return add(y, self.b) if self.b is not None else y


@dataclass
class SpikingLinear:
    """Linear -> BatchNorm -> LIF array."""

    linear: Linear
    bn: BatchNormState
    neuron: NeuronParams

    @classmethod
    def init(cls, fan_in, fan_out, tokens, rng, dtype, name, cfg: ModelConfig):
        tau = TauParams.create((tokens, fan_out), cfg.tau_init, dtype, cfg.learn_tau, name=f"{name}.tau")
        return cls(Linear.init(fan_in, fan_out, rng, dtype, name),
                   BatchNormState.create(fan_out, dtype, name=f"{name}.bn"),
                   NeuronParams(tau, cfg.theta, cfg.surrogate_width))

    def __call__(self, x, mode="train", update_stats=True):
        return lif_sequence(batchnorm(self.linear(x), self.bn, mode, update_stats), self.neuron)


@dataclass
class BlockParams:
    attn: AttentionParams
    fc1: SpikingLinear
    fc2: SpikingLinear


@dataclass
class ModelParams:
    embed: SpikingLinear
    blocks: list[BlockParams]
    head: Linear


def init_params(cfg: ModelConfig, seed: int = 0, dtype=np.float32) -> ModelParams:
    cfg.validate()
    rng = np.random.default_rng(seed)
    n, d = cfg.tokens, cfg.dim
    embed = SpikingLinear.init(cfg.in_features, d, n, rng, dtype, "embed", cfg)
    blocks = []
    for i in range(cfg.blocks):
        attn = AttentionParams.init(d, n, cfg.block_attention(i), rng, dtype, name=f"block{i}.attn",
                                    tau_init=cfg.tau_init, learn_tau=cfg.learn_tau,
                                    theta=cfg.theta, surrogate_width=cfg.surrogate_width)
        fc1 = SpikingLinear.init(d, cfg.hidden, n, rng, dtype, f"block{i}.mlp.fc1", cfg)
        fc2 = SpikingLinear.init(cfg.hidden, d, n, rng, dtype, f"block{i}.mlp.fc2", cfg)
        blocks.append(BlockParams(attn, fc1, fc2))
    head = Linear.init(d, cfg.num_classes, rng, dtype, "head", bias=True)
    head.w.data[...] = (head.w.data * np.sqrt(0.5)).astype(dtype)
    return ModelParams(embed, blocks, head)


# ---------------------------------------------------------------------------
# parameter registry
# ---------------------------------------------------------------------------


def _neurons(p: ModelParams):
    yield p.embed.neuron
    for b in p.blocks:
        a = b.attn
        yield from (a.q_neuron, a.k_neuron, a.v_neuron, a.out_neuron, b.fc1.neuron, b.fc2.neuron)


def _bns(p: ModelParams):
    yield p.embed.bn
    for b in p.blocks:
        yield from (b.attn.out_bn, b.fc1.bn, b.fc2.bn)


def named_parameters(p: ModelParams) -> list[tuple[str, Tensor]]:
    """Every learnable tensor (weights, BN affine, tau) in a fixed order."""
    out: list[Tensor] = []

    def lin(l: Linear):
        out.append(l.w)
        if l.b is not None:
            out.append(l.b)

    def slin(s: SpikingLinear):
        lin(s.linear)
        out.extend([s.bn.gamma, s.bn.beta, s.neuron.tau.values])

    slin(p.embed)
    for b in p.blocks:
        a = b.attn
        out.extend([a.taw.q, a.taw.k, a.taw.v, a.q_neuron.tau.values, a.k_neuron.tau.values,
                    a.v_neuron.tau.values, a.out_w, a.out_bn.gamma, a.out_bn.beta, a.out_neuron.tau.values])
        slin(b.fc1)
        slin(b.fc2)
    lin(p.head)
    return [(t.name, t) for t in out]


def named_buffers(p: ModelParams) -> list[tuple[str, BatchNormState]]:
    return [(bn.gamma.name[: -len(".gamma")], bn) for bn in _bns(p)]


def tau_params(p: ModelParams) -> list[TauParams]:
    return [n.tau for n in _neurons(p)]


def parameter_kind(name: str) -> str:
    """Group label used by the gradient check and weight-decay policy."""
    if name.endswith(".tau"):
        return "tau"
    if ".bn." in name:
        return "bn"
    if ".taw." in name:
        return "taw"
    if name.startswith("head"):
        return "head"
    return "linear"


def parameter_count(p: ModelParams) -> int:
    return sum(t.data.size for _, t in named_parameters(p))


def parameter_count_closed_form(blocks, dim, tokens, in_features, num_classes, taw_size, mlp_ratio=4) -> int:
    """Hand-derived count of learnable entries.

    embed:  F*D + 2D (BN) + N*D (tau)
    block:  3*M*D^2 (TAW) + D^2 + 2D + 4*N*D      attention
            2*r*D^2 + 2*r*D + 2D + r*N*D + N*D     MLP
    head:   D*C + C
    """
    D, N, M, r = dim, tokens, taw_size, mlp_ratio
    embed = in_features * D + 2 * D + N * D
    attn = 3 * M * D * D + D * D + 2 * D + 4 * N * D
    mlp = 2 * r * D * D + 2 * r * D + 2 * D + r * N * D + N * D
    return embed + blocks * (attn + mlp) + D * num_classes + num_classes


# ---------------------------------------------------------------------------
# forward pass
# ---------------------------------------------------------------------------


def patchify(images: np.ndarray, patch_size: int) -> np.ndarray:
    """``(B, C, H, W)`` images to ``(B, N, C * p * p)`` row-major patch vectors."""
    B, C, H, W = images.shape
    p = patch_size
    if H % p or W % p:
        raise ModelConfigError(f"image {H}x{W} not divisible by patch size {p}")
    x = images.reshape(B, C, H // p, p, W // p, p)
    return x.transpose(0, 2, 4, 1, 3, 5).reshape(B, (H // p) * (W // p), C * p * p)


def prepare_input(x: np.ndarray, cfg: ModelConfig) -> np.ndarray:
    """Turn images or token sequences into ``(T, B, N, F)`` input currents.

    Images (``B, C, H, W``) are patchified and presented as constant current
    at every timestep.  Arrays that are already 4-D time-major sequences
    pass through unchanged.
    """
    x = np.asarray(x)
    if cfg.patch_size is not None and x.ndim == 4 and x.shape[1] == cfg.channels:
        tokens = patchify(x, cfg.patch_size)
        return np.broadcast_to(tokens, (cfg.timesteps,) + tokens.shape).copy()
    if cfg.patch_size is not None and x.ndim == 5:
        T, B = x.shape[:2]
        return patchify(x.reshape((T * B,) + x.shape[2:]), cfg.patch_size).reshape(T, B, cfg.tokens, -1)
    if x.ndim != 4:
        raise ModelConfigError(f"cannot interpret input of shape {x.shape}")
    return x


def patch_embed(images, params: ModelParams, cfg: ModelConfig, mode="train", update_stats=True) -> Tensor:
    currents = prepare_input(images, cfg).astype(params.embed.linear.w.data.dtype, copy=False)
    return params.embed(currents, mode, update_stats)


def mlp_forward(x, block: BlockParams, cfg: ModelConfig, mode="train", update_stats=True) -> Tensor:
    return block.fc2(block.fc1(x, mode, update_stats), mode, update_stats)


def encoder_block_forward(x, block: BlockParams, cfg: ModelConfig, index: int = 0, mode="train",
                          update_stats=True, maps=None) -> Tensor:
    """Attention and MLP with additive spike-count residuals."""
    y = add(x, mdssa_forward(x, block.attn, cfg.block_attention(index), mode, update_stats, maps))
    return add(y, mlp_forward(y, block, cfg, mode, update_stats))


def classifier_head(features, head: Linear) -> Tensor:
    """Mean over time and tokens, then one linear layer."""
    pooled = tmean(as_tensor(features), axis=(0, 2))
    return head(pooled)


def model_forward(images, params: ModelParams, cfg: ModelConfig, mode="train", update_stats=True,
                  trace: list | None = None, maps: list | None = None) -> Tensor:
    """Logits ``(B, num_classes)``.

    ``trace`` (optional list) collects every inter-layer activation in
    order, which the causality tests inspect.
    """
    x = patch_embed(images, params, cfg, mode, update_stats)
    if trace is not None:
        trace.append(x.data)
    for i, block in enumerate(params.blocks):
        x = encoder_block_forward(x, block, cfg, i, mode, update_stats, maps)
        if trace is not None:
            trace.append(x.data)
    return classifier_head(x, params.head)


class DISTA:
    """Parameters plus configuration, with a convenience forward."""

    def __init__(self, cfg: ModelConfig, seed: int = 0, dtype=np.float32):
        self.cfg = cfg
        self.dtype = np.dtype(dtype)
        self.params = init_params(cfg, seed, dtype)

    def __call__(self, x, mode="train", update_stats=True, **kw) -> Tensor:
        return model_forward(x, self.params, self.cfg, mode, update_stats, **kw)

    def named_parameters(self):
        return named_parameters(self.params)

    def named_buffers(self):
        return named_buffers(self.params)

    def tau_params(self):
        return tau_params(self.params)
