"""Hierarchical and isotropic FCViT models, presets and cost accounting."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, fields, replace
from pathlib import Path
from typing import Iterator

import numpy as np

from .block import TRUNC_STD, BlockParams, ConvParams, Init, LayerNormParams, block_forward, channel_norm
from .tensor import ConvSpec, ShapeError, Tensor, global_avg_pool, matmul


@dataclass
class StageConfig:
    dim: int
    depth: int
    mlp_ratio: int = 4
    patch_kernel: int = 3
    patch_stride: int = 2
    mixer_kernel: int = 11
    groups: int = 8
    bottleneck_r: int = 8

    def validate(self) -> None:
        if min(self.dim, self.depth, self.mlp_ratio, self.patch_kernel, self.patch_stride,
               self.mixer_kernel, self.groups, self.bottleneck_r) < 1:
            raise ValueError(f"non-positive field in {self}")
        if self.patch_kernel < self.patch_stride:
            raise ValueError("patch kernel must be at least the stride")
        if self.dim % self.groups:
            raise ValueError(f"groups {self.groups} must divide dim {self.dim}")
        if self.mixer_kernel % 2 == 0:
            raise ValueError("mixer kernel must be odd")


@dataclass
class ModelConfig:
    stages: list[StageConfig]
    num_classes: int = 1000
    isotropic: bool = False
    iso_patch: int = 16
    # ablation knobs
    mixer_repeats: int = 2
    use_gc: bool = True
    dynamic_gc: bool = True
    plain_gc: bool = False
    drop_path: float = 0.0  # accepted, never applied

    def validate(self) -> None:
        if not self.stages:
            raise ValueError("at least one stage required")
        if self.isotropic and len(self.stages) != 1:
            raise ValueError("isotropic models have exactly one stage")
        if self.num_classes < 1 or self.mixer_repeats < 1:
            raise ValueError("num_classes and mixer_repeats must be positive")
        for s in self.stages:
            s.validate()

    @property
    def total_stride(self) -> int:
        if self.isotropic:
            return self.iso_patch
        return int(np.prod([s.patch_stride for s in self.stages]))

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> ModelConfig:
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ValueError(f"unknown config fields: {sorted(unknown)}")
        data = dict(data)
        data["stages"] = [StageConfig(**s) for s in data["stages"]]
        cfg = cls(**data)
        cfg.validate()
        return cfg

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)

    @classmethod
    def from_json(cls, path: str | Path) -> ModelConfig:
        return cls.from_dict(json.loads(Path(path).read_text()))


def _hierarchical(dims, depths, mlps, **stage_kw) -> ModelConfig:
    stages = []
    for i, (d, n, m) in enumerate(zip(dims, depths, mlps)):
        k, s = (7, 4) if i == 0 else (3, 2)
        stages.append(StageConfig(d, n, m, k, s, **stage_kw))
    return ModelConfig(stages)


def _isotropic(dim, depth, mlp_ratio=4) -> ModelConfig:
    return ModelConfig([StageConfig(dim, depth, mlp_ratio, 16, 16)], isotropic=True, iso_patch=16)


PRESETS = {
    "tiny": lambda: _hierarchical([32, 64, 160, 320], [3, 3, 5, 2], [8, 8, 4, 4]),
    "b12": lambda: _hierarchical([64, 128, 320, 512], [2, 2, 6, 2], [8, 8, 4, 4]),
    "b24": lambda: _hierarchical([64, 128, 320, 512], [4, 4, 12, 4], [8, 8, 4, 4]),
    "b48": lambda: _hierarchical([64, 128, 320, 512], [8, 8, 24, 8], [8, 8, 4, 4]),
    "iso-256-12": lambda: _isotropic(256, 12),
    "iso-384-16": lambda: _isotropic(384, 16),
    # test/toy scale only
    "micro": lambda: replace(_hierarchical([8, 16, 32, 64], [1, 1, 2, 1], [8, 8, 4, 4],
                                           mixer_kernel=3, groups=4, bottleneck_r=4),
                             num_classes=4),
}


def preset(name: str, **overrides) -> ModelConfig:
    try:
        cfg = PRESETS[name]()
    except KeyError:
        raise ValueError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}") from None
    cfg = replace(cfg, **overrides)
    cfg.validate()
    return cfg


# -- parameters -----------------------------------------------------------

def patch_embed_padding(size: int, kernel: int, stride: int) -> tuple[int, int]:
    """Leading/trailing zero padding giving exactly ``size // stride`` outputs.

    The leading pad is ``(kernel - stride + 1) // 2``; the trailing pad is
    whatever remains of ``kernel - stride``.
    """
    if size % stride:
        raise ShapeError(f"input extent {size} not divisible by stride {stride}")
    before = (kernel - stride + 1) // 2
    return before, kernel - stride - before


@dataclass
class PatchEmbedParams:
    conv: ConvParams
    norm: LayerNormParams

    @property
    def kernel(self) -> int:
        return self.conv.weight.shape[-1]

    @property
    def stride(self) -> int:
        return self.conv.stride

    def named_tensors(self, prefix: str) -> Iterator[tuple[str, Tensor]]:
        yield from self.conv.named_tensors(f"{prefix}.conv")
        yield from self.norm.named_tensors(f"{prefix}.norm")


@dataclass
class ModelParams:
    """All model weights; ``named_tensors`` is the stable registry.

    Names follow ``stages.{i}.embed.conv.weight``,
    ``stages.{i}.blocks.{j}.token.reps.{r}.context.w_s1``,
    ``stages.{i}.blocks.{j}.channel.fc1.bias``, ``norm.weight``,
    ``head.weight`` and so on.
    """

    config: ModelConfig
    embeds: list[PatchEmbedParams]
    stages: list[list[BlockParams]]
    norm: LayerNormParams
    head_weight: Tensor  # (num_classes, d_last)
    head_bias: Tensor

    def named_tensors(self) -> Iterator[tuple[str, Tensor]]:
        for i, (embed, blocks) in enumerate(zip(self.embeds, self.stages)):
            yield from embed.named_tensors(f"stages.{i}.embed")
            for j, blk in enumerate(blocks):
                yield from blk.named_tensors(f"stages.{i}.blocks.{j}")
        yield from self.norm.named_tensors("norm")
        yield "head.weight", self.head_weight
        yield "head.bias", self.head_bias

    def state_dict(self) -> dict[str, Tensor]:
        state = {}
        for name, t in self.named_tensors():
            if name in state:
                raise RuntimeError(f"duplicate registry name {name}")
            state[name] = t
        return state

    def parameters(self) -> list[Tensor]:
        return [t for _, t in self.named_tensors()]

    @property
    def blocks(self) -> list[BlockParams]:
        return [b for stage in self.stages for b in stage]


def build_model(cfg: ModelConfig, seed: int = 0, dtype=np.float32, init: str = "trunc_normal",
                init_std: float = TRUNC_STD) -> ModelParams:
    """Deterministically initialise every weight of ``cfg`` from ``seed``.

    ``init_std`` widens the truncated normal; tests use it to get gradients
    well away from zero.
    """
    cfg.validate()
    factory = Init(np.random.default_rng(seed), dtype, init, init_std)
    c_in = 3
    embeds, stages = [], []
    for s in cfg.stages:
        conv = ConvParams.create(c_in, s.dim, s.patch_kernel, factory,
                                 stride=s.patch_stride, padding=0)
        embeds.append(PatchEmbedParams(conv, LayerNormParams.create(s.dim, factory)))
        stages.append([
            BlockParams.create(s.dim, s.mlp_ratio, factory, kernel=s.mixer_kernel, groups=s.groups,
                               r=s.bottleneck_r, repeats=cfg.mixer_repeats, use_gc=cfg.use_gc,
                               dynamic=cfg.dynamic_gc, plain_gc=cfg.plain_gc)
            for _ in range(s.depth)])
        c_in = s.dim
    return ModelParams(cfg, embeds, stages, LayerNormParams.create(c_in, factory),
                       factory.weight(cfg.num_classes, c_in), factory.zeros(cfg.num_classes))


# -- forward --------------------------------------------------------------

def overlapped_patch_embed(x: Tensor, p: PatchEmbedParams) -> Tensor:
    """Strided conv with ``kernel >= stride`` followed by a channel LayerNorm."""
    _, _, h, w = x.shape
    pad = (patch_embed_padding(h, p.kernel, p.stride), patch_embed_padding(w, p.kernel, p.stride))
    y = ConvParams(p.conv.weight, p.conv.bias, p.stride, pad)(x)
    return channel_norm(y, p.norm)


def forward_features(params: ModelParams, x: Tensor, trace: list | None = None) -> list[Tensor]:
    """Run the stages, returning each stage's output map.

    With ``trace`` set, the per-repetition :class:`~fcvit.block.GlobalContext`
    objects of every block are appended as ``(block_index, [contexts])``.
    """
    if x.ndim != 4 or x.shape[1] != 3:
        raise ShapeError(f"expected (N, 3, H, W) input, got {x.shape}")
    if x.shape[2] % params.config.total_stride or x.shape[3] % params.config.total_stride:
        raise ShapeError(f"resolution {x.shape[2:]} not divisible by {params.config.total_stride}")
    outs = []
    idx = 0
    for embed, blocks in zip(params.embeds, params.stages):
        x = overlapped_patch_embed(x, embed)
        for blk in blocks:
            ctx = [] if trace is not None else None
            x = block_forward(x, blk, trace=ctx)
            if trace is not None:
                trace.append((idx, ctx))
            idx += 1
        outs.append(x)
    return outs


def model_forward(params: ModelParams, x: Tensor) -> Tensor:
    """Logits (N, num_classes): stages -> LN -> global average pool -> linear."""
    feat = forward_features(params, x)[-1]
    pooled = global_avg_pool(channel_norm(feat, params.norm))
    return matmul(pooled, params.head_weight.T) + params.head_bias


# -- accounting -----------------------------------------------------------

def count_params(params) -> int:
    """Total element count of a model's registry.

    Accepts :class:`ModelParams`, a :class:`ModelConfig` (built with zero
    weights, which costs no sampling) or any iterable of tensors.
    """
    if isinstance(params, ModelConfig):
        params = build_model(params, init="zeros")
    tensors = params.parameters() if isinstance(params, ModelParams) else params
    return sum(t.size for t in tensors)


def count_flops(cfg: ModelConfig, resolution: int = 224) -> int:
    """Analytic multiply-accumulate count for one image (1 MAC reported as 1 FLOP).

    Counts convolutions (``H' W' C_out k^2 C_in / g``), linear maps
    (``in * out``), the token-global similarity and the ``gc'`` modulation
    (``n * d`` each per repetition). Norms, activations and residual adds
    are free.
    """
    cfg.validate()
    total = 0
    size = resolution
    c_in = 3
    for s in cfg.stages:
        before, after = patch_embed_padding(size, s.patch_kernel, s.patch_stride)
        embed = ConvSpec(c_in, s.dim, s.patch_kernel, s.patch_stride, ((before, after),) * 2)
        size, _ = embed.output_size(size, size)
        total += embed.macs(size, size)
        total += s.depth * block_macs(s, cfg, size * size)
        c_in = s.dim
    return total + c_in * cfg.num_classes


def block_macs(s: StageConfig, cfg: ModelConfig, tokens: int) -> int:
    d = s.dim
    per_rep = tokens * d * s.mixer_kernel ** 2 + tokens * d * d
    if cfg.use_gc:
        if cfg.plain_gc:
            per_rep += d * d
        else:
            per_rep += 3 * d * max(d // s.bottleneck_r, 1)
        per_rep += tokens * d  # modulation
        if cfg.dynamic_gc:
            per_rep += tokens * d  # similarity
    hidden = d * s.mlp_ratio
    ffn = 2 * tokens * d * hidden + tokens * hidden * 9
    return cfg.mixer_repeats * per_rep + ffn
