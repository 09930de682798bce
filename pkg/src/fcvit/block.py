"""The FCViT block: global-context token mixer plus a depthwise-augmented FFN.

One token-mixer repetition on an NCHW feature map ``x`` is::

    ln   = LN(x)                                   (over channels)
    gc   = W_r maxout(W_s1 mean(ln), W_s2 mean(ln)) (competitive bottleneck)
    sim  = alpha * (S - mu_S) / (sigma_S + eps) + beta, per channel group,
           S[i] = <ln_group[:, i], mean(ln)_group>
    gc'  = sim[group(c)] * gc[c]
    x    = x + pointwise(gelu(depthwise_k(ln + gc')))

and the mixer runs this twice with independent weights. The channel mixer is
``x + pw2(gelu(dw3(gelu(pw1(LN(x))))))``.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Iterator

import numpy as np

from .tensor import (
    ShapeError,
    Tensor,
    conv2d,
    gelu,
    global_avg_pool,
    layer_norm,
    matmul,
    maxout,
)

Activation = Callable[[Tensor], Tensor]

TRUNC_STD = 0.02


def trunc_normal(rng: np.random.Generator, shape, std: float = TRUNC_STD, dtype=np.float32) -> np.ndarray:
    """Normal(0, std) samples truncated to +/- 2 std by redrawing."""
    out = rng.standard_normal(shape)
    bad = np.abs(out) > 2.0
    while bad.any():
        out[bad] = rng.standard_normal(int(bad.sum()))
        bad = np.abs(out) > 2.0
    return (out * std).astype(dtype)


class Init:
    """Parameter factory shared by the block and model builders.

    ``mode="zeros"`` produces the all-zero weights used by identity checks;
    norms still start at gamma=1, beta=0 and similarity at alpha=1, beta=0.
    """

    def __init__(self, rng: np.random.Generator | None = None, dtype=np.float32,
                 mode: str = "trunc_normal", std: float = TRUNC_STD):
        if mode not in ("trunc_normal", "zeros"):
            raise ValueError(f"unknown init mode {mode!r}")
        self.rng = rng if rng is not None else np.random.default_rng(0)
        self.dtype = np.dtype(dtype)
        self.mode = mode
        self.std = std

    def weight(self, *shape: int) -> Tensor:
        if self.mode == "zeros":
            return Tensor(np.zeros(shape, dtype=self.dtype))
        return Tensor(trunc_normal(self.rng, shape, self.std, self.dtype))

    def zeros(self, *shape: int) -> Tensor:
        return Tensor(np.zeros(shape, dtype=self.dtype))

    def full(self, value: float, *shape: int) -> Tensor:
        return Tensor(np.full(shape, value, dtype=self.dtype))


# -- parameter containers -------------------------------------------------

@dataclass
class LayerNormParams:
    weight: Tensor
    bias: Tensor

    @classmethod
    def create(cls, dim: int, init: Init) -> LayerNormParams:
        return cls(init.full(1.0, dim), init.zeros(dim))

    def named_tensors(self, prefix: str) -> Iterator[tuple[str, Tensor]]:
        yield f"{prefix}.weight", self.weight
        yield f"{prefix}.bias", self.bias


@dataclass
class ConvParams:
    weight: Tensor
    bias: Tensor | None
    stride: int = 1
    padding: int | tuple = 0
    groups: int = 1

    @classmethod
    def create(cls, c_in: int, c_out: int, kernel: int, init: Init, *, stride: int = 1,
               padding=None, groups: int = 1, bias: bool = True) -> ConvParams:
        if padding is None:
            padding = kernel // 2
        return cls(init.weight(c_out, c_in // groups, kernel, kernel),
                   init.zeros(c_out) if bias else None, stride, padding, groups)

    def __call__(self, x: Tensor) -> Tensor:
        return conv2d(x, self.weight, self.bias, self.stride, self.padding, self.groups)

    def named_tensors(self, prefix: str) -> Iterator[tuple[str, Tensor]]:
        yield f"{prefix}.weight", self.weight
        if self.bias is not None:
            yield f"{prefix}.bias", self.bias


@dataclass
class BottleneckParams:
    """Competitive bottleneck: ``gc = w_r @ maxout(w_s1 @ m, w_s2 @ m)``."""

    w_s1: Tensor  # (d/r, d)
    w_s2: Tensor  # (d/r, d)
    w_r: Tensor   # (d, d/r)
    r: int = 8

    @classmethod
    def create(cls, dim: int, init: Init, r: int = 8) -> BottleneckParams:
        hidden = max(dim // r, 1)
        if dim >= r and dim % r:
            raise ShapeError(f"bottleneck ratio {r} does not divide width {dim}")
        return cls(init.weight(hidden, dim), init.weight(hidden, dim), init.weight(dim, hidden), r)

    @property
    def dim(self) -> int:
        return self.w_s1.shape[1]

    def named_tensors(self, prefix: str) -> Iterator[tuple[str, Tensor]]:
        yield f"{prefix}.w_s1", self.w_s1
        yield f"{prefix}.w_s2", self.w_s2
        yield f"{prefix}.w_r", self.w_r


@dataclass
class PlainContextParams:
    """Single ``d x d`` value map, ``gc = w_v @ mean(x)`` (no bottleneck)."""

    w_v: Tensor

    @classmethod
    def create(cls, dim: int, init: Init) -> PlainContextParams:
        return cls(init.weight(dim, dim))

    @property
    def dim(self) -> int:
        return self.w_v.shape[1]

    def named_tensors(self, prefix: str) -> Iterator[tuple[str, Tensor]]:
        yield f"{prefix}.w_v", self.w_v


@dataclass
class SimilarityParams:
    alpha: Tensor  # (g,)
    beta: Tensor   # (g,)
    groups: int = 8
    eps: float = 1e-5

    def __post_init__(self):
        if self.eps <= 0:
            raise ValueError("similarity eps must be positive")
        if self.alpha.shape != (self.groups,) or self.beta.shape != (self.groups,):
            raise ShapeError("alpha/beta must hold one scalar per group")

    @classmethod
    def create(cls, groups: int, init: Init, eps: float = 1e-5) -> SimilarityParams:
        return cls(init.full(1.0, groups), init.zeros(groups), groups, eps)

    def named_tensors(self, prefix: str) -> Iterator[tuple[str, Tensor]]:
        yield f"{prefix}.alpha", self.alpha
        yield f"{prefix}.beta", self.beta


@dataclass
class MixerRepetition:
    norm: LayerNormParams
    context: BottleneckParams | PlainContextParams | None
    similarity: SimilarityParams | None
    dw: ConvParams
    pw: ConvParams

    def named_tensors(self, prefix: str) -> Iterator[tuple[str, Tensor]]:
        yield from self.norm.named_tensors(f"{prefix}.norm")
        if self.context is not None:
            yield from self.context.named_tensors(f"{prefix}.context")
        if self.similarity is not None:
            yield from self.similarity.named_tensors(f"{prefix}.similarity")
        yield from self.dw.named_tensors(f"{prefix}.dw")
        yield from self.pw.named_tensors(f"{prefix}.pw")


@dataclass
class TokenMixerParams:
    """Token-mixer weights.

    ``use_gc=False`` drops the global-context path, ``dynamic=False`` adds
    ``gc`` uniformly to every position (similarity frozen at one).
    """

    reps: list[MixerRepetition]
    use_gc: bool = True
    dynamic: bool = True

    @classmethod
    def create(cls, dim: int, init: Init, *, kernel: int = 11, groups: int = 8, r: int = 8,
               repeats: int = 2, use_gc: bool = True, dynamic: bool = True,
               plain_gc: bool = False) -> TokenMixerParams:
        if kernel % 2 == 0:
            raise ShapeError("token-mixer depthwise kernel must be odd")
        if dim % groups:
            raise ShapeError(f"{groups} groups do not divide width {dim}")
        reps = []
        for _ in range(repeats):
            context = sim = None
            if use_gc:
                context = (PlainContextParams.create(dim, init) if plain_gc
                           else BottleneckParams.create(dim, init, r))
                if dynamic:
                    sim = SimilarityParams.create(groups, init)
            reps.append(MixerRepetition(
                LayerNormParams.create(dim, init), context, sim,
                ConvParams.create(dim, dim, kernel, init, groups=dim),
                ConvParams.create(dim, dim, 1, init)))
        return cls(reps, use_gc, dynamic)

    def named_tensors(self, prefix: str) -> Iterator[tuple[str, Tensor]]:
        for i, rep in enumerate(self.reps):
            yield from rep.named_tensors(f"{prefix}.reps.{i}")


@dataclass
class ChannelMixerParams:
    norm: LayerNormParams
    fc1: ConvParams
    dw: ConvParams
    fc2: ConvParams

    @classmethod
    def create(cls, dim: int, mlp_ratio: int, init: Init) -> ChannelMixerParams:
        hidden = dim * mlp_ratio
        return cls(LayerNormParams.create(dim, init),
                   ConvParams.create(dim, hidden, 1, init),
                   ConvParams.create(hidden, hidden, 3, init, groups=hidden),
                   ConvParams.create(hidden, dim, 1, init))

    def named_tensors(self, prefix: str) -> Iterator[tuple[str, Tensor]]:
        yield from self.norm.named_tensors(f"{prefix}.norm")
        yield from self.fc1.named_tensors(f"{prefix}.fc1")
        yield from self.dw.named_tensors(f"{prefix}.dw")
        yield from self.fc2.named_tensors(f"{prefix}.fc2")


@dataclass
class BlockParams:
    token: TokenMixerParams
    channel: ChannelMixerParams

    @classmethod
    def create(cls, dim: int, mlp_ratio: int, init: Init, **token_kw) -> BlockParams:
        return cls(TokenMixerParams.create(dim, init, **token_kw),
                   ChannelMixerParams.create(dim, mlp_ratio, init))

    def named_tensors(self, prefix: str = "block") -> Iterator[tuple[str, Tensor]]:
        yield from self.token.named_tensors(f"{prefix}.token")
        yield from self.channel.named_tensors(f"{prefix}.channel")


@dataclass
class GlobalContext:
    """``gc`` (N, d), the normalised similarity (N, g, H, W) and ``gc'`` (N, d, H, W).

    ``features`` is the (normalised) map the context was computed from.
    """

    gc: Tensor
    sim: Tensor
    gc_dyn: Tensor
    features: Tensor | None = None


# -- operations -----------------------------------------------------------

def channel_norm(x: Tensor, p: LayerNormParams) -> Tensor:
    return layer_norm(x, p.weight, p.bias, axis=1)


def compute_global_context(x: Tensor, p: BottleneckParams | PlainContextParams,
                           x_mean: Tensor | None = None) -> Tensor:
    """Global context vector of an NCHW map, shape (N, d)."""
    if x.ndim != 4 or x.shape[1] != p.dim:
        raise ShapeError(f"input {x.shape} does not match context width {p.dim}")
    m = global_avg_pool(x) if x_mean is None else x_mean
    if isinstance(p, PlainContextParams):
        return matmul(m, p.w_v.T)
    squeezed = maxout(matmul(m, p.w_s1.T), matmul(m, p.w_s2.T))
    return matmul(squeezed, p.w_r.T)


def raw_similarity(x: Tensor, groups: int, x_mean: Tensor | None = None) -> Tensor:
    """Per-group inner product of every token with the mean token, (N, g, H, W)."""
    n, d, h, w = x.shape
    if d % groups:
        raise ShapeError(f"{groups} groups do not divide {d} channels")
    m = global_avg_pool(x) if x_mean is None else x_mean
    cg = d // groups
    return (x.reshape(n, groups, cg, h, w) * m.reshape(n, groups, cg, 1, 1)).sum(axis=2)


def token_global_similarity(x: Tensor, sp: SimilarityParams, x_mean: Tensor | None = None) -> Tensor:
    """Normalised per-group similarity of every token with the mean token, (N, g, H, W).

    Each group's raw map is standardised over space, then scaled by ``alpha``
    and shifted by ``beta``. ``eps`` is added to the standard deviation.
    """
    g = sp.groups
    raw = raw_similarity(x, g, x_mean)
    dev = raw - raw.mean(axis=(2, 3), keepdims=True)
    sigma = (dev * dev).mean(axis=(2, 3), keepdims=True).sqrt()
    normed = dev / (sigma + sp.eps)
    return normed * sp.alpha.reshape(1, g, 1, 1) + sp.beta.reshape(1, g, 1, 1)


def modulate(gc: Tensor, sim: Tensor) -> Tensor:
    """``gc'[n, c, i, j] = sim[n, group(c), i, j] * gc[n, c]``."""
    n, g, h, w = sim.shape
    d = gc.shape[1]
    out = sim.reshape(n, g, 1, h, w) * gc.reshape(n, g, d // g, 1, 1)
    return out.reshape(n, d, h, w)


def dynamic_global_context(x: Tensor, rep: MixerRepetition, dynamic: bool = True,
                           sim_override: Tensor | None = None) -> GlobalContext:
    m = global_avg_pool(x)
    gc = compute_global_context(x, rep.context, m)
    n, d, h, w = x.shape
    if sim_override is not None:
        sim = sim_override
    elif dynamic:
        sim = token_global_similarity(x, rep.similarity, m)
    else:
        sim = Tensor(np.ones((n, 1, h, w), dtype=x.dtype))
    return GlobalContext(gc, sim, modulate(gc, sim), x)


def mixer_conv(z: Tensor, rep: MixerRepetition, act: Activation = gelu) -> Tensor:
    """The convolutional part of one repetition, ``pw(act(dw_k(z)))``."""
    return rep.pw(act(rep.dw(z)))


def dynamic_token_mixer(x: Tensor, p: TokenMixerParams, act: Activation = gelu,
                        sim_override: Tensor | None = None,
                        trace: list | None = None) -> Tensor:
    """Apply every token-mixer repetition with a residual connection.

    ``sim_override`` replaces the learned similarity (e.g. all ones for the
    static-fusion regime). When ``trace`` is a list, each repetition appends
    its :class:`GlobalContext`.
    """
    for rep in p.reps:
        ln = channel_norm(x, rep.norm)
        z = ln
        if p.use_gc:
            ctx = dynamic_global_context(ln, rep, p.dynamic, sim_override)
            if trace is not None:
                trace.append(ctx)
            z = ln + ctx.gc_dyn
        x = x + mixer_conv(z, rep, act)
    return x


def channel_mixer(x: Tensor, p: ChannelMixerParams, act: Activation = gelu) -> Tensor:
    h = act(p.fc1(channel_norm(x, p.norm)))
    return x + p.fc2(act(p.dw(h)))


def block_forward(x: Tensor, block: BlockParams, act: Activation = gelu,
                  sim_override: Tensor | None = None, trace: list | None = None) -> Tensor:
    x = dynamic_token_mixer(x, block.token, act, sim_override, trace)
    return channel_mixer(x, block.channel, act)
