"""Vision-Mamba style feature extractor built on non-causal SSD token mixing.

With a scalar per-token transition, the forward and reverse scans over all
tokens collapse to one shared hidden state

    H = sum_j (1 / a_bar_j) * outer(b_bar_j, x_j)

and every token reads it out as y_t = c_t^T H.  Because H is a plain sum, the
result does not depend on the order in which tokens are visited.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .nn import Conv2d, LayerNorm, Linear, Module, param
from .tensor import ShapeError, Tape, Tensor, as_tensor, backward, softplus


def discretize(a, delta, b):
    """Zero-order-hold transition and the first-order input approximation.

    Returns ``(exp(delta * a), delta * b)``.  Works on floats, arrays or Tensors.
    """
    if isinstance(delta, Tensor) or isinstance(a, Tensor) or isinstance(b, Tensor):
        a, delta, b = (as_tensor(v) for v in (a, delta, b))
        return (delta * a).exp(), delta * b
    delta = np.asarray(delta, dtype=np.float64)
    if np.any(delta <= 0):
        raise ValueError("delta must be positive")
    return np.exp(delta * np.asarray(a, dtype=np.float64)), delta * np.asarray(b, dtype=np.float64)


@dataclass
class SsdTokenParams:
    a_bar: Tensor  # (..., L) positive
    b_bar: Tensor  # (..., L, N)
    c: Tensor  # (..., L, N)
    delta: Tensor | None = None

    @property
    def state_dim(self) -> int:
        return self.b_bar.shape[-1]


def nc_ssd_aggregate(tokens: Tensor, params: SsdTokenParams, inv_a_bar: Tensor | None = None) -> Tensor:
    """Shared-state token mixing (bias term omitted).

    tokens: (..., L, d).  ``inv_a_bar`` may be given directly (e.g. computed as
    exp(-delta * a)) to skip the division.
    """
    L = tokens.shape[-2]
    if params.a_bar.shape[-1] != L or params.b_bar.shape[-2] != L or params.c.shape[-2] != L:
        raise ShapeError(
            f"nc_ssd_aggregate: token count {L} vs params a_bar {params.a_bar.shape}, "
            f"b_bar {params.b_bar.shape}, c {params.c.shape}")
    if params.b_bar.shape[-1] != params.c.shape[-1]:
        raise ShapeError(f"nc_ssd_aggregate: b_bar/c state dims differ {params.b_bar.shape} vs {params.c.shape}")
    w = inv_a_bar if inv_a_bar is not None else 1.0 / params.a_bar
    wb = params.b_bar * w.reshape(w.shape + (1,))
    nd = wb.ndim
    axes = tuple(range(nd - 2)) + (nd - 1, nd - 2)
    state = wb.transpose(axes) @ tokens  # (..., N, d)
    return params.c @ state


def nc_ssd_naive(tokens: np.ndarray, a_bar: np.ndarray, b_bar: np.ndarray, c: np.ndarray) -> np.ndarray:
    """O(L^2) reference: forward scan up to t plus reverse scan from t, minus the doubled self term."""
    L, d = tokens.shape
    y = np.zeros((L, d))
    for t in range(L):
        h = np.zeros((b_bar.shape[1], d))
        for j in range(t + 1):
            h += np.outer(b_bar[j], tokens[j]) / a_bar[j]
        for j in range(L - 1, t - 1, -1):
            h += np.outer(b_bar[j], tokens[j]) / a_bar[j]
        h -= np.outer(b_bar[t], tokens[t]) / a_bar[t]
        y[t] = c[t] @ h
    return y


@dataclass
class BackboneConfig:
    patch_size: int = 4
    stage_dims: tuple[int, ...] = (16, 32, 64, 128)
    stage_depths: tuple[int, ...] = (1, 1, 2, 1)
    state_dim: int = 8
    input_channels: int = 3

    def __post_init__(self):
        self.stage_dims = tuple(int(v) for v in self.stage_dims)
        self.stage_depths = tuple(int(v) for v in self.stage_depths)
        if len(self.stage_dims) != 4 or len(self.stage_depths) != 4:
            raise ValueError("stage_dims and stage_depths need exactly 4 entries")
        if min(self.stage_dims + self.stage_depths) <= 0 or self.state_dim <= 0 or self.patch_size <= 0:
            raise ValueError("backbone config entries must be positive")


DELTA_MIN = 1e-4


class VSSDBlock(Module):
    def __init__(self, d, state_dim=8, mlp_ratio=4, rng=None, zero_init=False, dtype=np.float32):
        rng = rng if rng is not None else np.random.default_rng(0)
        self.norm1 = LayerNorm(d, dtype=dtype)
        self.value = Linear(d, d, rng=rng, dtype=dtype)
        self.gate = Linear(d, d, rng=rng, dtype=dtype)
        self.proj_b = Linear(d, state_dim, rng=rng, dtype=dtype)
        self.proj_c = Linear(d, state_dim, rng=rng, dtype=dtype)
        self.proj_dt = Linear(d, 1, rng=rng, dtype=dtype)
        self.a = param(np.array([-1.0]), dtype)
        self.mix_norm = LayerNorm(d, dtype=dtype)
        self.out = Linear(d, d, rng=rng, std=0.02, dtype=dtype)
        self.norm2 = LayerNorm(d, dtype=dtype)
        self.fc1 = Linear(d, mlp_ratio * d, rng=rng, dtype=dtype)
        self.fc2 = Linear(mlp_ratio * d, d, rng=rng, std=0.02, dtype=dtype)
        if zero_init:
            for lin in (self.out, self.fc2):
                lin.weight.data = np.zeros_like(lin.weight.data)

    def token_params(self, h: Tensor) -> tuple[SsdTokenParams, Tensor]:
        delta = softplus(self.proj_dt(h)) + DELTA_MIN  # (..., L, 1); the floor survives softplus underflow
        a_bar, b_bar = discretize(self.a, delta, self.proj_b(h))
        inv_a_bar = (-(delta * self.a)).exp()
        shape = delta.shape[:-1]
        return SsdTokenParams(a_bar.reshape(shape), b_bar, self.proj_c(h), delta.reshape(shape)), inv_a_bar.reshape(shape)

    def __call__(self, x: Tensor) -> Tensor:
        h = self.norm1(x)
        params, inv = self.token_params(h)
        y = nc_ssd_aggregate(self.value(h), params, inv_a_bar=inv)
        y = self.mix_norm(y) * self.gate(h).sigmoid()
        x = x + self.out(y)
        return x + self.fc2(self.fc1(self.norm2(x)).relu())


def to_tokens(x: Tensor) -> Tensor:
    B, C, H, W = x.shape
    return x.reshape(B, C, H * W).transpose(0, 2, 1)


def from_tokens(t: Tensor, H: int, W: int) -> Tensor:
    B, L, C = t.shape
    return t.transpose(0, 2, 1).reshape(B, C, H, W)


class VSSDBackbone(Module):
    def __init__(self, cfg: BackboneConfig | None = None, rng=None, zero_init=False, dtype=np.float32):
        cfg = cfg or BackboneConfig()
        rng = rng if rng is not None else np.random.default_rng(0)
        self.cfg = cfg
        dims = cfg.stage_dims
        self.patch_embed = Conv2d(cfg.input_channels, dims[0], cfg.patch_size, stride=cfg.patch_size, padding=0,
                                  rng=rng, dtype=dtype)
        self.stages = [[VSSDBlock(d, cfg.state_dim, rng=rng, zero_init=zero_init, dtype=dtype) for _ in range(n)]
                       for d, n in zip(dims, cfg.stage_depths)]
        self.downsample = [Conv2d(dims[i], dims[i + 1], 2, stride=2, padding=0, rng=rng, dtype=dtype)
                           for i in range(3)]

    def named_parameters(self, prefix=""):
        yield from self.patch_embed.named_parameters(prefix + "patch_embed.")
        for i, stage in enumerate(self.stages):
            for j, blk in enumerate(stage):
                yield from blk.named_parameters(f"{prefix}stages.{i}.{j}.")
        for i, ds in enumerate(self.downsample):
            yield from ds.named_parameters(f"{prefix}downsample.{i}.")

    def __call__(self, image: Tensor) -> list[Tensor]:
        return backbone_forward(self, image)


def backbone_forward(backbone: VSSDBackbone, image: Tensor) -> list[Tensor]:
    """Four feature levels at strides 4, 8, 16, 32 for a (B, 3, H, W) batch."""
    squeeze = image.ndim == 3
    x = image.reshape((1,) + image.shape) if squeeze else image
    H, W = x.shape[-2:]
    if H % 32 or W % 32:
        raise ShapeError(f"backbone input {H}x{W} is not a multiple of 32")
    x = backbone.patch_embed(x)
    levels = []
    for i, stage in enumerate(backbone.stages):
        if i:
            x = backbone.downsample[i - 1](x)
        h, w = x.shape[-2:]
        t = to_tokens(x)
        for blk in stage:
            t = blk(t)
        x = from_tokens(t, h, w)
        levels.append(x)
    if squeeze:
        levels = [lv.reshape(lv.shape[1:]) for lv in levels]
    return levels


def compute_erf(model_forward: Callable[[Tensor], Tensor], probe_images: Sequence[np.ndarray],
                dtype=np.float64) -> np.ndarray:
    """Mean absolute input gradient of the channel-summed central feature.

    ``model_forward`` maps a (1, C, H, W) Tensor to a (1, C', h, w) feature map.
    Returns an (H, W) map (gradients summed over input channels, averaged over probes).
    """
    if len(probe_images) == 0:
        raise ValueError("compute_erf needs at least one probe image")
    acc = None
    for img in probe_images:
        arr = np.asarray(img, dtype=dtype)
        x = Tensor(arr[None], requires_grad=True)
        with Tape() as tape:
            feat = model_forward(x)
            if feat.ndim == 3:
                feat = feat.reshape((1,) + feat.shape)
            h, w = feat.shape[-2:]
            sel = np.zeros(feat.shape, dtype=feat.dtype)
            sel[:, :, h // 2, w // 2] = 1
            grads = backward((feat * Tensor(sel)).sum(), accumulate=False)
            tape.clear()
        g = np.abs(grads.get(id(x), np.zeros_like(x.data))[0]).sum(axis=0)
        acc = g if acc is None else acc + g
    return acc / len(probe_images)
