"""Network pieces that are neither backbone- nor graph-specific.

BayarConv noise extraction, per-level fusion convolutions, the pyramid pooling
module, the FPN top-down pathway, and the two output heads.
"""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .nn import Conv2d, Linear, Module, param
from .tensor import ShapeError, Tensor, avg_pool2d, concat, conv2d, gather_rows, global_avg_pool, upsample


def bayar_project(kernels: np.ndarray) -> np.ndarray:
    """Constrain every 2-D kernel slice: center -1, remaining taps summing to 1.

    ``kernels`` has shape (out, in, k, k) with odd k >= 3.  A slice whose
    off-center taps sum to zero gets them set uniformly to 1/(k*k - 1).
    Slices that already satisfy the constraint are returned untouched, which
    makes the projection exactly idempotent.
    """
    w = np.array(kernels, copy=True)
    k = w.shape[-1]
    if w.ndim != 4 or w.shape[-2] != k or k % 2 == 0 or k < 3:
        raise ShapeError(f"bayar kernels must be (out, in, k, k) with odd k >= 3, got {w.shape}")
    c = k // 2
    tol = 64 * np.finfo(w.dtype).eps
    flat = w.reshape(w.shape[0], w.shape[1], k * k)
    centre = c * k + c
    off = np.ones(k * k, dtype=bool)
    off[centre] = False
    for o in range(w.shape[0]):
        for i in range(w.shape[1]):
            row = flat[o, i]
            s = row[off].sum(dtype=np.float64)
            if row[centre] == -1 and abs(s - 1.0) <= tol:
                continue
            if s == 0:
                row[off] = 1.0 / (k * k - 1)
            else:
                row[off] = row[off] / s
            row[centre] = -1
    return flat.reshape(w.shape)


def bayar_conv(image: Tensor, kernels: Tensor) -> Tensor:
    """Zero-padded, size-preserving cross-correlation with a projected bank."""
    squeeze = image.ndim == 3
    x = image.reshape((1,) + image.shape) if squeeze else image
    if x.shape[1] != kernels.shape[1]:
        raise ShapeError(f"bayar_conv: image has {x.shape[1]} channels, bank expects {kernels.shape[1]}")
    out = conv2d(x, kernels, stride=1, padding=kernels.shape[-1] // 2)
    return out.reshape(out.shape[1:]) if squeeze else out


class BayarConv(Module):
    def __init__(self, channels_in=3, filters_out=3, k=5, rng=None, dtype=np.float32):
        rng = rng if rng is not None else np.random.default_rng(0)
        self.kernels = param(bayar_project(rng.uniform(0, 1, (filters_out, channels_in, k, k))), dtype)

    def project(self) -> None:
        self.kernels.data = bayar_project(self.kernels.data).astype(self.kernels.dtype)

    def __call__(self, image: Tensor) -> Tensor:
        return bayar_conv(image, self.kernels)


def nearest_resize(x: Tensor, size: tuple[int, int]) -> Tensor:
    """Nearest-neighbour resize of (B, C, h, w) to (B, C, H, W) via row gathering."""
    B, C, h, w = x.shape
    H, W = size
    if H % h == 0 and W % w == 0 and H // h == W // w:
        return upsample(x, H // h) if H != h else x
    rows = (np.arange(H) * h) // H
    cols = (np.arange(W) * w) // W
    index = (rows[:, None] * w + cols[None, :]).reshape(-1)
    t = x.reshape(B * C, h * w).transpose(1, 0)
    g = gather_rows(t, index)
    return g.transpose(1, 0).reshape(B, C, H, W)


class FuseLevels(Module):
    """One 3x3 conv per level over the channel-concatenated pair of features."""

    def __init__(self, dims: Sequence[int], rng=None, identity_init=False, dtype=np.float32):
        rng = rng if rng is not None else np.random.default_rng(0)
        self.convs = [Conv2d(2 * d, d, 3, rng=rng, dtype=dtype) for d in dims]
        if identity_init:
            for conv, d in zip(self.convs, dims):
                w = np.zeros_like(conv.weight.data)
                w[np.arange(d), np.arange(d), 1, 1] = 1
                conv.weight.data = w

    def __call__(self, rgb_feats: Sequence[Tensor], noise_feats: Sequence[Tensor]) -> list[Tensor]:
        if len(rgb_feats) != len(self.convs) or len(noise_feats) != len(self.convs):
            raise ShapeError(f"fuse_levels: expected {len(self.convs)} levels, got {len(rgb_feats)} and {len(noise_feats)}")
        out = []
        for conv, a, b in zip(self.convs, rgb_feats, noise_feats):
            if a.shape != b.shape:
                raise ShapeError(f"fuse_levels: level shapes differ {a.shape} vs {b.shape}")
            out.append(conv(concat([a, b], axis=1)))
        return out


class PPM(Module):
    """Pyramid pooling: adaptive average pools, 1x1 convs, upsample, concat, 3x3 conv (affine throughout)."""

    def __init__(self, cin, cout=64, scales=(1, 2, 3, 6), branch_channels=None, rng=None, dtype=np.float32):
        rng = rng if rng is not None else np.random.default_rng(0)
        bc = branch_channels or cout
        self.scales = tuple(scales)
        self.branches = [Conv2d(cin, bc, 1, rng=rng, dtype=dtype, gain=1.0) for _ in self.scales]
        self.bottleneck = Conv2d(cin + bc * len(self.scales), cout, 3, rng=rng, dtype=dtype, gain=1.0)

    def effective_scales(self, h, w) -> list[int]:
        return [min(s, h, w) for s in self.scales]

    def pooled(self, x: Tensor) -> list[Tensor]:
        h, w = x.shape[-2:]
        return [avg_pool2d(x, s) for s in self.effective_scales(h, w)]

    def __call__(self, x: Tensor) -> Tensor:
        h, w = x.shape[-2:]
        parts = [x]
        for branch, p in zip(self.branches, self.pooled(x)):
            parts.append(nearest_resize(branch(p), (h, w)))
        return self.bottleneck(concat(parts, axis=1))


def fpn_topdown(laterals: Sequence[Tensor], blocks: Sequence[Callable[[Tensor], Tensor]] | None = None) -> list[Tensor]:
    """Top-down pathway over laterals ordered coarse to fine.

    output_0 = lateral_0 and output_i = block_i(lateral_i + up2(output_{i-1})).
    ``blocks`` (one per finer level) defaults to identities.
    """
    if not laterals:
        raise ShapeError("fpn_topdown: no laterals")
    D = laterals[0].shape[-3]
    for prev, cur in zip(laterals, laterals[1:]):
        if cur.shape[-3] != D:
            raise ShapeError(f"fpn_topdown: channel counts differ ({cur.shape[-3]} vs {D})")
        if cur.shape[-2] != 2 * prev.shape[-2] or cur.shape[-1] != 2 * prev.shape[-1]:
            raise ShapeError(f"fpn_topdown: {cur.shape[-2:]} is not twice {prev.shape[-2:]}")
    outs = [laterals[0]]
    for i, lat in enumerate(laterals[1:]):
        s = lat + upsample(outs[-1], 2)
        if blocks is not None:
            s = blocks[i](s)
        outs.append(s)
    return outs


class DetectionHead(Module):
    """3x3 conv, global average pool, affine map to one logit per image."""

    def __init__(self, cin, rng=None, dtype=np.float32):
        rng = rng if rng is not None else np.random.default_rng(0)
        self.conv = Conv2d(cin, cin, 3, rng=rng, dtype=dtype, gain=1.0)
        self.fc = Linear(cin, 1, rng=rng, dtype=dtype)

    def classify(self, feat: Tensor) -> Tensor:
        return self.fc(global_avg_pool(feat)).reshape(feat.shape[0])

    def __call__(self, feat: Tensor) -> Tensor:
        return self.classify(self.conv(feat))


class LocalizationHead(Module):
    """Two nearest x2 upsample stages then a 1-channel 3x3 conv; outputs raw logits."""

    def __init__(self, cin, mid=(32, 16), rng=None, dtype=np.float32):
        rng = rng if rng is not None else np.random.default_rng(0)
        self.conv1 = Conv2d(cin, mid[0], 3, rng=rng, dtype=dtype, gain=np.sqrt(2.0))
        self.conv2 = Conv2d(mid[0], mid[1], 3, rng=rng, dtype=dtype, gain=np.sqrt(2.0))
        self.conv3 = Conv2d(mid[1], 1, 3, rng=rng, dtype=dtype)

    def __call__(self, feat: Tensor) -> Tensor:
        x = upsample(self.conv1(feat).relu(), 2)
        x = upsample(self.conv2(x).relu(), 2)
        return self.conv3(x)
