"""Full localization/detection network and its composite training objective."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .gnn import DEFAULT_K, DEFAULT_MARGIN, GGNNBlock, downsample_mask
from .layers import PPM, BayarConv, DetectionHead, FuseLevels, LocalizationHead, fpn_topdown
from .nn import Conv2d, Module
from .tensor import ShapeError, Tensor
from .vssd import BackboneConfig, VSSDBackbone


@dataclass
class LossWeights:
    alpha: float = 0.04
    beta: float = 0.16
    gamma: float = 0.001
    margin: float = DEFAULT_MARGIN

    def __post_init__(self):
        if self.alpha < 0 or self.beta < 0 or self.gamma < 0 or self.margin <= 0:
            raise ValueError("loss weights must be non-negative and the margin positive")


@dataclass
class ModelConfig:
    backbone: BackboneConfig = field(default_factory=BackboneConfig)
    fpn_dim: int = 64
    ppm_dim: int = 64
    ppm_scales: tuple[int, ...] = (1, 2, 3, 6)
    bayar_filters: int = 3
    bayar_kernel: int = 5
    k: int = DEFAULT_K
    margin: float = DEFAULT_MARGIN


@dataclass
class ModelOutput:
    mask_logits: Tensor  # (B, 1, H, W)
    det_logit: Tensor  # (B,)
    gmn_loss: Tensor | None = None


class IMLModel(Module):
    """BayarConv + twin VSSD backbones -> fusion -> PPM/detection and FPN/G-GNN/localization."""

    def __init__(self, cfg: ModelConfig | None = None, seed: int = 0, dtype=np.float32):
        cfg = cfg or ModelConfig()
        self.cfg = cfg
        rng = np.random.default_rng(seed)
        dims = cfg.backbone.stage_dims
        D = cfg.fpn_dim
        self.bayar = BayarConv(cfg.backbone.input_channels, cfg.bayar_filters, cfg.bayar_kernel, rng=rng, dtype=dtype)
        self.rgb_backbone = VSSDBackbone(cfg.backbone, rng=rng, dtype=dtype)
        noise_cfg = BackboneConfig(cfg.backbone.patch_size, dims, cfg.backbone.stage_depths,
                                   cfg.backbone.state_dim, cfg.bayar_filters)
        self.noise_backbone = VSSDBackbone(noise_cfg, rng=rng, dtype=dtype)
        self.fuse = FuseLevels(dims, rng=rng, dtype=dtype)
        self.ppm = PPM(dims[3], cfg.ppm_dim, cfg.ppm_scales, rng=rng, dtype=dtype)
        self.det_head = DetectionHead(cfg.ppm_dim, rng=rng, dtype=dtype)
        self.ppm_proj = Conv2d(cfg.ppm_dim, D, 1, rng=rng, dtype=dtype)
        self.laterals = [Conv2d(dims[i], D, 1, rng=rng, dtype=dtype) for i in range(3)]
        # ordered coarse to fine: levels 3, 2, 1
        self.ggnn = [GGNNBlock(D, cfg.k, cfg.margin, rng=rng, dtype=dtype) for _ in range(3)]
        self.loc_head = LocalizationHead(D, rng=rng, dtype=dtype)

    @property
    def dtype(self):
        return self.bayar.kernels.dtype

    def project_constraints(self) -> None:
        self.bayar.project()

    def __call__(self, image, gt_mask=None) -> ModelOutput:
        return model_forward(self, image, gt_mask)


def model_forward(model: IMLModel, image, gt_mask=None) -> ModelOutput:
    """Forward pass on a (B, 3, H, W) batch (or a single (3, H, W) image).

    When ``gt_mask`` ((B, H, W) binary) is given, guided masks are derived per
    level and the summed triplet loss is returned as ``gmn_loss``.
    """
    x = image if isinstance(image, Tensor) else Tensor(np.asarray(image, dtype=model.dtype))
    if x.ndim == 3:
        x = x.reshape((1,) + x.shape)
    B, _, H, W = x.shape
    if H % 32 or W % 32:
        raise ShapeError(f"input size {H}x{W} is not a multiple of 32")
    masks = None
    if gt_mask is not None:
        masks = np.asarray(gt_mask)
        if masks.ndim == 2:
            masks = masks[None]
        if masks.shape != (B, H, W):
            raise ShapeError(f"mask shape {masks.shape} does not match image batch {(B, H, W)}")

    noise = model.bayar(x)
    fused = model.fuse(model.rgb_backbone(x), model.noise_backbone(noise))
    top = model.ppm(fused[3])
    det_logit = model.det_head(top)

    laterals = [model.ppm_proj(top)] + [model.laterals[i](fused[i]) for i in (2, 1, 0)]
    level_losses = []

    def make_block(block: GGNNBlock):
        def run(s: Tensor) -> Tensor:
            guided = None if masks is None else downsample_mask(masks, s.shape[-2:])
            out, loss = block(s, guided)
            if loss is not None:
                level_losses.append(loss)
            return out
        return run

    pyramid = fpn_topdown(laterals, [make_block(b) for b in model.ggnn])
    mask_logits = model.loc_head(pyramid[-1])

    gmn = None
    if level_losses:
        gmn = level_losses[0]
        for term in level_losses[1:]:
            gmn = gmn + term
    return ModelOutput(mask_logits, det_logit, gmn)


def bce_loss(logit, label) -> Tensor:
    """Mean of max(z, 0) - z*y + log(1 + exp(-|z|))."""
    z = logit if isinstance(logit, Tensor) else Tensor(np.asarray(logit, dtype=np.float64))
    y = Tensor(np.broadcast_to(np.asarray(label, dtype=z.dtype), z.shape).copy())
    absz = z.relu() + (-z).relu()
    return (z.relu() - z * y + (1.0 + (-absz).exp()).log()).mean()


DICE_EPS = 1e-6


def dice_loss(prob, gt) -> Tensor:
    """Per-image 1 - (2*sum(p*g) + eps) / (sum(p) + sum(g) + eps), averaged over images."""
    p = prob if isinstance(prob, Tensor) else Tensor(np.asarray(prob, dtype=np.float64))
    g = np.asarray(gt)
    if p.shape[-2:] != g.shape[-2:]:
        raise ShapeError(f"dice_loss: prediction {p.shape} vs ground truth {g.shape}")
    p = p.reshape(-1, p.shape[-2] * p.shape[-1])
    g = g.reshape(p.shape[0], -1).astype(p.dtype)
    gt_t = Tensor(g)
    inter = (p * gt_t).sum(axis=-1)
    denom = p.sum(axis=-1) + Tensor(g.sum(axis=-1)) + DICE_EPS
    return (1.0 - (2.0 * inter + DICE_EPS) / denom).mean()


def combine_losses(clf, seg, gmn, w: LossWeights):
    return w.alpha * clf + w.beta * seg + w.gamma * gmn


def composite_loss(out: ModelOutput, gt_mask, label, w: LossWeights | None = None) -> Tensor:
    w = w or LossWeights()
    if out.gmn_loss is None:
        raise ValueError("composite_loss needs the guided-mask term; call the model with gt_mask")
    clf = bce_loss(out.det_logit, label)
    seg = dice_loss(out.mask_logits.sigmoid(), np.asarray(gt_mask).reshape(out.mask_logits.shape[0], *out.mask_logits.shape[-2:]))
    return combine_losses(clf, seg, out.gmn_loss, w)
