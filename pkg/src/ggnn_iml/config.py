"""Flat ``key = value`` run configuration files.

Blank lines and ``#`` comments are ignored; keys may appear in any order;
unknown keys are an error.  Tuple-valued keys take comma-separated integers.

    epochs            training epochs                         (100)
    batch_size        images per optimizer step               (32)
    lr_init           initial learning rate                   (1e-4)
    plateau_factor    lr multiplier on a validation plateau   (0.9)
    plateau_patience  non-improving epochs before decay       (5)
    weight_decay      decoupled AdamW decay                   (0.01)
    seed              model init / shuffling seed             (0)
    alpha             detection BCE weight                    (0.04)
    beta              localization Dice weight                (0.16)
    gamma             triplet (graph) loss weight             (0.001)
    margin            triplet margin                          (10)
    k                 graph neighbours per node               (9)
    fpn_dim           FPN channel count                       (64)
    ppm_dim           PPM output channels                     (64)
    ppm_scales        pooling grid sizes                      (1,2,3,6)
    bayar_filters     BayarConv output filters                (3)
    bayar_kernel      BayarConv kernel size                   (5)
    patch_size        backbone patch embedding stride         (4)
    stage_dims        backbone channels per stage             (16,32,64,128)
    stage_depths      VSSD blocks per stage                   (1,1,2,1)
    state_dim         SSM state size N                        (8)
    data              training dataset directory              (unset)
    val               validation dataset directory            (unset)
"""

from __future__ import annotations

from dataclasses import dataclass, field

from .model import LossWeights, ModelConfig
from .train import TrainConfig
from .vssd import BackboneConfig


class ConfigError(ValueError):
    pass


_TRAIN = {"epochs": int, "batch_size": int, "lr_init": float, "plateau_factor": float,
          "plateau_patience": int, "weight_decay": float, "seed": int}
_LOSS = {"alpha": float, "beta": float, "gamma": float, "margin": float}
_MODEL = {"k": int, "fpn_dim": int, "ppm_dim": int, "ppm_scales": "tuple", "bayar_filters": int,
          "bayar_kernel": int}
_BACKBONE = {"patch_size": int, "stage_dims": "tuple", "stage_depths": "tuple", "state_dim": int}
_PATHS = {"data": str, "val": str}
KEYS = {**_TRAIN, **_LOSS, **_MODEL, **_BACKBONE, **_PATHS}


@dataclass
class RunConfig:
    train: TrainConfig = field(default_factory=TrainConfig)
    data: str | None = None
    val: str | None = None


def _convert(key, raw: str):
    kind = KEYS[key]
    try:
        if kind == "tuple":
            return tuple(int(v) for v in raw.split(",") if v.strip())
        return kind(raw)
    except ValueError:
        raise ConfigError(f"bad value for {key!r}: {raw!r}") from None


def parse_pairs(text: str) -> dict:
    pairs = {}
    for n, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {n}: expected key = value")
        key, raw = (s.strip() for s in line.split("=", 1))
        if key not in KEYS:
            raise ConfigError(f"line {n}: unknown key {key!r}")
        pairs[key] = _convert(key, raw)
    return pairs


def apply_pairs(run: RunConfig, pairs: dict) -> RunConfig:
    t = run.train
    bb = t.model.backbone
    bb_kw = {k: getattr(bb, k) for k in ("patch_size", "stage_dims", "stage_depths", "state_dim", "input_channels")}
    for key, val in pairs.items():
        if key not in KEYS:
            raise ConfigError(f"unknown key {key!r}")
        if key in _TRAIN:
            setattr(t, key, val)
        elif key in _LOSS:
            setattr(t.loss, key, val)
        elif key in _MODEL:
            setattr(t.model, key, val)
        elif key in _BACKBONE:
            bb_kw[key] = val
        else:
            setattr(run, key, val)
    t.model.backbone = BackboneConfig(**bb_kw)
    t.model.margin = t.loss.margin
    LossWeights(t.loss.alpha, t.loss.beta, t.loss.gamma, t.loss.margin)  # validates
    return run


def parse_run_config(text: str) -> RunConfig:
    return apply_pairs(RunConfig(TrainConfig(loss=LossWeights(), model=ModelConfig())), parse_pairs(text))


def parse_config(text: str) -> TrainConfig:
    return parse_run_config(text).train


def dump_config(cfg: TrainConfig) -> str:
    bb = cfg.model.backbone
    vals = {
        "epochs": cfg.epochs, "batch_size": cfg.batch_size, "lr_init": cfg.lr_init,
        "plateau_factor": cfg.plateau_factor, "plateau_patience": cfg.plateau_patience,
        "weight_decay": cfg.weight_decay, "seed": cfg.seed,
        "alpha": cfg.loss.alpha, "beta": cfg.loss.beta, "gamma": cfg.loss.gamma, "margin": cfg.loss.margin,
        "k": cfg.model.k, "fpn_dim": cfg.model.fpn_dim, "ppm_dim": cfg.model.ppm_dim,
        "ppm_scales": cfg.model.ppm_scales, "bayar_filters": cfg.model.bayar_filters,
        "bayar_kernel": cfg.model.bayar_kernel,
        "patch_size": bb.patch_size, "stage_dims": bb.stage_dims, "stage_depths": bb.stage_depths,
        "state_dim": bb.state_dim,
    }
    lines = []
    for k, v in vals.items():
        if isinstance(v, tuple):
            v = ",".join(str(i) for i in v)
        elif isinstance(v, float):
            v = repr(v)
        lines.append(f"{k} = {v}")
    return "\n".join(lines) + "\n"
