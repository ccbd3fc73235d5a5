"""Guided graph network for image manipulation detection and localization, on a numpy autodiff engine.

Submodules load on first attribute access so that ``python -m ggnn_iml --deterministic``
can pin BLAS threads before numpy is imported.
"""

import importlib

__version__ = "0.1.0"

_SUBMODULES = ("tensor", "nn", "layers", "vssd", "gnn", "model", "data", "metrics", "train", "config", "cli")

_EXPORTS = {
    "Tensor": "tensor", "Tape": "tensor", "backward": "tensor", "grad_check": "tensor", "no_grad": "tensor",
    "BayarConv": "layers", "PPM": "layers", "fpn_topdown": "layers",
    "BackboneConfig": "vssd", "VSSDBackbone": "vssd", "nc_ssd_aggregate": "vssd", "compute_erf": "vssd",
    "GGNNBlock": "gnn", "build_knn_graph": "gnn", "triplet_loss": "gnn",
    "IMLModel": "model", "ModelConfig": "model", "LossWeights": "model", "model_forward": "model",
    "composite_loss": "model",
    "make_samples": "data", "read_dataset": "data", "write_dataset": "data",
    "EvalReport": "metrics", "pixel_f1": "metrics", "image_f1": "metrics", "roc_auc": "metrics",
    "TrainConfig": "train", "train_loop": "train", "adamw_step": "train", "evaluate_model": "train",
    "parse_config": "config",
}

__all__ = sorted(_EXPORTS) + list(_SUBMODULES)


def __getattr__(name):
    if name in _SUBMODULES:
        return importlib.import_module(f".{name}", __name__)
    if name in _EXPORTS:
        return getattr(importlib.import_module(f".{_EXPORTS[name]}", __name__), name)
    raise AttributeError(f"module {__name__!r} has no attribute {name!r}")
