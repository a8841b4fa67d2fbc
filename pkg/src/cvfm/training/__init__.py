from .datasets import (Batch, CategoricalFactorized, GaussMixture, ToyDataset, TypedPolygonCloud, load_dataset,
                       make_dataset, save_dataset)
from .losses import controlled_vfm_loss, vfm_loss
from .loop import TrainConfig, TrainResult, build, eval_loss, resolve_head_config, train

__all__ = [
    "Batch", "CategoricalFactorized", "GaussMixture", "ToyDataset", "TypedPolygonCloud", "load_dataset",
    "make_dataset", "save_dataset", "controlled_vfm_loss", "vfm_loss", "TrainConfig", "TrainResult", "build",
    "eval_loss", "resolve_head_config", "train",
]
