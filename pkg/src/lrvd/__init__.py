"""Rank-tied variational low-rank adapters with ARD rank selection."""

from importlib.metadata import PackageNotFoundError, version

try:
    __version__ = version("artifact")
except PackageNotFoundError:  # running from a source tree
    __version__ = "0.1.0"

from .adapter import (
    RankTiedAdapter,
    effective_rank,
    forward_deterministic,
    forward_direct_sample,
    forward_local_reparam,
    kl_sum,
    kl_term,
    prune,
)
from .models import BackboneModel, build_model, make_task
from .numerics import Rng, svd
from .trainer import TrainConfig, load_checkpoint, save_checkpoint, train

__all__ = [
    "__version__",
    "BackboneModel",
    "RankTiedAdapter",
    "Rng",
    "TrainConfig",
    "build_model",
    "effective_rank",
    "forward_deterministic",
    "forward_direct_sample",
    "forward_local_reparam",
    "kl_sum",
    "kl_term",
    "load_checkpoint",
    "make_task",
    "prune",
    "save_checkpoint",
    "svd",
    "train",
]
