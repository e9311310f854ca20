"""Disentanglement workbench: DAVA training, the PIPE metric, reference metrics and sweeps."""

__version__ = "0.1.0"

from .estimators import DAVA, BetaVAE, LoadedVAE  # noqa: E402
from .pipe_metric import PipeConfig, PipeResult, pipe, pipe_rec  # noqa: E402
from .synthdata import build_toysprites  # noqa: E402

__all__ = ["DAVA", "BetaVAE", "LoadedVAE", "PipeConfig", "PipeResult", "pipe", "pipe_rec", "build_toysprites"]
