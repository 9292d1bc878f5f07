"""Federated multi-modal learning with imputation embeddings, cross-modal
aggregation and contrastive regularisation, on a NumPy autodiff engine."""

from .autodiff import Tensor, backward, op_forward
from .params import ModelParams, init_params, sgd_step

__version__ = "0.1.0"

__all__ = ["Tensor", "backward", "op_forward", "ModelParams", "init_params", "sgd_step", "__version__"]
