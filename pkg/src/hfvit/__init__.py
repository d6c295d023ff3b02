"""Hybrid CNN / hierarchical-attention transformer for CTU partition prediction."""

from .autodiff import Tape, Tensor, backward, grad_check, precision
from .errors import (ContractError, DataError, DimensionError, HfvitError, InfeasibleError,
                     NumericError, WeightsFormatError)
from .model import HfvitConfig, HfvitModel, count_flops, count_params, find_head_dims, forward
from .partition import PartitionLabel, PartitionTree, decode_label, derive_mask, encode_tree

__version__ = "0.1.0"

__all__ = [
    "ContractError", "DataError", "DimensionError", "HfvitConfig", "HfvitError", "HfvitModel",
    "InfeasibleError", "NumericError", "PartitionLabel", "PartitionTree", "Tape", "Tensor",
    "WeightsFormatError", "backward", "count_flops", "count_params", "decode_label", "derive_mask",
    "encode_tree", "find_head_dims", "forward", "grad_check", "precision",
]
