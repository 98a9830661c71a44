"""Convolutional dictionary learning with a tied, deeply unrolled sparse auto-encoder."""

__version__ = "0.1.0"

from .conv_ops import ConvDictionary, estimate_lipschitz
from .encoder import EncoderDivergence, EncoderTrace, FistaConfig, fista_encode
from .gradient import finite_difference_gradient, loss_and_gradient
from .metrics import RecoveryReport, match_filters, recovery_err
from .simulator import SimConfig, simulate
from .trainer import TrainConfig, TrainReport, train, train_lcsc_baseline

__all__ = [
    "ConvDictionary",
    "EncoderDivergence",
    "EncoderTrace",
    "FistaConfig",
    "RecoveryReport",
    "SimConfig",
    "TrainConfig",
    "TrainReport",
    "estimate_lipschitz",
    "finite_difference_gradient",
    "fista_encode",
    "loss_and_gradient",
    "match_filters",
    "recovery_err",
    "simulate",
    "train",
    "train_lcsc_baseline",
]
