"""banet: boundary-aware 3-D segmentation, self-contained.

A small research stack: volumes on disk, a tape-based autodiff engine over
5-D arrays, the boundary-attention segmentation network, deep supervision,
SGD training, sliding-window inference, synthetic phantoms, and a
finite-difference gradient checker.  numpy throughout, numba for the three
convolution kernels that dominate the runtime.
"""

from .autodiff import Tape, Tensor, backward
from .errors import DataError, NumericalError
from .gradcheck import run_suite
from .inference import (DiceReport, Prediction, dice_score, ensemble,
                        resample_prediction, sliding_window_predict, write_dice_csv)
from .network import BaNet, NetworkConfig, build, enhance, forward_infer, forward_train
from .ops import init_params
from .phantom import PhantomConfig, generate_phantom
from .supervision import (SupervisionTargets, build_targets, deep_supervision_weights,
                          dice_ce_loss, extract_boundary, label_pyramid, one_hot,
                          total_loss)
from .training import (Checkpoint, OptimizerState, TrainConfig, load_checkpoint,
                       poly_lr, restore_network, sample_patch, save_checkpoint,
                       sgd_step, train, write_loss_trace)
from .volume import (LabelVolume, Volume, clip_and_normalize_ct, normalize,
                     normalize_zscore, read_labels, read_volume, resample,
                     write_volume)

__version__ = "0.1.0"

__all__ = [
    "BaNet", "Checkpoint", "DataError", "DiceReport", "LabelVolume", "NetworkConfig",
    "NumericalError", "OptimizerState", "PhantomConfig", "Prediction",
    "SupervisionTargets", "Tape", "Tensor", "TrainConfig", "Volume", "backward",
    "build", "build_targets", "clip_and_normalize_ct", "deep_supervision_weights",
    "dice_ce_loss", "dice_score", "ensemble", "enhance", "extract_boundary",
    "forward_infer", "forward_train", "generate_phantom", "init_params",
    "label_pyramid", "load_checkpoint", "normalize", "normalize_zscore", "one_hot",
    "poly_lr", "read_labels", "read_volume", "resample", "resample_prediction",
    "restore_network", "run_suite", "sample_patch", "save_checkpoint", "sgd_step",
    "sliding_window_predict", "total_loss", "train", "write_dice_csv",
    "write_loss_trace", "write_volume",
]
