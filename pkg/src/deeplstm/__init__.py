"""Desk-scale training framework for deep LSTM acoustic-style models.

The package covers the full loop: exact truncated-free BPTT for stacked
LSTMs with guard rails, frame-level cross-entropy and distillation losses,
lattice-based state-accuracy sequence training, synchronous data-parallel
SGD with blockwise model-update filtering or plain model averaging, a
deterministic mesh allreduce (in-process or TCP), layer-wise model growth,
teacher-student compression, and a synthetic Gaussian-HMM data generator.
"""

from .allreduce import (AggregationError, InProcessMesh, SocketTransport,
                        mesh_allreduce, partition)
from .datagen import (Dataset, SmbrDataset, Utterance, generate_hmm_dataset,
                      load_dataset, load_lattices, make_hmm_config,
                      make_lattices, save_dataset, save_lattices,
                      stack_dataset)
from .losses import (LossConfig, Targets, ce_loss, combined_loss,
                     distill_loss, frame_error_rate, sharpen)
from .model import (ClipConfig, Gradients, ModelLayout, ModelParams, backward,
                    deepen, forward, load_model, save_model, stack_frames,
                    xavier_init)
from .report import write_report
from .smbr import (Lattice, SmbrConfig, lattice_forward_backward,
                   smbr_by_enumeration, smbr_loss_and_grad)
from .sync import (BmufState, EmaState, MaState, bmuf_step, ema_update,
                   ma_update, model_average)
from .training import (Metrics, TrainConfig, TrainingAborted, distill,
                       evaluate, layerwise_train, train_parallel,
                       transfer_smbr)

__version__ = "0.1.0"

__all__ = [
    "AggregationError", "BmufState", "ClipConfig", "Dataset", "EmaState",
    "Gradients", "InProcessMesh", "Lattice", "LossConfig", "MaState",
    "Metrics", "ModelLayout", "ModelParams", "SmbrConfig", "SmbrDataset",
    "SocketTransport", "Targets", "TrainConfig", "TrainingAborted",
    "Utterance", "backward", "bmuf_step", "ce_loss", "combined_loss",
    "deepen", "distill", "distill_loss", "ema_update", "evaluate", "forward",
    "frame_error_rate", "generate_hmm_dataset", "lattice_forward_backward",
    "layerwise_train", "load_dataset", "load_lattices", "load_model",
    "ma_update", "make_hmm_config", "make_lattices", "mesh_allreduce",
    "model_average", "partition", "save_dataset", "save_lattices",
    "save_model", "sharpen", "smbr_by_enumeration", "smbr_loss_and_grad",
    "stack_dataset", "stack_frames", "train_parallel", "transfer_smbr",
    "write_report", "xavier_init",
]
