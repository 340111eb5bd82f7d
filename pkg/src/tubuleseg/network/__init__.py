"""Encoder-decoder segmentation network with a from-scratch numpy backend."""

from .checkpoint import (ArchitectureMismatchError, BadMagicError, CheckpointError,
                         TruncatedCheckpointError, VersionMismatchError,
                         load_checkpoint, save_checkpoint)
from .layers import BatchNormStateError, ShapeError
from .model import (DESK_BASE_CHANNELS, FULL_BASE_CHANNELS, ModelParams,
                    StaleCacheError, UntrainedModelError, architecture_hash,
                    backward, channel_plan, forward, init_model, predict,
                    predict_proba)
from .training import (DatasetError, NonFiniteLossError, TrainConfig,
                       pixel_accuracy, sgd_step, train)
