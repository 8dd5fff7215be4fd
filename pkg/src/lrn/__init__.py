"""Label refinement network: coarse-to-fine segmentation with deep supervision."""
from .errors import CodecError, ConfigError, DataError, DimensionError, LRNError, UsageError
from .model import ModelConfig, ModelParams, StageOutputs, init_params, model_backward, model_forward
from .trainer import Checkpoint, TrainConfig, lr_schedule, train_loop

__version__ = "0.1.0"
