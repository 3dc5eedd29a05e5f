"""Personal voice activity detection: streaming Conformer with speaker conditioning, in numpy."""

from .errors import (
    ConfigurationError,
    ContractError,
    InputError,
    LoadError,
    NumericError,
    PVADError,
    TrainingError,
)
from .frontend import AudioBuffer, compute_features, extract_logmel, stack_subsample
from .model import ModelBundle, ModelConfig, build_model, classify_frame, forward
from .quant import QuantizedBundle, quantize_model
from .container import load_model, save_model
from .stream import StreamSession, stream_init, stream_push
from .trainer import TrainConfig, evaluate, train

__version__ = "0.1.0"
