"""Task-aware mixture of attention-based reading-comprehension experts."""
from .autodiff import ParamSet, Tape, Tensor, backward, grad_check
from .checkpoint import Checkpoint
from .experts import Expert, StreamConfig, StreamKind, forward, init_params
from .featurize import RawInstance, Resources, build_resources, encode_instance, tokenize
from .mixture import MixtureMode, StreamPrediction, combine_hard, combine_weighted, confidence_weight
from .training import TrainConfig, evaluate, train_stream, transfer_load

__version__ = "0.1.0"
