"""Personalized voice activity detection with hypernetwork weight adaptation.

A small numpy VAD (MLP, LSTM, MLP) labels each 10 ms frame as non-speech,
target-speaker speech or other speech.  Speaker conditioning is either one of
four input-side baselines (concat, add, mul, FiLM) or a hypernetwork that
maps a speaker embedding to a weight delta for selected VAD layers.
"""

from .checkpoint import Checkpoint, load_checkpoint, load_patch, save_checkpoint, save_patch
from .conditioning import ConditioningMode, HyperNetConfig, hypernet_forward, personalize
from .embed import SpeakerEmbedding
from .errors import PvadError
from .evaluation import average_precision, evaluate
from .features import MelConfig, Waveform, log_mel, read_wav, write_wav
from .model import PVADModel
from .training import TrainConfig, fit
from .vad import ParamStore, VadConfig, WeightPatch, apply_patch, forward, init_params, step

__all__ = [
    "Checkpoint", "ConditioningMode", "HyperNetConfig", "MelConfig", "PVADModel", "ParamStore",
    "PvadError", "SpeakerEmbedding", "TrainConfig", "VadConfig", "Waveform", "WeightPatch",
    "apply_patch", "average_precision", "evaluate", "fit", "forward", "hypernet_forward",
    "init_params", "load_checkpoint", "load_patch", "log_mel", "personalize", "read_wav",
    "save_checkpoint", "save_patch", "step", "write_wav",
]
