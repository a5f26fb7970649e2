"""Toolkit for adversarially debiased training on fixed-dimensional speech-segment embeddings.

The pieces compose bottom-up: ``ndnum`` provides tensors with reverse-mode
autodiff (including the gradient-reversal op), ``model`` the encoder and the
two heads, ``objective``/``optim`` the losses and update rules, ``datapipe``
and ``synthgen`` the data plumbing, ``trainer`` the training loop, and
``evalkit`` the gender-stratified metrics. ``cli`` ties them into the
``datkit`` command.
"""

from .datapipe import Example, Manifest, SpeechSegment, Utterance
from .evalkit import ConfusionMatrix, MetricsReport, ProbeConfig, evaluate, gender_probe
from .model import ModelConfig, ParamSet, init_params
from .objective import ClassWeights, LossBreakdown, class_weights, dat_loss, weighted_ce
from .optim import AdamState, Schedules, adam_step, cosine_lr, ema_update, lambda_at
from .synthgen import SynthConfig, generate
from .trainer import Checkpoint, TrainConfig, TrainResult, load_checkpoint, save_checkpoint, train

__version__ = "0.1.0"

__all__ = [
    "AdamState",
    "Checkpoint",
    "ClassWeights",
    "ConfusionMatrix",
    "Example",
    "LossBreakdown",
    "Manifest",
    "MetricsReport",
    "ModelConfig",
    "ParamSet",
    "ProbeConfig",
    "Schedules",
    "SpeechSegment",
    "SynthConfig",
    "TrainConfig",
    "TrainResult",
    "Utterance",
    "adam_step",
    "class_weights",
    "cosine_lr",
    "dat_loss",
    "ema_update",
    "evaluate",
    "gender_probe",
    "generate",
    "init_params",
    "lambda_at",
    "load_checkpoint",
    "save_checkpoint",
    "train",
    "weighted_ce",
]
