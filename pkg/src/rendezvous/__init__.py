"""Surgical action-triplet recognition at desk scale.

A numpy reverse-mode autodiff engine, class-activation-guided attention for
verbs and targets, a mixed self/cross attention decoder for triplets, the
training objectives and the full evaluation protocol.
"""
from .encoder import ModelConfig
from .errors import (ConfigError, ContractError, DimensionError, DivergenceError, FormatError,
                     NumericError, RendezvousError)
from .metrics import EvalReport, PredictionRecord, average_precision, evaluate, topn_accuracy
from .models import VARIANTS, TripletModel, build_model
from .vocab import TripletVocabulary, cholect50_vocabulary, load_vocabulary
from .wilcoxon import WilcoxonResult, wilcoxon_signed_rank

__version__ = "0.1.0"

__all__ = [
    "ModelConfig", "ConfigError", "ContractError", "DimensionError", "DivergenceError", "FormatError",
    "NumericError", "RendezvousError", "EvalReport", "PredictionRecord", "average_precision", "evaluate",
    "topn_accuracy", "VARIANTS", "TripletModel", "build_model", "TripletVocabulary",
    "cholect50_vocabulary", "load_vocabulary", "WilcoxonResult", "wilcoxon_signed_rank",
]
