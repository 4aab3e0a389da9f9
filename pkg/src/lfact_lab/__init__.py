"""Adaptive computation time recurrent models with layer-to-layer state transmission."""

from .act import BatchHalting, HaltingRecord, act_loss, act_step, halt_schedule, ponder_cost
from .lfact import attention_count, combine_g, lfact_loss, lfact_step, transmission_state
from .seq2seq import SequenceModel

__version__ = "0.1.0"

__all__ = [
    "BatchHalting",
    "HaltingRecord",
    "SequenceModel",
    "act_loss",
    "act_step",
    "attention_count",
    "combine_g",
    "halt_schedule",
    "lfact_loss",
    "lfact_step",
    "ponder_cost",
    "transmission_state",
]
