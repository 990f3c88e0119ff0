"""Segment-recurrent encoder-decoder transformer with an external slot memory,
trained with memory replay back-propagation.  Pure numpy."""

from .memory import MemoryState, bmn, init_memory, memory_write, slot_write_stats
from .model import Memformer, ModelConfig, SegmentBatch, load_checkpoint, save_checkpoint
from .training import (SCHEMES, OptimState, ReplayBuffer, Rollout, bptt_update, gc_update,
                       mrbp_update)

__version__ = "0.1.0"

__all__ = ["Memformer", "ModelConfig", "SegmentBatch", "MemoryState", "init_memory",
           "memory_write", "bmn", "slot_write_stats", "save_checkpoint", "load_checkpoint",
           "SCHEMES", "OptimState", "ReplayBuffer", "Rollout", "mrbp_update", "bptt_update",
           "gc_update"]
