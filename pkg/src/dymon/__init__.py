"""Object-centric generative modelling of multi-view dynamic scenes.

Slot latents decoded by a viewpoint-conditioned spatial mixture, inferred
by iterative amortized refinement chained across views and trained with
schedules that separate observer motion from object motion.
"""
from dymon.decoder import DecodedSlots, Decoder, compose, decode_slots, log_likelihood
from dymon.inference import (InferenceResult, RefinementNetwork, auxiliary_inputs, iterative_inference,
                             kl_diag_gaussian, sequence_inference)
from dymon.model import DyMON, ModelConfig, load_checkpoint, save_checkpoint
from dymon.types import FCSO, SCFO, Frame, Sequence, SlotGaussians, sample_slots

__version__ = "0.1.0"

__all__ = [
    "DecodedSlots", "Decoder", "DyMON", "FCSO", "Frame", "InferenceResult", "ModelConfig",
    "RefinementNetwork", "SCFO", "Sequence", "SlotGaussians", "auxiliary_inputs", "compose",
    "decode_slots", "iterative_inference", "kl_diag_gaussian", "load_checkpoint", "log_likelihood",
    "sample_slots", "save_checkpoint", "sequence_inference",
]
