"""Weakly supervised temporal action segmentation from action sets.

A temporal convolutional network splits a video into regions, predicts an
action distribution and a length for every region, and upsamples the regions
to frame posteriors with a sampler that is differentiable in the lengths.
Training needs only the set of actions occurring in each video.
"""

from .data import Corpus, CorpusFormatError, SynthConfig, VideoRecord, gen_synthetic, load_corpus, save_corpus
from .estimator import SCTSegmenter
from .losses import LossWeights
from .metrics import evaluate_predictions, frames_to_segments, jaccard, midpoint_hit, mof
from .network import CheckpointError, ModelConfig, ParameterStore, load_checkpoint, save_checkpoint
from .training import (
    SGD,
    CompatibilityError,
    NumericError,
    RunConfig,
    evaluate,
    forward,
    gradcheck,
    predict,
    train,
)
from .upsample import largest_remainder, normalize_lengths

__version__ = "0.1.0"

__all__ = [
    "Corpus", "CorpusFormatError", "SynthConfig", "VideoRecord", "gen_synthetic", "load_corpus", "save_corpus",
    "SCTSegmenter", "LossWeights", "evaluate_predictions", "frames_to_segments", "jaccard", "midpoint_hit", "mof",
    "CheckpointError", "ModelConfig", "ParameterStore", "load_checkpoint", "save_checkpoint",
    "SGD", "CompatibilityError", "NumericError", "RunConfig", "evaluate", "forward", "gradcheck", "predict", "train",
    "largest_remainder", "normalize_lengths",
]
