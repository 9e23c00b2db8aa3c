"""Learned target-candidate association tracking on synthetic score maps."""

from .scoremap import Candidate, ScoreMap, extract_candidates, pad_candidates
from .diffmath import Tape, Tensor, grad_check
from .encoder import EncodedCandidate, EncoderParams, encode_candidates
from .embednet import EmbedParams, embed_pair
from .matcher import (
    AssignmentMatrix,
    MatchSet,
    SimilarityMatrix,
    extract_matches,
    similarity,
    sinkhorn,
)
from .association import ObjectDatabase, TrackedObject, associate_frame, init_database
from .memory import (
    MemoryManager,
    MemorySample,
    OnlineLossSpec,
    choose_replacement,
    confidence,
    decay_age_weights,
    online_loss,
)
from .model import ModelParams
from .simulator import SimConfig, SequenceRecord, generate_sequence, greedy_baseline_track
from .training import (
    FramePairSample,
    MiningCategory,
    TrainConfig,
    loss_partial,
    loss_self,
    make_synthetic_pair,
    mine_categories,
    train,
)
from .pipeline import (
    SearchAreaHistory,
    TrackerConfig,
    evaluate,
    rescale_search_area,
    track_sequence,
)

__version__ = "0.1.0"
