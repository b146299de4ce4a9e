"""Few-shot classification of local-descriptor sets with Naive-Bayes nearest
neighbour scoring and mutual nearest neighbour descriptor selection."""
from .classify import (
    Classification,
    classify,
    cross_entropy,
    log_odds_score,
    nbnn_score,
    pseudo_label_augment,
    rank_classify,
    softmax_probs,
)
from .core import (
    ClassScores,
    DescriptorSet,
    Episode,
    EvalReport,
    MergeStrategy,
    Method,
    ScoreKind,
    ScoreRule,
    SelectionMethod,
    SelectionResult,
    SupportPool,
    TauRecord,
    lane_dot,
    validate_descriptor_set,
)
from .episodes import LabeledDataset, ProtocolConfig, evaluate, merge_shots, sample_episode
from .selection import all_select, dmnn_select, mnn_select, odm_select, tau_of
from .similarity import BACKEND, available_backends, cosine, nearest_in_set, similarity_matrix, use_backend
from .fileio import (
    decode_descriptor_file,
    encode_descriptor_file,
    load_manifest,
    read_descriptor_file,
    selection_trace,
    write_descriptor_file,
    write_manifest,
)
from .synth import SynthSpec, synth_generate

__version__ = "0.1.0"
