"""Multi-sense embedding dictionaries.

Cluster per-token contextual embeddings into a finite sense dictionary,
quantize embedding streams by nearest-sense replacement, train a small
student by sense-classification distillation, and evaluate senses on
word-similarity benchmarks.
"""

from .clustering import (
    AdaptivePolicy,
    Clustering,
    KmeansConfig,
    MclConfig,
    adaptive_k,
    build_knn_graph,
    kmeans_fit,
    kmeans_pp_init,
    mcl_cluster,
    scale_cluster_count,
)
from .dictionary import (
    BuildConfig,
    DictionaryStats,
    SenseDictionary,
    SenseSet,
    build_dictionary,
    build_dictionary_from_records,
    build_sense_set,
    deserialize,
    estimate_active_memory,
    nearest_sense,
    non_self_dominant_senses,
    serialize,
    stats,
)
from .distillation import (
    StudentModel,
    TrainConfig,
    TrainTrace,
    ce_grad,
    ce_loss,
    infer_labels,
    init_student,
    load_model,
    save_model,
    sense_logits,
    softmax_prob,
    student_forward,
    train,
)
from .replacement import ReplacementReport, replace_stream, teacher_label
from .stream import (
    OccurrenceRecord,
    StreamHeader,
    StreamSummary,
    read_all,
    read_header,
    stream_records,
    validate_stream,
    write_stream,
)
from .wordsim import (
    ScoredPairs,
    build_word_senses,
    read_benchmark_tsv,
    read_vocab_tsv,
    score_pairs,
    spearman,
    word_similarity,
    write_vocab_tsv,
)

__version__ = "0.1.0"
