"""stilab: language-driven descriptive attributes and spatial-temporal
interaction for zero-shot action classification over embedding sequences,
at desk scale, with a self-contained tape-based gradient engine."""

__version__ = "0.1.0"

from .attributes import (
    ClassDescription,
    DescriptiveAttributeSet,
    ExtractionClientConfig,
    KeywordCandidateList,
    compose_attribute_sentence,
    extract_keywords,
    load_description_corpus,
    normalize_and_filter,
    select_descriptive_attributes,
)
from .autodiff import ParameterStore, Tape, finite_difference_check, parameter_gradients
from .corpus import SyntheticCorpus, SyntheticCorpusSpec, generate_synthetic_corpus
from .encoders import (
    EncoderParams,
    FrameEmbeddingSet,
    TextEmbeddingSequence,
    encode_text,
    encode_video,
    tokenize,
)
from .evaluation import (
    MetricReport,
    aggregate_splits,
    evaluate_split,
    export_saliency,
    sample_category_subset,
    zero_shot_classify,
)
from .objective import (
    BatchRecord,
    PositiveSet,
    cosine_similarity,
    loss_c2v,
    loss_v2c,
    score_matrix,
    total_loss,
)
from .sti import (
    InteractionToggles,
    STIOutput,
    STIParameters,
    SpatialResult,
    TemporalSaliency,
    aggregate_video,
    mean_pool_baseline,
    project_patches,
    project_words,
    spatial_interaction,
    sti_forward,
    temporal_saliency,
)
from .trainer import (
    Checkpoint,
    OptimizerState,
    TrainConfig,
    TrainingData,
    few_shot_finetune,
    fit,
    load_checkpoint,
    optimizer_step,
    save_checkpoint,
)

__all__ = [name for name in dir() if not name.startswith("_")]
