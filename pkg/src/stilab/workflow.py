"""Composition helpers wiring the corpus, attribute pipeline, encoders,
trainer and evaluation harness into reproducible runs."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .attributes import (
    AttributeRecord,
    ExtractionClientConfig,
    build_attribute_set,
    compose_attribute_sentence,
)
from .autodiff import ParameterStore
from .corpus import SyntheticCorpus
from .encoders import EncoderParams, encode_sentence
from .sti import DEFAULT_SALIENCY_TEMPERATURE, InteractionToggles, STIParameters
from .trainer import (
    PARAM_PATCH_WEIGHT,
    PARAM_VIDEO_BIAS,
    PARAM_VIDEO_WEIGHT,
    PARAM_WORD_WEIGHT,
    ClassText,
    FitResult,
    TrainConfig,
    TrainingData,
    default_parameter_store,
    fit,
)
from .evaluation import MetricReport, evaluate_split, evaluate_three_splits

Array = np.ndarray


def corpus_encoder_params(corpus: SyntheticCorpus) -> EncoderParams:
    """Pretrained-style encoder for a corpus: the text table shares the
    corpus seed, which is what ties concept latents to token embeddings."""
    return EncoderParams.pretrained(corpus.spec.seed, corpus.spec.dim)


@dataclass
class PreparedClasses:
    class_indices: tuple[int, ...]
    texts: list[ClassText]
    records: list[AttributeRecord]


def prepare_class_texts(
    corpus: SyntheticCorpus,
    class_indices: Sequence[int],
    num_attributes: int,
    enc_params: EncoderParams,
    client: ExtractionClientConfig | None = None,
) -> PreparedClasses:
    """Run the attribute pipeline for the given classes and encode the
    resulting prompt sentences."""
    client = client or ExtractionClientConfig()
    extractor = "mock" if client.resolved_endpoint() == "mock" else "endpoint"
    texts: list[ClassText] = []
    records: list[AttributeRecord] = []
    for index in class_indices:
        cls = corpus.classes[index]
        selected = build_attribute_set(cls.description, num_attributes, client)
        sentence = compose_attribute_sentence(selected)
        texts.append(ClassText(name=cls.name, sequence=encode_sentence(sentence, enc_params)))
        records.append(
            AttributeRecord(
                class_name=cls.name,
                keywords=selected.keywords,
                extractor=extractor,
                prompt_sentence=sentence,
                shortfall=selected.shortfall,
            )
        )
    return PreparedClasses(class_indices=tuple(class_indices), texts=texts, records=records)


def training_data_for(
    corpus: SyntheticCorpus,
    class_indices: Sequence[int],
    num_attributes: int,
    enc_params: EncoderParams,
    client: ExtractionClientConfig | None = None,
) -> tuple[TrainingData, PreparedClasses]:
    """Assemble raw-feature training data over a class subset.

    Labels are positions within ``class_indices``, not corpus-wide indices.
    """
    from .encoders import FrameEmbeddingSet

    prepared = prepare_class_texts(corpus, class_indices, num_attributes, enc_params, client)
    position = {corpus_index: i for i, corpus_index in enumerate(class_indices)}
    videos = []
    labels = []
    ids = []
    for video in corpus.videos:
        if video.class_index in position:
            videos.append(FrameEmbeddingSet.from_raw(video.features))
            labels.append(position[video.class_index])
            ids.append(video.video_id)
    data = TrainingData(
        videos=videos, labels=np.array(labels), class_texts=prepared.texts, video_ids=ids
    )
    return data, prepared


def params_from_store(
    store: ParameterStore,
    *,
    text_table_seed: int,
    dim: int,
    tau_saliency: float = DEFAULT_SALIENCY_TEMPERATURE,
) -> tuple[EncoderParams, STIParameters]:
    """View a trainable store as the encoder/interaction parameter objects."""
    enc = EncoderParams(
        text_table_seed=text_table_seed,
        dim=dim,
        video_weight=store.value(PARAM_VIDEO_WEIGHT),
        video_bias=store.value(PARAM_VIDEO_BIAS),
    )
    sti = STIParameters(
        patch_weight=store.value(PARAM_PATCH_WEIGHT),
        word_weight=store.value(PARAM_WORD_WEIGHT),
        tau_saliency=tau_saliency,
    )
    return enc, sti


def store_from_params(enc: EncoderParams, sti: STIParameters, log_tau: float) -> ParameterStore:
    store = ParameterStore()
    store.register(PARAM_VIDEO_WEIGHT, enc.video_weight)
    store.register(PARAM_VIDEO_BIAS, enc.video_bias)
    store.register(PARAM_PATCH_WEIGHT, sti.patch_weight)
    store.register(PARAM_WORD_WEIGHT, sti.word_weight)
    store.register("log_tau", np.log(log_tau))
    return store


@dataclass
class TrainedRun:
    corpus: SyntheticCorpus
    config: TrainConfig
    result: FitResult
    data: TrainingData
    enc_params: EncoderParams
    sti_params: STIParameters


def train_on_corpus(
    corpus: SyntheticCorpus,
    config: TrainConfig,
    *,
    tau_saliency: float = DEFAULT_SALIENCY_TEMPERATURE,
    store: ParameterStore | None = None,
) -> TrainedRun:
    """Train on the corpus's seen classes with the configured attributes."""
    base_enc = corpus_encoder_params(corpus)
    data, _ = training_data_for(
        corpus, corpus.seen_class_indices, config.num_attributes, base_enc
    )
    store = store if store is not None else default_parameter_store(corpus.spec.dim)
    result = fit(data, config, store=store, tau_saliency=tau_saliency)
    enc, sti = params_from_store(
        store, text_table_seed=corpus.spec.seed, dim=corpus.spec.dim, tau_saliency=tau_saliency
    )
    return TrainedRun(
        corpus=corpus, config=config, result=result, data=data, enc_params=enc, sti_params=sti
    )


def eval_group(
    corpus: SyntheticCorpus,
    enc_params: EncoderParams,
    sti_params: STIParameters,
    *,
    seen: bool,
    num_attributes: int,
    toggles: InteractionToggles | None = None,
    client: ExtractionClientConfig | None = None,
) -> tuple[float, float]:
    """Single-split (top1, top5) over the seen or unseen class group."""
    class_indices = corpus.seen_class_indices if seen else corpus.unseen_class_indices
    if not class_indices:
        raise ValueError("requested class group is empty")
    data, _ = training_data_for(corpus, class_indices, num_attributes, enc_params, client)
    return evaluate_split(
        data.videos, data.labels, [ct.sequence for ct in data.class_texts],
        sti_params, enc_params, toggles,
    )


def eval_group_three_splits(
    corpus: SyntheticCorpus,
    enc_params: EncoderParams,
    sti_params: STIParameters,
    *,
    seen: bool,
    num_attributes: int,
    seed: int,
    subset_size: int | None = None,
    toggles: InteractionToggles | None = None,
) -> MetricReport:
    class_indices = corpus.seen_class_indices if seen else corpus.unseen_class_indices
    if not class_indices:
        raise ValueError("requested class group is empty")
    data, _ = training_data_for(corpus, class_indices, num_attributes, enc_params)
    return evaluate_three_splits(
        data.videos,
        data.labels,
        [ct.sequence for ct in data.class_texts],
        sti_params,
        enc_params,
        seed=seed,
        subset_size=subset_size,
        toggles=toggles,
    )
