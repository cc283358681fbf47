"""Training loop: adaptive moments with decoupled weight decay, few-shot
fine-tuning, and bitwise-reproducible checkpointing.

All stochasticity (epoch shuffles, few-shot sampling) derives functionally
from (seed, epoch), so resuming from a checkpoint replays the exact same
trajectory as an uninterrupted run.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import ParameterStore, Tape
from .encoders import FrameEmbeddingSet, TextEmbeddingSequence, text_fingerprint
from .objective import (
    INITIAL_TEMPERATURE,
    PositiveSet,
    loss_nodes,
    score_matrix_nodes,
    temperature_node,
)
from .sti import DEFAULT_SALIENCY_TEMPERATURE, InteractionToggles

Array = np.ndarray

PARAM_VIDEO_WEIGHT = "video_weight"
PARAM_VIDEO_BIAS = "video_bias"
PARAM_PATCH_WEIGHT = "patch_weight"
PARAM_WORD_WEIGHT = "word_weight"
PARAM_LOG_TAU = "log_tau"

_FEWSHOT_STREAM = 9001  # distinguishes the sampling stream from epoch shuffles

CHECKPOINT_MAGIC = b"STICKPT1\n"
CHECKPOINT_VERSION = 1


class NonFiniteGradientError(RuntimeError):
    """A gradient turned non-finite; carries the parameter name."""


class NonFiniteLossError(RuntimeError):
    pass


class CheckpointFormatError(RuntimeError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    """Optimization settings. Library defaults mirror the reference recipe
    (rate 5e-5, 30 epochs, batch 64, decay 0.05); ``desk_scale`` shrinks the
    batch for laptop-sized corpora."""

    learning_rate: float = 5e-5
    weight_decay: float = 0.05
    epochs: int = 30
    batch_size: int = 64
    seed: int = 0
    spatial: bool = True
    temporal: bool = True
    num_attributes: int = 8

    def __post_init__(self):
        if self.learning_rate < 0:
            # zero is allowed: it freezes the dynamics, which is useful for
            # determinism checks
            raise ValueError("learning_rate must be >= 0")
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.weight_decay < 0:
            raise ValueError("weight_decay must be >= 0")
        if self.num_attributes < 0:
            raise ValueError("num_attributes must be >= 0")

    @property
    def toggles(self) -> InteractionToggles:
        return InteractionToggles(spatial=self.spatial, temporal=self.temporal)

    @classmethod
    def desk_scale(cls, **overrides) -> "TrainConfig":
        overrides.setdefault("batch_size", 16)
        return cls(**overrides)

    def to_dict(self) -> dict:
        return {
            "learning_rate": self.learning_rate,
            "weight_decay": self.weight_decay,
            "epochs": self.epochs,
            "batch_size": self.batch_size,
            "seed": self.seed,
            "spatial": self.spatial,
            "temporal": self.temporal,
            "num_attributes": self.num_attributes,
        }


@dataclass
class OptimizerState:
    """Per-parameter first/second moments plus the shared step counter."""

    first_moment: dict[str, Array]
    second_moment: dict[str, Array]
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8

    @classmethod
    def for_store(cls, store: ParameterStore) -> "OptimizerState":
        return cls(
            first_moment={n: np.zeros_like(store.value(n)) for n in store.names()},
            second_moment={n: np.zeros_like(store.value(n)) for n in store.names()},
        )


def optimizer_step(
    store: ParameterStore, grads: dict, state: OptimizerState, config: TrainConfig
) -> None:
    """One bias-corrected adaptive-moment update with decoupled decay.

    Both the decay term and the moment step are computed from the current
    parameter value: p <- p - lr*wd*p - lr*m_hat/(sqrt(v_hat)+eps).
    """
    t = state.step + 1
    lr, wd = config.learning_rate, config.weight_decay
    bias1 = 1.0 - state.beta1**t
    bias2 = 1.0 - state.beta2**t
    for name in store.names():
        if name not in grads:
            raise KeyError(f"gradient map is missing parameter {name!r}")
        g = np.asarray(grads[name], dtype=np.float64)
        if not np.isfinite(g).all():
            raise NonFiniteGradientError(f"non-finite gradient for parameter {name!r}")
        m = state.first_moment[name] = state.beta1 * state.first_moment[name] + (1 - state.beta1) * g
        v = state.second_moment[name] = state.beta2 * state.second_moment[name] + (1 - state.beta2) * (g * g)
        value = store.value(name)
        update = (m / bias1) / (np.sqrt(v / bias2) + state.epsilon)
        store.set_value(name, value - lr * wd * value - lr * update)
    state.step = t


# ---------------------------------------------------------------------------
# training data and the fit loop
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ClassText:
    name: str
    sequence: TextEmbeddingSequence


@dataclass
class TrainingData:
    """Raw-feature videos, labels into ``class_texts``, and frozen class texts."""

    videos: list[FrameEmbeddingSet]
    labels: Array
    class_texts: list[ClassText]
    video_ids: list[str] = field(default_factory=list)

    def __post_init__(self):
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if len(self.videos) < 1:
            raise ValueError("training data must contain at least one video")
        if self.labels.shape != (len(self.videos),):
            raise ValueError("need one label per video")
        if np.any(self.labels < 0) or np.any(self.labels >= len(self.class_texts)):
            raise ValueError("labels must index into class_texts")
        if not self.video_ids:
            self.video_ids = [f"video{i:04d}" for i in range(len(self.videos))]

    @property
    def num_classes(self) -> int:
        return len(self.class_texts)

    @property
    def dim(self) -> int:
        return self.videos[0].dim

    def subset(self, indices) -> "TrainingData":
        indices = list(indices)
        return TrainingData(
            videos=[self.videos[i] for i in indices],
            labels=self.labels[indices],
            class_texts=self.class_texts,
            video_ids=[self.video_ids[i] for i in indices],
        )


def default_parameter_store(dim: int) -> ParameterStore:
    """Identity-initialized trainable set: the toy stand-in for starting
    from aligned pretrained weights. The text side is not registered; it has
    no trainable parameters at all."""
    store = ParameterStore()
    store.register(PARAM_VIDEO_WEIGHT, np.eye(dim))
    store.register(PARAM_VIDEO_BIAS, np.zeros(dim))
    store.register(PARAM_PATCH_WEIGHT, np.eye(dim))
    store.register(PARAM_WORD_WEIGHT, np.eye(dim))
    store.register(PARAM_LOG_TAU, np.log(INITIAL_TEMPERATURE))
    return store


@dataclass
class FitResult:
    store: ParameterStore
    optimizer: OptimizerState
    loss_history: list[float]  # one mean loss per completed epoch
    config: TrainConfig
    epochs_completed: int


def _epoch_order(seed: int, epoch: int, count: int) -> Array:
    return np.random.default_rng([seed, epoch]).permutation(count)


def training_step_loss(
    store: ParameterStore,
    raw_batch: Array,
    batch_labels: Array,
    data: TrainingData,
    toggles: InteractionToggles,
    tau_saliency: float,
):
    """Build one training step's loss graph; returns the scalar tensor.

    The (B, B) in-batch matrix is assembled from one column per *unique*
    label and then gathered per instance, which preserves the exact
    duplicate-column semantics of the loss denominator.
    """
    tape = Tape()
    leaves = store.leaves(tape)
    unique_labels, column_of = np.unique(batch_labels, return_inverse=True)
    word_embeddings = [data.class_texts[int(c)].sequence.word_embeddings for c in unique_labels]
    class_embeddings = [data.class_texts[int(c)].sequence.class_embedding for c in unique_labels]
    unique_scores = score_matrix_nodes(
        tape,
        raw_videos=tape.constant(raw_batch),
        class_word_embeddings=word_embeddings,
        class_embeddings=class_embeddings,
        video_weight=leaves[PARAM_VIDEO_WEIGHT],
        video_bias=leaves[PARAM_VIDEO_BIAS],
        patch_weight=leaves[PARAM_PATCH_WEIGHT],
        word_weight=leaves[PARAM_WORD_WEIGHT],
        tau_saliency=tau_saliency,
        toggles=toggles,
    )
    scores = ad.index_select(unique_scores, column_of, axis=1)  # (B, B)
    tau = temperature_node(tape, leaves[PARAM_LOG_TAU])
    _, _, total = loss_nodes(scores, PositiveSet.from_labels(batch_labels), tau)
    return total


def fit(
    data: TrainingData,
    config: TrainConfig,
    *,
    store: ParameterStore | None = None,
    optimizer: OptimizerState | None = None,
    start_epoch: int = 0,
    loss_history: list[float] | None = None,
    tau_saliency: float = DEFAULT_SALIENCY_TEMPERATURE,
) -> FitResult:
    """Optimize the trainable parameters on a dataset.

    Deterministic given (seed, config, data): the epoch shuffle derives from
    (seed, epoch) and every reduction runs in a fixed order. The frozen text
    side is fingerprinted before and after as a hard guarantee.
    """
    store = store if store is not None else default_parameter_store(data.dim)
    optimizer = optimizer if optimizer is not None else OptimizerState.for_store(store)
    history = loss_history if loss_history is not None else []
    toggles = config.toggles

    frozen_before = text_fingerprint(ct.sequence for ct in data.class_texts)
    stacked = np.stack([video.patch_embeddings for video in data.videos])
    labels = data.labels
    count = len(data.videos)

    for epoch in range(start_epoch, config.epochs):
        order = _epoch_order(config.seed, epoch, count)
        epoch_losses: list[float] = []
        for start in range(0, count, config.batch_size):
            batch_idx = order[start : start + config.batch_size]
            total = training_step_loss(
                store, stacked[batch_idx], labels[batch_idx], data, toggles, tau_saliency
            )
            value = float(total.data)
            if not np.isfinite(value):
                raise NonFiniteLossError(
                    f"loss became non-finite at epoch {epoch}, batch starting {start}: {value!r}"
                )
            grads = ad.parameter_gradients(total, store)
            optimizer_step(store, grads, optimizer, config)
            epoch_losses.append(value)
        history.append(float(np.mean(epoch_losses)))

    frozen_after = text_fingerprint(ct.sequence for ct in data.class_texts)
    if frozen_after != frozen_before:
        raise RuntimeError("frozen text embeddings changed during training")

    return FitResult(
        store=store,
        optimizer=optimizer,
        loss_history=history,
        config=config,
        epochs_completed=config.epochs,
    )


# ---------------------------------------------------------------------------
# few-shot fine-tuning
# ---------------------------------------------------------------------------

@dataclass
class FewShotSample:
    indices: list[int]
    per_class_counts: dict[int, int]
    shortfall_classes: tuple[int, ...]  # classes with fewer than k videos


def few_shot_sample(data: TrainingData, k: int, seed: int) -> FewShotSample:
    """Pick exactly k videos per class (all of them, flagged, when a class
    is smaller). Deterministic in (seed, data order)."""
    if k < 1:
        raise ValueError("k must be >= 1")
    if len(data.videos) == 0:
        raise ValueError("dataset is empty")
    rng = np.random.default_rng([seed, _FEWSHOT_STREAM])
    indices: list[int] = []
    counts: dict[int, int] = {}
    shortfall: list[int] = []
    for class_index in range(data.num_classes):
        members = np.nonzero(data.labels == class_index)[0]
        if members.size == 0:
            continue
        if members.size <= k:
            chosen = members
            if members.size < k:
                shortfall.append(class_index)
        else:
            chosen = members[rng.choice(members.size, size=k, replace=False)]
        chosen = np.sort(chosen)
        counts[class_index] = int(chosen.size)
        indices.extend(int(i) for i in chosen)
    return FewShotSample(
        indices=indices, per_class_counts=counts, shortfall_classes=tuple(shortfall)
    )


@dataclass
class FewShotResult:
    fit: FitResult
    sample: FewShotSample


def few_shot_finetune(
    store: ParameterStore,
    data: TrainingData,
    k: int,
    epochs: int,
    seed: int,
    *,
    config: TrainConfig | None = None,
    tau_saliency: float = DEFAULT_SALIENCY_TEMPERATURE,
) -> FewShotResult:
    """Fine-tune existing parameters on a k-shot subset of the dataset."""
    sample = few_shot_sample(data, k, seed)
    subset = data.subset(sample.indices)
    config = config or TrainConfig.desk_scale(epochs=epochs, seed=seed)
    config = replace(config, epochs=epochs, seed=seed)
    result = fit(subset, config, store=store, tau_saliency=tau_saliency)
    return FewShotResult(fit=result, sample=sample)


# ---------------------------------------------------------------------------
# checkpointing
# ---------------------------------------------------------------------------

@dataclass
class Checkpoint:
    config: TrainConfig
    epoch: int  # completed epochs
    store: ParameterStore
    optimizer: OptimizerState
    loss_history: list[float]


def _write_named_arrays(fh, arrays: dict[str, Array]) -> None:
    for name, value in arrays.items():
        dims = " ".join(str(d) for d in value.shape)
        fh.write(f"{name} {value.ndim}{' ' if dims else ''}{dims}\n".encode("ascii"))
        fh.write(np.ascontiguousarray(value, dtype="<f8").tobytes())


def save_checkpoint(path, checkpoint: Checkpoint) -> Path:
    """Serialize training state; round-trips bitwise."""
    path = Path(path)
    store, opt = checkpoint.store, checkpoint.optimizer
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(f"version {CHECKPOINT_VERSION}\n".encode("ascii"))
        fh.write(
            ("config " + json.dumps(checkpoint.config.to_dict(), sort_keys=True) + "\n").encode("utf-8")
        )
        fh.write(f"epoch {checkpoint.epoch}\n".encode("ascii"))
        fh.write(f"step {opt.step}\n".encode("ascii"))
        fh.write(f"betas {opt.beta1!r} {opt.beta2!r} {opt.epsilon!r}\n".encode("ascii"))
        fh.write(f"params {len(store.names())}\n".encode("ascii"))
        for name in store.names():
            _write_named_arrays(
                fh,
                {
                    name: store.value(name),
                    f"{name}.m": opt.first_moment[name],
                    f"{name}.v": opt.second_moment[name],
                },
            )
        history = np.asarray(checkpoint.loss_history, dtype=np.float64)
        fh.write(f"history {history.size}\n".encode("ascii"))
        fh.write(np.ascontiguousarray(history, dtype="<f8").tobytes())
    return path


def _read_text_line(fh, expected_key: str) -> list[str]:
    line = fh.readline()
    if not line:
        raise CheckpointFormatError(f"truncated checkpoint: missing {expected_key!r} line")
    parts = line.decode("utf-8").rstrip("\n").split(" ", 1)
    if parts[0] != expected_key:
        raise CheckpointFormatError(f"expected {expected_key!r} line, got {parts[0]!r}")
    return parts[1:] if len(parts) > 1 else []


def _read_array_block(fh, expected_name: str) -> Array:
    line = fh.readline()
    if not line:
        raise CheckpointFormatError(f"truncated checkpoint: missing array {expected_name!r}")
    fields = line.decode("ascii").split()
    name, ndim, dims = fields[0], int(fields[1]), tuple(int(d) for d in fields[2:])
    if name != expected_name or len(dims) != ndim:
        raise CheckpointFormatError(f"corrupt array header for {expected_name!r}: {fields}")
    count = int(np.prod(dims)) if dims else 1
    payload = fh.read(count * 8)
    if len(payload) != count * 8:
        raise CheckpointFormatError(f"truncated payload for array {expected_name!r}")
    return np.frombuffer(payload, dtype="<f8").astype(np.float64).reshape(dims)


def load_checkpoint(path) -> Checkpoint:
    path = Path(path)
    with open(path, "rb") as fh:
        magic = fh.read(len(CHECKPOINT_MAGIC))
        if magic != CHECKPOINT_MAGIC:
            raise CheckpointFormatError(f"{path}: bad checkpoint magic {magic!r}")
        (version,) = _read_text_line(fh, "version")
        if int(version) != CHECKPOINT_VERSION:
            raise CheckpointFormatError(f"unsupported checkpoint version {version}")
        (config_json,) = _read_text_line(fh, "config")
        config = TrainConfig(**json.loads(config_json))
        (epoch,) = _read_text_line(fh, "epoch")
        (step,) = _read_text_line(fh, "step")
        (betas,) = _read_text_line(fh, "betas")
        beta1, beta2, epsilon = (float(x) for x in betas.split())
        (param_count,) = _read_text_line(fh, "params")
        store = ParameterStore()
        first: dict[str, Array] = {}
        second: dict[str, Array] = {}
        names: list[str] = []
        for _ in range(int(param_count)):
            position = fh.tell()
            header = fh.readline()
            if not header:
                raise CheckpointFormatError("truncated checkpoint: missing parameter block")
            name = header.decode("ascii").split()[0]
            fh.seek(position)
            store.register(name, _read_array_block(fh, name))
            first[name] = _read_array_block(fh, f"{name}.m")
            second[name] = _read_array_block(fh, f"{name}.v")
            names.append(name)
        (history_count,) = _read_text_line(fh, "history")
        count = int(history_count)
        payload = fh.read(count * 8)
        if len(payload) != count * 8:
            raise CheckpointFormatError("truncated loss history payload")
        history = np.frombuffer(payload, dtype="<f8").astype(np.float64).tolist()
    optimizer = OptimizerState(
        first_moment=first,
        second_moment=second,
        step=int(step),
        beta1=beta1,
        beta2=beta2,
        epsilon=epsilon,
    )
    return Checkpoint(
        config=config,
        epoch=int(epoch),
        store=store,
        optimizer=optimizer,
        loss_history=history,
    )


def resume_fit(
    data: TrainingData,
    checkpoint: Checkpoint,
    *,
    tau_saliency: float = DEFAULT_SALIENCY_TEMPERATURE,
) -> FitResult:
    """Continue training from a checkpoint to the configured epoch count;
    bitwise identical to the uninterrupted run."""
    return fit(
        data,
        checkpoint.config,
        store=checkpoint.store,
        optimizer=checkpoint.optimizer,
        start_epoch=checkpoint.epoch,
        loss_history=list(checkpoint.loss_history),
        tau_saliency=tau_saliency,
    )


def write_loss_csv(path, loss_history: Sequence[float]) -> Path:
    """Mirror a loss trajectory as (epoch, mean_loss) rows."""
    path = Path(path)
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("epoch,mean_loss\n")
        for epoch, value in enumerate(loss_history):
            fh.write(f"{epoch},{value:.17g}\n")
    return path
