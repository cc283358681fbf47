"""Zero-shot and few-shot evaluation: top-k metrics, split protocols,
cross-split aggregation, and numeric saliency export."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .encoders import FrameEmbeddingSet, TextEmbeddingSequence
from .objective import BatchRecord, score_matrix
from .sti import (
    SALIENCY_SUM_TOLERANCE,
    InteractionToggles,
    STIParameters,
    saliency_rows,
    sti_forward,
)

Array = np.ndarray

TOP_K = 5
_EVAL_BATCH = 64


@dataclass(frozen=True)
class SplitSpec:
    """One evaluation split: which classes it covers and its sampling seed."""

    split_id: int
    class_indices: tuple[int, ...]
    seed: int

    def __post_init__(self):
        if self.split_id not in (1, 2, 3):
            raise ValueError("split_id must be 1, 2 or 3")
        if not self.class_indices:
            raise ValueError("split class subset must be non-empty")

    def check_zero_shot(self, train_class_indices) -> None:
        overlap = set(self.class_indices) & set(train_class_indices)
        if overlap:
            raise ValueError(f"zero-shot split overlaps training classes: {sorted(overlap)}")


@dataclass(frozen=True)
class SplitMetrics:
    split_id: int
    top1: float
    top5: float

    def __post_init__(self):
        for name, value in (("top1", self.top1), ("top5", self.top5)):
            if not 0.0 <= value <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1], got {value}")
        if self.top5 < self.top1:
            raise ValueError("top5 accuracy cannot be below top1")


@dataclass(frozen=True)
class MetricReport:
    """Per-split accuracies with their mean and sample (n-1) standard deviation."""

    per_split: tuple[SplitMetrics, ...]
    top1_mean: float
    top1_std: float
    top5_mean: float
    top5_std: float

    @classmethod
    def from_splits(cls, splits: Sequence[SplitMetrics]) -> "MetricReport":
        top1 = np.array([s.top1 for s in splits])
        top5 = np.array([s.top5 for s in splits])
        std = lambda v: float(np.std(v, ddof=1)) if len(v) > 1 else 0.0
        return cls(
            per_split=tuple(splits),
            top1_mean=float(np.mean(top1)),
            top1_std=std(top1),
            top5_mean=float(np.mean(top5)),
            top5_std=std(top5),
        )


def zero_shot_classify(
    video: FrameEmbeddingSet,
    class_texts: Sequence[TextEmbeddingSequence],
    sti_params: STIParameters,
    enc_params,
    toggles: InteractionToggles | None = None,
) -> tuple[int, Array]:
    """Predict the class with the highest cosine score for one video.

    Ties resolve to the smallest class index. Returns (index, score vector).
    """
    if len(class_texts) < 1:
        raise ValueError("need at least one candidate class")
    batch = BatchRecord(videos=(video,), labels=np.zeros(1, dtype=np.int64))
    scores = score_matrix(batch, class_texts, sti_params, enc_params, toggles)[0]
    return int(np.argmax(scores)), scores


def _topk_hits(scores: Array, labels: Array, k: int) -> Array:
    """Whether each row's true label ranks in the top k.

    Rows are ordered by descending score with ties broken toward the
    smallest class index (stable sort on the negated scores).
    """
    order = np.argsort(-scores, axis=1, kind="stable")
    return (order[:, :k] == labels[:, None]).any(axis=1)


def evaluate_split(
    videos: Sequence[FrameEmbeddingSet],
    labels,
    class_texts: Sequence[TextEmbeddingSequence],
    sti_params: STIParameters,
    enc_params,
    toggles: InteractionToggles | None = None,
) -> tuple[float, float]:
    """(top-1, top-k) accuracy over a split; k clamps to the class count."""
    labels = np.asarray(labels, dtype=np.int64)
    if len(videos) == 0:
        raise ValueError("cannot evaluate an empty split")
    if labels.shape != (len(videos),):
        raise ValueError("need one label per video")
    k = min(TOP_K, len(class_texts))
    hits1 = []
    hitsk = []
    for start in range(0, len(videos), _EVAL_BATCH):
        chunk = list(videos[start : start + _EVAL_BATCH])
        chunk_labels = labels[start : start + _EVAL_BATCH]
        batch = BatchRecord(videos=tuple(chunk), labels=np.zeros(len(chunk), dtype=np.int64))
        scores = score_matrix(batch, class_texts, sti_params, enc_params, toggles)
        hits1.append(_topk_hits(scores, chunk_labels, 1))
        hitsk.append(_topk_hits(scores, chunk_labels, k))
    top1 = float(np.concatenate(hits1).mean())
    topk = float(np.concatenate(hitsk).mean())
    return top1, topk


def aggregate_splits(values) -> tuple[float, float]:
    """Mean and sample standard deviation of exactly three split values."""
    arr = np.asarray(values, dtype=np.float64)
    if arr.shape != (3,):
        raise ValueError(f"expected exactly 3 split values, got shape {arr.shape}")
    return float(arr.mean()), float(arr.std(ddof=1))


def sample_category_subset(categories: Sequence, subset_size: int, seed: int) -> list:
    """Uniform sample without replacement, deterministic in the seed."""
    if subset_size > len(categories):
        raise ValueError(
            f"subset_size {subset_size} exceeds the {len(categories)} available categories"
        )
    if subset_size < 0:
        raise ValueError("subset_size must be >= 0")
    rng = np.random.default_rng([seed, len(categories)])
    picked = rng.permutation(len(categories))[:subset_size]
    return [categories[int(i)] for i in picked]


def evaluate_three_splits(
    videos: Sequence[FrameEmbeddingSet],
    labels,
    class_texts: Sequence[TextEmbeddingSequence],
    sti_params: STIParameters,
    enc_params,
    *,
    seed: int,
    subset_size: int | None = None,
    toggles: InteractionToggles | None = None,
) -> MetricReport:
    """Three-split protocol: per split, sample a class subset, restrict the
    videos to those classes, and score against the subset only."""
    labels = np.asarray(labels, dtype=np.int64)
    num_classes = len(class_texts)
    subset_size = num_classes if subset_size is None else subset_size
    splits = []
    for split_id in (1, 2, 3):
        chosen = sorted(
            sample_category_subset(list(range(num_classes)), subset_size, seed * 10 + split_id)
        )
        spec = SplitSpec(split_id=split_id, class_indices=tuple(chosen), seed=seed)
        remap = {old: new for new, old in enumerate(spec.class_indices)}
        keep = [i for i, label in enumerate(labels) if int(label) in remap]
        if not keep:
            raise ValueError(f"split {split_id} selected classes with no evaluation videos")
        split_videos = [videos[i] for i in keep]
        split_labels = np.array([remap[int(labels[i])] for i in keep])
        split_texts = [class_texts[i] for i in spec.class_indices]
        top1, top5 = evaluate_split(
            split_videos, split_labels, split_texts, sti_params, enc_params, toggles
        )
        splits.append(SplitMetrics(split_id=split_id, top1=top1, top5=top5))
    return MetricReport.from_splits(splits)


def write_metric_csv(path, report: MetricReport) -> Path:
    """(split_id, top1, top5) rows plus mean/std summary lines."""
    path = Path(path)
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("split_id,top1,top5\n")
        for split in report.per_split:
            fh.write(f"{split.split_id},{split.top1:.17g},{split.top5:.17g}\n")
        fh.write(f"mean,{report.top1_mean:.17g},{report.top5_mean:.17g}\n")
        fh.write(f"std,{report.top1_std:.17g},{report.top5_std:.17g}\n")
    return path


def export_saliency(
    video: FrameEmbeddingSet,
    class_text: TextEmbeddingSequence,
    sti_params: STIParameters,
    enc_params,
    path,
    toggles: InteractionToggles | None = None,
) -> Path:
    """Write per-frame (index, spatial score, temporal weight) rows.

    Values render with 17 significant digits, which round-trips float64
    exactly. The saliency column is checked to sum to 1 before writing.
    """
    from .encoders import encode_video  # local import to avoid a cycle at module load

    encoded = encode_video(video.patch_embeddings, enc_params)
    output = sti_forward(encoded, class_text, sti_params, toggles)
    total = float(output.temporal.weights.sum())
    if abs(total - 1.0) > SALIENCY_SUM_TOLERANCE:
        raise ValueError(f"saliency column sums to {total!r}, expected 1")
    path = Path(path)
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("frame_index,s_sp,s_temp\n")
        for index, spatial, temporal in saliency_rows(output):
            fh.write(f"{index},{spatial:.17g},{temporal:.17g}\n")
    return path
