"""Synthetic embedding-space corpus for zero-shot experiments.

Each corpus draws a small vocabulary of concept words with latent unit
vectors, assembles classes from 2-4 concepts plus a textual description that
mentions those concepts, and renders videos whose patches carry concept
vectors with additive noise. Unseen classes reuse the seen classes' concept
vocabulary, so text attributes are the bridge that makes zero-shot transfer
possible. Concept latents come from the same token hash table the text
encoder uses (keyed by the corpus seed), which plays the role of the
pretrained joint embedding space.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .attributes import ClassDescription
from .embed_io import load_embeddings, save_embeddings
from .encoders import token_vector

Array = np.ndarray

CONCEPT_VOCABULARY = (
    "ball", "rope", "water", "board", "horse", "drum", "kick", "spin",
    "jump", "throw", "glide", "climb", "swing", "punch", "dive", "brush",
    "knife", "wheel", "sand", "snow", "grass", "net", "bow", "arrow",
    "racket", "glove", "pedal", "oar", "cliff", "wave", "ice", "bar",
    "mat", "track", "ring", "puck", "club", "dough", "paint", "ladder",
)

FILLER_VOCABULARY = (
    "scene", "person", "motion", "style", "routine", "outdoor", "indoor",
    "speed", "skill", "group", "solo", "practice", "contest", "rhythm",
    "balance", "focus",
)

_FILLERS_PER_CLASS = 4
DESCRIPTION_SOURCE_TAG = "synthetic-v1"


@dataclass(frozen=True)
class SyntheticCorpusSpec:
    """Knobs for corpus generation; the seed fully determines the output."""

    num_concepts: int = 12
    seen_classes: int = 8
    unseen_classes: int = 4
    videos_per_class: int = 20
    frames: int = 8  # T
    patches_per_frame: int = 16  # N_p
    dim: int = 32  # D
    noise_scale: float = 0.1
    seed: int = 0

    def validate(self) -> None:
        counts = {
            "num_concepts": self.num_concepts,
            "seen_classes": self.seen_classes,
            "videos_per_class": self.videos_per_class,
            "frames": self.frames,
            "patches_per_frame": self.patches_per_frame,
            "dim": self.dim,
        }
        for name, value in counts.items():
            if value < 1:
                raise ValueError(f"{name} must be >= 1, got {value}")
        if self.unseen_classes < 0:
            raise ValueError("unseen_classes must be >= 0")
        if self.noise_scale < 0:
            raise ValueError("noise_scale must be >= 0")
        if self.num_concepts > len(CONCEPT_VOCABULARY):
            raise ValueError(
                f"num_concepts must be <= {len(CONCEPT_VOCABULARY)} (vocabulary size)"
            )
        if self.num_concepts < 2:
            raise ValueError("need at least 2 concepts to build distinct classes")


@dataclass(frozen=True)
class CorpusClass:
    index: int
    name: str
    concept_indices: tuple[int, ...]
    filler_words: tuple[str, ...]
    description: ClassDescription
    seen: bool


@dataclass(frozen=True)
class VideoSample:
    video_id: str
    class_index: int
    features: Array  # (T, N_p, D) raw per-patch features
    patch_concepts: Array  # (T, N_p) concept index carried by each patch


@dataclass
class SyntheticCorpus:
    spec: SyntheticCorpusSpec
    concept_words: tuple[str, ...]
    concept_vectors: Array  # (num_concepts, D)
    classes: list[CorpusClass]
    videos: list[VideoSample]

    @property
    def seen_class_indices(self) -> tuple[int, ...]:
        return tuple(c.index for c in self.classes if c.seen)

    @property
    def unseen_class_indices(self) -> tuple[int, ...]:
        return tuple(c.index for c in self.classes if not c.seen)

    def descriptions(self) -> dict[str, ClassDescription]:
        return {c.name: c.description for c in self.classes}

    def videos_of_class(self, class_index: int) -> list[VideoSample]:
        return [v for v in self.videos if v.class_index == class_index]

    def videos_of_split(self, seen: bool) -> list[VideoSample]:
        wanted = set(self.seen_class_indices if seen else self.unseen_class_indices)
        return [v for v in self.videos if v.class_index in wanted]


def _build_description(concepts: tuple[str, ...], fillers: tuple[str, ...]) -> str:
    # Scaffolding words are all stopwords, so the content words are exactly
    # the concepts (twice each, ranked first) followed by the fillers (once).
    first = "The " + " and the ".join(concepts) + " again."
    second = "A " + " with a ".join(concepts) + ","
    third = "and " + " or ".join(fillers) + "."
    return f"{first} {second} {third}"


def _draw_concept_sets(
    rng: np.random.Generator,
    count: int,
    pool: list[int],
    existing: list[frozenset[int]],
    group_overlap_limit: int,
) -> list[tuple[int, ...]]:
    """Sample concept combinations that stay distinguishable.

    Rules: no set may duplicate or be a subset/superset of any earlier set,
    and sets within this group may share at most ``group_overlap_limit``
    concepts. Constraints relax progressively if sampling stalls.
    """
    group: list[frozenset[int]] = []
    picked: list[tuple[int, ...]] = []
    for _ in range(count):
        attempts = 0
        while True:
            attempts += 1
            size = int(rng.integers(2, 5))
            size = min(size, len(pool))
            candidate = frozenset(int(i) for i in rng.choice(pool, size=size, replace=False))
            relax_overlap = attempts > 2000
            relax_subset = attempts > 6000
            ok = candidate not in existing and candidate not in group
            if ok and not relax_subset:
                for other in list(existing) + group:
                    if candidate <= other or other <= candidate:
                        ok = False
                        break
            if ok and not relax_overlap:
                for other in group:
                    if len(candidate & other) > group_overlap_limit:
                        ok = False
                        break
            if ok:
                group.append(candidate)
                picked.append(tuple(sorted(candidate)))
                break
            if attempts > 10000:
                raise ValueError(
                    "could not draw distinguishable concept sets; "
                    "increase num_concepts or reduce class counts"
                )
    return picked


def generate_synthetic_corpus(spec: SyntheticCorpusSpec) -> SyntheticCorpus:
    """Generate a corpus fully determined by ``spec.seed``."""
    spec.validate()
    rng = np.random.default_rng(spec.seed)

    word_order = rng.permutation(len(CONCEPT_VOCABULARY))[: spec.num_concepts]
    concept_words = tuple(CONCEPT_VOCABULARY[int(i)] for i in word_order)
    concept_vectors = np.stack(
        [token_vector(word, spec.seed, spec.dim) for word in concept_words]
    )

    all_concepts = list(range(spec.num_concepts))
    seen_sets = _draw_concept_sets(rng, spec.seen_classes, all_concepts, [], 1)
    seen_union = sorted({i for s in seen_sets for i in s})
    unseen_sets = _draw_concept_sets(
        rng, spec.unseen_classes, seen_union, [frozenset(s) for s in seen_sets], 1
    )

    classes: list[CorpusClass] = []
    for index, concept_set in enumerate(seen_sets + unseen_sets):
        name = f"activity{index:02d}"
        fillers = tuple(
            str(w) for w in rng.choice(FILLER_VOCABULARY, size=_FILLERS_PER_CLASS, replace=False)
        )
        concepts = tuple(concept_words[i] for i in concept_set)
        description = ClassDescription(
            class_name=name,
            description=_build_description(concepts, fillers),
            source_tag=DESCRIPTION_SOURCE_TAG,
        )
        classes.append(
            CorpusClass(
                index=index,
                name=name,
                concept_indices=concept_set,
                filler_words=fillers,
                description=description,
                seen=index < spec.seen_classes,
            )
        )

    t, n_p, d = spec.frames, spec.patches_per_frame, spec.dim
    # Most patches in a frame carry the video's own concepts; the rest are
    # off-class distractor concepts. The foreground share varies per frame so
    # temporal saliency has a real signal to latch onto.
    fg_low = max(1, (n_p + 3) // 4)
    fg_high = max(fg_low, n_p - 1)
    videos: list[VideoSample] = []
    for cls in classes:
        class_set = np.array(cls.concept_indices)
        background_pool = np.array(
            [i for i in all_concepts if i not in set(cls.concept_indices)]
        )
        if background_pool.size == 0:
            background_pool = class_set
        for v in range(spec.videos_per_class):
            patch_concepts = np.empty((t, n_p), dtype=np.int64)
            for frame in range(t):
                patch_concepts[frame] = background_pool[
                    rng.integers(0, background_pool.size, size=n_p)
                ]
                n_fg = int(rng.integers(fg_low, fg_high + 1))
                slots = rng.choice(n_p, size=n_fg, replace=False)
                patch_concepts[frame, slots] = class_set[
                    rng.integers(0, class_set.size, size=n_fg)
                ]
            features = concept_vectors[patch_concepts]
            if spec.noise_scale > 0:
                features = features + rng.standard_normal((t, n_p, d)) * spec.noise_scale
            videos.append(
                VideoSample(
                    video_id=f"vid{cls.index:02d}_{v:03d}",
                    class_index=cls.index,
                    features=np.ascontiguousarray(features),
                    patch_concepts=patch_concepts,
                )
            )

    return SyntheticCorpus(
        spec=spec,
        concept_words=concept_words,
        concept_vectors=concept_vectors,
        classes=classes,
        videos=videos,
    )


DESCRIPTIONS_FILENAME = "descriptions.jsonl"
VIDEOS_FILENAME = "videos.bin"
METADATA_FILENAME = "corpus.json"


def save_corpus(corpus: SyntheticCorpus, out_dir) -> list[Path]:
    """Write a corpus directory: descriptions.jsonl, videos.bin, corpus.json."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)

    descriptions_path = out_dir / DESCRIPTIONS_FILENAME
    with open(descriptions_path, "w", encoding="utf-8") as fh:
        for cls in corpus.classes:
            fh.write(
                json.dumps(
                    {
                        "class_name": cls.description.class_name,
                        "description": cls.description.description,
                        "source_tag": cls.description.source_tag,
                    },
                    ensure_ascii=False,
                )
                + "\n"
            )

    videos_path = out_dir / VIDEOS_FILENAME
    save_embeddings(videos_path, [video.features for video in corpus.videos])

    meta = {
        "format_version": 1,
        "spec": {
            "num_concepts": corpus.spec.num_concepts,
            "seen_classes": corpus.spec.seen_classes,
            "unseen_classes": corpus.spec.unseen_classes,
            "videos_per_class": corpus.spec.videos_per_class,
            "frames": corpus.spec.frames,
            "patches_per_frame": corpus.spec.patches_per_frame,
            "dim": corpus.spec.dim,
            "noise_scale": corpus.spec.noise_scale,
            "seed": corpus.spec.seed,
        },
        "concept_words": list(corpus.concept_words),
        "classes": [
            {
                "index": cls.index,
                "name": cls.name,
                "concept_indices": list(cls.concept_indices),
                "filler_words": list(cls.filler_words),
                "seen": cls.seen,
            }
            for cls in corpus.classes
        ],
        "videos": [
            {
                "video_id": video.video_id,
                "class_index": video.class_index,
                "patch_concepts": video.patch_concepts.tolist(),
            }
            for video in corpus.videos
        ],
    }
    metadata_path = out_dir / METADATA_FILENAME
    with open(metadata_path, "w", encoding="utf-8") as fh:
        json.dump(meta, fh, indent=1)
        fh.write("\n")
    return [descriptions_path, videos_path, metadata_path]


def load_corpus(corpus_dir) -> SyntheticCorpus:
    """Load a corpus directory written by save_corpus."""
    corpus_dir = Path(corpus_dir)
    meta = json.loads((corpus_dir / METADATA_FILENAME).read_text("utf-8"))
    if meta.get("format_version") != 1:
        raise ValueError(f"unsupported corpus format version {meta.get('format_version')!r}")
    spec = SyntheticCorpusSpec(**meta["spec"])
    spec.validate()

    concept_words = tuple(meta["concept_words"])
    concept_vectors = np.stack(
        [token_vector(word, spec.seed, spec.dim) for word in concept_words]
    )

    descriptions = {}
    for line in (corpus_dir / DESCRIPTIONS_FILENAME).read_text("utf-8").splitlines():
        if line.strip():
            payload = json.loads(line)
            descriptions[payload["class_name"]] = ClassDescription(
                class_name=payload["class_name"],
                description=payload["description"],
                source_tag=payload.get("source_tag", ""),
            )

    classes = []
    for entry in meta["classes"]:
        classes.append(
            CorpusClass(
                index=entry["index"],
                name=entry["name"],
                concept_indices=tuple(entry["concept_indices"]),
                filler_words=tuple(entry["filler_words"]),
                description=descriptions[entry["name"]],
                seen=entry["seen"],
            )
        )

    features_list = load_embeddings(corpus_dir / VIDEOS_FILENAME)
    if len(features_list) != len(meta["videos"]):
        raise ValueError(
            f"corpus metadata lists {len(meta['videos'])} videos, "
            f"container holds {len(features_list)}"
        )
    videos = []
    for entry, features in zip(meta["videos"], features_list):
        videos.append(
            VideoSample(
                video_id=entry["video_id"],
                class_index=entry["class_index"],
                features=features,
                patch_concepts=np.asarray(entry["patch_concepts"], dtype=np.int64),
            )
        )

    return SyntheticCorpus(
        spec=spec,
        concept_words=concept_words,
        concept_vectors=concept_vectors,
        classes=classes,
        videos=videos,
    )
