"""Descriptive-attribute pipeline: class descriptions in, keyword sets out.

Stages: keyword extraction through a pluggable client (a deterministic mock
or a live HTTP endpoint), stopword/duplicate filtering, top-N selection, and
composition of the final prompt sentence. Everything except the live client
is a pure function, so the mock pipeline is a deterministic test oracle.
"""

from __future__ import annotations

import json
import os
import threading
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import requests

from .encoders import tokenize

ENDPOINT_ENV_VAR = "STILAB_EXTRACTOR_ENDPOINT"
MOCK_ENDPOINT = "mock"
SENTENCE_TEMPLATE = "This is a video about {}."

DEFAULT_EXTRACTION_PROMPT = (
    "Extract 5-10 essential keywords from {description} that best describe the "
    "action {action_name} in the paragraph. Focus on objects, motions, and "
    "contexts related to the action."
)

_ENDPOINT_TIMEOUT_SECONDS = 10.0


class AttributePipelineError(Exception):
    """Base error for the attribute pipeline."""


class CorpusFormatError(AttributePipelineError):
    """A description-corpus record is malformed; carries the record index."""

    def __init__(self, message: str, record_index: int | None = None):
        super().__init__(message)
        self.record_index = record_index


class DuplicateClassError(CorpusFormatError):
    pass


class ExtractionError(AttributePipelineError):
    """The extraction client failed: unreachable endpoint, empty or
    unparseable completion."""


@dataclass(frozen=True)
class ClassDescription:
    """One action class with its free-text description."""

    class_name: str
    description: str
    source_tag: str = ""

    def __post_init__(self):
        if not self.class_name:
            raise ValueError("class_name must be non-empty")
        if not self.description:
            raise ValueError(f"description for {self.class_name!r} must be non-empty")


@dataclass(frozen=True)
class KeywordCandidateList:
    """Filtered keywords with consecutive 1-based ranks."""

    entries: tuple[tuple[str, int], ...]

    def __post_init__(self):
        seen: set[str] = set()
        for position, (keyword, rank) in enumerate(self.entries, start=1):
            if rank != position:
                raise ValueError(f"ranks must be consecutive from 1, got {rank} at {position}")
            if keyword != keyword.lower():
                raise ValueError(f"keyword {keyword!r} is not lowercase")
            if keyword in seen:
                raise ValueError(f"duplicate keyword {keyword!r}")
            seen.add(keyword)

    @property
    def keywords(self) -> tuple[str, ...]:
        return tuple(keyword for keyword, _ in self.entries)

    def __len__(self) -> int:
        return len(self.entries)


@dataclass(frozen=True)
class DescriptiveAttributeSet:
    """The selected keywords for one class.

    ``shortfall`` is set when the candidate pool was smaller than the
    requested count, in which case all candidates are kept.
    """

    class_name: str
    keywords: tuple[str, ...]
    requested_count: int
    shortfall: bool = False

    def __post_init__(self):
        if not self.class_name:
            raise ValueError("class_name must be non-empty")
        if self.requested_count < 0:
            raise ValueError("requested_count must be >= 0")
        if len(set(self.keywords)) != len(self.keywords):
            raise ValueError("keywords must be unique")
        if not self.shortfall and len(self.keywords) != self.requested_count:
            raise ValueError("keyword count must equal the requested count unless shortfall is set")


@dataclass
class ExtractionClientConfig:
    """How to reach the keyword extractor.

    ``endpoint`` is either an HTTP URL or the literal ``"mock"``. The
    STILAB_EXTRACTOR_ENDPOINT environment variable overrides it.
    """

    endpoint: str = MOCK_ENDPOINT
    sampling_temperature: float = 0.7
    max_output_tokens: int = 256
    prompt_template: str = DEFAULT_EXTRACTION_PROMPT

    def __post_init__(self):
        if self.sampling_temperature < 0:
            raise ValueError("sampling_temperature must be >= 0")
        if self.max_output_tokens < 1:
            raise ValueError("max_output_tokens must be >= 1")

    def resolved_endpoint(self) -> str:
        return os.environ.get(ENDPOINT_ENV_VAR) or self.endpoint


def load_stopwords(path=None) -> frozenset[str]:
    """Load the stopword set; defaults to the versioned file shipped in the package."""
    if path is None:
        text = resources.files("stilab").joinpath("data/stopwords.txt").read_text("utf-8")
    else:
        text = Path(path).read_text("utf-8")
    words = set()
    for line in text.splitlines():
        word = line.strip()
        if word and not word.startswith("#"):
            words.add(word)
    return frozenset(words)


_DEFAULT_STOPWORDS: frozenset[str] | None = None


def default_stopwords() -> frozenset[str]:
    global _DEFAULT_STOPWORDS
    if _DEFAULT_STOPWORDS is None:
        _DEFAULT_STOPWORDS = load_stopwords()
    return _DEFAULT_STOPWORDS


def load_description_corpus(path) -> dict[str, ClassDescription]:
    """Read a line-delimited JSON corpus of {class_name, description, source_tag}.

    Blank lines are skipped. Malformed records and duplicate class names are
    reported with their 1-based record index.
    """
    path = Path(path)
    corpus: dict[str, ClassDescription] = {}
    with open(path, "r", encoding="utf-8") as fh:
        for index, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                payload = json.loads(line)
            except json.JSONDecodeError as exc:
                raise CorpusFormatError(f"record {index}: invalid JSON: {exc}", index) from exc
            if not isinstance(payload, dict):
                raise CorpusFormatError(f"record {index}: expected an object", index)
            try:
                entry = ClassDescription(
                    class_name=payload.get("class_name", ""),
                    description=payload.get("description", ""),
                    source_tag=payload.get("source_tag", ""),
                )
            except ValueError as exc:
                raise CorpusFormatError(f"record {index}: {exc}", index) from exc
            if entry.class_name in corpus:
                raise DuplicateClassError(
                    f"record {index}: duplicate class {entry.class_name!r}", index
                )
            corpus[entry.class_name] = entry
    return corpus


def _mock_keywords(description: str, stopwords: frozenset[str]) -> list[str]:
    """Deterministic extraction stand-in: content words of the description,
    ranked by descending frequency, ties broken by first occurrence."""
    counts: dict[str, int] = {}
    first_seen: dict[str, int] = {}
    for position, token in enumerate(tokenize(description)):
        if token in stopwords:
            continue
        counts[token] = counts.get(token, 0) + 1
        first_seen.setdefault(token, position)
    return sorted(counts, key=lambda w: (-counts[w], first_seen[w]))


def _parse_endpoint_completion(text: str) -> list[str]:
    """Parse a newline- or comma-separated keyword list; anything else fails."""
    lines = [line.strip() for line in text.splitlines() if line.strip()]
    if len(lines) == 1 and "," in lines[0]:
        lines = [part.strip() for part in lines[0].split(",") if part.strip()]
    return lines


_ENDPOINT_LOCKS: dict[str, threading.Lock] = {}
_ENDPOINT_LOCKS_GUARD = threading.Lock()


def _endpoint_lock(endpoint: str) -> threading.Lock:
    # requests to one endpoint are serialized; different endpoints proceed
    # in parallel
    with _ENDPOINT_LOCKS_GUARD:
        return _ENDPOINT_LOCKS.setdefault(endpoint, threading.Lock())


def _endpoint_keywords(
    class_name: str, description: str, config: ExtractionClientConfig, endpoint: str
) -> list[str]:
    prompt = config.prompt_template.format(description=description, action_name=class_name)
    try:
        with _endpoint_lock(endpoint):
            response = requests.post(
                endpoint,
                json={
                    "prompt": prompt,
                    "temperature": config.sampling_temperature,
                    "max_tokens": config.max_output_tokens,
                },
                timeout=_ENDPOINT_TIMEOUT_SECONDS,
            )
        response.raise_for_status()
    except requests.RequestException as exc:
        raise ExtractionError(f"extraction endpoint unreachable: {endpoint}: {exc}") from exc
    keywords = _parse_endpoint_completion(response.text)
    if not keywords:
        raise ExtractionError(
            f"extraction endpoint {endpoint} returned an unparseable or empty completion"
        )
    return keywords


def extract_keywords(
    class_name: str, description: str, client: ExtractionClientConfig
) -> list[str]:
    """Raw (pre-filtering) keyword list from the configured client.

    Empty completions are an error, never a silent empty result.
    """
    if not description:
        raise ValueError("description must be non-empty")
    endpoint = client.resolved_endpoint()
    if endpoint == MOCK_ENDPOINT:
        keywords = _mock_keywords(description, default_stopwords())
        if not keywords:
            raise ExtractionError(
                f"mock extractor found no content words for class {class_name!r}"
            )
        return keywords
    return _endpoint_keywords(class_name, description, client, endpoint)


def normalize_and_filter(
    raw: Iterable[str], stopwords: frozenset[str]
) -> KeywordCandidateList:
    """Lowercase, drop stopwords, drop duplicates keeping first occurrence,
    and reassign consecutive ranks. An empty result is legal."""
    entries: list[tuple[str, int]] = []
    seen: set[str] = set()
    for keyword in raw:
        keyword = keyword.lower()
        if not keyword or keyword in stopwords or keyword in seen:
            continue
        seen.add(keyword)
        entries.append((keyword, len(entries) + 1))
    return KeywordCandidateList(tuple(entries))


def select_descriptive_attributes(
    class_name: str, candidates: KeywordCandidateList, num_attributes: int
) -> DescriptiveAttributeSet:
    """Keep the first ``num_attributes`` candidates by rank.

    A smaller pool keeps everything and sets the shortfall flag; zero keeps
    nothing (the label-only ablation arm).
    """
    if num_attributes < 0:
        raise ValueError("num_attributes must be >= 0")
    keywords = candidates.keywords[:num_attributes]
    return DescriptiveAttributeSet(
        class_name=class_name,
        keywords=keywords,
        requested_count=num_attributes,
        shortfall=len(keywords) < num_attributes,
    )


def compose_attribute_sentence(attribute_set: DescriptiveAttributeSet) -> str:
    """Single-space join of the class name and its keywords inside the
    sentence template, with a trailing period."""
    if not attribute_set.class_name:
        raise ValueError("class_name must be non-empty")
    body = " ".join((attribute_set.class_name,) + attribute_set.keywords)
    return SENTENCE_TEMPLATE.format(body)


@dataclass(frozen=True)
class AttributeRecord:
    """Serialized pipeline output for one class."""

    class_name: str
    keywords: tuple[str, ...]
    extractor: str  # "mock" | "endpoint"
    prompt_sentence: str
    shortfall: bool

    def to_json(self) -> str:
        return json.dumps(
            {
                "class": self.class_name,
                "keywords": list(self.keywords),
                "extractor": self.extractor,
                "prompt_sentence": self.prompt_sentence,
                "shortfall": self.shortfall,
            },
            ensure_ascii=False,
        )

    @classmethod
    def from_json(cls, line: str) -> "AttributeRecord":
        payload = json.loads(line)
        return cls(
            class_name=payload["class"],
            keywords=tuple(payload["keywords"]),
            extractor=payload["extractor"],
            prompt_sentence=payload["prompt_sentence"],
            shortfall=payload["shortfall"],
        )


def build_attribute_set(
    entry: ClassDescription,
    num_attributes: int,
    client: ExtractionClientConfig | None = None,
    stopwords: frozenset[str] | None = None,
) -> DescriptiveAttributeSet:
    """Run extraction + filtering + selection for one class."""
    client = client or ExtractionClientConfig()
    stopwords = stopwords if stopwords is not None else default_stopwords()
    raw = extract_keywords(entry.class_name, entry.description, client)
    candidates = normalize_and_filter(raw, stopwords)
    return select_descriptive_attributes(entry.class_name, candidates, num_attributes)


def run_attribute_pipeline(
    corpus: Mapping[str, ClassDescription],
    num_attributes: int,
    client: ExtractionClientConfig | None = None,
    stopwords: frozenset[str] | None = None,
) -> list[AttributeRecord]:
    """Produce one AttributeRecord per corpus entry, in corpus order."""
    client = client or ExtractionClientConfig()
    extractor = "mock" if client.resolved_endpoint() == MOCK_ENDPOINT else "endpoint"
    records = []
    for entry in corpus.values():
        selected = build_attribute_set(entry, num_attributes, client, stopwords)
        records.append(
            AttributeRecord(
                class_name=entry.class_name,
                keywords=selected.keywords,
                extractor=extractor,
                prompt_sentence=compose_attribute_sentence(selected),
                shortfall=selected.shortfall,
            )
        )
    return records


def save_attribute_records(path, records: Sequence[AttributeRecord]) -> Path:
    path = Path(path)
    with open(path, "w", encoding="utf-8") as fh:
        for record in records:
            fh.write(record.to_json() + "\n")
    return path


def load_attribute_records(path) -> list[AttributeRecord]:
    lines = Path(path).read_text("utf-8").splitlines()
    return [AttributeRecord.from_json(line) for line in lines if line.strip()]
