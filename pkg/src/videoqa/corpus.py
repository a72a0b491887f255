"""Data model and file formats for transcript-grounded VideoQA corpora.

Covers answer normalization, answer-vocabulary construction, JSONL
ingestion of transcripts/captions/triplets/annotations, and the binary
per-video feature files standing in for a frozen video backbone.

All readers raise :class:`CorpusError` with a line number for malformed
lines and the offending key name for missing fields. All writers produce
deterministic byte output for identical inputs.
"""

from __future__ import annotations

import json
import math
import re
import struct
from collections import Counter
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Optional

import numpy as np

FEATURE_MAGIC = b"VQF1"

_WS_RE = re.compile(r"\s+")
_TERMINAL_PUNCT = ".,!?"


class CorpusError(ValueError):
    """Malformed corpus data. Carries line number / field name when known."""

    def __init__(self, message: str, *, line: int | None = None, field: str | None = None):
        if field is not None:
            message = f"missing or invalid field '{field}': {message}"
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
        self.line = line
        self.field = field


# ---------------------------------------------------------------------------
# domain types


@dataclass
class TranscriptSegment:
    """One timestamped piece of ASR output for a video."""

    video_id: str
    start_s: float
    end_s: float
    text: str

    def tokens(self) -> list[str]:
        return self.text.split()


@dataclass
class CaptionRecord:
    """Whole-video alt-text description."""

    video_id: str
    caption: str
    duration_s: float


@dataclass
class Sentence:
    """A punctuated sentence aligned to a clip of its source video."""

    text: str
    start_s: float
    end_s: float
    video_id: str

    def tokens(self) -> list[str]:
        return self.text.split()


@dataclass
class QATriplet:
    """A (video clip, question, answer) training unit. Answers are normalized."""

    video_id: str
    start_s: float
    end_s: float
    question: str
    answer: str


@dataclass
class VideoFeatures:
    """Per-second feature matrix [T x d_v] from the frozen video backbone."""

    video_id: str
    features: np.ndarray

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float32)
        if self.features.ndim != 2 or self.features.shape[0] < 1:
            raise CorpusError(f"features for {self.video_id!r} must be a [T x d_v] matrix with T >= 1")
        if not np.isfinite(self.features).all():
            raise CorpusError(f"features for {self.video_id!r} contain NaN/Inf")


@dataclass
class AnnotatedExample:
    """A manually annotated evaluation record with 1..5 ground-truth answers."""

    video_id: str
    question: str
    answers: list[str]
    answer_type: Optional[str] = None
    start_s: Optional[float] = None
    end_s: Optional[float] = None
    candidates: Optional[list[str]] = None  # multiple-choice option lists, when present


@dataclass
class AnswerVocabulary:
    """Ordered answer set with its construction policy.

    Entries are unique normalized strings ordered by descending training
    frequency, ties broken lexicographically ascending.
    """

    entries: list[str]
    index: dict[str, int]
    min_count: int = 1
    max_size: Optional[int] = None

    def __len__(self) -> int:
        return len(self.entries)

    def __contains__(self, answer: str) -> bool:
        return answer in self.index

    def save(self, path: str | Path) -> None:
        Path(path).write_text("".join(a + "\n" for a in self.entries), encoding="utf-8")

    @classmethod
    def load(cls, path: str | Path) -> "AnswerVocabulary":
        entries = [line for line in Path(path).read_text(encoding="utf-8").splitlines() if line]
        return cls(entries=entries, index={a: i for i, a in enumerate(entries)})


# ---------------------------------------------------------------------------
# answer normalization and vocabulary construction


def normalize_answer(text: str) -> str:
    """Canonical answer form used for matching and dedup keys.

    Lowercases, collapses whitespace, strips leading/trailing whitespace
    and trailing terminal punctuation. An empty result is legal and means
    "unanswerable" to callers.
    """
    out = _WS_RE.sub(" ", text.lower()).strip()
    out = out.rstrip(_TERMINAL_PUNCT).rstrip()
    return out


def build_vocabulary(
    answers: Iterable[str], min_count: int = 1, max_size: int | None = None
) -> AnswerVocabulary:
    """Build the fixed answer vocabulary from a stream of normalized answers.

    Keeps answers seen at least ``min_count`` times; when ``max_size`` is set,
    keeps the ``max_size`` most frequent. Empty strings are never included.
    """
    if min_count < 1:
        raise ValueError("min_count must be >= 1")
    counts = Counter(a for a in answers if a)
    kept = [(a, c) for a, c in counts.items() if c >= min_count]
    kept.sort(key=lambda ac: (-ac[1], ac[0]))
    if max_size is not None:
        kept = kept[:max_size]
    entries = [a for a, _ in kept]
    return AnswerVocabulary(
        entries=entries,
        index={a: i for i, a in enumerate(entries)},
        min_count=min_count,
        max_size=max_size,
    )


def answer_frequencies(answers: Iterable[str]) -> Counter:
    """Frequency table of normalized answers, for quartile analysis."""
    return Counter(normalize_answer(a) for a in answers)


# ---------------------------------------------------------------------------
# JSONL I/O


def _iter_jsonl(path: str | Path):
    with open(path, encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            raw = raw.strip()
            if not raw:
                continue
            try:
                obj = json.loads(raw)
            except json.JSONDecodeError as exc:
                raise CorpusError(f"invalid JSON: {exc.msg}", line=lineno) from exc
            if not isinstance(obj, dict):
                raise CorpusError("expected a JSON object", line=lineno)
            yield lineno, obj


def _get(obj: dict, key: str, lineno: int, kind=None):
    if key not in obj:
        raise CorpusError("required by the record schema", line=lineno, field=key)
    value = obj[key]
    if kind is not None:
        try:
            value = kind(value)
        except (TypeError, ValueError) as exc:
            raise CorpusError(str(exc), line=lineno, field=key) from exc
    return value


def read_triplets(path: str | Path) -> list[QATriplet]:
    """Read QATriplets from JSON-lines, one object per line."""
    out = []
    for lineno, obj in _iter_jsonl(path):
        out.append(
            QATriplet(
                video_id=_get(obj, "video_id", lineno, str),
                start_s=_get(obj, "start_s", lineno, float),
                end_s=_get(obj, "end_s", lineno, float),
                question=_get(obj, "question", lineno, str),
                answer=_get(obj, "answer", lineno, str),
            )
        )
    return out


def write_triplets(triplets: Iterable[QATriplet], path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for t in triplets:
            fh.write(
                json.dumps(
                    {
                        "video_id": t.video_id,
                        "start_s": t.start_s,
                        "end_s": t.end_s,
                        "question": t.question,
                        "answer": t.answer,
                    },
                    ensure_ascii=False,
                )
                + "\n"
            )


def read_transcripts(path: str | Path) -> dict[str, list[TranscriptSegment]]:
    """Read per-video transcripts: {"video_id", "segments":[{start_s,end_s,text}...]}."""
    out: dict[str, list[TranscriptSegment]] = {}
    for lineno, obj in _iter_jsonl(path):
        video_id = _get(obj, "video_id", lineno, str)
        segments = []
        for seg in _get(obj, "segments", lineno, list):
            if not isinstance(seg, dict):
                raise CorpusError("segment entries must be objects", line=lineno, field="segments")
            segments.append(
                TranscriptSegment(
                    video_id=video_id,
                    start_s=_get(seg, "start_s", lineno, float),
                    end_s=_get(seg, "end_s", lineno, float),
                    text=_get(seg, "text", lineno, str),
                )
            )
        out[video_id] = segments
    return out


def write_transcripts(transcripts: dict[str, list[TranscriptSegment]], path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for video_id, segments in transcripts.items():
            fh.write(
                json.dumps(
                    {
                        "video_id": video_id,
                        "segments": [
                            {"start_s": s.start_s, "end_s": s.end_s, "text": s.text}
                            for s in segments
                        ],
                    },
                    ensure_ascii=False,
                )
                + "\n"
            )


def read_captions(path: str | Path) -> list[CaptionRecord]:
    out = []
    for lineno, obj in _iter_jsonl(path):
        out.append(
            CaptionRecord(
                video_id=_get(obj, "video_id", lineno, str),
                caption=_get(obj, "caption", lineno, str),
                duration_s=_get(obj, "duration_s", lineno, float),
            )
        )
    return out


def write_captions(records: Iterable[CaptionRecord], path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for r in records:
            fh.write(
                json.dumps(
                    {"video_id": r.video_id, "caption": r.caption, "duration_s": r.duration_s},
                    ensure_ascii=False,
                )
                + "\n"
            )


def read_annotations(path: str | Path) -> list[AnnotatedExample]:
    """Read annotated eval records. Ground-truth answers are normalized on read."""
    out = []
    for lineno, obj in _iter_jsonl(path):
        answers = [normalize_answer(str(a)) for a in _get(obj, "answers", lineno, list)]
        if not answers:
            raise CorpusError("must contain at least one answer", line=lineno, field="answers")
        candidates = obj.get("candidates")
        if candidates is not None:
            candidates = [normalize_answer(str(c)) for c in candidates]
        out.append(
            AnnotatedExample(
                video_id=_get(obj, "video_id", lineno, str),
                question=_get(obj, "question", lineno, str),
                answers=answers,
                answer_type=obj.get("answer_type"),
                start_s=float(obj["start_s"]) if "start_s" in obj else None,
                end_s=float(obj["end_s"]) if "end_s" in obj else None,
                candidates=candidates,
            )
        )
    return out


def write_annotations(examples: Iterable[AnnotatedExample], path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for ex in examples:
            obj = {"video_id": ex.video_id, "question": ex.question, "answers": ex.answers}
            if ex.answer_type is not None:
                obj["answer_type"] = ex.answer_type
            if ex.start_s is not None:
                obj["start_s"] = ex.start_s
            if ex.end_s is not None:
                obj["end_s"] = ex.end_s
            if ex.candidates is not None:
                obj["candidates"] = ex.candidates
            fh.write(json.dumps(obj, ensure_ascii=False) + "\n")


# ---------------------------------------------------------------------------
# segment ingestion normalization


def normalize_segments(
    segments: list[TranscriptSegment],
) -> tuple[list[TranscriptSegment], int]:
    """Sort segments, drop empty/zero-duration ones, and resolve overlaps.

    Overlapping starts are clamped to the previous segment's end. Returns the
    cleaned list and the number of dropped segments.
    """
    dropped = 0
    ordered = sorted(segments, key=lambda s: (s.start_s, s.end_s))
    out: list[TranscriptSegment] = []
    for seg in ordered:
        start, end, text = seg.start_s, seg.end_s, seg.text.strip()
        if out and start < out[-1].end_s:
            start = out[-1].end_s
        if not text or not (end > start):
            dropped += 1
            continue
        out.append(TranscriptSegment(seg.video_id, start, end, text))
    return out, dropped


# ---------------------------------------------------------------------------
# feature files: magic "VQF1", uint32 T, uint32 d_v, then T*d_v float32 rows


def write_video_features(vf: VideoFeatures, path: str | Path) -> None:
    t, d_v = vf.features.shape
    with open(path, "wb") as fh:
        fh.write(FEATURE_MAGIC)
        fh.write(struct.pack("<II", t, d_v))
        fh.write(np.ascontiguousarray(vf.features, dtype="<f4").tobytes())


def read_video_features(path: str | Path, video_id: str | None = None) -> VideoFeatures:
    path = Path(path)
    raw = path.read_bytes()
    if raw[:4] != FEATURE_MAGIC:
        raise CorpusError(f"{path}: bad magic, not a feature file")
    t, d_v = struct.unpack("<II", raw[4:12])
    body = raw[12:]
    if len(body) != 4 * t * d_v:
        raise CorpusError(f"{path}: expected {4 * t * d_v} data bytes, found {len(body)}")
    feats = np.frombuffer(body, dtype="<f4").reshape(t, d_v).copy()
    return VideoFeatures(video_id=video_id or path.stem, features=feats)


def write_feature_manifest(entries: dict[str, str | Path], path: str | Path) -> None:
    """Manifest JSONL {"video_id","path"}; paths stored as given."""
    with open(path, "w", encoding="utf-8") as fh:
        for video_id, fpath in entries.items():
            fh.write(json.dumps({"video_id": video_id, "path": str(fpath)}) + "\n")


class FeatureStore:
    """Lazy loader over a feature manifest. Relative paths resolve against it."""

    def __init__(self, manifest_path: str | Path):
        self.manifest_path = Path(manifest_path)
        base = self.manifest_path.parent
        self.paths: dict[str, Path] = {}
        for lineno, obj in _iter_jsonl(manifest_path):
            video_id = _get(obj, "video_id", lineno, str)
            p = Path(_get(obj, "path", lineno, str))
            self.paths[video_id] = p if p.is_absolute() else base / p
        self._cache: dict[str, VideoFeatures] = {}

    def __contains__(self, video_id: str) -> bool:
        return video_id in self.paths

    def get(self, video_id: str) -> VideoFeatures:
        if video_id not in self._cache:
            if video_id not in self.paths:
                raise KeyError(f"no features for video {video_id!r}")
            self._cache[video_id] = read_video_features(self.paths[video_id], video_id)
        return self._cache[video_id]

    def clip(self, video_id: str, start_s: float | None, end_s: float | None) -> VideoFeatures:
        """Rows covering [start_s, end_s); whole video when bounds are None."""
        vf = self.get(video_id)
        if start_s is None or end_s is None:
            return vf
        t = vf.features.shape[0]
        lo = min(max(int(math.floor(start_s)), 0), t - 1)
        hi = max(min(int(math.ceil(end_s)), t), lo + 1)
        return VideoFeatures(video_id=video_id, features=vf.features[lo:hi])


def sample_features(vf: VideoFeatures, t: int) -> tuple[np.ndarray, np.ndarray]:
    """Sample the feature matrix at t equally spaced rows, padding short videos.

    Returns (matrix [t x d_v], validity mask [t]). For T >= t, rows are taken
    at round(i*(T-1)/(t-1)) with half-up rounding so the first and last seconds
    are always represented; for T < t, the T rows are copied and zero-padded.
    """
    if t < 1:
        raise ValueError("t must be >= 1")
    feats = vf.features
    big_t, d_v = feats.shape
    if big_t >= t:
        if t == 1:
            idx = np.zeros(1, dtype=np.int64)
        else:
            pos = np.arange(t, dtype=np.float64) * (big_t - 1) / (t - 1)
            idx = np.floor(pos + 0.5).astype(np.int64)
        return feats[idx].copy(), np.ones(t, dtype=bool)
    out = np.zeros((t, d_v), dtype=np.float32)
    out[:big_t] = feats
    mask = np.zeros(t, dtype=bool)
    mask[:big_t] = True
    return out, mask
