"""Cross-modal question-answer generation from transcripts and captions.

The pipeline turns timestamped ASR segments into sentences, extracts
candidate answer spans, rewrites each sentence into a cloze question, and
emits clip-aligned (video, question, answer) triplets. Each neural stage
(punctuator, answer extractor, question generator) is a plug-in behind a
plain-callable interface with a deterministic rule-based fallback, so the
whole pipeline runs offline and reproducibly.
"""

from __future__ import annotations

import json
import string
import subprocess
from dataclasses import dataclass, field
from typing import Callable, Optional

from .corpus import (
    CaptionRecord,
    QATriplet,
    Sentence,
    TranscriptSegment,
    normalize_answer,
    normalize_segments,
)
from .stoplist import FUNCTION_WORDS, STOPLIST_VERSION  # noqa: F401  (version re-exported)

SENTENCE_TERMINALS = ".!?"
FALLBACK_SENTENCE_CAP = 24  # hard break after this many tokens without punctuation


class GenerationError(Exception):
    """A generation stage failed for one sentence/answer; callers skip and count."""


@dataclass
class GenConfig:
    max_tokens_per_text: int = 32
    max_answers_per_sentence: int = 3
    answer_max_words: int = 4
    beam_width_hint: int = 4  # forwarded to neural plug-ins; fallbacks ignore it

    def __post_init__(self):
        for name in ("max_tokens_per_text", "max_answers_per_sentence", "answer_max_words", "beam_width_hint"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")


@dataclass
class GenReport:
    """Counts accumulated over one generation run."""

    videos: int = 0
    segments_dropped: int = 0
    sentences: int = 0
    sentences_skipped: int = 0
    answers: int = 0
    questions_failed: int = 0
    triplets: int = 0

    def merge(self, other: "GenReport") -> None:
        for name in self.__dataclass_fields__:
            setattr(self, name, getattr(self, name) + getattr(other, name))

    def to_dict(self) -> dict:
        return {name: getattr(self, name) for name in self.__dataclass_fields__}


# ---------------------------------------------------------------------------
# token helpers


def truncate_tokens(text: str, max_tokens: int) -> str:
    tokens = text.split()
    return " ".join(tokens[:max_tokens])


def _strip_token(token: str) -> str:
    """Token key for stoplist lookups: lowercased, edge punctuation removed."""
    return token.lower().strip(string.punctuation)


def _normalized_tokens(text: str) -> list[str]:
    return [k for k in (_strip_token(t) for t in text.split()) if k]


def _find_token_span(haystack: list[str], needle: list[str]) -> int:
    """First index where needle occurs contiguously in haystack, else -1."""
    if not needle or len(needle) > len(haystack):
        return -1
    for i in range(len(haystack) - len(needle) + 1):
        if haystack[i : i + len(needle)] == needle:
            return i
    return -1


# ---------------------------------------------------------------------------
# adjacent-clip word-repetition removal


def dedup_adjacent_repetitions(segments: list[TranscriptSegment]) -> list[TranscriptSegment]:
    """Remove the longest token overlap between each consecutive segment pair.

    The longest suffix of the previous surviving segment that equals a prefix
    of the next segment is dropped from the next segment; segments emptied by
    the removal are dropped entirely.
    """
    out: list[TranscriptSegment] = []
    for seg in segments:
        tokens = seg.tokens()
        if out:
            prev = out[-1].tokens()
            for k in range(min(len(prev), len(tokens)), 0, -1):
                if prev[-k:] == tokens[:k]:
                    tokens = tokens[k:]
                    break
        if not tokens:
            continue
        out.append(TranscriptSegment(seg.video_id, seg.start_s, seg.end_s, " ".join(tokens)))
    return out


# ---------------------------------------------------------------------------
# fallback plug-ins


def fallback_punctuate_text(raw_text: str) -> str:
    """Rule-based punctuator over newline-delimited segment text.

    Breaks at existing terminal punctuation, at segment boundaries whose next
    token is capitalized and not a function word, and unconditionally after
    FALLBACK_SENTENCE_CAP tokens. Token-preserving: the output contains the
    input tokens in order, with "." appended at inserted breaks.
    """
    tokens: list[str] = []
    starts_segment: list[bool] = []
    for line in raw_text.split("\n"):
        for j, tok in enumerate(line.split()):
            tokens.append(tok)
            starts_segment.append(j == 0)
    out: list[str] = []
    run = 0
    for i, tok in enumerate(tokens):
        out.append(tok)
        run += 1
        if tok[-1] in SENTENCE_TERMINALS:
            run = 0
            continue
        nxt = tokens[i + 1] if i + 1 < len(tokens) else None
        boundary_break = (
            nxt is not None
            and starts_segment[i + 1]
            and nxt[:1].isupper()
            and _strip_token(nxt) not in FUNCTION_WORDS
        )
        if boundary_break or run >= FALLBACK_SENTENCE_CAP or nxt is None:
            out[-1] = tok + "."
            run = 0
    return " ".join(out)


def fallback_extract_answers(sentence_text: str) -> list[str]:
    """Maximal token spans free of function words, left to right.

    Span tokens are emitted with edge punctuation stripped, so "the bowl."
    yields "bowl".
    """
    spans: list[str] = []
    current: list[str] = []
    for tok in sentence_text.split():
        key = _strip_token(tok)
        if not key or key in FUNCTION_WORDS:
            if current:
                spans.append(" ".join(current))
            current = []
        else:
            current.append(key)
    if current:
        spans.append(" ".join(current))
    return spans


def fallback_generate_question(sentence_text: str, answer: str) -> str:
    """Cloze rewrite: replace the answer span with "what" and ask.

    Raises GenerationError when the answer is not a token span of the
    sentence.
    """
    tokens = sentence_text.split()
    where = _find_token_span([_strip_token(t) for t in tokens], _normalized_tokens(answer))
    if where < 0:
        raise GenerationError(f"answer span {answer!r} not found in sentence")
    n = len(_normalized_tokens(answer))
    out = tokens[:where] + ["what"] + tokens[where + n :]
    text = " ".join(out).rstrip(SENTENCE_TERMINALS + ",").rstrip()
    if not text:
        raise GenerationError("sentence empty after cloze rewrite")
    return text[0].upper() + text[1:] + "?"


@dataclass
class GeneratorPlugins:
    """The three generation stages as plain callables.

    punctuator: raw text (segments newline-delimited) -> punctuated text.
    answer_extractor: sentence text -> candidate answer spans.
    question_generator: (sentence text, answer) -> question.
    """

    punctuator: Callable[[str], str] = field(default=fallback_punctuate_text)
    answer_extractor: Callable[[str], list[str]] = field(default=fallback_extract_answers)
    question_generator: Callable[[str, str], str] = field(default=fallback_generate_question)


# ---------------------------------------------------------------------------
# sentence segmentation with timestamp alignment


def punctuate(segments: list[TranscriptSegment], plugins: GeneratorPlugins | None = None) -> list[Sentence]:
    """Split one video's deduplicated segments into timestamp-aligned sentences.

    Each sentence spans from the start of the segment holding its first token
    to the end of the segment holding its last token. The punctuator plug-in
    is expected to preserve tokens; extra or missing tokens degrade alignment
    to index clamping rather than failing.
    """
    plugins = plugins or GeneratorPlugins()
    if not segments:
        return []
    video_id = segments[0].video_id
    seg_of_token: list[int] = []
    for si, seg in enumerate(segments):
        seg_of_token.extend([si] * len(seg.tokens()))
    if not seg_of_token:
        return []
    raw = "\n".join(" ".join(seg.tokens()) for seg in segments)
    punctuated = plugins.punctuator(raw)

    # Merge punctuation-only tokens into their predecessor before alignment.
    out_tokens: list[str] = []
    for tok in punctuated.split():
        if not _strip_token(tok) and out_tokens:
            out_tokens[-1] += tok
        else:
            out_tokens.append(tok)

    sentences: list[Sentence] = []
    current: list[str] = []
    first_in = last_in = 0
    for i, tok in enumerate(out_tokens):
        in_idx = min(i, len(seg_of_token) - 1)
        if not current:
            first_in = in_idx
        current.append(tok)
        last_in = in_idx
        if tok[-1] in SENTENCE_TERMINALS or i == len(out_tokens) - 1:
            terminal = tok[-1] if tok[-1] in SENTENCE_TERMINALS else "."
            body = current[:-1] + [current[-1].rstrip(SENTENCE_TERMINALS)]
            text = " ".join(t for t in body if t).rstrip()
            if text:
                sentences.append(
                    Sentence(
                        text=text + terminal,
                        start_s=segments[seg_of_token[first_in]].start_s,
                        end_s=segments[seg_of_token[last_in]].end_s,
                        video_id=video_id,
                    )
                )
            current = []
    return sentences


# ---------------------------------------------------------------------------
# per-sentence stages


def extract_answers(sentence: Sentence, cfg: GenConfig, plugins: GeneratorPlugins | None = None) -> list[str]:
    """Candidate answers for one sentence, validated against the pipeline contract.

    Plug-in outputs are filtered: every kept answer is a contiguous token span
    of the (truncated) sentence and at most answer_max_words after
    normalization; at most max_answers_per_sentence survive.
    """
    plugins = plugins or GeneratorPlugins()
    text = truncate_tokens(sentence.text, cfg.max_tokens_per_text)
    sent_keys = _normalized_tokens(text)
    out: list[str] = []
    for span in plugins.answer_extractor(text):
        norm = normalize_answer(span)
        if not norm or len(norm.split()) > cfg.answer_max_words:
            continue
        if _find_token_span(sent_keys, _normalized_tokens(span)) < 0:
            continue
        out.append(span)
        if len(out) >= cfg.max_answers_per_sentence:
            break
    return out


def generate_question(
    sentence: Sentence, answer: str, cfg: GenConfig, plugins: GeneratorPlugins | None = None
) -> str:
    """One question for (sentence, answer), with well-formedness enforced.

    The produced question ends in "?" and must not contain the normalized
    answer; violations raise GenerationError and the triplet is skipped.
    """
    plugins = plugins or GeneratorPlugins()
    text = truncate_tokens(sentence.text, cfg.max_tokens_per_text)
    question = plugins.question_generator(text, answer)
    if not question or not question.strip():
        raise GenerationError("empty question")
    question = question.strip()
    if not question.endswith("?"):
        question = question.rstrip(SENTENCE_TERMINALS + ",").rstrip() + "?"
    if _find_token_span(_normalized_tokens(question), _normalized_tokens(answer)) >= 0:
        raise GenerationError(f"question still contains its answer {answer!r}")
    return question


def _triplets_for_sentence(
    sentence: Sentence, cfg: GenConfig, plugins: GeneratorPlugins, report: GenReport
) -> list[QATriplet]:
    report.sentences += 1
    try:
        answers = extract_answers(sentence, cfg, plugins)
    except Exception:
        answers = []
    if not answers:
        report.sentences_skipped += 1
        return []
    out = []
    for answer in answers:
        report.answers += 1
        try:
            question = generate_question(sentence, answer, cfg, plugins)
        except Exception:
            report.questions_failed += 1
            continue
        out.append(
            QATriplet(
                video_id=sentence.video_id,
                start_s=sentence.start_s,
                end_s=sentence.end_s,
                question=question,
                answer=normalize_answer(answer),
            )
        )
    report.triplets += len(out)
    return out


# ---------------------------------------------------------------------------
# full pipelines


def generate_from_transcript(
    segments: list[TranscriptSegment],
    cfg: GenConfig | None = None,
    plugins: GeneratorPlugins | None = None,
) -> tuple[list[QATriplet], GenReport]:
    """dedup -> punctuate -> extract answers x generate question, for one video.

    Per-sentence failures are skipped and counted in the report; nothing
    propagates.
    """
    cfg = cfg or GenConfig()
    plugins = plugins or GeneratorPlugins()
    report = GenReport(videos=1)
    cleaned, dropped = normalize_segments(segments)
    report.segments_dropped = dropped
    cleaned = dedup_adjacent_repetitions(cleaned)
    triplets: list[QATriplet] = []
    for sentence in punctuate(cleaned, plugins):
        triplets.extend(_triplets_for_sentence(sentence, cfg, plugins, report))
    return triplets, report


def generate_from_caption(
    record: CaptionRecord,
    cfg: GenConfig | None = None,
    plugins: GeneratorPlugins | None = None,
) -> tuple[list[QATriplet], GenReport]:
    """Caption variant: no punctuation stage, clips span the whole video."""
    cfg = cfg or GenConfig()
    plugins = plugins or GeneratorPlugins()
    report = GenReport(videos=1)
    text = record.caption.strip()
    if not text:
        return [], report
    if text[-1] not in SENTENCE_TERMINALS:
        text += "."
    sentence = Sentence(text=text, start_s=0.0, end_s=record.duration_s, video_id=record.video_id)
    return _triplets_for_sentence(sentence, cfg, plugins, report), report


# ---------------------------------------------------------------------------
# external-command plug-ins (line-delimited JSON over stdin/stdout)


class ExternalCommandPlugins:
    """Drive all three stages through a child process.

    Requests are one JSON object per line: {"stage": "punctuate"|"extract"|
    "question", "sentence": str, "answer": str (question stage only),
    "beam_width": int}. Responses are {"outputs": [...]} on one line.
    """

    def __init__(self, command: list[str], beam_width: int = 4):
        self.command = command
        self.beam_width = beam_width
        self._proc: Optional[subprocess.Popen] = None

    def _ensure(self) -> subprocess.Popen:
        if self._proc is None or self._proc.poll() is not None:
            self._proc = subprocess.Popen(
                self.command,
                stdin=subprocess.PIPE,
                stdout=subprocess.PIPE,
                text=True,
                bufsize=1,
            )
        return self._proc

    def _call(self, payload: dict) -> list:
        proc = self._ensure()
        try:
            proc.stdin.write(json.dumps(payload) + "\n")
            proc.stdin.flush()
            line = proc.stdout.readline()
        except (BrokenPipeError, OSError) as exc:
            raise GenerationError(f"plugin process failed: {exc}") from exc
        if not line:
            raise GenerationError("plugin process closed its stdout")
        try:
            obj = json.loads(line)
            outputs = obj["outputs"]
        except (json.JSONDecodeError, KeyError, TypeError) as exc:
            raise GenerationError(f"bad plugin response {line!r}") from exc
        if not isinstance(outputs, list):
            raise GenerationError("plugin 'outputs' must be a list")
        return outputs

    def punctuator(self, text: str) -> str:
        out = self._call({"stage": "punctuate", "sentence": text, "beam_width": self.beam_width})
        if not out:
            raise GenerationError("punctuate stage returned no output")
        return str(out[0])

    def answer_extractor(self, text: str) -> list[str]:
        return [str(s) for s in self._call({"stage": "extract", "sentence": text, "beam_width": self.beam_width})]

    def question_generator(self, text: str, answer: str) -> str:
        out = self._call(
            {"stage": "question", "sentence": text, "answer": answer, "beam_width": self.beam_width}
        )
        if not out:
            raise GenerationError("question stage returned no output")
        return str(out[0])

    def as_plugins(self) -> GeneratorPlugins:
        return GeneratorPlugins(
            punctuator=self.punctuator,
            answer_extractor=self.answer_extractor,
            question_generator=self.question_generator,
        )

    def close(self) -> None:
        if self._proc is not None and self._proc.poll() is None:
            self._proc.stdin.close()
            self._proc.wait(timeout=5)
        self._proc = None

    def __enter__(self) -> "ExternalCommandPlugins":
        return self

    def __exit__(self, *exc) -> None:
        self.close()
