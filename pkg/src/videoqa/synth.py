"""Deterministic synthetic corpus for self-contained end-to-end runs.

Each video is a sequence of scenes; a scene pairs an action word with an
object word, narrated by one ASR-style transcript segment and rendered into
the per-second feature stream as the sum of fixed hash-derived vectors for
the two content words (plus small noise). The feature stream therefore
genuinely carries the answer signal: a video-blind model can only learn the
marginal pairing statistics, which are uniform by construction.

A held-out split of fresh videos gets annotated eval records with five
consistent answers per question, phrased exactly like the fallback
generator's cloze questions so zero-shot transfer is measurable.
"""

from __future__ import annotations

import hashlib
import math
from pathlib import Path

import numpy as np

from .corpus import (
    AnnotatedExample,
    Sentence,
    TranscriptSegment,
    VideoFeatures,
    write_annotations,
    write_feature_manifest,
    write_transcripts,
    write_video_features,
)
from .qagen import GenConfig, generate_question

ACTIONS = (
    "slice chop stir wash grab lift pour shake fold press scrub rinse whisk "
    "peel crush toast grill steam roast blend knead wipe squeeze flip trim"
).split()
OBJECTS = (
    "bread spoon bowl knife cup onion carrot towel pan jar lid plate fork "
    "napkin apple lemon garlic pepper dough butter cheese egg tomato basil sponge"
).split()

TEMPLATES = (
    "{verb} the {noun}",
    "{verb} the {noun} and then do it",
    "{verb} a {noun} here",
    "{verb} this {noun} now",
)

SCENE_DURATIONS = (3.0, 3.5, 4.0, 4.5, 5.0, 5.5, 6.0)
FEATURE_NOISE = 0.1


def content_word_vector(word: str, d_v: int) -> np.ndarray:
    """Fixed unit vector for a content word, derived from a hash seed."""
    seed = int.from_bytes(hashlib.sha256(word.encode("utf-8")).digest()[:8], "little")
    vec = np.random.default_rng(seed).standard_normal(d_v)
    return (vec / np.linalg.norm(vec)).astype(np.float32)


def _scene_text(rng: np.random.Generator, verb: str, noun: str) -> str:
    template = TEMPLATES[int(rng.integers(0, len(TEMPLATES)))]
    text = template.format(verb=verb.capitalize(), noun=noun)
    if rng.random() < 0.25:
        text += "."
    return text


def _make_video(rng: np.random.Generator, video_id: str, d_v: int):
    n_scenes = int(rng.integers(4, 9))
    scenes, segments = [], []
    start = 0.0
    for _ in range(n_scenes):
        verb = ACTIONS[int(rng.integers(0, len(ACTIONS)))]
        noun = OBJECTS[int(rng.integers(0, len(OBJECTS)))]
        end = start + float(SCENE_DURATIONS[int(rng.integers(0, len(SCENE_DURATIONS)))])
        segments.append(TranscriptSegment(video_id, start, end, _scene_text(rng, verb, noun)))
        scenes.append((start, end, verb, noun))
        start = end

    total = scenes[-1][1]
    feats = np.zeros((int(math.ceil(total)), d_v), dtype=np.float32)
    for lo, hi, verb, noun in scenes:
        signal = content_word_vector(verb, d_v) + content_word_vector(noun, d_v)
        feats[int(math.floor(lo)) : int(math.ceil(hi))] = signal
    feats += FEATURE_NOISE * rng.standard_normal(feats.shape).astype(np.float32)
    return segments, scenes, VideoFeatures(video_id=video_id, features=feats)


def _eval_examples(rng: np.random.Generator, video_id: str, segments, scenes) -> list[AnnotatedExample]:
    cfg = GenConfig()
    out = []
    for segment, (lo, hi, verb, noun) in zip(segments, scenes):
        text = segment.text.rstrip(".!?") + "."
        sentence = Sentence(text=text, start_s=lo, end_s=hi, video_id=video_id)
        if rng.random() < 0.5:
            answer, answer_type = noun, "object"
        else:
            answer, answer_type = verb, "action"
        question = generate_question(sentence, answer, cfg)
        out.append(
            AnnotatedExample(
                video_id=video_id,
                question=question,
                answers=[answer] * 5,
                answer_type=answer_type,
                start_s=lo,
                end_s=hi,
            )
        )
    return out


def build_synth_corpus(out_dir: str | Path, n_videos: int, seed: int, d_v: int = 32) -> dict[str, Path]:
    """Write a toy corpus under out_dir and return the paths of its pieces.

    Produces transcripts for n_videos training videos, features for training
    plus held-out videos, an annotated eval split over the held-out videos,
    and the 50-entry answer vocabulary (all action and object words).
    """
    if n_videos < 1:
        raise ValueError("n_videos must be >= 1")
    out_dir = Path(out_dir)
    feature_dir = out_dir / "features"
    feature_dir.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)

    transcripts: dict[str, list[TranscriptSegment]] = {}
    manifest: dict[str, str] = {}
    eval_examples: list[AnnotatedExample] = []

    for i in range(n_videos):
        video_id = f"vid{i:04d}"
        segments, _, vf = _make_video(rng, video_id, d_v)
        transcripts[video_id] = segments
        write_video_features(vf, feature_dir / f"{video_id}.vqf")
        manifest[video_id] = f"{video_id}.vqf"

    n_holdout = max(1, n_videos // 5)
    for i in range(n_holdout):
        video_id = f"holdout{i:04d}"
        segments, scenes, vf = _make_video(rng, video_id, d_v)
        write_video_features(vf, feature_dir / f"{video_id}.vqf")
        manifest[video_id] = f"{video_id}.vqf"
        eval_examples.extend(_eval_examples(rng, video_id, segments, scenes))

    paths = {
        "transcripts": out_dir / "transcripts.jsonl",
        "eval": out_dir / "eval.jsonl",
        "vocab": out_dir / "vocab.txt",
        "manifest": feature_dir / "manifest.jsonl",
    }
    write_transcripts(transcripts, paths["transcripts"])
    write_annotations(eval_examples, paths["eval"])
    paths["vocab"].write_text("".join(w + "\n" for w in sorted(ACTIONS + OBJECTS)), encoding="utf-8")
    write_feature_manifest(manifest, paths["manifest"])
    return paths
