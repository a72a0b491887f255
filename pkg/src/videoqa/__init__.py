"""Desk-scale cross-modal VideoQA: data generation, training, evaluation."""

from .corpus import (
    AnnotatedExample,
    AnswerVocabulary,
    CaptionRecord,
    QATriplet,
    Sentence,
    TranscriptSegment,
    VideoFeatures,
    build_vocabulary,
    normalize_answer,
)
from .model import ModelConfig, TokenVocab, VideoQAModel, load_checkpoint, save_checkpoint
from .qagen import GenConfig, GeneratorPlugins, generate_from_caption, generate_from_transcript
from .train import TrainConfig

__all__ = [
    "AnnotatedExample",
    "AnswerVocabulary",
    "CaptionRecord",
    "GenConfig",
    "GeneratorPlugins",
    "ModelConfig",
    "QATriplet",
    "Sentence",
    "TokenVocab",
    "TrainConfig",
    "TranscriptSegment",
    "VideoFeatures",
    "VideoQAModel",
    "build_vocabulary",
    "generate_from_caption",
    "generate_from_transcript",
    "load_checkpoint",
    "normalize_answer",
    "save_checkpoint",
]

__version__ = "0.1.0"
