"""Training objectives and loops for the joint-embedding VideoQA model.

Implements contrastive pretraining with duplicate-negative removal, the
full-vocabulary finetuning objective (equivalent to softmax cross-entropy),
multiple-choice finetuning, masked-language-model regularization on question
tokens, the binary cross-modal matching baseline, grouped-by-video batch
construction, a cosine learning-rate schedule, and the feature-probe mode
that updates only the two final projection heads.
"""

from __future__ import annotations

import json
import logging
import math
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np
import torch
import torch.nn.functional as F

from .corpus import AnnotatedExample, AnswerVocabulary, FeatureStore, QATriplet, normalize_answer, sample_features
from .model import (
    NUM_SPECIAL_TOKENS,
    PROBE_HEAD_PARAMS,
    MASK_ID,
    ModelConfig,
    TokenVocab,
    TokenizedText,
    VideoQAModel,
    tokenize,
)

logger = logging.getLogger(__name__)

MLM_IGNORE_INDEX = -100

TRAIN_MODES = ("pretrain", "finetune", "probe", "multiple_choice", "matching_baseline")


@dataclass
class TrainConfig:
    """Optimization settings. Defaults are desk-scale; full-scale presets below."""

    clips_per_batch: int = 32
    videos_per_batch: int = 4
    epochs: int = 10
    lr0: float = 2e-3
    seed: int = 0
    mode: str = "pretrain"
    input_mode: str = "vqa"  # "qa_only" zeroes the video input (video-blind baseline)
    mlm_enabled: bool = True
    mlm_prob: float = 0.15
    mlm_split: tuple[float, float, float] = (0.8, 0.1, 0.1)
    adam_betas: tuple[float, float] = (0.9, 0.999)
    adam_eps: float = 1e-8
    val_fraction: float = 0.1

    @classmethod
    def pretrain_full_scale(cls) -> "TrainConfig":
        return cls(clips_per_batch=4096, videos_per_batch=128, epochs=10, lr0=5e-5, mode="pretrain")

    @classmethod
    def finetune_full_scale(cls) -> "TrainConfig":
        return cls(clips_per_batch=256, videos_per_batch=1, epochs=20, lr0=1e-5, mode="finetune")

    def validate(self) -> None:
        if self.mode not in TRAIN_MODES:
            raise ValueError(f"mode must be one of {TRAIN_MODES}, got {self.mode!r}")
        if self.input_mode not in ("vqa", "qa_only"):
            raise ValueError(f"input_mode must be 'vqa' or 'qa_only', got {self.input_mode!r}")
        if self.clips_per_batch < 1 or self.videos_per_batch < 1 or self.epochs < 1:
            raise ValueError("clips_per_batch, videos_per_batch and epochs must be positive")
        if self.mode in ("pretrain", "matching_baseline") and self.clips_per_batch % self.videos_per_batch:
            raise ValueError("clips_per_batch must be divisible by videos_per_batch in pretrain mode")
        if not 0.0 <= self.mlm_prob <= 1.0:
            raise ValueError("mlm_prob must be in [0, 1]")
        if len(self.mlm_split) != 3 or any(p < 0 for p in self.mlm_split) or abs(sum(self.mlm_split) - 1.0) > 1e-9:
            raise ValueError("mlm_split must be three non-negative shares summing to 1")
        if not 0.0 <= self.val_fraction < 1.0:
            raise ValueError("val_fraction must be in [0, 1)")


@dataclass
class BatchTensors:
    """Per-batch fused and answer embeddings plus the normalized answer strings."""

    f: torch.Tensor  # [B x d]
    g: torch.Tensor  # [B x d]
    answers: list[str]
    token_outputs: Optional[torch.Tensor] = None  # [B x l x d]
    mlm_labels: Optional[torch.Tensor] = None  # [B x l]


# ---------------------------------------------------------------------------
# losses


def first_occurrence_reps(answers: list[str]) -> tuple[list[int], dict[str, int]]:
    """Representative index per distinct answer: its first occurrence in batch order."""
    rep_of: dict[str, int] = {}
    rep_idx: list[int] = []
    for i, a in enumerate(answers):
        if a not in rep_of:
            rep_of[a] = len(rep_idx)
            rep_idx.append(i)
    return rep_idx, rep_of


def anchor_negative_sets(answers: list[str]) -> list[set[str]]:
    """Negative answer-string set per anchor: distinct batch answers minus its own."""
    distinct = set(answers)
    return [distinct - {a} for a in answers]


def contrastive_loss(batch: BatchTensors, reduction: str = "mean") -> torch.Tensor:
    """Negated in-batch contrastive objective with duplicate-negative removal.

    For anchor i the denominator holds exp(f_i.g_i) plus one term per distinct
    other answer string in the batch, scored against that string's first
    occurrence embedding. Computed via logsumexp for stability. A batch of one
    with no negatives yields exactly 0.
    """
    f, g, answers = batch.f, batch.g, batch.answers
    b = f.shape[0]
    if b != g.shape[0] or b != len(answers):
        raise ValueError("f, g and answers must agree on batch size")
    rep_idx, rep_of = first_occurrence_reps(answers)
    pos = (f * g).sum(dim=-1)  # [B]
    scores = f @ g[rep_idx].T  # [B x U]
    own_col = torch.tensor([rep_of[a] for a in answers], dtype=torch.long)
    neg_mask = torch.ones_like(scores, dtype=torch.bool)
    neg_mask[torch.arange(b), own_col] = False
    neg_scores = scores.masked_fill(~neg_mask, float("-inf"))
    stacked = torch.cat([pos.unsqueeze(1), neg_scores], dim=1)
    losses = torch.logsumexp(stacked, dim=1) - pos
    if reduction == "none":
        return losses
    if reduction == "mean":
        return losses.mean()
    raise ValueError(f"unknown reduction {reduction!r}")


def finetune_loss(scores: torch.Tensor, target_index: int) -> torch.Tensor:
    """Softmax cross-entropy over the full answer vocabulary scores."""
    if scores.dim() != 1:
        raise ValueError("scores must be a 1-D vector over the vocabulary")
    if not 0 <= target_index < scores.shape[0]:
        raise ValueError(f"target_index {target_index} out of range for |V|={scores.shape[0]}")
    return F.cross_entropy(scores.unsqueeze(0), torch.tensor([target_index]))


def multiple_choice_loss(scores: torch.Tensor, correct: int) -> torch.Tensor:
    """Softmax cross-entropy over the K candidate scores."""
    if scores.dim() != 1 or scores.shape[0] < 2:
        raise ValueError("multiple choice needs at least 2 candidate scores")
    if not 0 <= correct < scores.shape[0]:
        raise ValueError(f"correct index {correct} out of range for K={scores.shape[0]}")
    return F.cross_entropy(scores.unsqueeze(0), torch.tensor([correct]))


def mlm_corrupt(
    tok: TokenizedText,
    rng: np.random.Generator,
    vocab_size: int,
    prob: float = 0.15,
    split: tuple[float, float, float] = (0.8, 0.1, 0.1),
) -> tuple[TokenizedText, list[int]]:
    """BERT-style corruption of non-special tokens.

    Each eligible token is corrupted with probability ``prob``; a corrupted
    token becomes [MASK] / stays itself / becomes a random non-special token
    with the given shares. Labels carry the original id at corrupted positions
    and MLM_IGNORE_INDEX elsewhere. Special tokens are never corrupted.
    """
    ids = list(tok.ids)
    labels = [MLM_IGNORE_INDEX] * len(ids)
    for i, token_id in enumerate(tok.ids):
        if token_id < NUM_SPECIAL_TOKENS:
            continue
        if rng.random() >= prob:
            continue
        labels[i] = token_id
        r = rng.random()
        if r < split[0]:
            ids[i] = MASK_ID
        elif r < split[0] + split[1]:
            pass  # keep the original token
        elif vocab_size > NUM_SPECIAL_TOKENS:
            ids[i] = int(rng.integers(NUM_SPECIAL_TOKENS, vocab_size))
    return TokenizedText(ids=ids, mask=list(tok.mask)), labels


def mlm_loss(token_outputs: torch.Tensor, labels: torch.Tensor, mlm_head: torch.nn.Module) -> torch.Tensor:
    """Mean cross-entropy over labeled positions; exactly 0 when none are labeled."""
    if (labels != MLM_IGNORE_INDEX).sum() == 0:
        return torch.zeros((), dtype=token_outputs.dtype)
    logits = mlm_head(token_outputs)
    return F.cross_entropy(
        logits.reshape(-1, logits.shape[-1]), labels.reshape(-1), ignore_index=MLM_IGNORE_INDEX
    )


def matching_loss(
    positive_logits: torch.Tensor, video_negative_logits: torch.Tensor, text_negative_logits: torch.Tensor
) -> torch.Tensor:
    """Mean binary cross-entropy over the 3B matching logits (labels 1, 0, 0)."""
    logits = torch.cat([positive_logits, video_negative_logits, text_negative_logits])
    targets = torch.cat(
        [
            torch.ones_like(positive_logits),
            torch.zeros_like(video_negative_logits),
            torch.zeros_like(text_negative_logits),
        ]
    )
    return F.binary_cross_entropy_with_logits(logits, targets)


def cosine_lr(step: int, total_steps: int, lr0: float) -> float:
    """Cosine annealing from lr0 to 0 with no warmup."""
    if not 0 <= step <= total_steps:
        raise ValueError(f"step {step} outside [0, {total_steps}]")
    if total_steps == 0:
        return lr0
    return lr0 * (1.0 + math.cos(math.pi * step / total_steps)) / 2.0


# ---------------------------------------------------------------------------
# batch construction


def make_batches(
    clips_by_video: dict[str, list[int]],
    clips_per_batch: int,
    videos_per_batch: int,
    rng: np.random.Generator,
) -> list[list[int]]:
    """One epoch of pretraining batches: fixed videos per batch, fixed clips per video.

    Videos are drawn without replacement within the epoch; clips within a
    video are drawn without replacement when it has enough, with replacement
    otherwise. Deterministic for a given generator state.
    """
    if clips_per_batch % videos_per_batch:
        raise ValueError("clips_per_batch must be divisible by videos_per_batch")
    per_video = clips_per_batch // videos_per_batch
    videos = list(clips_by_video)
    if len(videos) < videos_per_batch:
        logger.warning(
            "only %d videos for videos_per_batch=%d; producing one smaller batch",
            len(videos), videos_per_batch,
        )
    order = [videos[i] for i in rng.permutation(len(videos))]
    batches = []
    for lo in range(0, len(order), videos_per_batch):
        group = order[lo : lo + videos_per_batch]
        batch: list[int] = []
        for vid in group:
            clips = clips_by_video[vid]
            if len(clips) >= per_video:
                picked = rng.choice(len(clips), size=per_video, replace=False)
            else:
                picked = rng.choice(len(clips), size=per_video, replace=True)
            batch.extend(clips[j] for j in picked)
        batches.append(batch)
    return batches


# ---------------------------------------------------------------------------
# dataset preparation


@dataclass
class PreparedExample:
    """One training sample with tokenization and feature sampling done."""

    video_id: str
    q_tok: TokenizedText
    feats: np.ndarray  # [t x d_v] float32
    vmask: np.ndarray  # [t] bool
    answer: str = ""
    a_tok: Optional[TokenizedText] = None
    target_index: int = -1
    cand_toks: list[TokenizedText] = field(default_factory=list)
    correct: int = -1


def consensus_answer(answers: list[str]) -> str:
    """Most common normalized answer; ties broken lexicographically."""
    counts = Counter(normalize_answer(a) for a in answers)
    return sorted(counts.items(), key=lambda kv: (-kv[1], kv[0]))[0][0]


def _clip_tensors(store: FeatureStore, video_id: str, start_s, end_s, mcfg: ModelConfig):
    vf = store.clip(video_id, start_s, end_s)
    return sample_features(vf, mcfg.t)


def prepare_pretrain_examples(
    triplets: list[QATriplet], store: FeatureStore, token_vocab: TokenVocab, mcfg: ModelConfig
) -> list[PreparedExample]:
    out = []
    for tr in triplets:
        feats, vmask = _clip_tensors(store, tr.video_id, tr.start_s, tr.end_s, mcfg)
        answer = normalize_answer(tr.answer)
        out.append(
            PreparedExample(
                video_id=tr.video_id,
                q_tok=tokenize(tr.question, "question", token_vocab, mcfg),
                feats=feats,
                vmask=vmask,
                answer=answer,
                a_tok=tokenize(answer, "answer", token_vocab, mcfg),
            )
        )
    return out


def prepare_matching_examples(
    triplets: list[QATriplet], store: FeatureStore, token_vocab: TokenVocab, mcfg: ModelConfig
) -> list[PreparedExample]:
    """The text stream for matching is the concatenated [question, answer]."""
    out = []
    for tr in triplets:
        feats, vmask = _clip_tensors(store, tr.video_id, tr.start_s, tr.end_s, mcfg)
        out.append(
            PreparedExample(
                video_id=tr.video_id,
                q_tok=tokenize(tr.question + " " + tr.answer, "question", token_vocab, mcfg),
                feats=feats,
                vmask=vmask,
                answer=normalize_answer(tr.answer),
            )
        )
    return out


def prepare_finetune_examples(
    examples: list[AnnotatedExample],
    vocab: AnswerVocabulary,
    store: FeatureStore,
    token_vocab: TokenVocab,
    mcfg: ModelConfig,
) -> tuple[list[PreparedExample], int]:
    """Target is the consensus answer; out-of-vocabulary samples are skipped."""
    out, skipped = [], 0
    for ex in examples:
        target = consensus_answer(ex.answers)
        if target not in vocab.index:
            skipped += 1
            continue
        feats, vmask = _clip_tensors(store, ex.video_id, ex.start_s, ex.end_s, mcfg)
        out.append(
            PreparedExample(
                video_id=ex.video_id,
                q_tok=tokenize(ex.question, "question", token_vocab, mcfg),
                feats=feats,
                vmask=vmask,
                answer=target,
                target_index=vocab.index[target],
            )
        )
    if skipped:
        logger.info("skipped %d finetuning samples with out-of-vocabulary answers", skipped)
    return out, skipped


def prepare_multiple_choice_examples(
    examples: list[AnnotatedExample], store: FeatureStore, token_vocab: TokenVocab, mcfg: ModelConfig
) -> tuple[list[PreparedExample], int]:
    """Candidate lists come from the records; the consensus answer must be among them."""
    out, skipped = [], 0
    for ex in examples:
        target = consensus_answer(ex.answers)
        if not ex.candidates or target not in ex.candidates:
            skipped += 1
            continue
        feats, vmask = _clip_tensors(store, ex.video_id, ex.start_s, ex.end_s, mcfg)
        out.append(
            PreparedExample(
                video_id=ex.video_id,
                q_tok=tokenize(ex.question, "question", token_vocab, mcfg),
                feats=feats,
                vmask=vmask,
                answer=target,
                cand_toks=[tokenize(c, "answer", token_vocab, mcfg) for c in ex.candidates],
                correct=ex.candidates.index(target),
            )
        )
    if skipped:
        logger.info("skipped %d multiple-choice samples without usable candidates", skipped)
    return out, skipped


# ---------------------------------------------------------------------------
# metric helpers


def in_batch_top1(f: torch.Tensor, g: torch.Tensor, answers: list[str]) -> float:
    """Fraction of anchors whose own answer wins in-batch retrieval."""
    rep_idx, rep_of = first_occurrence_reps(answers)
    scores = (f @ g[rep_idx].T).detach().numpy()
    pred = scores.argmax(axis=1)
    own = np.array([rep_of[a] for a in answers])
    return float((pred == own).mean())


# ---------------------------------------------------------------------------
# the training loop


@dataclass
class TrainResult:
    state: dict[str, torch.Tensor]
    metrics: list[dict]
    best_val_top1: Optional[float] = None
    aborted: bool = False


def _stack_questions(
    samples: list[PreparedExample], rng, tcfg: TrainConfig, vocab_size: int, corrupt: bool
):
    toks = [s.q_tok for s in samples]
    labels = None
    if corrupt:
        pairs = [mlm_corrupt(t, rng, vocab_size, tcfg.mlm_prob, tcfg.mlm_split) for t in toks]
        toks = [p[0] for p in pairs]
        labels = torch.tensor([p[1] for p in pairs], dtype=torch.long)
    ids = torch.tensor([t.ids for t in toks], dtype=torch.long)
    mask = torch.tensor([t.mask for t in toks], dtype=torch.bool)
    return ids, mask, labels


def _stack_features(samples: list[PreparedExample]):
    feats = torch.from_numpy(np.stack([s.feats for s in samples]))
    vmask = torch.from_numpy(np.stack([s.vmask for s in samples]))
    return feats, vmask


def _encode_token_batch(model: VideoQAModel, toks: list[TokenizedText]) -> torch.Tensor:
    ids = torch.tensor([t.ids for t in toks], dtype=torch.long)
    mask = torch.tensor([t.mask for t in toks], dtype=torch.bool)
    return model.encode_answer(ids, mask)


def _epoch_batches(data, tcfg: TrainConfig, rng: np.random.Generator) -> list[list[int]]:
    if tcfg.mode in ("pretrain", "matching_baseline"):
        by_video: dict[str, list[int]] = {}
        for i, s in enumerate(data):
            by_video.setdefault(s.video_id, []).append(i)
        return make_batches(by_video, tcfg.clips_per_batch, tcfg.videos_per_batch, rng)
    order = rng.permutation(len(data))
    return [list(order[lo : lo + tcfg.clips_per_batch]) for lo in range(0, len(data), tcfg.clips_per_batch)]


def _clone_state(model: VideoQAModel) -> dict[str, torch.Tensor]:
    return {k: v.detach().clone() for k, v in model.state_dict().items()}


def _validation_top1(
    model: VideoQAModel, tcfg: TrainConfig, val_data: list[PreparedExample],
    vocab: Optional[AnswerVocabulary], token_vocab: TokenVocab,
) -> float:
    qa_only = tcfg.input_mode == "qa_only"
    was_training = model.training
    model.eval()
    hits, total = 0, 0
    with torch.no_grad():
        if tcfg.mode in ("finetune", "probe") and vocab is not None:
            answer_matrix = _encode_token_batch(
                model, [tokenize(a, "answer", token_vocab, model.cfg) for a in vocab.entries]
            )
            for lo in range(0, len(val_data), 256):
                chunk = val_data[lo : lo + 256]
                ids, mask, _ = _stack_questions(chunk, None, tcfg, len(token_vocab), corrupt=False)
                feats, vmask = _stack_features(chunk)
                f, _ = model.fuse(feats, vmask, ids, mask, qa_only=qa_only)
                pred = (f @ answer_matrix.T).numpy().argmax(axis=1)
                hits += int(sum(int(p) == s.target_index for p, s in zip(pred, chunk)))
                total += len(chunk)
        elif tcfg.mode == "multiple_choice":
            for s in val_data:
                ids = torch.tensor([s.q_tok.ids], dtype=torch.long)
                mask = torch.tensor([s.q_tok.mask], dtype=torch.bool)
                feats, vmask = _stack_features([s])
                f, _ = model.fuse(feats, vmask, ids, mask, qa_only=qa_only)
                g = _encode_token_batch(model, s.cand_toks)
                hits += int((f @ g.T)[0].numpy().argmax() == s.correct)
                total += 1
        elif tcfg.mode == "matching_baseline":
            for lo in range(0, len(val_data), 256):
                chunk = val_data[lo : lo + 256]
                if len(chunk) < 2:
                    continue
                ids, mask, _ = _stack_questions(chunk, None, tcfg, len(token_vocab), corrupt=False)
                feats, vmask = _stack_features(chunk)
                pos = model.match_score(feats, vmask, ids, mask)
                vneg = model.match_score(feats.roll(1, dims=0), vmask.roll(1, dims=0), ids, mask)
                tneg = model.match_score(feats, vmask, ids.roll(1, dims=0), mask.roll(1, dims=0))
                hits += int(((pos > vneg) & (pos > tneg)).sum())
                total += len(chunk)
        else:  # pretrain: retrieval over the distinct validation answers
            answers = [s.answer for s in val_data]
            rep_idx, rep_of = first_occurrence_reps(answers)
            answer_matrix = _encode_token_batch(model, [val_data[i].a_tok for i in rep_idx])
            for lo in range(0, len(val_data), 256):
                chunk = val_data[lo : lo + 256]
                ids, mask, _ = _stack_questions(chunk, None, tcfg, len(token_vocab), corrupt=False)
                feats, vmask = _stack_features(chunk)
                f, _ = model.fuse(feats, vmask, ids, mask, qa_only=qa_only)
                pred = (f @ answer_matrix.T).numpy().argmax(axis=1)
                hits += int(sum(int(p) == rep_of[s.answer] for p, s in zip(pred, chunk)))
                total += len(chunk)
    if was_training:
        model.train()
    return hits / total if total else 0.0


def train(
    model: VideoQAModel,
    token_vocab: TokenVocab,
    tcfg: TrainConfig,
    train_data: list[PreparedExample],
    *,
    vocab: Optional[AnswerVocabulary] = None,
    val_data: Optional[list[PreparedExample]] = None,
    metrics_path: str | Path | None = None,
    max_steps: int | None = None,
) -> TrainResult:
    """Optimize the model per the configured mode; returns the selected state.

    Probe mode updates only the fusion and answer heads and verifies after
    every epoch that every other tensor is bitwise unchanged. When validation
    data is given, the returned state is the epoch checkpoint with the best
    validation top-1; otherwise the final state. A non-finite loss aborts and
    returns the last epoch-end state. MLM is never applied in probe mode
    since the MLM head lies outside the probe head set.
    """
    tcfg.validate()
    if not train_data:
        raise ValueError("train_data is empty")
    if tcfg.mode in ("finetune", "probe") and vocab is None:
        raise ValueError("finetune/probe modes require an answer vocabulary")
    torch.manual_seed(tcfg.seed)
    rng = np.random.default_rng(tcfg.seed)
    qa_only = tcfg.input_mode == "qa_only"
    mlm_on = tcfg.mlm_enabled and tcfg.mode != "probe"

    frozen_init: dict[str, torch.Tensor] = {}
    if tcfg.mode == "probe":
        for name, param in model.named_parameters():
            if name not in PROBE_HEAD_PARAMS:
                param.requires_grad_(False)
                frozen_init[name] = param.detach().clone()
        for name, buf in model.named_buffers():
            frozen_init[name] = buf.detach().clone()

    trainable = [p for p in model.parameters() if p.requires_grad]
    optimizer = torch.optim.Adam(trainable, lr=tcfg.lr0, betas=tcfg.adam_betas, eps=tcfg.adam_eps)

    vocab_answer_toks = None
    if tcfg.mode in ("finetune", "probe"):
        vocab_answer_toks = [tokenize(a, "answer", token_vocab, model.cfg) for a in vocab.entries]

    steps_per_epoch = max(1, math.ceil(len(train_data) / tcfg.clips_per_batch))
    if tcfg.mode in ("pretrain", "matching_baseline"):
        n_videos = len({s.video_id for s in train_data})
        steps_per_epoch = max(1, math.ceil(n_videos / tcfg.videos_per_batch))
    total_steps = tcfg.epochs * steps_per_epoch
    if max_steps is not None:
        total_steps = min(total_steps, max_steps)

    metrics: list[dict] = []
    metrics_fh = open(metrics_path, "w", encoding="utf-8") if metrics_path else None

    def log_row(row: dict) -> None:
        metrics.append(row)
        if metrics_fh:
            metrics_fh.write(json.dumps(row) + "\n")
            metrics_fh.flush()

    model.train()
    step = 0
    best_val: Optional[float] = None
    best_state = _clone_state(model)
    last_good = _clone_state(model)
    aborted = False
    try:
        for epoch in range(tcfg.epochs):
            if aborted or step >= total_steps:
                break
            for batch_idx in _epoch_batches(train_data, tcfg, rng):
                if step >= total_steps:
                    break
                samples = [train_data[i] for i in batch_idx]
                lr = cosine_lr(step, total_steps, tcfg.lr0)
                for group in optimizer.param_groups:
                    group["lr"] = lr

                ids, mask, labels = _stack_questions(samples, rng, tcfg, len(token_vocab), corrupt=mlm_on)
                feats, vmask = _stack_features(samples)
                row = {"step": step, "lr": lr}

                if tcfg.mode == "pretrain":
                    f, token_out = model.fuse(feats, vmask, ids, mask, qa_only=qa_only)
                    g = _encode_token_batch(model, [s.a_tok for s in samples])
                    batch = BatchTensors(f=f, g=g, answers=[s.answer for s in samples])
                    loss = contrastive_loss(batch)
                    row["in_batch_top1"] = in_batch_top1(f, g, batch.answers)
                elif tcfg.mode in ("finetune", "probe"):
                    f, token_out = model.fuse(feats, vmask, ids, mask, qa_only=qa_only)
                    answer_matrix = _encode_token_batch(model, vocab_answer_toks)
                    scores = f @ answer_matrix.T
                    targets = torch.tensor([s.target_index for s in samples], dtype=torch.long)
                    loss = F.cross_entropy(scores, targets)
                elif tcfg.mode == "multiple_choice":
                    f, token_out = model.fuse(feats, vmask, ids, mask, qa_only=qa_only)
                    flat = [t for s in samples for t in s.cand_toks]
                    g_all = _encode_token_batch(model, flat)
                    losses, lo = [], 0
                    for i, s in enumerate(samples):
                        g = g_all[lo : lo + len(s.cand_toks)]
                        lo += len(s.cand_toks)
                        losses.append(multiple_choice_loss(f[i] @ g.T, s.correct))
                    loss = torch.stack(losses).mean()
                else:  # matching_baseline
                    if len(samples) < 2:
                        continue
                    shift_v = 1 + int(rng.integers(0, len(samples) - 1))
                    shift_t = 1 + int(rng.integers(0, len(samples) - 1))
                    # positive pairs go through fuse() so the token outputs can
                    # also carry the masking loss; x[:, 0] is the fused [CLS]
                    _, token_out = model.fuse(feats, vmask, ids, mask)
                    pos = model.match_head(model.drop(token_out[:, 0])).squeeze(-1)
                    vneg = model.match_score(feats.roll(shift_v, dims=0), vmask.roll(shift_v, dims=0), ids, mask)
                    tneg = model.match_score(feats, vmask, ids.roll(shift_t, dims=0), mask.roll(shift_t, dims=0))
                    loss = matching_loss(pos, vneg, tneg)

                if mlm_on and labels is not None and token_out is not None:
                    loss = loss + mlm_loss(token_out, labels, model.mlm_head)

                if not torch.isfinite(loss):
                    logger.error("non-finite loss at step %d; aborting with last-good checkpoint", step)
                    aborted = True
                    break

                optimizer.zero_grad()
                loss.backward()
                optimizer.step()
                row["loss"] = float(loss.detach())
                log_row(row)
                step += 1

            if aborted:
                break
            if tcfg.mode == "probe":
                current = dict(model.state_dict())
                for name, initial in frozen_init.items():
                    if not torch.equal(current[name], initial):
                        raise RuntimeError(f"probe mode modified frozen tensor {name!r}")
            last_good = _clone_state(model)
            if val_data:
                val_top1 = _validation_top1(model, tcfg, val_data, vocab, token_vocab)
                log_row({"step": step, "epoch": epoch, "val_top1": val_top1})
                if best_val is None or val_top1 > best_val:
                    best_val = val_top1
                    best_state = _clone_state(model)
    finally:
        if metrics_fh:
            metrics_fh.close()

    if aborted:
        final_state = last_good
    elif val_data:
        final_state = best_state
    else:
        final_state = _clone_state(model)
    model.load_state_dict(final_state)
    model.eval()
    return TrainResult(state=final_state, metrics=metrics, best_val_top1=best_val, aborted=aborted)
