"""Evaluation protocols and metrics for open-ended VideoQA.

Scores every sample against a fixed answer vocabulary with precomputed
answer embeddings, then aggregates top-1/top-10 accuracy, the five-annotator
consensus accuracy, answer-frequency quartile breakdowns, and question-type
breakdowns into a single report. Ground-truth answers outside the vocabulary
score zero and are counted in the out-of-vocabulary fraction.
"""

from __future__ import annotations

import json
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import torch

from .corpus import AnnotatedExample, AnswerVocabulary, FeatureStore, sample_features
from .model import TokenVocab, VideoQAModel, answer_embedding_matrix, tokenize
from .train import consensus_answer

INTERROGATIVES = ("what", "who", "where", "when", "how")


def ivqa_accuracy(pred: str, gts: Sequence[str]) -> float:
    """Consensus accuracy over exactly five annotations: min(#matches / 2, 1).

    Returns 1.0 for two or more matching annotations, 0.5 for one, else 0.0.
    """
    if len(gts) != 5:
        raise ValueError(f"the consensus metric is defined for exactly 5 answers, got {len(gts)}")
    matches = sum(1 for gt in gts if gt == pred)
    return min(matches / 2.0, 1.0)


def topk_hit(scores: np.ndarray, target_index: int, k: int) -> int:
    """1 iff the target is among the k best scores; ties rank lower indices first."""
    scores = np.asarray(scores)
    n = scores.shape[0]
    if not 1 <= k <= n:
        raise ValueError(f"k must be in [1, {n}], got {k}")
    if not 0 <= target_index < n:
        raise ValueError(f"target_index {target_index} out of range")
    better = (scores > scores[target_index]).sum()
    tied_lower = ((scores == scores[target_index]) & (np.arange(n) < target_index)).sum()
    return int(better + tied_lower < k)


def quartile_split(
    examples: Sequence[AnnotatedExample], train_freqs: Counter
) -> list[list[int]]:
    """Four disjoint index groups from most to least frequent training answer.

    Samples are sorted by descending training frequency of their consensus
    answer, ties by answer string ascending then input order; the sorted list
    is cut into four contiguous groups with any remainder going to the
    earlier quartiles.
    """
    keys = []
    for i, ex in enumerate(examples):
        ans = consensus_answer(ex.answers)
        keys.append((-train_freqs.get(ans, 0), ans, i))
    order = [i for *_, i in sorted(keys)]
    n = len(order)
    base, rem = divmod(n, 4)
    out, lo = [], 0
    for q in range(4):
        size = base + (1 if q < rem else 0)
        out.append(order[lo : lo + size])
        lo += size
    return out


def question_type_split(examples: Sequence[AnnotatedExample]) -> dict[str, list[int]]:
    """Group by the answer_type tag, else by the leading interrogative word."""
    groups: dict[str, list[int]] = {}
    for i, ex in enumerate(examples):
        if ex.answer_type:
            key = ex.answer_type.lower()
        else:
            first = ex.question.split()[0].lower().rstrip("?.,!") if ex.question.split() else ""
            key = first if first in INTERROGATIVES else "other"
        groups.setdefault(key, []).append(i)
    return groups


@dataclass
class EvalReport:
    protocol: str
    n_samples: int
    top1: float
    top10: Optional[float] = None
    ivqa_acc: Optional[float] = None
    per_quartile: Optional[dict[str, float]] = None
    per_type: dict[str, float] = field(default_factory=dict)
    oov_fraction: float = 0.0

    def to_dict(self) -> dict:
        return {
            "protocol": self.protocol,
            "n_samples": self.n_samples,
            "top1": self.top1,
            "top10": self.top10,
            "ivqa_acc": self.ivqa_acc,
            "per_quartile": self.per_quartile,
            "per_type": self.per_type,
            "oov_fraction": self.oov_fraction,
        }

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2) + "\n", encoding="utf-8")

    def format_text(self) -> str:
        lines = [
            f"protocol:      {self.protocol}",
            f"samples:       {self.n_samples}",
            f"top-1:         {self.top1:.4f}",
        ]
        if self.top10 is not None:
            lines.append(f"top-10:        {self.top10:.4f}")
        if self.ivqa_acc is not None:
            lines.append(f"consensus acc: {self.ivqa_acc:.4f}")
        lines.append(f"oov fraction:  {self.oov_fraction:.4f}")
        if self.per_quartile:
            lines.append("top-1 by answer-frequency quartile:")
            for q, v in self.per_quartile.items():
                lines.append(f"  {q}: {v:.4f}")
        if self.per_type:
            lines.append("top-1 by question type:")
            for t in sorted(self.per_type):
                lines.append(f"  {t}: {self.per_type[t]:.4f}")
        return "\n".join(lines)


def evaluate(
    model: VideoQAModel,
    token_vocab: TokenVocab,
    examples: Sequence[AnnotatedExample],
    vocab: AnswerVocabulary,
    store: FeatureStore,
    *,
    protocol: str = "zero_shot",
    metrics: Sequence[str] = ("top1", "top10"),
    qa_only: bool = False,
    train_freqs: Counter | None = None,
    dump_path: str | Path | None = None,
    batch_size: int = 256,
) -> EvalReport:
    """Score an annotated eval set against a fixed vocabulary.

    A sample whose every ground-truth answer is outside the vocabulary scores
    0 on all metrics and increments the out-of-vocabulary fraction. Quartile
    breakdowns are included when training answer frequencies are supplied.
    """
    if protocol not in ("zero_shot", "standard"):
        raise ValueError(f"unknown protocol {protocol!r}")
    if not examples:
        raise ValueError("the evaluation set is empty")
    if not vocab.entries:
        raise ValueError("the answer vocabulary is empty")

    model.eval()
    answer_matrix = answer_embedding_matrix(model, vocab, token_vocab)
    want_ivqa = "ivqa" in metrics
    k10 = min(10, len(vocab.entries))

    top1_hits = np.zeros(len(examples))
    top10_hits = np.zeros(len(examples))
    ivqa_scores = np.zeros(len(examples))
    oov = np.zeros(len(examples), dtype=bool)
    dump_rows = []

    with torch.no_grad():
        for lo in range(0, len(examples), batch_size):
            chunk = list(examples[lo : lo + batch_size])
            toks = [tokenize(ex.question, "question", token_vocab, model.cfg) for ex in chunk]
            ids = torch.tensor([t.ids for t in toks], dtype=torch.long)
            mask = torch.tensor([t.mask for t in toks], dtype=torch.bool)
            feats_np, masks_np = [], []
            for ex in chunk:
                f, m = sample_features(store.clip(ex.video_id, ex.start_s, ex.end_s), model.cfg.t)
                feats_np.append(f)
                masks_np.append(m)
            feats = torch.from_numpy(np.stack(feats_np))
            vmask = torch.from_numpy(np.stack(masks_np))
            f_vq, _ = model.fuse(feats, vmask, ids, mask, qa_only=qa_only)
            scores = (f_vq @ answer_matrix.T).numpy()

            for j, ex in enumerate(chunk):
                i = lo + j
                row = scores[j]
                pred_idx = int(np.argmax(row))
                pred = vocab.entries[pred_idx]
                gt_indices = [vocab.index[a] for a in ex.answers if a in vocab.index]
                if not gt_indices:
                    oov[i] = True
                else:
                    top1_hits[i] = max(topk_hit(row, t, 1) for t in gt_indices)
                    top10_hits[i] = max(topk_hit(row, t, k10) for t in gt_indices)
                if want_ivqa:
                    ivqa_scores[i] = ivqa_accuracy(pred, ex.answers)
                if dump_path is not None:
                    dump_rows.append(
                        {
                            "video_id": ex.video_id,
                            "question": ex.question,
                            "pred": pred,
                            "score": float(row[pred_idx]),
                        }
                    )

    per_type = {
        t: float(top1_hits[idx].mean()) for t, idx in question_type_split(examples).items()
    }
    per_quartile = None
    if train_freqs is not None:
        per_quartile = {
            f"Q{q + 1}": (float(top1_hits[idx].mean()) if idx else 0.0)
            for q, idx in enumerate(quartile_split(examples, train_freqs))
        }

    if dump_path is not None:
        with open(dump_path, "w", encoding="utf-8") as fh:
            for row in dump_rows:
                fh.write(json.dumps(row, ensure_ascii=False) + "\n")

    return EvalReport(
        protocol=protocol,
        n_samples=len(examples),
        top1=float(top1_hits.mean()),
        top10=float(top10_hits.mean()) if "top10" in metrics else None,
        ivqa_acc=float(ivqa_scores.mean()) if want_ivqa else None,
        per_quartile=per_quartile,
        per_type=per_type,
        oov_fraction=float(oov.mean()),
    )
