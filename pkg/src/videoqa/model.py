"""Two-branch VideoQA model: fused video-question encoder and answer encoder.

The video-question branch projects per-second video features and contextual
question-token embeddings into a joint space, adds fixed sinusoidal positions
and learned modality encodings, runs a multi-head transformer over the
concatenated sequence, and maps the question [CLS] output through a final
linear head. The answer branch maps the answer [CLS] embedding through its
own linear head. Answers are scored against the fused embedding by raw dot
product. Attention never touches padded question tokens or padded video rows.
"""

from __future__ import annotations

import json
import math
import re
import struct
from collections import Counter
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .corpus import AnswerVocabulary

CHECKPOINT_MAGIC = b"VQC1"
CHECKPOINT_VERSION = 1

# reserved token ids
CLS_ID, SEP_ID, PAD_ID, MASK_ID, UNK_ID = 0, 1, 2, 3, 4
SPECIAL_TOKENS = ["[CLS]", "[SEP]", "[PAD]", "[MASK]", "[UNK]"]
NUM_SPECIAL_TOKENS = len(SPECIAL_TOKENS)

# parameters trained in feature-probe mode: the final MLP of the fused branch
# and the final linear layer of the answer branch
PROBE_HEAD_PARAMS = (
    "fusion_head.weight",
    "fusion_head.bias",
    "answer_head.weight",
    "answer_head.bias",
)

_WORD_RE = re.compile(r"[\w']+|[^\w\s]")


@dataclass
class ModelConfig:
    """Hyperparameters of the two-branch model. Defaults are desk-scale."""

    l: int = 12  # question tokens
    t: int = 8  # sampled video features
    m: int = 6  # answer tokens
    d: int = 64  # joint dim
    d_h: int = 128  # transformer feed-forward dim
    n_layers: int = 2
    n_heads: int = 4
    dropout: float = 0.1
    d_q: int = 64  # question text embedding dim
    d_a: int = 64  # answer text embedding dim
    d_v: int = 32  # video feature dim
    token_vocab_size: int = 256
    text_layers: int = 1  # depth of the stand-in contextual text encoder
    separate_answer_encoder: bool = False

    @classmethod
    def full_scale(cls) -> "ModelConfig":
        """Full-scale reference configuration; not trainable at desk scale."""
        return cls(
            l=20, t=20, m=10, d=512, d_h=2048, n_layers=2, n_heads=8,
            dropout=0.1, d_q=768, d_a=768, d_v=1024, token_vocab_size=30522,
        )

    def validate(self) -> None:
        for name in ("l", "t", "m", "d", "d_h", "n_layers", "n_heads", "d_q", "d_a", "d_v",
                     "token_vocab_size", "text_layers"):
            if getattr(self, name) < 1:
                raise ValueError(f"ModelConfig.{name} must be positive")
        if self.d % self.n_heads:
            raise ValueError("d must be divisible by n_heads")
        if self.d_q % self.n_heads or self.d_a % self.n_heads:
            raise ValueError("text embedding dims must be divisible by n_heads")
        if not self.separate_answer_encoder and self.d_q != self.d_a:
            raise ValueError("shared text encoder requires d_q == d_a")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError("dropout must be in [0, 1)")


# ---------------------------------------------------------------------------
# tokenizer


@dataclass
class TokenizedText:
    """Fixed-length token ids with a validity mask (mask[i] <=> ids[i] != PAD)."""

    ids: list[int]
    mask: list[bool]


@dataclass
class TokenVocab:
    """Word-level token vocabulary; ids 0..4 are reserved special tokens."""

    tokens: list[str]
    index: dict[str, int] = field(default_factory=dict)

    def __post_init__(self):
        if self.tokens[:NUM_SPECIAL_TOKENS] != SPECIAL_TOKENS:
            raise ValueError("token vocab must start with the reserved special tokens")
        if not self.index:
            self.index = {tok: i for i, tok in enumerate(self.tokens)}

    def __len__(self) -> int:
        return len(self.tokens)

    def encode_word(self, word: str) -> int:
        return self.index.get(word, UNK_ID)

    @classmethod
    def build(cls, texts: Iterable[str], min_count: int = 1, max_size: int | None = None) -> "TokenVocab":
        """Vocabulary over a corpus, most frequent first, ties lexicographic."""
        counts = Counter()
        for text in texts:
            counts.update(word_tokens(text))
        kept = [(w, c) for w, c in counts.items() if c >= min_count]
        kept.sort(key=lambda wc: (-wc[1], wc[0]))
        if max_size is not None:
            kept = kept[: max(0, max_size - NUM_SPECIAL_TOKENS)]
        return cls(tokens=SPECIAL_TOKENS + [w for w, _ in kept])


def word_tokens(text: str) -> list[str]:
    """Lowercase word and punctuation tokens."""
    return _WORD_RE.findall(text.lower())


def tokenize(text: str, role: str, vocab: TokenVocab, cfg: ModelConfig) -> TokenizedText:
    """[CLS] body [SEP] padded/truncated to l (questions) or m (answers)."""
    if role == "question":
        length = cfg.l
    elif role == "answer":
        length = cfg.m
    else:
        raise ValueError(f"unknown role {role!r}")
    body = [vocab.encode_word(w) for w in word_tokens(text)][: length - 2]
    ids = [CLS_ID] + body + [SEP_ID]
    ids += [PAD_ID] * (length - len(ids))
    return TokenizedText(ids=ids, mask=[i != PAD_ID for i in ids])


# ---------------------------------------------------------------------------
# building blocks


def sinusoid_table(n_positions: int, dim: int) -> torch.Tensor:
    """Fixed sinusoidal positional encodings [n_positions x dim]."""
    position = np.arange(n_positions, dtype=np.float64)[:, None]
    div = np.exp(np.arange(0, dim, 2, dtype=np.float64) * -(math.log(10000.0) / dim))
    table = np.zeros((n_positions, dim), dtype=np.float64)
    table[:, 0::2] = np.sin(position * div)
    table[:, 1::2] = np.cos(position * div[: dim // 2])
    return torch.from_numpy(table).float()


class SelfAttention(nn.Module):
    """Multi-head self-attention with a key padding mask."""

    def __init__(self, dim: int, n_heads: int, dropout: float):
        super().__init__()
        self.n_heads = n_heads
        self.head_dim = dim // n_heads
        self.qkv = nn.Linear(dim, 3 * dim)
        self.out = nn.Linear(dim, dim)
        self.drop = nn.Dropout(dropout)

    def forward(self, x: torch.Tensor, key_mask: torch.Tensor) -> torch.Tensor:
        b, s, dim = x.shape
        qkv = self.qkv(x).reshape(b, s, 3, self.n_heads, self.head_dim).permute(2, 0, 3, 1, 4)
        q, k, v = qkv[0], qkv[1], qkv[2]
        scores = (q @ k.transpose(-2, -1)) / math.sqrt(self.head_dim)
        scores = scores.masked_fill(~key_mask[:, None, None, :], float("-inf"))
        attn = self.drop(torch.softmax(scores, dim=-1))
        y = (attn @ v).permute(0, 2, 1, 3).reshape(b, s, dim)
        return self.out(y)


class TransformerLayer(nn.Module):
    """Post-norm encoder layer: self-attention and GELU feed-forward."""

    def __init__(self, dim: int, ffn_dim: int, n_heads: int, dropout: float):
        super().__init__()
        self.attn = SelfAttention(dim, n_heads, dropout)
        self.ffn_in = nn.Linear(dim, ffn_dim)
        self.ffn_out = nn.Linear(ffn_dim, dim)
        self.norm1 = nn.LayerNorm(dim)
        self.norm2 = nn.LayerNorm(dim)
        self.drop = nn.Dropout(dropout)

    def forward(self, x: torch.Tensor, key_mask: torch.Tensor) -> torch.Tensor:
        x = self.norm1(x + self.drop(self.attn(x, key_mask)))
        x = self.norm2(x + self.drop(self.ffn_out(F.gelu(self.ffn_in(x)))))
        return x


class GeluNorm(nn.Module):
    """GELU followed by layer normalization (the sigma of the input projections)."""

    def __init__(self, dim: int):
        super().__init__()
        self.norm = nn.LayerNorm(dim)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.norm(F.gelu(x))


class TextEncoder(nn.Module):
    """Small trainable contextual encoder standing in for a pretrained one."""

    def __init__(self, vocab_size: int, dim: int, n_layers: int, n_heads: int, dropout: float, max_len: int):
        super().__init__()
        self.embed = nn.Embedding(vocab_size, dim)
        self.register_buffer("pos", sinusoid_table(max_len, dim))
        self.layers = nn.ModuleList(
            TransformerLayer(dim, 2 * dim, n_heads, dropout) for _ in range(n_layers)
        )
        self.drop = nn.Dropout(dropout)

    def forward(self, ids: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
        x = self.drop(self.embed(ids) + self.pos[: ids.shape[1]].to(ids.device).to(self.embed.weight.dtype))
        for layer in self.layers:
            x = layer(x, mask)
        return x


# ---------------------------------------------------------------------------
# the model


class VideoQAModel(nn.Module):
    """Joint-embedding VideoQA transformer with an optional video-blind mode."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        cfg.validate()
        self.cfg = cfg
        self.text_encoder = TextEncoder(
            cfg.token_vocab_size, cfg.d_q, cfg.text_layers, cfg.n_heads, cfg.dropout, max(cfg.l, cfg.m)
        )
        if cfg.separate_answer_encoder:
            self.answer_encoder = TextEncoder(
                cfg.token_vocab_size, cfg.d_a, cfg.text_layers, cfg.n_heads, cfg.dropout, max(cfg.l, cfg.m)
            )
        else:
            self.answer_encoder = self.text_encoder
        self.q_proj = nn.Linear(cfg.d_q, cfg.d)
        self.v_proj = nn.Linear(cfg.d_v, cfg.d)
        self.q_act = GeluNorm(cfg.d)
        self.v_act = GeluNorm(cfg.d)
        self.mod_q = nn.Parameter(torch.zeros(cfg.d))
        self.mod_v = nn.Parameter(torch.zeros(cfg.d))
        self.register_buffer("pos", sinusoid_table(cfg.l + cfg.t, cfg.d))
        self.layers = nn.ModuleList(
            TransformerLayer(cfg.d, cfg.d_h, cfg.n_heads, cfg.dropout) for _ in range(cfg.n_layers)
        )
        self.fusion_head = nn.Linear(cfg.d, cfg.d)  # F: W_vq, b_vq
        self.answer_head = nn.Linear(cfg.d_a, cfg.d)  # G: W_a, b_a
        self.mlm_head = nn.Linear(cfg.d, cfg.token_vocab_size)
        self.match_head = nn.Linear(cfg.d, 1)  # cross-modal matching score
        self.drop = nn.Dropout(cfg.dropout)

    # -- forward passes ----------------------------------------------------

    def _check_shapes(self, features, video_mask, q_ids, q_mask) -> None:
        cfg = self.cfg
        if features.shape[-2:] != (cfg.t, cfg.d_v):
            raise ValueError(f"video features must be [B x {cfg.t} x {cfg.d_v}], got {tuple(features.shape)}")
        if q_ids.shape[-1] != cfg.l:
            raise ValueError(f"question ids must have length l={cfg.l}, got {q_ids.shape[-1]}")
        if video_mask.shape != features.shape[:-1] or q_mask.shape != q_ids.shape:
            raise ValueError("mask shapes must match their inputs")

    def _fused_states(self, features, video_mask, q_ids, q_mask, qa_only: bool):
        self._check_shapes(features, video_mask, q_ids, q_mask)
        cfg = self.cfg
        if qa_only:
            # video-blind baseline: the video input is zeroed, and the video
            # mask is fixed all-valid so the output is constant in the video
            features = torch.zeros_like(features)
            video_mask = torch.ones_like(video_mask)
        q_ctx = self.text_encoder(q_ids, q_mask)
        pos = self.pos.to(features.dtype)
        q_in = self.drop(self.q_act(self.q_proj(q_ctx)) + pos[: cfg.l] + self.mod_q)
        v_in = self.drop(self.v_act(self.v_proj(features)) + pos[cfg.l : cfg.l + cfg.t] + self.mod_v)
        x = torch.cat([q_in, v_in], dim=1)
        key_mask = torch.cat([q_mask, video_mask], dim=1)
        for layer in self.layers:
            x = layer(x, key_mask)
        return x

    def fuse(self, features, video_mask, q_ids, q_mask, qa_only: bool = False):
        """Fused embedding f(v,q) [B x d] and question-token outputs [B x l x d]."""
        x = self._fused_states(features, video_mask, q_ids, q_mask, qa_only)
        token_outputs = x[:, : self.cfg.l]
        f_vq = self.fusion_head(self.drop(token_outputs[:, 0]))
        return f_vq, token_outputs

    def encode_answer(self, a_ids, a_mask) -> torch.Tensor:
        """g(a) [B x d]: answer-branch head over the answer [CLS] embedding."""
        ctx = self.answer_encoder(a_ids, a_mask)
        return self.answer_head(ctx[:, 0])

    def match_score(self, features, video_mask, q_ids, q_mask) -> torch.Tensor:
        """Scalar cross-modal matching logit per (video, text stream) pair."""
        x = self._fused_states(features, video_mask, q_ids, q_mask, qa_only=False)
        return self.match_head(self.drop(x[:, 0])).squeeze(-1)


def score_answers(f_vq: torch.Tensor, answer_matrix: torch.Tensor) -> torch.Tensor:
    """Raw dot-product scores against every answer embedding; no temperature."""
    return f_vq @ answer_matrix.T


def answer_embedding_matrix(
    model: VideoQAModel, vocab: AnswerVocabulary, token_vocab: TokenVocab, batch_size: int = 512
) -> torch.Tensor:
    """g(a) for every vocabulary entry, computed once in eval mode."""
    was_training = model.training
    model.eval()
    rows = []
    with torch.no_grad():
        for lo in range(0, len(vocab.entries), batch_size):
            chunk = vocab.entries[lo : lo + batch_size]
            toks = [tokenize(a, "answer", token_vocab, model.cfg) for a in chunk]
            ids = torch.tensor([t.ids for t in toks], dtype=torch.long)
            mask = torch.tensor([t.mask for t in toks], dtype=torch.bool)
            rows.append(model.encode_answer(ids, mask))
    if was_training:
        model.train()
    return torch.cat(rows, dim=0) if rows else torch.zeros((0, model.cfg.d))


def argmax_lowest_index(scores: np.ndarray) -> int:
    """Index of the maximal score; ties go to the lowest index."""
    return int(np.argmax(scores))


def predict(
    model: VideoQAModel,
    features: torch.Tensor,
    video_mask: torch.Tensor,
    question: str,
    vocab: AnswerVocabulary,
    token_vocab: TokenVocab,
    answer_matrix: torch.Tensor | None = None,
    qa_only: bool = False,
) -> str:
    """Highest-scoring vocabulary answer for one (video, question) pair."""
    if not vocab.entries:
        raise ValueError("answer vocabulary is empty")
    if answer_matrix is None:
        answer_matrix = answer_embedding_matrix(model, vocab, token_vocab)
    was_training = model.training
    model.eval()
    tok = tokenize(question, "question", token_vocab, model.cfg)
    with torch.no_grad():
        f_vq, _ = model.fuse(
            features.unsqueeze(0),
            video_mask.unsqueeze(0),
            torch.tensor([tok.ids], dtype=torch.long),
            torch.tensor([tok.mask], dtype=torch.bool),
            qa_only=qa_only,
        )
        scores = score_answers(f_vq, answer_matrix)[0].numpy()
    if was_training:
        model.train()
    return vocab.entries[argmax_lowest_index(scores)]


def score_concat(
    model: VideoQAModel,
    features: torch.Tensor,
    video_mask: torch.Tensor,
    question: str,
    candidate: str,
    token_vocab: TokenVocab,
) -> float:
    """Matching-head score for the concatenated [question, answer] text stream."""
    tok = tokenize(question + " " + candidate, "question", token_vocab, model.cfg)
    with torch.no_grad():
        logit = model.match_score(
            features.unsqueeze(0),
            video_mask.unsqueeze(0),
            torch.tensor([tok.ids], dtype=torch.long),
            torch.tensor([tok.mask], dtype=torch.bool),
        )
    return float(logit[0])


# ---------------------------------------------------------------------------
# checkpoint container: magic, version, JSON metadata, named float32 tensors


def save_checkpoint(
    path: str | Path,
    model: VideoQAModel,
    token_vocab: TokenVocab,
    extra: dict | None = None,
) -> None:
    state = model.state_dict()
    meta = {
        "format_version": CHECKPOINT_VERSION,
        "config": asdict(model.cfg),
        "token_vocab": token_vocab.tokens,
        "extra": extra or {},
    }
    meta_bytes = json.dumps(meta, ensure_ascii=False).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<I", CHECKPOINT_VERSION))
        fh.write(struct.pack("<I", len(meta_bytes)))
        fh.write(meta_bytes)
        fh.write(struct.pack("<I", len(state)))
        for name, tensor in state.items():
            data = tensor.detach().to(torch.float32).contiguous().numpy().astype("<f4")
            name_b = name.encode("utf-8")
            fh.write(struct.pack("<H", len(name_b)))
            fh.write(name_b)
            fh.write(struct.pack("<B", data.ndim))
            fh.write(struct.pack(f"<{data.ndim}I", *data.shape))
            fh.write(data.tobytes())


@dataclass
class Checkpoint:
    model: VideoQAModel
    token_vocab: TokenVocab
    config: ModelConfig
    extra: dict


def load_checkpoint(path: str | Path) -> Checkpoint:
    raw = Path(path).read_bytes()
    if raw[:4] != CHECKPOINT_MAGIC:
        raise ValueError(f"{path}: not a checkpoint file")
    (version,) = struct.unpack_from("<I", raw, 4)
    if version != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    (meta_len,) = struct.unpack_from("<I", raw, 8)
    offset = 12
    meta = json.loads(raw[offset : offset + meta_len].decode("utf-8"))
    offset += meta_len
    (n_tensors,) = struct.unpack_from("<I", raw, offset)
    offset += 4
    tensors: dict[str, torch.Tensor] = {}
    for _ in range(n_tensors):
        (name_len,) = struct.unpack_from("<H", raw, offset)
        offset += 2
        name = raw[offset : offset + name_len].decode("utf-8")
        offset += name_len
        (ndim,) = struct.unpack_from("<B", raw, offset)
        offset += 1
        shape = struct.unpack_from(f"<{ndim}I", raw, offset)
        offset += 4 * ndim
        count = int(np.prod(shape)) if ndim else 1
        arr = np.frombuffer(raw, dtype="<f4", count=count, offset=offset).reshape(shape)
        offset += 4 * count
        tensors[name] = torch.from_numpy(arr.copy())
    cfg = ModelConfig(**meta["config"])
    model = VideoQAModel(cfg)
    model.load_state_dict(tensors, strict=True)
    model.eval()
    token_vocab = TokenVocab(tokens=list(meta["token_vocab"]))
    return Checkpoint(model=model, token_vocab=token_vocab, config=cfg, extra=meta.get("extra", {}))
