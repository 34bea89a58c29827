"""Vanilla Transformer encoder and the word-level tokenizer it reads from."""

from __future__ import annotations

import json
import math
import re
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Optional, Sequence

import numpy as np

from .errors import ContractError, ShapeError
from .params import ParamGroup, normal, ones, zeros
from .tensor import (
    Tensor,
    add,
    dropout,
    gelu,
    layer_norm,
    matmul,
    mul,
    reshape,
    softmax,
    swapaxes,
    take_rows,
)

PAD, UNK, CLS, SEP, MASK, KTOK = "[PAD]", "[UNK]", "[CLS]", "[SEP]", "[MASK]", "[k]"
SPECIAL_TOKENS = (PAD, UNK, CLS, SEP, MASK, KTOK)
PAD_ID, UNK_ID, CLS_ID, SEP_ID, MASK_ID, K_ID = range(6)

LN_EPS = 1e-12
MASK_FILL = -1e30

_WORD_RE = re.compile(r"\w+|[^\w\s]")


def split_words(text: str) -> list[str]:
    return _WORD_RE.findall(text.lower())


class Vocabulary:
    """Bijective token <-> id map with the six reserved tokens at ids 0..5."""

    def __init__(self, tokens: Iterable[str] = ()):
        self._itos: list[str] = list(SPECIAL_TOKENS)
        self._stoi: dict[str, int] = {t: i for i, t in enumerate(self._itos)}
        for t in tokens:
            self.add(t)

    def add(self, token: str) -> int:
        if token not in self._stoi:
            self._stoi[token] = len(self._itos)
            self._itos.append(token)
        return self._stoi[token]

    def __len__(self) -> int:
        return len(self._itos)

    def __contains__(self, token: str) -> bool:
        return token in self._stoi

    def id(self, token: str) -> int:
        return self._stoi.get(token, UNK_ID)

    def token(self, idx: int) -> str:
        return self._itos[idx]

    def ids(self, tokens: Sequence[str]) -> list[int]:
        return [self.id(t) for t in tokens]

    @classmethod
    def build(cls, texts: Iterable[str]) -> "Vocabulary":
        vocab = cls()
        for text in texts:
            for w in split_words(text):
                vocab.add(w)
        return vocab

    def save(self, path) -> None:
        Path(path).write_text("".join(t + "\n" for t in self._itos), encoding="utf-8")

    @classmethod
    def load(cls, path) -> "Vocabulary":
        lines = Path(path).read_text(encoding="utf-8").splitlines()
        if tuple(lines[: len(SPECIAL_TOKENS)]) != SPECIAL_TOKENS:
            raise ValueError(f"{path}: vocabulary must start with the reserved tokens {SPECIAL_TOKENS}")
        vocab = cls()
        for t in lines[len(SPECIAL_TOKENS):]:
            if t in vocab:
                raise ValueError(f"{path}: duplicate token {t!r}")
            vocab.add(t)
        return vocab

    def to_list(self) -> list[str]:
        return list(self._itos)


@dataclass
class TokenSequence:
    ids: np.ndarray
    attention_mask: np.ndarray
    segment_ids: np.ndarray

    def __len__(self) -> int:
        return len(self.ids)

    @property
    def length(self) -> int:
        return int(self.attention_mask.sum())


def tokenize(
    text: str,
    vocab: Vocabulary,
    pair: Optional[str] = None,
    max_len: int = 64,
    insert_k: bool = True,
    pad: bool = True,
) -> TokenSequence:
    """``[CLS] [k] w1 .. wm [SEP] (wm+1 .. [SEP])`` padded to ``max_len``.

    Truncation drops trailing words (longest segment first for pairs) so the
    closing ``[SEP]`` markers always survive.
    """
    first = vocab.ids(split_words(text))
    second = vocab.ids(split_words(pair)) if pair is not None else None
    return build_sequence(first, second, max_len, insert_k, pad)


def build_sequence(
    first: Sequence[int],
    second: Optional[Sequence[int]] = None,
    max_len: int = 64,
    insert_k: bool = True,
    pad: bool = True,
) -> TokenSequence:
    """Wrap already-mapped word ids with the special tokens."""
    if max_len < 4:
        raise ContractError(f"max_len must be >= 4, got {max_len}")
    first = list(first)
    second = list(second) if second is not None else None
    n_special = 2 + int(insert_k) + (1 if second is not None else 0)
    budget = max_len - n_special
    if second is None:
        first = first[:budget]
    else:
        while len(first) + len(second) > budget:
            if len(first) >= len(second):
                first = first[:-1]
            else:
                second = second[:-1]
    head = [CLS_ID] + ([K_ID] if insert_k else [])
    ids = head + first + [SEP_ID]
    segs = [0] * len(ids)
    if second is not None:
        ids += second + [SEP_ID]
        segs += [1] * (len(second) + 1)
    n = len(ids)
    total = max_len if pad else n
    out_ids = np.full(total, PAD_ID, dtype=np.int64)
    out_ids[:n] = ids
    mask = np.zeros(total, dtype=np.int64)
    mask[:n] = 1
    seg = np.zeros(total, dtype=np.int64)
    seg[:n] = segs
    return TokenSequence(out_ids, mask, seg)


@dataclass
class Batch:
    ids: np.ndarray
    mask: np.ndarray
    segments: np.ndarray

    @property
    def size(self) -> int:
        return self.ids.shape[0]


def collate(seqs: Sequence[TokenSequence], trim: bool = True) -> Batch:
    """Stack sequences, padding to the longest (and trimming all-pad columns)."""
    width = max(len(s) for s in seqs)
    if trim:
        width = max(s.length for s in seqs)
    ids = np.full((len(seqs), width), PAD_ID, dtype=np.int64)
    mask = np.zeros((len(seqs), width), dtype=np.int64)
    seg = np.zeros((len(seqs), width), dtype=np.int64)
    for i, s in enumerate(seqs):
        n = min(len(s), width)
        ids[i, :n] = s.ids[:n]
        mask[i, :n] = s.attention_mask[:n]
        seg[i, :n] = s.segment_ids[:n]
    return Batch(ids, mask, seg)


@dataclass
class ModelConfig:
    layers: int = 2
    hidden: int = 32
    heads: int = 2
    ffn: int = 64
    vocab_size: int = 64
    max_len: int = 32
    n_max: int = 64
    dropout: float = 0.0
    seed: int = 0
    init_std: float = 0.02

    def __post_init__(self):
        for name in ("hidden", "heads", "ffn", "vocab_size", "max_len", "n_max"):
            if getattr(self, name) <= 0:
                raise ValueError(f"ModelConfig.{name} must be positive")
        if self.layers < 0:
            raise ValueError("ModelConfig.layers must be >= 0")
        if self.hidden % self.heads:
            raise ValueError(f"heads ({self.heads}) must divide hidden ({self.hidden})")

    @property
    def head_dim(self) -> int:
        return self.hidden // self.heads

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = {f for f in cls.__dataclass_fields__}
        return cls(**{k: v for k, v in d.items() if k in known})

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)


@dataclass
class AttentionParams(ParamGroup):
    w_q: Tensor
    b_q: Tensor
    w_k: Tensor
    b_k: Tensor
    w_v: Tensor
    b_v: Tensor
    w_proj: Tensor
    b_proj: Tensor

    @classmethod
    def init(cls, d: int, rng: np.random.Generator, std: float) -> "AttentionParams":
        return cls(normal(rng, (d, d), std), zeros(d), normal(rng, (d, d), std), zeros(d),
                   normal(rng, (d, d), std), zeros(d), normal(rng, (d, d), std), zeros(d))


@dataclass
class EncoderLayerParams(ParamGroup):
    attn: AttentionParams
    ln1_g: Tensor
    ln1_b: Tensor
    ffn_w_i: Tensor
    ffn_b_i: Tensor
    ffn_w_o: Tensor
    ffn_b_o: Tensor
    ln2_g: Tensor
    ln2_b: Tensor

    @classmethod
    def init(cls, config: ModelConfig, rng: np.random.Generator) -> "EncoderLayerParams":
        d, f, std = config.hidden, config.ffn, config.init_std
        return cls(AttentionParams.init(d, rng, std), ones(d), zeros(d),
                   normal(rng, (d, f), std), zeros(f), normal(rng, (f, d), std), zeros(d),
                   ones(d), zeros(d))


@dataclass
class Embeddings(ParamGroup):
    token: Tensor
    position: Tensor
    segment: Tensor

    @classmethod
    def init(cls, config: ModelConfig, rng: np.random.Generator) -> "Embeddings":
        std = config.init_std
        return cls(normal(rng, (config.vocab_size, config.hidden), std),
                   normal(rng, (config.max_len, config.hidden), std),
                   normal(rng, (2, config.hidden), std))

    def __call__(self, batch: Batch) -> Tensor:
        # [k] keeps segment 0 by construction of tokenize().
        t = batch.ids.shape[1]
        x = add(take_rows(self.token, batch.ids), take_rows(self.position, np.arange(t)))
        return add(x, take_rows(self.segment, batch.segments))


def multi_head_attention(
    q_in: Tensor,
    kv_in: Tensor,
    key_mask: np.ndarray,
    params: AttentionParams,
    heads: int,
    rng: Optional[np.random.Generator] = None,
    dropout_rate: float = 0.0,
) -> tuple[Tensor, np.ndarray]:
    """Scaled dot-product attention over ``heads`` heads.

    ``q_in`` is [B, Tq, d], ``kv_in`` is [B, Tk, d] and ``key_mask`` is a {0,1}
    array of shape [B, Tk].  Masked keys get exactly zero weight.  Returns the
    projected output [B, Tq, d] and the weights [B, heads, Tq, Tk].
    """
    if q_in.ndim != 3 or kv_in.ndim != 3:
        raise ShapeError(f"attention expects [B, T, d] inputs, got {q_in.shape} and {kv_in.shape}")
    b, tq, d = q_in.shape
    tk = kv_in.shape[1]
    if d % heads:
        raise ShapeError(f"{heads} heads do not divide hidden size {d}")
    key_mask = np.asarray(key_mask, dtype=np.float64).reshape(b, tk)
    if np.any(key_mask.sum(axis=1) == 0):
        raise ContractError("every key is masked for some query; attention cannot be normalized")
    dh = d // heads

    def split(x: Tensor, t: int) -> Tensor:
        return swapaxes(reshape(x, (b, t, heads, dh)), 1, 2)

    q = split(add(matmul(q_in, params.w_q), params.b_q), tq)
    k = split(add(matmul(kv_in, params.w_k), params.b_k), tk)
    v = split(add(matmul(kv_in, params.w_v), params.b_v), tk)
    scores = mul(matmul(q, swapaxes(k, -1, -2)), 1.0 / math.sqrt(dh))
    keep = key_mask[:, None, None, :]
    weights = mul(softmax(add(scores, (1.0 - keep) * MASK_FILL), axis=-1), keep)
    attended = matmul(dropout(weights, dropout_rate, rng), v)
    merged = reshape(swapaxes(attended, 1, 2), (b, tq, d))
    return add(matmul(merged, params.w_proj), params.b_proj), weights.data


def feed_forward(x: Tensor, p: EncoderLayerParams) -> Tensor:
    return add(matmul(gelu(add(matmul(x, p.ffn_w_i), p.ffn_b_i)), p.ffn_w_o), p.ffn_b_o)


def attention_sublayer(
    h: Tensor, mask: np.ndarray, p: EncoderLayerParams, heads: int,
    rng: Optional[np.random.Generator] = None, dropout_rate: float = 0.0,
) -> tuple[Tensor, np.ndarray]:
    attn, weights = multi_head_attention(h, h, mask, p.attn, heads, rng, dropout_rate)
    return layer_norm(add(h, dropout(attn, dropout_rate, rng)), p.ln1_g, p.ln1_b, LN_EPS), weights


def encoder_layer_forward(
    h: Tensor, mask: np.ndarray, p: EncoderLayerParams, heads: int,
    rng: Optional[np.random.Generator] = None, dropout_rate: float = 0.0,
) -> Tensor:
    """Post-norm Transformer layer: attention sublayer then FFN sublayer."""
    mid, _ = attention_sublayer(h, mask, p, heads, rng, dropout_rate)
    ffn = dropout(feed_forward(mid, p), dropout_rate, rng)
    return layer_norm(add(mid, ffn), p.ln2_g, p.ln2_b, LN_EPS)


def as_batch(seq) -> Batch:
    if isinstance(seq, Batch):
        return seq
    if isinstance(seq, TokenSequence):
        return Batch(seq.ids[None, :], seq.attention_mask[None, :], seq.segment_ids[None, :])
    return collate(seq)


@dataclass
class VanillaEncoder(ParamGroup):
    """Embeddings plus a stack of vanilla layers; the model that adaptation starts from."""

    embed: Embeddings
    layers: list[EncoderLayerParams]
    mlm_bias: Tensor
    config: ModelConfig = field(default=None, repr=False, compare=False)

    @classmethod
    def init(cls, config: ModelConfig, seed: Optional[int] = None) -> "VanillaEncoder":
        rng = np.random.default_rng(config.seed if seed is None else seed)
        embed = Embeddings.init(config, rng)
        layers = [EncoderLayerParams.init(config, rng) for _ in range(config.layers)]
        return cls(embed, layers, zeros(config.vocab_size), config)

    def encode(self, seq, rng: Optional[np.random.Generator] = None) -> list[Tensor]:
        return encode(seq, self, rng)


def encode(seq, model: VanillaEncoder, rng: Optional[np.random.Generator] = None) -> list[Tensor]:
    """Activations after the embeddings and after each of the L layers."""
    batch = as_batch(seq)
    cfg = model.config
    if batch.ids.shape[1] > cfg.max_len:
        raise ContractError(f"sequence length {batch.ids.shape[1]} exceeds max_len {cfg.max_len}")
    rate = cfg.dropout if rng is not None else 0.0
    h = dropout(model.embed(batch), rate, rng)
    out = [h]
    for layer in model.layers:
        h = encoder_layer_forward(h, batch.mask, layer, cfg.heads, rng, rate)
        out.append(h)
    return out
