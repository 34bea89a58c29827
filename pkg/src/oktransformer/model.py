"""The knowledge-enhanced encoder.

Three stacks cooperate layer by layer:

* the text stack (``t1``) encodes ``[CLS] [k] w1 .. [SEP]``; the ``[k]`` token
  receives integrated commonsense inside its feed-forward residual,
* the commonsense stack (``t2``) encodes each candidate description on its own
  and exposes the ``[CLS]`` state of every layer,
* the integration blocks (``t3``) let ``[k]`` attend over those per-layer
  description states plus a learned null row.
"""

from __future__ import annotations

import copy
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .errors import AdaptationError, ContractError, ShapeError
from .kb import CandidateSet
from .params import ParamGroup, normal, ones, zeros
from .tensor import Tensor, add, concat, dropout, getitem, layer_norm, reshape, take_rows
from .transformer import (
    CLS_ID,
    K_ID,
    LN_EPS,
    AttentionParams,
    Batch,
    Embeddings,
    EncoderLayerParams,
    ModelConfig,
    TokenSequence,
    VanillaEncoder,
    Vocabulary,
    as_batch,
    attention_sublayer,
    collate,
    encode,
    feed_forward,
    multi_head_attention,
    tokenize,
)

K_POS = 1
ADAPT_STD = 0.02


@dataclass
class IntegrationParams(ParamGroup):
    attn: AttentionParams
    ln_g: Tensor
    ln_b: Tensor

    @classmethod
    def init(cls, d: int, rng: np.random.Generator, std: float) -> "IntegrationParams":
        return cls(AttentionParams.init(d, rng, std), ones(d), zeros(d))


@dataclass
class OkLayerParams(ParamGroup):
    t1: EncoderLayerParams
    t2: EncoderLayerParams
    t3: IntegrationParams


@dataclass
class OkEncoder(ParamGroup):
    text_embed: Embeddings
    cs_embed: Embeddings
    layers: list[OkLayerParams]
    k_embedding: Tensor
    null_embedding: Tensor
    mlm_bias: Tensor
    config: ModelConfig = field(default=None, repr=False, compare=False)

    @classmethod
    def init(cls, config: ModelConfig, seed: Optional[int] = None) -> "OkEncoder":
        """Random initialization of every stack (no pretrained source)."""
        rng = np.random.default_rng(config.seed if seed is None else seed)
        d, std = config.hidden, config.init_std
        text = Embeddings.init(config, rng)
        cs = Embeddings.init(config, rng)
        layers = [OkLayerParams(EncoderLayerParams.init(config, rng), EncoderLayerParams.init(config, rng),
                                IntegrationParams.init(d, rng, std)) for _ in range(config.layers)]
        return cls(text, cs, layers, normal(rng, (d,), std), normal(rng, (config.layers, d), std),
                   zeros(config.vocab_size), config)

    def text_vanilla(self) -> VanillaEncoder:
        """The text stack viewed as a vanilla encoder (``[k]`` row swapped in).

        Layers are shared, not copied; the token table is a copy.
        """
        token = self.text_embed.token.data.copy()
        token[K_ID] = self.k_embedding.data
        embed = Embeddings(Tensor(token, requires_grad=True), self.text_embed.position, self.text_embed.segment)
        return VanillaEncoder(embed, [layer.t1 for layer in self.layers], self.mlm_bias, self.config)

    def commonsense_vanilla(self) -> VanillaEncoder:
        return VanillaEncoder(self.cs_embed, [layer.t2 for layer in self.layers], self.mlm_bias, self.config)


@dataclass
class KnowledgeBatch:
    """Candidate sets of a minibatch, flattened for one pass of the commonsense stack.

    ``slots[b, j]`` indexes the per-layer row table ``[null, desc_0, .., desc_{U-1}]``;
    ``slot_mask`` is 0 on padding rows added to reach the batch maximum.
    """

    descriptions: Optional[Batch]
    slots: np.ndarray
    slot_mask: np.ndarray
    entry_ids: list[tuple[int, ...]]


class DescriptionCache:
    """Memoized tokenization of rendered descriptions."""

    def __init__(self, vocab: Vocabulary, max_len: int):
        self.vocab = vocab
        self.max_len = max_len
        self._seqs: dict[str, TokenSequence] = {}

    def __call__(self, text: str) -> TokenSequence:
        seq = self._seqs.get(text)
        if seq is None:
            seq = tokenize(text, self.vocab, max_len=self.max_len, insert_k=False)
            self._seqs[text] = seq
        return seq


def build_knowledge(candidates: Sequence[CandidateSet], cache: DescriptionCache,
                    n_max: Optional[int] = None) -> KnowledgeBatch:
    if n_max is not None:
        for cs in candidates:
            if len(cs) > n_max + 1:
                raise ContractError(f"candidate set of size {len(cs)} exceeds n_max + 1 = {n_max + 1}")
    unique: dict[str, int] = {}
    rows: list[list[int]] = []
    for cs in candidates:
        row = [0]
        for e in cs.real:
            if e.rendered not in unique:
                unique[e.rendered] = len(unique) + 1
            # a candidate set is a set of descriptions: repeated text gets one slot
            if unique[e.rendered] not in row:
                row.append(unique[e.rendered])
        rows.append(row)
    width = max(len(r) for r in rows)
    slots = np.zeros((len(rows), width), dtype=np.int64)
    slot_mask = np.zeros((len(rows), width), dtype=np.int64)
    for i, r in enumerate(rows):
        slots[i, :len(r)] = r
        slot_mask[i, :len(r)] = 1
    desc = collate([cache(t) for t in unique]) if unique else None
    return KnowledgeBatch(desc, slots, slot_mask, [cs.ids for cs in candidates])


def commonsense_rows(kb: KnowledgeBatch, model: OkEncoder,
                     rng: Optional[np.random.Generator] = None) -> list[Tensor]:
    """Per text-layer i (1..L): the [B, n+1, d] key/value rows for integration."""
    cfg = model.config
    d = cfg.hidden
    cls_states = None
    if kb.descriptions is not None:
        acts = encode(kb.descriptions, model.commonsense_vanilla(), rng)
        cls_states = [getitem(a, (slice(None), 0)) for a in acts]
    out = []
    for i in range(cfg.layers):
        null = reshape(getitem(model.null_embedding, slice(i, i + 1)), (1, d))
        table = null if cls_states is None else concat([null, cls_states[i + 1]], axis=0)
        out.append(take_rows(table, kb.slots))
    return out


def encode_commonsense(cs: CandidateSet, model: OkEncoder, vocab: Vocabulary) -> list[Tensor]:
    """Per-layer ``(n+1) x d`` embeddings of one candidate set; row 0 is the null row."""
    kb = build_knowledge([cs], DescriptionCache(vocab, model.config.max_len), model.config.n_max)
    return [reshape(rows, rows.shape[1:]) for rows in commonsense_rows(kb, model)]


def integrate(
    k_prev: Tensor, emb: Tensor, row_mask: np.ndarray, t3: IntegrationParams, heads: int,
) -> tuple[Tensor, np.ndarray]:
    """``LayerNorm(k + MHA(k, emb, emb))`` with ``k`` as the only query.

    ``k_prev`` is [B, 1, d] (or [d]), ``emb`` is [B, n+1, d] (or [n+1, d]).
    Returns cs_emb in the shape of ``k_prev`` and weights [B, heads, 1, n+1].
    """
    squeeze = k_prev.ndim == 1
    if squeeze:
        k_prev = reshape(k_prev, (1, 1, -1))
        emb = reshape(emb, (1,) + emb.shape)
        row_mask = np.asarray(row_mask).reshape(1, -1)
    if emb.shape[1] == 0:
        raise ContractError("integration needs at least one commonsense row")
    if emb.shape[-1] != k_prev.shape[-1]:
        raise ShapeError(f"knowledge dim {k_prev.shape[-1]} != commonsense dim {emb.shape[-1]}")
    attn, weights = multi_head_attention(k_prev, emb, row_mask, t3.attn, heads)
    out = layer_norm(add(k_prev, attn), t3.ln_g, t3.ln_b, LN_EPS)
    if squeeze:
        out = reshape(out, (out.shape[-1],))
    return out, weights


def t1_layer_forward(
    h: Tensor, mask: np.ndarray, cs_emb: Optional[Tensor], t1: EncoderLayerParams, heads: int,
    rng: Optional[np.random.Generator] = None, dropout_rate: float = 0.0,
) -> Tensor:
    """One text-stack layer over ``[CLS] [k] w..``; ``cs_emb`` [B, 1, d] joins only the ``[k]`` residual.

    With ``cs_emb`` None (or zero) this is exactly the vanilla layer.
    """
    mid, _ = attention_sublayer(h, mask, t1, heads, rng, dropout_rate)
    pre = add(mid, dropout(feed_forward(mid, t1), dropout_rate, rng))
    if cs_emb is not None:
        b, t, d = h.shape
        parts = [Tensor(np.zeros((b, K_POS, d))), cs_emb]
        if t > K_POS + 1:
            parts.append(Tensor(np.zeros((b, t - K_POS - 1, d))))
        pre = add(pre, concat(parts, axis=1))
    return layer_norm(pre, t1.ln2_g, t1.ln2_b, LN_EPS)


@dataclass
class OkOutput:
    hidden: list[Tensor]
    cs_emb: list[Tensor]
    attention: list[np.ndarray]
    knowledge: KnowledgeBatch

    @property
    def last(self) -> Tensor:
        return self.hidden[-1]

    def k(self, layer: int) -> Tensor:
        return getitem(self.hidden[layer], (slice(None), K_POS))

    def cls(self, layer: int = -1) -> Tensor:
        return getitem(self.hidden[layer], (slice(None), 0))


def _embed_text(batch: Batch, model: OkEncoder) -> Tensor:
    e = model.text_embed
    vocab_rows = e.token.shape[0]
    table = concat([e.token, reshape(model.k_embedding, (1, -1))], axis=0)
    ids = np.where(batch.ids == K_ID, vocab_rows, batch.ids)
    t = batch.ids.shape[1]
    x = add(take_rows(table, ids), take_rows(e.position, np.arange(t)))
    return add(x, take_rows(e.segment, batch.segments))


def ok_encode(
    x,
    knowledge: KnowledgeBatch,
    model: OkEncoder,
    rng: Optional[np.random.Generator] = None,
    zero_integration: bool = False,
    emb_override: Optional[list[Tensor]] = None,
) -> OkOutput:
    """Run the text stack with per-layer knowledge integration.

    ``zero_integration`` forces cs_emb to zero at every layer.  ``emb_override``
    replaces the per-layer commonsense rows (used for Jacobian probes).
    """
    batch = as_batch(x)
    cfg = model.config
    if batch.ids.shape[1] > cfg.max_len:
        raise ContractError(f"sequence length {batch.ids.shape[1]} exceeds max_len {cfg.max_len}")
    if batch.ids.shape[1] <= K_POS or np.any(batch.ids[:, K_POS] != K_ID):
        raise ContractError("ok_encode needs [k] at position 1 of every sequence")
    rate = cfg.dropout if rng is not None else 0.0
    rows = emb_override if emb_override is not None else commonsense_rows(knowledge, model, rng)
    h = dropout(_embed_text(batch, model), rate, rng)
    hidden, embs, records = [h], [], []
    for i, layer in enumerate(model.layers):
        k_prev = getitem(h, (slice(None), slice(K_POS, K_POS + 1)))
        cs_emb, weights = integrate(k_prev, rows[i], knowledge.slot_mask, layer.t3, cfg.heads)
        records.append(weights)
        embs.append(cs_emb)
        h = t1_layer_forward(h, batch.mask, None if zero_integration else cs_emb, layer.t1,
                             cfg.heads, rng, rate)
        hidden.append(h)
    return OkOutput(hidden, embs, records, knowledge)


def _layer_from(vanilla: EncoderLayerParams) -> EncoderLayerParams:
    return copy.deepcopy(vanilla)


def adapt_from_pretrained(vanilla: VanillaEncoder, config: Optional[ModelConfig] = None,
                          seed: int = 0, std: float = ADAPT_STD) -> OkEncoder:
    """Initialize both stacks from one vanilla encoder; integration parts are fresh.

    Text and commonsense stacks receive independent copies of each vanilla
    layer and of the embeddings.  The integration blocks, the ``[k]``
    embedding and the null rows are drawn from N(0, std^2) with ``seed``.
    """
    config = config or vanilla.config
    src = vanilla.config
    if len(vanilla.layers) != config.layers:
        raise AdaptationError(f"vanilla model has {len(vanilla.layers)} layers, config expects {config.layers}")
    for name in ("hidden", "ffn", "vocab_size", "max_len"):
        if getattr(src, name) != getattr(config, name):
            raise AdaptationError(f"config {name} {getattr(config, name)} != vanilla {getattr(src, name)}")
    d = config.hidden
    for i, layer in enumerate(vanilla.layers):
        for pname, p in layer.named_parameters():
            expected = {"ffn_w_i": (d, config.ffn), "ffn_w_o": (config.ffn, d)}.get(pname)
            if expected is not None and p.shape != expected:
                raise AdaptationError(f"layer {i}: {pname} has shape {p.shape}, expected {expected}")
    rng = np.random.default_rng(seed)
    layers = [OkLayerParams(_layer_from(v), _layer_from(v), IntegrationParams.init(d, rng, std))
              for v in vanilla.layers]
    return OkEncoder(copy.deepcopy(vanilla.embed), copy.deepcopy(vanilla.embed), layers,
                     normal(rng, (d,), std), normal(rng, (config.layers, d), std),
                     copy.deepcopy(vanilla.mlm_bias), config)
