"""Task heads, AdamW and the training / evaluation loops."""

from __future__ import annotations

import itertools
import json
import logging
import math
import re
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Optional, Sequence, Union

import numpy as np

from .checkpoint import Checkpoint
from .errors import ContractError, TrainingError
from .kb import CandidateSet, CommonsenseKB, DEFAULT_N_MAX, DEFAULT_WINDOW, retrieve
from .model import DescriptionCache, OkEncoder, adapt_from_pretrained, build_knowledge, ok_encode
from .params import ParamGroup, normal, zeros
from .tensor import (
    Tape,
    Tensor,
    add,
    backward,
    cross_entropy,
    getitem,
    log_softmax,
    matmul,
    no_grad,
    reshape,
    softmax,
    swapaxes,
    tsum,
)
from .transformer import (
    MASK_FILL,
    MASK_ID,
    ModelConfig,
    TokenSequence,
    VanillaEncoder,
    Vocabulary,
    build_sequence,
    collate,
    encode,
    split_words,
    tokenize,
)

logger = logging.getLogger(__name__)

TASK_KINDS = ("classification", "multiple_choice", "mlm_scoring")


@dataclass
class TrainConfig:
    lr: float = 5e-6
    batch_size: int = 8
    epochs: int = 10
    weight_decay: float = 0.01
    seed: int = 0
    grad_clip: float = 1.0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    def __post_init__(self):
        if self.lr <= 0 or self.batch_size <= 0 or self.epochs < 0 or self.weight_decay < 0:
            raise ValueError(f"invalid TrainConfig: {self}")

    @classmethod
    def from_dict(cls, d: Mapping) -> "TrainConfig":
        return cls(**{k: v for k, v in d.items() if k in cls.__dataclass_fields__})


@dataclass
class AdamWState:
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    step: int = 0

    @classmethod
    def init(cls, params: Mapping[str, Tensor]) -> "AdamWState":
        return cls({k: np.zeros(p.shape) for k, p in params.items()},
                   {k: np.zeros(p.shape) for k, p in params.items()})


def adamw_step(params: Mapping[str, Tensor], grads: Mapping[str, np.ndarray],
               state: AdamWState, config: TrainConfig) -> None:
    """One AdamW update in place (bias-corrected moments, decoupled decay)."""
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise TrainingError(f"non-finite gradient for parameter {name!r}")
    state.step += 1
    t = state.step
    b1, b2 = config.beta1, config.beta2
    c1 = 1.0 - b1 ** t
    c2 = 1.0 - b2 ** t
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            g = np.zeros(p.shape)
        m = state.m[name]
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        p.data *= 1.0 - config.lr * config.weight_decay
        p.data -= config.lr * (m / c1) / (np.sqrt(v / c2) + config.eps)


def clip_grad_norm(grads: dict[str, np.ndarray], max_norm: float) -> float:
    total = math.sqrt(sum(float((g * g).sum()) for g in grads.values()))
    if max_norm > 0 and total > max_norm:
        scale = max_norm / (total + 1e-6)
        for g in grads.values():
            g *= scale
    return total


@dataclass
class Example:
    text: str
    label: Optional[int] = None
    text_pair: Optional[str] = None
    candidates: Optional[list[str]] = None
    answer: Optional[int] = None
    span: Optional[tuple[int, int]] = None
    cs: Optional[list[int]] = None

    @property
    def target(self) -> int:
        return self.answer if self.candidates is not None else self.label

    @classmethod
    def from_dict(cls, d: Mapping) -> "Example":
        if "text" not in d:
            raise ValueError("example is missing 'text'")
        span = tuple(d["span"]) if d.get("span") is not None else None
        return cls(d["text"], d.get("label"), d.get("text_pair"), d.get("candidates"), d.get("answer"),
                   span, d.get("cs"))

    def to_dict(self) -> dict:
        return {k: v for k, v in asdict(self).items() if v is not None}


def load_jsonl(path) -> list[Example]:
    out = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if line.strip():
                try:
                    out.append(Example.from_dict(json.loads(line)))
                except (ValueError, TypeError) as exc:
                    raise ValueError(f"{path}:{lineno}: {exc}") from exc
    return out


def dump_jsonl(examples: Iterable[Example], path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for ex in examples:
            fh.write(json.dumps(ex.to_dict()) + "\n")


def substitute(text: str, span: Optional[Sequence[int]], candidate: str) -> str:
    """Replace the pronoun span (character offsets) or, failing that, the first ``_`` blank."""
    if span is None:
        m = re.search(r"(?<!\w)_(?!\w)", text)
        if m is None:
            raise ContractError(f"no span given and no '_' blank in {text!r}")
        start, end = m.span()
    else:
        start, end = span
    if not 0 <= start < end <= len(text):
        raise ContractError(f"span ({start}, {end}) out of bounds for text of length {len(text)}")
    return text[:start] + candidate + text[end:]


@dataclass
class TaskSpec:
    kind: str = "classification"
    num_classes: int = 2

    def __post_init__(self):
        if self.kind not in TASK_KINDS:
            raise ValueError(f"unknown task kind {self.kind!r}; expected one of {TASK_KINDS}")

    @property
    def head_outputs(self) -> int:
        return {"classification": self.num_classes, "multiple_choice": 1, "mlm_scoring": 0}[self.kind]


@dataclass
class LinearHead(ParamGroup):
    """A single linear layer over the final ``[CLS]`` state."""

    w: Tensor
    b: Tensor

    @classmethod
    def init(cls, d: int, outputs: int, rng: Optional[np.random.Generator] = None, std: float = 0.0):
        w = normal(rng, (d, outputs), std) if std > 0 else zeros((d, outputs))
        return cls(w, zeros(outputs))

    def __call__(self, x: Tensor) -> Tensor:
        return add(matmul(x, self.w), self.b)


Encoder = Union[VanillaEncoder, OkEncoder]


class TaskModel:
    """An encoder (vanilla or knowledge-enhanced) plus a task head and its text plumbing."""

    def __init__(
        self,
        encoder: Encoder,
        task: TaskSpec,
        vocab: Vocabulary,
        kb: Optional[CommonsenseKB] = None,
        head: Optional[LinearHead] = None,
        window: int = DEFAULT_WINDOW,
        n_max: Optional[int] = None,
        head_std: float = 0.0,
    ):
        self.encoder = encoder
        self.task = task
        self.vocab = vocab
        self.kb = kb
        self.window = window
        self.n_max = encoder.config.n_max if n_max is None else n_max
        cfg = encoder.config
        if head is None and task.head_outputs:
            head = LinearHead.init(cfg.hidden, task.head_outputs, np.random.default_rng(cfg.seed + 7919), head_std)
        self.head = head
        self._seq_cache: dict[tuple, TokenSequence] = {}
        self._cs_cache: dict[str, CandidateSet] = {}
        self._desc_cache = DescriptionCache(vocab, cfg.max_len)

    @property
    def is_ok(self) -> bool:
        return isinstance(self.encoder, OkEncoder)

    @property
    def config(self) -> ModelConfig:
        return self.encoder.config

    def parameters(self) -> dict[str, Tensor]:
        params = {f"encoder.{k}": v for k, v in self.encoder.named_parameters()}
        if self.head is not None:
            params.update({f"head.{k}": v for k, v in self.head.named_parameters()})
        return params

    def zero_grad(self) -> None:
        for p in self.parameters().values():
            p.grad = None

    # -- inputs ---------------------------------------------------------------

    def sequence(self, text: str, pair: Optional[str] = None) -> TokenSequence:
        key = (text, pair)
        seq = self._seq_cache.get(key)
        if seq is None:
            seq = tokenize(text, self.vocab, pair, self.config.max_len, insert_k=self.is_ok)
            self._seq_cache[key] = seq
        return seq

    def candidates(self, text: str, pair: Optional[str] = None,
                   ids: Optional[Sequence[int]] = None) -> CandidateSet:
        if ids is not None:
            if self.kb is None:
                raise ContractError("precomputed commonsense ids need a knowledge base")
            picked = sorted(set(ids))[: self.n_max]
            return CandidateSet.of(self.kb[i] for i in picked)
        if self.kb is None:
            return CandidateSet()
        joined = text if pair is None else f"{text}\n{pair}"
        cs = self._cs_cache.get(joined)
        if cs is None:
            hits = set(retrieve(text, self.kb, self.window, None).ids)
            if pair is not None:
                hits |= set(retrieve(pair, self.kb, self.window, None).ids)
            cs = CandidateSet.of(self.kb[i] for i in sorted(hits)[: self.n_max])
            self._cs_cache[joined] = cs
        return cs

    # -- forward --------------------------------------------------------------

    def hidden(self, seqs: Sequence[TokenSequence], cs: Sequence[CandidateSet],
               rng: Optional[np.random.Generator] = None) -> Tensor:
        batch = collate(seqs)
        if self.is_ok:
            knowledge = build_knowledge(cs, self._desc_cache, self.n_max)
            return ok_encode(batch, knowledge, self.encoder, rng).last
        return encode(batch, self.encoder, rng)[-1]

    def cls_logits(self, items: Sequence[tuple[str, Optional[str], Optional[Sequence[int]]]],
                   rng: Optional[np.random.Generator] = None) -> Tensor:
        seqs = [self.sequence(t, p) for t, p, _ in items]
        cs = [self.candidates(t, p, ids) for t, p, ids in items]
        h = self.hidden(seqs, cs, rng)
        return self.head(getitem(h, (slice(None), 0)))

    def logits(self, examples: Sequence[Example], rng: Optional[np.random.Generator] = None) -> Tensor:
        """[B, C] scores: class logits or per-choice scores (padded choices masked)."""
        kind = self.task.kind
        if kind == "classification":
            return self.cls_logits([(e.text, e.text_pair, e.cs) for e in examples], rng)
        widths = [len(e.candidates or ()) for e in examples]
        if min(widths) < 2:
            raise ContractError("multiple-choice examples need at least two candidates")
        if kind == "multiple_choice":
            items = [(substitute(e.text, e.span, c), e.text_pair, None) for e in examples for c in e.candidates]
            flat = reshape(self.cls_logits(items, rng), (-1,))
        else:
            flat = self.mlm_scores([(e.text, e.span, c) for e in examples for c in e.candidates], rng)
        width = max(widths)
        if all(w == width for w in widths):
            return reshape(flat, (len(examples), width))
        idx = np.zeros((len(examples), width), dtype=np.int64)
        fill = np.zeros((len(examples), width))
        pos = 0
        for i, w in enumerate(widths):
            idx[i, :w] = np.arange(pos, pos + w)
            fill[i, w:] = MASK_FILL
            pos += w
        return add(getitem(flat, idx), fill)

    def mlm_inputs(self, text: str, span, candidate: str) -> tuple[TokenSequence, list[int], list[int], str]:
        cand_ids = self.vocab.ids(split_words(candidate))
        if not cand_ids:
            raise ContractError(f"candidate {candidate!r} produces no tokens")
        substituted = substitute(text, span, candidate)
        if span is None:
            start, end = re.search(r"(?<!\w)_(?!\w)", text).span()
        else:
            start, end = span
        before = self.vocab.ids(split_words(text[:start]))
        after = self.vocab.ids(split_words(text[end:]))
        offset = 1 + int(self.is_ok)
        budget = self.config.max_len - offset - 1
        if len(before) + len(cand_ids) > budget:
            raise ContractError(f"candidate {candidate!r} does not fit in max_len {self.config.max_len}")
        seq = build_sequence(before + [MASK_ID] * len(cand_ids) + after, None, self.config.max_len, self.is_ok)
        positions = [offset + len(before) + j for j in range(len(cand_ids))]
        return seq, positions, cand_ids, substituted

    def mlm_scores(self, items: Sequence[tuple[str, Optional[Sequence[int]], str]],
                   rng: Optional[np.random.Generator] = None) -> Tensor:
        """Summed log-probability of each candidate's tokens at its [MASK] slots."""
        prepared = [self.mlm_inputs(t, s, c) for t, s, c in items]
        seqs = [p[0] for p in prepared]
        cs = [self.candidates(p[3]) if self.is_ok else CandidateSet() for p in prepared]
        h = self.hidden(seqs, cs, rng)
        rows = np.concatenate([[i] * len(p[1]) for i, p in enumerate(prepared)])
        cols = np.concatenate([p[1] for p in prepared])
        targets = np.concatenate([p[2] for p in prepared])
        picked = getitem(h, (rows, cols))
        table = self.encoder.text_embed.token if self.is_ok else self.encoder.embed.token
        logp = log_softmax(add(matmul(picked, swapaxes(table, 0, 1)), self.encoder.mlm_bias), axis=-1)
        token_lp = getitem(logp, (np.arange(len(targets)), targets))
        owner = np.zeros((len(items), len(targets)))
        owner[rows, np.arange(len(targets))] = 1.0
        return reshape(matmul(Tensor(owner), reshape(token_lp, (-1, 1))), (-1,))

    def loss(self, examples: Sequence[Example], rng: Optional[np.random.Generator] = None) -> Tensor:
        return cross_entropy(self.logits(examples, rng), [e.target for e in examples])

    def probabilities(self, examples: Sequence[Example], batch_size: int = 32) -> np.ndarray:
        out = []
        with no_grad():
            for start in range(0, len(examples), batch_size):
                out.append(softmax(self.logits(examples[start:start + batch_size]), axis=-1).data)
        return np.concatenate(out, axis=0) if out else np.zeros((0, 0))

    # -- persistence ------------------------------------------------------------

    def to_checkpoint(self, extra_meta: Optional[dict] = None) -> Checkpoint:
        config = {"model": self.config.to_dict(), "task": asdict(self.task),
                  "kind": "ok" if self.is_ok else "vanilla", "window": self.window, "n_max": self.n_max}
        meta = {"vocab": self.vocab.to_list(), **(extra_meta or {})}
        return Checkpoint(config, {k: v.data.copy() for k, v in self.parameters().items()}, meta)

    @classmethod
    def from_checkpoint(cls, ckpt: Checkpoint, kb: Optional[CommonsenseKB] = None,
                        vocab: Optional[Vocabulary] = None) -> "TaskModel":
        cfg = ModelConfig.from_dict(ckpt.config["model"])
        task = TaskSpec(**ckpt.config["task"])
        if vocab is None:
            vocab = Vocabulary(ckpt.meta["vocab"][6:])
        encoder = OkEncoder.init(cfg) if ckpt.config["kind"] == "ok" else VanillaEncoder.init(cfg)
        model = cls(encoder, task, vocab, kb, window=ckpt.config.get("window", DEFAULT_WINDOW),
                    n_max=ckpt.config.get("n_max"))
        params = model.parameters()
        missing = sorted(set(params) - set(ckpt.params))
        if missing:
            raise ContractError(f"checkpoint lacks parameters: {missing[:5]}")
        for name, p in params.items():
            p.data = np.array(ckpt.params[name], dtype=np.float64)
        return model


def classify(text: str, cs: Optional[CandidateSet], model: TaskModel, pair: Optional[str] = None) -> np.ndarray:
    """Class probabilities ``softmax(W h_CLS + b)`` for one input."""
    with no_grad():
        seq = model.sequence(text, pair)
        h = model.hidden([seq], [cs if cs is not None else model.candidates(text, pair)])
        return softmax(model.head(getitem(h, (slice(None), 0))), axis=-1).data[0]


def mc_score(query: str, candidates: Sequence[str], model: TaskModel,
             span: Optional[Sequence[int]] = None) -> np.ndarray:
    """Probabilities over candidates after substituting each into the pronoun span."""
    if len(candidates) < 2:
        raise ContractError("mc_score needs at least two candidates")
    ex = Example(query, candidates=list(candidates), answer=0, span=tuple(span) if span is not None else None)
    with no_grad():
        return softmax(model.logits([ex]), axis=-1).data[0]


def mlm_score(sentence: str, span: Optional[Sequence[int]], candidate: str, model: TaskModel) -> float:
    """Log-probability of ``candidate`` filling the masked span."""
    with no_grad():
        return float(model.mlm_scores([(sentence, span, candidate)]).data[0])


@dataclass
class EpochMetrics:
    epoch: int
    steps: int
    running_loss: float
    train_loss: float
    train_accuracy: float
    eval_accuracy: Optional[float] = None

    HEADER = ("epoch", "steps", "running_loss", "train_loss", "train_accuracy", "eval_accuracy")

    def tsv_row(self) -> str:
        ev = "" if self.eval_accuracy is None else f"{self.eval_accuracy:.6f}"
        return (f"{self.epoch}\t{self.steps}\t{self.running_loss:.10f}\t{self.train_loss:.10f}\t"
                f"{self.train_accuracy:.6f}\t{ev}")


@dataclass
class EvalResult:
    predictions: np.ndarray
    probabilities: np.ndarray
    accuracy: float


def evaluate(model: TaskModel, data: Sequence[Example], batch_size: int = 32) -> EvalResult:
    probs = model.probabilities(list(data), batch_size)
    preds = probs.argmax(axis=1) if len(data) else np.zeros(0, dtype=np.int64)
    targets = np.array([e.target for e in data])
    acc = float((preds == targets).mean()) if len(data) else float("nan")
    return EvalResult(preds, probs, acc)


def per_example_losses(model: TaskModel, data: Sequence[Example], batch_size: int = 32) -> np.ndarray:
    probs = model.probabilities(list(data), batch_size)
    targets = np.array([e.target for e in data])
    return -np.log(probs[np.arange(len(data)), targets])


@dataclass
class TrainResult:
    model: TaskModel
    metrics: list[EpochMetrics] = field(default_factory=list)
    steps: int = 0

    def metrics_tsv(self) -> str:
        return "\t".join(EpochMetrics.HEADER) + "\n" + "".join(m.tsv_row() + "\n" for m in self.metrics)


def train(
    model: TaskModel,
    data: Sequence[Example],
    config: TrainConfig,
    eval_data: Optional[Sequence[Example]] = None,
    params: Optional[Mapping[str, Tensor]] = None,
    track_train_loss: bool = True,
) -> TrainResult:
    """Minibatch AdamW on the mean task loss.

    The reported ``train_loss`` of an epoch is the mean per-example loss over
    the whole training set at the end-of-epoch parameters.
    """
    if not data:
        raise ContractError("train needs a non-empty dataset")
    data = list(data)
    params = dict(params) if params is not None else model.parameters()
    state = AdamWState.init(params)
    order_rng = np.random.default_rng(config.seed)
    drop_rng = np.random.default_rng(config.seed + 1) if model.config.dropout > 0 else None
    result = TrainResult(model)
    for epoch in range(1, config.epochs + 1):
        order = order_rng.permutation(len(data))
        running = []
        for start in range(0, len(data), config.batch_size):
            batch = [data[i] for i in order[start:start + config.batch_size]]
            model.zero_grad()
            with Tape():
                loss = model.loss(batch, drop_rng)
                backward(loss)
            grads = {k: (p.grad if p.grad is not None else np.zeros(p.shape)) for k, p in params.items()}
            clip_grad_norm(grads, config.grad_clip)
            adamw_step(params, grads, state, config)
            running.append(loss.item())
            result.steps += 1
        model.zero_grad()
        if track_train_loss:
            losses = per_example_losses(model, data)
            train_acc = float(evaluate(model, data).accuracy)
            train_loss = float(losses.mean())
        else:
            train_loss = train_acc = float("nan")
        ev = evaluate(model, eval_data).accuracy if eval_data else None
        m = EpochMetrics(epoch, result.steps, float(np.mean(running)), train_loss, train_acc, ev)
        logger.info("epoch %d: loss %.6f acc %.4f eval %s", epoch, m.train_loss, m.train_accuracy, ev)
        result.metrics.append(m)
    return result


def grid_search(
    build,
    train_data: Sequence[Example],
    dev_data: Sequence[Example],
    lrs: Sequence[float] = (1e-5, 2e-5, 5e-5),
    batch_sizes: Sequence[int] = (8, 16, 32, 64),
    epochs: int = 10,
    seed: int = 0,
) -> tuple[TrainConfig, dict[tuple[float, int], float]]:
    """Train a fresh model from ``build()`` per (lr, batch) and keep the best dev accuracy."""
    scores = {}
    best = None
    for lr, bs in itertools.product(lrs, batch_sizes):
        cfg = TrainConfig(lr=lr, batch_size=bs, epochs=epochs, seed=seed)
        model = build()
        train(model, train_data, cfg, track_train_loss=False)
        scores[(lr, bs)] = evaluate(model, dev_data).accuracy
        if best is None or scores[(lr, bs)] > scores[(best.lr, best.batch_size)]:
            best = cfg
    return best, scores


def adapt_task_model(vanilla: TaskModel, seed: int = 0) -> TaskModel:
    """Knowledge-enhanced task model initialized from a trained vanilla task model."""
    if vanilla.is_ok:
        raise ContractError("source model is already knowledge-enhanced")
    ok = adapt_from_pretrained(vanilla.encoder, seed=seed)
    head = None
    if vanilla.head is not None:
        head = LinearHead(Tensor(vanilla.head.w.data.copy(), requires_grad=True),
                          Tensor(vanilla.head.b.data.copy(), requires_grad=True))
    return TaskModel(ok, vanilla.task, vanilla.vocab, vanilla.kb, head, vanilla.window, vanilla.n_max)
