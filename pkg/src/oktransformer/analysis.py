"""Diagnostics: parameter drift, leave-one-out commonsense influence, low-resource splits."""

from __future__ import annotations

import fnmatch
import re
from dataclasses import dataclass, field
from typing import Callable, Mapping, Optional, Sequence, Union

import numpy as np

from .checkpoint import Checkpoint
from .errors import CheckpointError, ContractError
from .kb import CandidateSet, CommonsenseKB, DEFAULT_WINDOW, retrieve
from .training import Example, TaskModel, classify

DEFAULT_DRIFT_PATTERN = "*ffn_w_i"
_LAYER_RE = re.compile(r"layers\.(\d+)\.")

Params = Union[Checkpoint, Mapping[str, np.ndarray]]


@dataclass
class DriftRow:
    layer: int
    name: str
    distance: float


@dataclass
class DriftReport:
    pattern: str
    rows: list[DriftRow] = field(default_factory=list)

    def per_layer(self) -> dict[int, float]:
        """layer -> L1 distance; the pattern must select one matrix per layer."""
        out: dict[int, float] = {}
        for r in self.rows:
            if r.layer in out:
                raise ContractError(f"pattern {self.pattern!r} selects several matrices in layer {r.layer}; "
                                    "use a narrower pattern or read .rows")
            out[r.layer] = r.distance
        return out

    def to_tsv(self) -> str:
        return "layer\tparameter\tl1\n" + "".join(f"{r.layer}\t{r.name}\t{r.distance:.10g}\n" for r in self.rows)


def _params_of(x: Params) -> Mapping[str, np.ndarray]:
    return x.params if isinstance(x, Checkpoint) else x


def param_drift(before: Params, after: Params, pattern: str = DEFAULT_DRIFT_PATTERN) -> DriftReport:
    """Per-layer L1 distance between matching parameters of two structurally identical models."""
    a, b = _params_of(before), _params_of(after)
    for (na, va), (nb, vb) in zip(a.items(), b.items()):
        if na != nb or np.shape(va) != np.shape(vb):
            raise CheckpointError(f"checkpoints diverge at parameter {na!r} ({np.shape(va)}) vs "
                                  f"{nb!r} ({np.shape(vb)})")
    if len(a) != len(b):
        longer = a if len(a) > len(b) else b
        raise CheckpointError(f"checkpoints diverge at parameter {list(longer)[min(len(a), len(b))]!r}")
    report = DriftReport(pattern)
    for name, va in a.items():
        if not fnmatch.fnmatchcase(name, pattern):
            continue
        m = _LAYER_RE.search(name)
        layer = int(m.group(1)) if m else -1
        dist = float(np.abs(np.asarray(b[name], dtype=np.float64) - np.asarray(va, dtype=np.float64)).sum())
        report.rows.append(DriftRow(layer, name, dist))
    report.rows.sort(key=lambda r: (r.layer, r.name))
    return report


@dataclass
class InfluenceRecord:
    entry_id: int
    influence: float
    rank: int


def influence(text: str, cs: CandidateSet, model: TaskModel, pair: Optional[str] = None) -> list[InfluenceRecord]:
    """Leave-one-out influence of each real candidate on the class-probability vector.

    Sorted by descending influence, ties broken by entry id; the null slot is
    never removed.
    """
    if len(cs.real) < 1:
        raise ContractError("influence needs the null slot plus at least one real candidate")
    full = classify(text, cs, model, pair)
    scored = []
    for entry in cs.real:
        reduced = classify(text, cs.without(entry.id), model, pair)
        scored.append((float(np.linalg.norm(full - reduced)), entry.id))
    scored.sort(key=lambda s: (-s[0], s[1]))
    return [InfluenceRecord(eid, value, rank) for rank, (value, eid) in enumerate(scored, 1)]


def influence_tsv(records: Sequence[InfluenceRecord]) -> str:
    return "id\tinfluence\trank\n" + "".join(f"{r.entry_id}\t{r.influence:.10g}\t{r.rank}\n" for r in records)


def kb_candidates(kb: CommonsenseKB, window: int = DEFAULT_WINDOW) -> Callable[[Example], frozenset[int]]:
    """Real candidate ids of an example: precomputed ``cs`` if present, else retrieval."""
    def lookup(ex: Example) -> frozenset[int]:
        if ex.cs is not None:
            return frozenset(ex.cs)
        ids = set(retrieve(ex.text, kb, window, None).ids)
        if ex.text_pair is not None:
            ids |= set(retrieve(ex.text_pair, kb, window, None).ids)
        return frozenset(ids)
    return lookup


def low_resource_split(
    train: Sequence[Example],
    test: Sequence[Example],
    k: int,
    seed: int,
    kb: Union[CommonsenseKB, Callable[[Example], frozenset[int]]],
    any_overlap: bool = False,
) -> tuple[list[Example], list[Example]]:
    """Sample ``k`` training examples; keep test examples whose knowledge was all seen.

    A test example survives when its real candidate set is non-empty and a
    subset of the union over the sampled training examples (or, with
    ``any_overlap``, merely intersects it).
    """
    if k > len(train):
        raise ContractError(f"k={k} exceeds the training set size {len(train)}")
    if k <= 0:
        raise ContractError("k must be positive")
    lookup = kb if callable(kb) else kb_candidates(kb)
    rng = np.random.default_rng(seed)
    picked = sorted(rng.choice(len(train), size=k, replace=False).tolist())
    train_k = [train[i] for i in picked]
    seen: set[int] = set()
    for ex in train_k:
        seen |= lookup(ex)
    kept = []
    for ex in test:
        ids = lookup(ex)
        if not ids:
            continue
        if (ids & seen) if any_overlap else ids <= seen:
            kept.append(ex)
    return train_k, kept
