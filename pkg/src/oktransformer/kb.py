"""Commonsense knowledge base: ingestion, rendering, phrase index and retrieval."""

from __future__ import annotations

import itertools
import logging
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Optional, Sequence

import numpy as np

from .errors import ContractError, IngestionError

logger = logging.getLogger(__name__)

WILDCARD = "*"
PLACEHOLDERS = frozenset({"personx", "persony", "personz", "___", "_"})
DEFAULT_WINDOW = 5
DEFAULT_N_MAX = 64

_NORM_RE = re.compile(r"\w+")


def normalize_words(text: str) -> tuple[str, ...]:
    """Lowercase word tokens with punctuation removed."""
    return tuple(_NORM_RE.findall(text.lower()))


def normalize_head(head: str) -> tuple[str, ...]:
    return tuple(WILDCARD if w in PLACEHOLDERS else w for w in normalize_words(head))


@dataclass(frozen=True)
class CommonsenseEntry:
    id: int
    head: str
    relation: str
    tail: str
    rendered: str
    variants: tuple[str, ...] = ()

    @property
    def patterns(self) -> tuple[tuple[str, ...], ...]:
        """Normalized head plus normalized surface variants, deduplicated in order."""
        seen = []
        for form in (self.head, *self.variants):
            p = normalize_head(form)
            if p and p not in seen:
                seen.append(p)
        return tuple(seen)

    @property
    def is_null(self) -> bool:
        return self.id < 0


NULL_COMMONSENSE = CommonsenseEntry(id=-1, head="", relation="", tail="", rendered="")


@dataclass(frozen=True)
class CandidateSet:
    """``cs(x)`` with the null commonsense always at slot 0."""

    entries: tuple[CommonsenseEntry, ...] = (NULL_COMMONSENSE,)

    def __post_init__(self):
        if not self.entries or not self.entries[0].is_null:
            raise ContractError("slot 0 of a candidate set must hold the null commonsense")
        ids = [e.id for e in self.entries[1:]]
        if len(set(ids)) != len(ids):
            raise ContractError(f"duplicate entry ids in candidate set: {ids}")

    @classmethod
    def of(cls, real: Iterable[CommonsenseEntry]) -> "CandidateSet":
        return cls((NULL_COMMONSENSE, *real))

    @property
    def real(self) -> tuple[CommonsenseEntry, ...]:
        return self.entries[1:]

    @property
    def ids(self) -> tuple[int, ...]:
        return tuple(e.id for e in self.entries[1:])

    def __len__(self) -> int:
        return len(self.entries)

    def without(self, entry_id: int) -> "CandidateSet":
        return CandidateSet(tuple(e for e in self.entries if e.is_null or e.id != entry_id))


def load_templates(path) -> dict[str, str]:
    """Read ``relation<TAB>pattern`` lines; patterns use ``{head}`` / ``{tail}`` slots."""
    templates = {}
    for lineno, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        if not line.strip() or line.startswith("#"):
            continue
        parts = line.split("\t")
        if len(parts) != 2:
            raise IngestionError(f"{path}:{lineno}: expected 'relation<TAB>pattern'")
        templates[parts[0].strip()] = parts[1]
    return templates


def render(head: str, relation: str, tail: str, templates: Mapping[str, str]) -> str:
    if relation not in templates:
        raise IngestionError(f"no template for relation {relation!r}")
    return templates[relation].format(head=head.strip().rstrip("."), tail=tail.strip())


class PhraseIndex:
    """Normalized head pattern -> sorted entry ids, with single-token wildcards."""

    def __init__(self, entries: Iterable[CommonsenseEntry] = ()):
        self._table: dict[tuple[str, ...], list[int]] = {}
        for e in entries:
            for p in e.patterns:
                self._table.setdefault(p, []).append(e.id)
        for ids in self._table.values():
            ids.sort()

    def __len__(self) -> int:
        return len(self._table)

    def get(self, pattern: Sequence[str]) -> list[int]:
        return list(self._table.get(tuple(pattern), ()))

    def match(self, ngram: Sequence[str]) -> set[int]:
        """Ids of every pattern that matches ``ngram`` token for token."""
        hits: set[int] = set()
        n = len(ngram)
        for mask in itertools.product((False, True), repeat=n):
            key = tuple(WILDCARD if m else w for m, w in zip(mask, ngram))
            ids = self._table.get(key)
            if ids:
                hits.update(ids)
        return hits


@dataclass
class CommonsenseKB:
    entries: list[CommonsenseEntry] = field(default_factory=list)
    _index: Optional[PhraseIndex] = field(default=None, repr=False)

    def __len__(self) -> int:
        return len(self.entries)

    def __getitem__(self, entry_id: int) -> CommonsenseEntry:
        return self.entries[entry_id]

    @property
    def index(self) -> PhraseIndex:
        if self._index is None:
            self._index = PhraseIndex(self.entries)
        return self._index

    def add(self, head: str, relation: str, tail: str, templates: Mapping[str, str],
            variants: Sequence[str] = ()) -> CommonsenseEntry:
        entry = CommonsenseEntry(len(self.entries), head, relation, tail,
                                 render(head, relation, tail, templates), tuple(variants))
        self.entries.append(entry)
        self._index = None
        return entry

    def to_tsv(self) -> str:
        rows = []
        for e in self.entries:
            cols = [e.head, e.relation, e.tail]
            if e.variants:
                cols.append(",".join(e.variants))
            rows.append("\t".join(cols) + "\n")
        return "".join(rows)


def parse_kb(lines: Iterable[str], templates: Mapping[str, str], source: str = "<kb>") -> CommonsenseKB:
    kb = CommonsenseKB()
    for lineno, raw in enumerate(lines, 1):
        line = raw.rstrip("\r\n")
        if not line.strip():
            continue
        parts = line.split("\t")
        if len(parts) not in (3, 4) or not all(p.strip() for p in parts[:3]):
            raise IngestionError(f"{source}:{lineno}: expected head<TAB>relation<TAB>tail[<TAB>variants]")
        head, relation, tail = (p.strip() for p in parts[:3])
        variants = [v.strip() for v in parts[3].split(",") if v.strip()] if len(parts) == 4 else []
        if relation not in templates:
            raise IngestionError(f"{source}:{lineno}: unknown relation {relation!r} (no template)")
        kb.add(head, relation, tail, templates, variants)
    return kb


def ingest(path, templates: Mapping[str, str]) -> CommonsenseKB:
    """Load a ``head<TAB>relation<TAB>tail`` knowledge file; ids follow file order."""
    with open(path, encoding="utf-8") as fh:
        kb = parse_kb(fh, templates, source=str(path))
    if not len(kb):
        logger.warning("%s: knowledge base is empty", path)
    return kb


def segments(text: str, window: int = DEFAULT_WINDOW) -> list[tuple[str, ...]]:
    """All contiguous word n-grams with 1 <= n <= window."""
    words = normalize_words(text)
    return [words[i:i + n] for n in range(1, window + 1) for i in range(len(words) - n + 1)]


def _finish(hits: Iterable[int], kb: CommonsenseKB, n_max: Optional[int],
            rng: Optional[np.random.Generator]) -> CandidateSet:
    ids = sorted(set(hits))
    if n_max is not None and len(ids) > n_max:
        if rng is None:
            ids = ids[:n_max]
        else:
            ids = sorted(rng.choice(ids, size=n_max, replace=False).tolist())
    return CandidateSet.of(kb.entries[i] for i in ids)


def retrieve(
    x: str,
    kb: CommonsenseKB,
    window: int = DEFAULT_WINDOW,
    n_max: Optional[int] = DEFAULT_N_MAX,
    rng: Optional[np.random.Generator] = None,
) -> CandidateSet:
    """Candidate commonsense for ``x``: every entry whose head matches a window segment.

    Hits beyond ``n_max`` keep the lowest ids, or a random subset when ``rng``
    is given.  ``n_max=None`` disables truncation.
    """
    index = kb.index
    hits: set[int] = set()
    for seg in segments(x, window):
        hits |= index.match(seg)
    return _finish(hits, kb, n_max, rng)


def brute_force_retrieve(x: str, kb: CommonsenseKB, window: int = DEFAULT_WINDOW,
                         n_max: Optional[int] = DEFAULT_N_MAX) -> CandidateSet:
    """Reference scan of every entry against every segment; no index."""
    segs = segments(x, window)
    hits = set()
    for e in kb.entries:
        for pattern in e.patterns:
            for seg in segs:
                if len(seg) == len(pattern) and all(p == WILDCARD or p == w for p, w in zip(pattern, seg)):
                    hits.add(e.id)
    return _finish(hits, kb, n_max, None)


@dataclass
class KBStats:
    dataset_size: int
    matched_ratio: float
    avg_candidates: float
    avg_description_length: float
    undefined: bool = False

    HEADER = ("dataset", "dataset_size", "matched_ratio", "avg_cs_size", "avg_description_length")

    def tsv_row(self, name: str) -> str:
        return (f"{name}\t{self.dataset_size}\t{self.matched_ratio:.4f}\t"
                f"{self.avg_candidates:.4f}\t{self.avg_description_length:.4f}")


def description_length(entry: CommonsenseEntry) -> int:
    return len(entry.rendered.split())


def kb_stats(dataset: Sequence[str], kb: CommonsenseKB, window: int = DEFAULT_WINDOW,
             n_max: Optional[int] = None) -> KBStats:
    """Coverage statistics in the layout of the appendix tables.

    ``avg_candidates`` excludes the null slot and averages over matched texts;
    ``avg_description_length`` averages whitespace word counts over every
    (matched text, candidate) pair.  Averages are 0 with ``undefined=True``
    when nothing matches.
    """
    if not dataset:
        raise ContractError("kb_stats needs a non-empty dataset")
    sizes, lengths = [], []
    for text in dataset:
        cs = retrieve(text, kb, window, n_max)
        if cs.real:
            sizes.append(len(cs.real))
            lengths.extend(description_length(e) for e in cs.real)
    if not sizes:
        return KBStats(len(dataset), 0.0, 0.0, 0.0, undefined=True)
    return KBStats(len(dataset), len(sizes) / len(dataset), float(np.mean(sizes)), float(np.mean(lengths)))
