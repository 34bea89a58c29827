"""Synthetic knowledge task: labels live only in the knowledge base.

Each example mentions one event ``<name> <verb> <name>``.  The event's KB
entry carries a trait word, and the trait's polarity is the label.  Labels
are fair coin flips per event and test events never occur in training, so a
reader without the KB cannot beat chance, while a reader of the retrieved
description is always right.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .kb import CommonsenseKB
from .training import Example

NAMES = (
    "alice", "bob", "carol", "dave", "erin", "frank", "grace", "heidi", "ivan", "judy",
    "mallory", "nina", "oscar", "peggy", "quinn", "rupert", "sybil", "trent", "ursula", "victor",
    "wendy", "xavier", "yvonne", "zach", "amber", "bruno", "chloe", "derek", "elsa", "felix",
)
VERBS = (
    "comforted", "visited", "called", "helped", "thanked", "followed", "greeted", "praised",
    "warned", "invited", "hugged", "teased", "ignored", "trusted", "blamed", "paid",
    "met", "forgave", "hired", "taught",
)
POSITIVE = ("kind", "caring", "generous", "helpful", "gentle")
NEGATIVE = ("rude", "selfish", "cruel", "careless", "bitter")
FRAMES = (
    "yesterday {e} in the park .",
    "we heard that {e} .",
    "{e} after lunch .",
    "at noon {e} near the station .",
    "everyone knew {e} last week .",
    "in the morning {e} again .",
)
RELATION = "xAttr"
TEMPLATES = {RELATION: "{head}. PersonX is seen as {tail}."}


@dataclass
class SynthTask:
    kb: CommonsenseKB
    train: list[Example]
    test: list[Example]
    labels: dict[int, int]

    def texts(self) -> list[str]:
        return [e.text for e in self.train + self.test] + [e.rendered for e in self.kb.entries]


def trait_label(tail: str) -> int:
    return int(tail in POSITIVE)


def rule_reader(description: str) -> int:
    """Label from the trait word of a rendered description."""
    return int(description.rstrip(".").split()[-1] in POSITIVE)


def synth_generate(seed: int, kb_size: int, train_n: int, test_n: int) -> SynthTask:
    """Build the knowledge base and disjoint train/test example sets."""
    if min(kb_size, train_n, test_n) <= 0:
        raise ValueError("sizes must be positive")
    if kb_size < train_n + test_n:
        raise ValueError(f"kb_size {kb_size} must cover train_n + test_n = {train_n + test_n} events")
    events = [(a, v, b) for a in NAMES for v in VERBS for b in NAMES if a != b]
    if kb_size > len(events):
        raise ValueError(f"at most {len(events)} distinct events are available")
    rng = np.random.default_rng(seed)
    chosen = rng.choice(len(events), size=kb_size, replace=False)
    kb = CommonsenseKB()
    labels = {}
    for idx in chosen:
        a, v, b = events[idx]
        label = int(rng.integers(2))
        tail = str(rng.choice(POSITIVE if label else NEGATIVE))
        entry = kb.add(f"{a} {v} {b}", RELATION, tail, TEMPLATES)
        labels[entry.id] = label
    order = rng.permutation(kb_size)

    def make(entry_id: int) -> Example:
        frame = FRAMES[int(rng.integers(len(FRAMES)))]
        return Example(frame.format(e=kb[entry_id].head), label=labels[entry_id])

    train = [make(int(i)) for i in order[:train_n]]
    test = [make(int(i)) for i in order[train_n:train_n + test_n]]
    return SynthTask(kb, train, test, labels)
