"""End-to-end synthetic knowledge experiment: vanilla vs knowledge-enhanced encoder.

Both arms share one recipe and one budget:

1. language pretraining: a vanilla encoder learns to read the polarity of
   rendered descriptions from an auxiliary knowledge base,
2. task pretraining on the auxiliary task (its own KB and events); the
   knowledge-enhanced arm is first adapted from the pretrained encoder,
3. fine-tuning on the target task at lr 5e-6, batch 8, 10 epochs.

Target labels are coin flips stored only in the target knowledge base and
target test events never occur in target training, so nothing learned in
stages 1-2 reveals them.
"""

from __future__ import annotations

import copy
import logging
import time
from dataclasses import dataclass, field, replace

from .synth import SynthTask, synth_generate
from .training import Example, TaskModel, TaskSpec, TrainConfig, adapt_task_model, evaluate, train
from .transformer import ModelConfig, VanillaEncoder, Vocabulary

logger = logging.getLogger(__name__)

AUX_SEED_OFFSET = 1000


@dataclass
class ExperimentConfig:
    layers: int = 2
    hidden: int = 32
    heads: int = 2
    ffn: int = 64
    max_len: int = 24
    n_max: int = 4
    init_std: float = 0.02
    aux_train: int = 2000
    aux_test: int = 200
    target_train: int = 800
    target_test: int = 400
    language_lr: float = 1e-3
    language_epochs: int = 2
    language_examples: int = 1000
    pretrain_lr: float = 3e-4
    pretrain_max_epochs: int = 8
    pretrain_target_accuracy: float = 0.98
    finetune: TrainConfig = field(default_factory=lambda: TrainConfig(lr=5e-6, batch_size=8, epochs=10))


@dataclass
class ArmResult:
    kind: str
    pretrain_epochs: int
    aux_accuracy: float
    before_finetune: float
    test_accuracy: float
    seconds: float


def _tasks(seed: int, cfg: ExperimentConfig) -> tuple[SynthTask, SynthTask]:
    aux = synth_generate(seed + AUX_SEED_OFFSET, cfg.aux_train + cfg.aux_test, cfg.aux_train, cfg.aux_test)
    target = synth_generate(seed, cfg.target_train + cfg.target_test, cfg.target_train, cfg.target_test)
    return aux, target


def language_pretrain(aux: SynthTask, vocab: Vocabulary, cfg: ExperimentConfig, seed: int) -> TaskModel:
    """Vanilla encoder trained to classify rendered auxiliary descriptions."""
    mcfg = ModelConfig(layers=cfg.layers, hidden=cfg.hidden, heads=cfg.heads, ffn=cfg.ffn, vocab_size=len(vocab),
                       max_len=cfg.max_len, n_max=cfg.n_max, init_std=cfg.init_std, seed=seed)
    model = TaskModel(VanillaEncoder.init(mcfg), TaskSpec("classification", 2), vocab, aux.kb)
    desc = [Example(e.rendered, label=aux.labels[e.id]) for e in aux.kb.entries[:cfg.language_examples]]
    train(model, desc, TrainConfig(lr=cfg.language_lr, epochs=cfg.language_epochs, seed=seed),
          track_train_loss=False)
    return model


def _pretrain_epoch(model: TaskModel, aux: SynthTask, cfg: ExperimentConfig, seed: int, epoch: int) -> float:
    train(model, aux.train, TrainConfig(lr=cfg.pretrain_lr, epochs=1, seed=seed * 997 + epoch),
          track_train_loss=False)
    acc = evaluate(model, aux.test).accuracy
    logger.info("task pretraining %s epoch %d: aux accuracy %.3f", "ok" if model.is_ok else "vanilla", epoch, acc)
    return acc


def _finish(model: TaskModel, kind: str, epochs: int, aux_acc: float, target: SynthTask,
            cfg: ExperimentConfig, seed: int, start: float) -> ArmResult:
    # the target KB replaces the auxiliary one; caches are rebuilt
    model = TaskModel(model.encoder, model.task, model.vocab, target.kb, model.head)
    before = evaluate(model, target.test).accuracy
    train(model, target.train, replace(cfg.finetune, seed=seed), track_train_loss=False)
    acc = evaluate(model, target.test).accuracy
    logger.info("%s: target accuracy %.3f (before fine-tuning %.3f)", kind, acc, before)
    return ArmResult(kind, epochs, aux_acc, before, acc, time.time() - start)


def run_knowledge_experiment(seed: int, cfg: ExperimentConfig | None = None) -> dict[str, ArmResult]:
    """Run both arms for one seed; the vanilla arm gets as many task-pretraining epochs as the OK arm used."""
    cfg = cfg or ExperimentConfig()
    start = time.time()
    aux, target = _tasks(seed, cfg)
    vocab = Vocabulary.build(aux.texts() + target.texts())
    base = language_pretrain(aux, vocab, cfg, seed)
    shared = time.time() - start

    start = time.time()
    ok = adapt_task_model(copy.deepcopy(base), seed=seed)
    epochs, aux_acc = 0, 0.0
    while epochs < cfg.pretrain_max_epochs and aux_acc < cfg.pretrain_target_accuracy:
        epochs += 1
        aux_acc = _pretrain_epoch(ok, aux, cfg, seed, epochs)
    ok_result = _finish(ok, "ok", epochs, aux_acc, target, cfg, seed, start - shared)

    start = time.time()
    vanilla = base
    van_acc = 0.0
    for epoch in range(1, epochs + 1):
        van_acc = _pretrain_epoch(vanilla, aux, cfg, seed, epoch)
    van_result = _finish(vanilla, "vanilla", epochs, van_acc, target, cfg, seed, start - shared)
    return {"ok": ok_result, "vanilla": van_result}
