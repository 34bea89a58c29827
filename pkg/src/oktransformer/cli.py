"""Command-line entry point: ``oktransformer <command> [options]``."""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import sys
import time
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import analysis, kb as kbmod
from .checkpoint import load_checkpoint, save_checkpoint
from .errors import ContractError, IngestionError
from .model import OkEncoder, adapt_from_pretrained
from .resources import bundled_path
from .synth import TEMPLATES as SYNTH_TEMPLATES, synth_generate
from .training import (
    Example,
    TaskModel,
    TaskSpec,
    TrainConfig,
    dump_jsonl,
    evaluate,
    load_jsonl,
    train,
)
from .transformer import ModelConfig, VanillaEncoder, Vocabulary

logger = logging.getLogger("oktransformer")

INDEX_FORMAT = "oktransformer-index/1"


class CliError(Exception):
    pass


# -- index files ------------------------------------------------------------------

def save_index(kb: kbmod.CommonsenseKB, path) -> None:
    entries = [{"id": e.id, "head": e.head, "relation": e.relation, "tail": e.tail,
                "rendered": e.rendered, "variants": list(e.variants)} for e in kb.entries]
    phrases = {" ".join(p): ids for p, ids in sorted(kb.index._table.items())}
    Path(path).write_text(json.dumps({"format": INDEX_FORMAT, "entries": entries, "phrases": phrases},
                                     indent=1), encoding="utf-8")


def load_index(path) -> kbmod.CommonsenseKB:
    try:
        blob = json.loads(Path(path).read_text(encoding="utf-8"))
    except FileNotFoundError:
        raise CliError(f"index file not found: {path}")
    if blob.get("format") != INDEX_FORMAT:
        raise CliError(f"{path}: not an index file (format {blob.get('format')!r})")
    kb = kbmod.CommonsenseKB()
    for i, e in enumerate(blob["entries"]):
        if e["id"] != i:
            raise CliError(f"{path}: entry ids must be consecutive from 0")
        kb.entries.append(kbmod.CommonsenseEntry(e["id"], e["head"], e["relation"], e["tail"], e["rendered"],
                                                 tuple(e.get("variants", ()))))
    return kb


def candidates_json(text: str, cs: kbmod.CandidateSet) -> dict:
    rows = [{"slot": 0, "id": None, "null": True}]
    rows += [{"slot": i, "id": e.id, "head": e.head, "relation": e.relation, "rendered": e.rendered}
             for i, e in enumerate(cs.real, 1)]
    return {"text": text, "candidates": rows}


# -- manifests --------------------------------------------------------------------

def _digest(path) -> Optional[str]:
    p = Path(path)
    if not p.is_file():
        return None
    return hashlib.sha256(p.read_bytes()).hexdigest()


class Run:
    def __init__(self, command: str, args: argparse.Namespace):
        self.command = command
        self.args = args
        self.started = time.time()
        self.config: dict = {}
        self.inputs: dict[str, Optional[str]] = {}
        self.outputs: list[str] = []

    def input(self, path) -> None:
        if path:
            self.inputs[str(path)] = _digest(path)

    def output(self, path) -> None:
        self.outputs.append(str(path))

    def finish(self) -> None:
        manifest = {
            "command": self.command,
            "config": self.config,
            "seed": getattr(self.args, "seed", None),
            "inputs": self.inputs,
            "outputs": self.outputs,
            "wall_clock_seconds": round(time.time() - self.started, 3),
        }
        text = json.dumps(manifest, indent=1, sort_keys=True, default=str)
        target = getattr(self.args, "manifest", None)
        if target is None and self.outputs:
            target = self.outputs[0] + ".manifest.json"
        if target is None:
            print(json.dumps(manifest, sort_keys=True, default=str), file=sys.stderr)
        else:
            Path(target).write_text(text, encoding="utf-8")


def _emit(text: str, out: Optional[str], run: Run) -> None:
    if out:
        Path(out).write_text(text, encoding="utf-8")
        run.output(out)
    else:
        sys.stdout.write(text)


def _templates(path: Optional[str]) -> dict[str, str]:
    path = path or bundled_path("templates.tsv")
    try:
        return kbmod.load_templates(path)
    except FileNotFoundError:
        raise CliError(f"template file not found: {path}")


def _require(path: Optional[str], what: str) -> str:
    if not path or not Path(path).is_file():
        raise CliError(f"{what} not found: {path}")
    return path


# -- commands ---------------------------------------------------------------------

def cmd_ingest(args, run: Run) -> None:
    _require(args.kb, "knowledge-base file")
    run.input(args.kb)
    run.input(args.templates)
    kb = kbmod.ingest(args.kb, _templates(args.templates))
    if not len(kb):
        logger.warning("knowledge base %s is empty; writing an empty index", args.kb)
    save_index(kb, args.out)
    run.output(args.out)
    logger.info("indexed %d entries into %s", len(kb), args.out)


def cmd_retrieve(args, run: Run) -> None:
    kb = load_index(_require(args.index, "index file"))
    run.input(args.index)
    run.config = {"window": args.window, "n_max": args.nmax}
    cs = kbmod.retrieve(args.text, kb, args.window, args.nmax)
    _emit(json.dumps(candidates_json(args.text, cs), indent=1) + "\n", args.out, run)


def _resolve_config(args) -> tuple[dict, dict, dict]:
    file_cfg = {}
    if args.config:
        _require(args.config, "config file")
        file_cfg = json.loads(Path(args.config).read_text(encoding="utf-8"))
    model_cfg = dict(file_cfg.get("model", {}))
    train_cfg = dict(file_cfg.get("train", {}))
    task_cfg = dict(file_cfg.get("task", {}))
    for flag, key in (("lr", "lr"), ("batch_size", "batch_size"), ("epochs", "epochs"),
                      ("seed", "seed"), ("weight_decay", "weight_decay")):
        value = getattr(args, flag, None)
        if value is not None:
            train_cfg[key] = value
    for flag, key in (("layers", "layers"), ("hidden", "hidden"), ("heads", "heads"),
                      ("nmax", "n_max"), ("max_len", "max_len")):
        value = getattr(args, flag, None)
        if value is not None:
            model_cfg[key] = value
    if args.seed is not None:
        model_cfg.setdefault("seed", args.seed)
    if args.task:
        task_cfg["kind"] = args.task
    if args.num_classes is not None:
        task_cfg["num_classes"] = args.num_classes
    return model_cfg, train_cfg, task_cfg


def _vocab_texts(examples: Sequence[Example], kb: Optional[kbmod.CommonsenseKB]) -> list[str]:
    texts = []
    for e in examples:
        texts.append(e.text)
        if e.text_pair:
            texts.append(e.text_pair)
        texts.extend(e.candidates or ())
    if kb is not None:
        texts.extend(x.rendered for x in kb.entries)
    return texts


def cmd_train(args, run: Run) -> None:
    data = load_jsonl(_require(args.data, "data file"))
    run.input(args.data)
    kb = None
    if args.index:
        kb = load_index(_require(args.index, "index file"))
        run.input(args.index)
    eval_data = None
    if args.eval_data:
        eval_data = load_jsonl(_require(args.eval_data, "eval data file"))
        run.input(args.eval_data)
    model_cfg, train_cfg, task_cfg = _resolve_config(args)
    tcfg = TrainConfig.from_dict(train_cfg)
    task = TaskSpec(**task_cfg) if task_cfg else TaskSpec()
    kind = args.model
    if args.from_pretrained:
        run.input(args.from_pretrained)
        source = TaskModel.from_checkpoint(load_checkpoint(_require(args.from_pretrained, "pretrained checkpoint")), kb)
        if kind == "ok" and not source.is_ok:
            encoder = adapt_from_pretrained(source.encoder, seed=tcfg.seed)
        else:
            encoder = source.encoder
        head = source.head if source.task == task else None
        model = TaskModel(encoder, task, source.vocab, kb, head, args.window)
    else:
        vocab = Vocabulary.build(_vocab_texts(data + list(eval_data or []), kb))
        model_cfg["vocab_size"] = len(vocab)
        cfg = ModelConfig.from_dict(model_cfg)
        encoder = OkEncoder.init(cfg) if kind == "ok" else VanillaEncoder.init(cfg)
        model = TaskModel(encoder, task, vocab, kb, window=args.window)
    if model.is_ok and kb is None:
        raise CliError("a knowledge-enhanced model needs --index")
    run.config = {"model": model.config.to_dict(), "train": vars(tcfg), "task": vars(task), "kind": kind,
                  "window": args.window}
    result = train(model, data, tcfg, eval_data)
    save_checkpoint(model.to_checkpoint({"train": vars(tcfg)}), args.out)
    run.output(args.out)
    metrics = args.metrics or args.out + ".metrics.tsv"
    Path(metrics).write_text(result.metrics_tsv(), encoding="utf-8")
    run.output(metrics)


def _load_model(args, run: Run) -> TaskModel:
    run.input(args.ckpt)
    kb = None
    if args.index:
        kb = load_index(_require(args.index, "index file"))
        run.input(args.index)
    return TaskModel.from_checkpoint(load_checkpoint(_require(args.ckpt, "checkpoint")), kb)


def cmd_eval(args, run: Run) -> None:
    model = _load_model(args, run)
    data = load_jsonl(_require(args.data, "data file"))
    run.input(args.data)
    chunks = [data[i:i + 32] for i in range(0, len(data), 32)]
    with ThreadPoolExecutor(max_workers=max(1, args.jobs)) as pool:
        parts = list(pool.map(model.probabilities, chunks))
    probs = np.concatenate(parts) if parts else np.zeros((0, 0))
    preds = probs.argmax(axis=1)
    targets = [e.target for e in data]
    correct = sum(int(p == t) for p, t in zip(preds, targets))
    lines = ["index\tprediction\ttarget\n"] + [f"{i}\t{p}\t{t}\n" for i, (p, t) in enumerate(zip(preds, targets))]
    if args.predictions:
        Path(args.predictions).write_text("".join(lines), encoding="utf-8")
        run.output(args.predictions)
    summary = {"examples": len(data), "correct": correct, "accuracy": correct / len(data) if data else None}
    _emit(json.dumps(summary) + "\n", args.out, run)


def cmd_drift(args, run: Run) -> None:
    run.input(args.before)
    run.input(args.after)
    before = load_checkpoint(_require(args.before, "checkpoint"))
    after = load_checkpoint(_require(args.after, "checkpoint"))
    run.config = {"pattern": args.pattern}
    _emit(analysis.param_drift(before, after, args.pattern).to_tsv(), args.out, run)


def cmd_influence(args, run: Run) -> None:
    model = _load_model(args, run)
    if not model.is_ok:
        raise CliError("influence needs a knowledge-enhanced checkpoint")
    cs = model.candidates(args.text, args.pair)
    if not cs.real:
        raise CliError("no commonsense retrieved for the text; influence is undefined")
    records = analysis.influence(args.text, cs, model, args.pair)
    _emit(analysis.influence_tsv(records), args.out, run)


def cmd_stats(args, run: Run) -> None:
    kb = load_index(_require(args.index, "index file"))
    run.input(args.index)
    data = load_jsonl(_require(args.data, "data file"))
    run.input(args.data)
    texts = [e.text if e.text_pair is None else f"{e.text} {e.text_pair}" for e in data]
    stats = kbmod.kb_stats(texts, kb, args.window)
    if stats.undefined:
        logger.warning("no text matched the knowledge base; averages reported as 0")
    name = args.name or Path(args.data).stem
    _emit("\t".join(kbmod.KBStats.HEADER) + "\n" + stats.tsv_row(name) + "\n", args.out, run)


def cmd_synth(args, run: Run) -> None:
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    task = synth_generate(args.seed, args.kb_size, args.train_n, args.test_n)
    run.config = {"kb_size": args.kb_size, "train_n": args.train_n, "test_n": args.test_n}
    (out / "kb.tsv").write_text(task.kb.to_tsv(), encoding="utf-8")
    (out / "templates.tsv").write_text("".join(f"{r}\t{p}\n" for r, p in SYNTH_TEMPLATES.items()),
                                       encoding="utf-8")
    dump_jsonl(task.train, out / "train.jsonl")
    dump_jsonl(task.test, out / "test.jsonl")
    for name in ("kb.tsv", "templates.tsv", "train.jsonl", "test.jsonl"):
        run.output(out / name)
    args.manifest = args.manifest or str(out / "synth.manifest.json")


# -- parser -----------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="oktransformer", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, out=True):
        if out:
            p.add_argument("--out", help="output file (default: stdout)")
        p.add_argument("--manifest", help="where to write the run manifest")
        p.add_argument("--seed", type=int, default=None)
        return p

    p = sub.add_parser("ingest", help="build a phrase index from a knowledge TSV")
    p.add_argument("--kb", required=True)
    p.add_argument("--templates", help="relation templates (default: bundled)")
    p.add_argument("--out", required=True)
    p.add_argument("--manifest")
    p.add_argument("--seed", type=int, default=None)

    p = common(sub.add_parser("retrieve", help="candidate commonsense for one text"))
    p.add_argument("--index", required=True)
    p.add_argument("--text", required=True)
    p.add_argument("--window", type=int, default=kbmod.DEFAULT_WINDOW)
    p.add_argument("--nmax", type=int, default=kbmod.DEFAULT_N_MAX)

    p = sub.add_parser("train", help="train a vanilla or knowledge-enhanced task model")
    p.add_argument("--task", choices=("classification", "multiple_choice", "mlm_scoring"))
    p.add_argument("--num-classes", type=int)
    p.add_argument("--data", required=True)
    p.add_argument("--eval-data")
    p.add_argument("--index")
    p.add_argument("--config")
    p.add_argument("--out", required=True)
    p.add_argument("--metrics")
    p.add_argument("--from-pretrained")
    p.add_argument("--model", choices=("ok", "vanilla"), default="ok")
    p.add_argument("--window", type=int, default=kbmod.DEFAULT_WINDOW)
    p.add_argument("--lr", type=float)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--epochs", type=int)
    p.add_argument("--weight-decay", type=float)
    p.add_argument("--layers", type=int)
    p.add_argument("--hidden", type=int)
    p.add_argument("--heads", type=int)
    p.add_argument("--max-len", type=int)
    p.add_argument("--nmax", type=int)
    p.add_argument("--manifest")
    p.add_argument("--seed", type=int, default=None)

    p = common(sub.add_parser("eval", help="accuracy of a checkpoint on a dataset"))
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--index")
    p.add_argument("--predictions")
    p.add_argument("--jobs", type=int, default=1)

    p = common(sub.add_parser("drift", help="per-layer L1 drift between two checkpoints"))
    p.add_argument("--before", required=True)
    p.add_argument("--after", required=True)
    p.add_argument("--pattern", default=analysis.DEFAULT_DRIFT_PATTERN)

    p = common(sub.add_parser("influence", help="leave-one-out commonsense influence"))
    p.add_argument("--ckpt", required=True)
    p.add_argument("--index", required=True)
    p.add_argument("--text", required=True)
    p.add_argument("--pair")
    p.add_argument("--jobs", type=int, default=1)

    p = common(sub.add_parser("stats", help="knowledge coverage statistics of a dataset"))
    p.add_argument("--index", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--name")
    p.add_argument("--window", type=int, default=kbmod.DEFAULT_WINDOW)

    p = sub.add_parser("synth", help="generate the synthetic knowledge task")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--kb-size", type=int, default=1200)
    p.add_argument("--train-n", type=int, default=800)
    p.add_argument("--test-n", type=int, default=200)
    p.add_argument("--out-dir", required=True)
    p.add_argument("--manifest")
    return parser


COMMANDS = {
    "ingest": cmd_ingest, "retrieve": cmd_retrieve, "train": cmd_train, "eval": cmd_eval,
    "drift": cmd_drift, "influence": cmd_influence, "stats": cmd_stats, "synth": cmd_synth,
}


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    if not hasattr(args, "num_classes"):
        args.num_classes = None
    run = Run(args.command, args)
    try:
        COMMANDS[args.command](args, run)
    except (CliError, IngestionError, ContractError, ValueError, KeyError, OSError) as exc:
        print(f"oktransformer {args.command}: error: {exc}", file=sys.stderr)
        return 1
    run.finish()
    return 0


if __name__ == "__main__":
    sys.exit(main())
