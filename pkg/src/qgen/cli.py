"""``qgen`` command line.

Exit codes: 0 success, 2 usage error, 3 missing or invalid input,
4 contract violation (for example an evaluator that is not frozen).
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import io
import json
import logging
import shutil
import subprocess
import sys
import time
from dataclasses import asdict
from datetime import datetime, timezone
from pathlib import Path

from . import __version__
from .config import ConfigError, pretrain_configs, read_config, train_configs
from .corpus import SquadParseError, SquadSchemaError, dump_squad, generate_synthetic, load_squad, make_split
from .evaluator import (
    FrozenEvaluatorError,
    freeze,
    init_evaluator,
    load_evaluator,
    pretrain_rtd,
    rtd_entropy_baseline,
    save_evaluator,
)
from .generator import greedy_decode, init_generator, load_generator, save_generator
from .metrics import dump_jsonl, read_jsonl, score_records
from .numerics import CheckpointError, atomic_write_bytes
from .training import (
    CLI_REWARD_MODES,
    TrainConfig,
    evaluate,
    make_examples,
    read_history,
    read_report,
    train,
    write_history,
    write_report,
)
from .tokenizer import Vocab, assemble_input, build_vocab, decode, encode

log = logging.getLogger("qgen")

EXIT_OK, EXIT_USAGE, EXIT_INPUT, EXIT_CONTRACT = 0, 2, 3, 4

SQUAD_TRAIN_FILE = "train-v1.1.json"
SQUAD_DEV_FILE = "dev-v1.1.json"
SUMMARY_KEYS = ("corpus_bleu", "mean_sentence_bleu", "mean_cosine", "mean_reward", "mean_match_score")
CLASS_KEYS = ("count", "frequency", "bleu", "cosine", "reward", "match_score", "corpus_bleu")


class CliError(Exception):
    code = EXIT_INPUT


class UsageError(CliError):
    code = EXIT_USAGE


class InputError(CliError):
    code = EXIT_INPUT


class ContractError(CliError):
    code = EXIT_CONTRACT


# ---------------------------------------------------------------------------
# manifests


def version_string() -> str:
    try:
        proc = subprocess.run(
            ["git", "describe", "--tags", "--always", "--dirty"],
            cwd=Path(__file__).resolve().parent, capture_output=True, text=True, timeout=5,
        )
    except (OSError, subprocess.SubprocessError):
        return __version__
    described = proc.stdout.strip()
    return f"{__version__}+{described}" if proc.returncode == 0 and described else __version__


class Manifest:
    def __init__(self, command: str, args: argparse.Namespace):
        self.command = command
        self.config = getattr(args, "config", None)
        self.seed = None
        self.inputs: list[str] = []
        self.outputs: list[str] = []
        self.extra: dict = {}
        self._started = datetime.now(timezone.utc)
        self._t0 = time.perf_counter()

    def write(self, path: Path) -> None:
        record = {
            "command": self.command,
            "config": self.config,
            "inputs": self.inputs,
            "outputs": self.outputs,
            "seed": self.seed,
            "version": version_string(),
            "started_at": self._started.isoformat(timespec="seconds"),
            "duration_s": round(time.perf_counter() - self._t0, 3),
            **self.extra,
        }
        atomic_write_bytes(path, (json.dumps(record, indent=2, sort_keys=True) + "\n").encode("utf-8"))


def _sibling(path: Path, suffix: str) -> Path:
    return path.with_name(path.stem + suffix)


# ---------------------------------------------------------------------------
# input helpers


def _require(path: Path, what: str) -> Path:
    if not path.exists():
        raise InputError(f"missing {what}: {path}")
    return path


def _load_triples(path: Path):
    _require(path, "data file")
    try:
        triples, tally = load_squad(path)
    except (SquadParseError, SquadSchemaError) as exc:
        raise InputError(f"{path}: {exc}") from None
    for key, count in sorted(tally.items()):
        if count:
            log.warning("%s: skipped %d (%s)", path, count, key)
    return triples, tally


def _load_vocab(path: Path) -> Vocab:
    _require(path, "vocabulary")
    try:
        return Vocab.load(path)
    except (ValueError, UnicodeDecodeError) as exc:
        raise InputError(f"{path}: {exc}") from None


def _read_config(path: str | None) -> dict[str, str]:
    if path is None:
        return {}
    return read_config(_require(Path(path), "config"))


def _load_frozen_evaluator(path: Path):
    _require(path, "evaluator checkpoint")
    _require(path.with_suffix(".json"), "evaluator sidecar")
    evaluator = load_evaluator(path)
    if not evaluator.frozen:
        raise ContractError(f"evaluator {path} is not frozen")
    return evaluator


def _load_model(path: Path):
    _require(path, "model checkpoint")
    _require(path.with_suffix(".json"), "model sidecar")
    model, sidecar = load_generator(path)
    vocab_file = sidecar.get("vocab_file")
    if not vocab_file:
        raise InputError(f"{path}: sidecar names no vocabulary file")
    return model, sidecar, _load_vocab(path.parent / vocab_file)


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


# ---------------------------------------------------------------------------
# commands


def cmd_ingest(args) -> int:
    if (args.squad is None) == (args.synthetic is None):
        raise UsageError("give exactly one of --squad or --synthetic")
    if not 0.0 < args.dev_fraction < 1.0 or not 0.0 < args.test_fraction < 1.0:
        raise UsageError("--dev-fraction and --test-fraction must lie in (0, 1)")
    man = Manifest("ingest", args)
    man.seed = args.seed
    tallies = {}
    if args.synthetic is not None:
        if args.synthetic < 3:
            raise UsageError("--synthetic needs at least 3 triples")
        split = make_split(generate_synthetic(args.synthetic, args.seed), args.seed,
                           args.dev_fraction, args.test_fraction)
        man.inputs.append(f"synthetic:{args.synthetic}")
    else:
        src = Path(args.squad)
        if src.is_dir():
            train_path = _require(src / SQUAD_TRAIN_FILE, "SQuAD training file")
            test_path = _require(src / SQUAD_DEV_FILE, "SQuAD dev file")
            triples, tallies["train"] = _load_triples(train_path)
            test, tallies["test"] = _load_triples(test_path)
            split = make_split(triples, args.seed, args.dev_fraction, test=test)
            man.inputs += [str(train_path), str(test_path)]
        else:
            triples, tallies["all"] = _load_triples(_require(src, "SQuAD file"))
            split = make_split(triples, args.seed, args.dev_fraction, args.test_fraction)
            man.inputs.append(str(src))
    if not split.train or not split.dev:
        raise InputError("not enough triples to form train and dev splits")

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for name, part in (("train", split.train), ("dev", split.dev), ("test", split.test)):
        dump_squad(part, out / f"{name}.json", title=name)
        man.outputs.append(str(out / f"{name}.json"))
    vocab = build_vocab(split.train)
    vocab.save(out / "vocab.txt")
    man.outputs.append(str(out / "vocab.txt"))
    man.extra = {
        "counts": {"train": len(split.train), "dev": len(split.dev), "test": len(split.test)},
        "vocab_size": vocab.size,
        "skipped": {k: dict(v) for k, v in tallies.items()},
    }
    man.write(out / "manifest.json")
    print(f"train={len(split.train)} dev={len(split.dev)} test={len(split.test)} vocab={vocab.size}")
    return EXIT_OK


def cmd_pretrain_evaluator(args) -> int:
    data = Path(args.data)
    vocab = _load_vocab(data / "vocab.txt")
    pc, ec = pretrain_configs(_read_config(args.config), vocab.size)
    triples, _ = _load_triples(data / "train.json")
    man = Manifest("pretrain-evaluator", args)
    man.seed = pc.seed
    man.inputs += [str(data / "train.json"), str(data / "vocab.txt")]

    corpus = [encode(t.question, vocab) for t in triples]
    if pc.corpus == "questions+contexts":
        corpus += [encode(t.context, vocab) for t in triples]
    corpus = [c for c in corpus if c]
    if not corpus:
        raise InputError("no non-empty sequences to pretrain on")
    evaluator = init_evaluator(ec)
    history: list[dict] = []
    if pc.skip_pretrain:
        log.warning("skip_pretrain set: freezing a randomly initialised evaluator")
    else:
        evaluator, history = pretrain_rtd(evaluator, corpus, pc.rate, pc.epochs, pc.lr, pc.seed,
                                          pc.batch_size, pc.holdout_fraction)
    freeze(evaluator)

    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    save_evaluator(evaluator, out, {"pretrain_config": asdict(pc), "vocab_sha256": _sha256(data / "vocab.txt")})
    hist_path = _sibling(out, ".history.jsonl")
    write_history(history, hist_path)
    man.outputs += [str(out), str(out.with_suffix(".json")), str(hist_path)]
    man.extra = {"rtd_entropy_baseline": rtd_entropy_baseline(pc.rate) if pc.rate > 0 else None}
    man.write(_sibling(out, ".manifest.json"))
    last = history[-1] if history else {}
    print(f"frozen=true param_hash={evaluator.param_hash} heldout_loss={last.get('heldout_loss')}")
    return EXIT_OK


def cmd_train(args) -> int:
    data = Path(args.data)
    vocab_path = data / "vocab.txt"
    vocab = _load_vocab(vocab_path)
    values = _read_config(args.config)
    if "reward_mode" in values:
        values["reward_mode"] = CLI_REWARD_MODES.get(values["reward_mode"], values["reward_mode"])
    if args.reward_mode is not None:
        values["reward_mode"] = CLI_REWARD_MODES[args.reward_mode]
    tc, gc = train_configs(values, vocab.size)

    man = Manifest("train", args)
    man.seed = tc.seed
    evaluator = None
    if args.evaluator is not None:
        evaluator = _load_frozen_evaluator(Path(args.evaluator))
        if evaluator.config.vocab_size != vocab.size:
            raise InputError(f"evaluator vocabulary size {evaluator.config.vocab_size} != {vocab.size}")
        man.inputs.append(str(args.evaluator))
    elif tc.reward_mode == "bleu_plus_semantic":
        raise UsageError("--evaluator is required for the bleu+semantic reward")

    train_set = make_examples(_load_triples(data / "train.json")[0], vocab, tc.max_src_len, tc.max_tgt_len)
    dev_set = make_examples(_load_triples(data / "dev.json")[0], vocab, tc.max_src_len, tc.max_tgt_len)
    if not train_set or not dev_set:
        raise InputError("train or dev split has no usable examples")
    man.inputs += [str(data / "train.json"), str(data / "dev.json"), str(vocab_path)]

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    shutil.copyfile(vocab_path, out / "vocab.txt")
    extra = {"vocab_file": "vocab.txt", "vocab_sha256": _sha256(vocab_path), "reward_mode": tc.reward_mode}
    hash_before = evaluator.param_hash if evaluator is not None else None

    model = init_generator(gc)
    result = train(model, evaluator, train_set, dev_set, tc, checkpoint_dir=out, sidecar_extra=extra,
                   on_epoch=lambda rec: log.info("epoch %d dev_loss=%.4f dev_bleu=%.2f",
                                                 rec["epoch"], rec["dev_loss"], rec["dev_corpus_bleu"]))
    if evaluator is not None and evaluator.parameter_hash() != hash_before:
        raise ContractError("evaluator parameters changed during training")
    if not result.history:
        # no epoch ran: the untouched model is both best and final
        for name in ("best.qgf", "final.qgf"):
            save_generator(model, out / name, {**extra, "train_config": asdict(tc), "epoch": 0})
    write_history(result.history, out / "history.jsonl")
    man.outputs += [str(out / n) for n in ("best.qgf", "final.qgf", "history.jsonl", "vocab.txt")]
    man.extra = {"steps": result.steps, "best_epoch": result.best_epoch, "evaluator_param_hash": hash_before}
    man.write(out / "manifest.json")
    if result.history:
        last = result.history[-1]
        print(f"epochs={len(result.history)} steps={result.steps} best_epoch={result.best_epoch} "
              f"dev_loss={last['dev_loss']:.4f} dev_corpus_bleu={last['dev_corpus_bleu']:.2f}")
    return EXIT_OK


def cmd_generate(args) -> int:
    if not args.answer.strip():
        raise UsageError("--answer must not be empty")
    model, _, vocab = _load_model(Path(args.model))
    answer = encode(args.answer, vocab)
    if not answer:
        raise UsageError("--answer has no tokens")
    if len(answer) + 3 > model.config.max_src_len:
        raise UsageError(f"--answer is longer than the model input allows ({model.config.max_src_len - 3} tokens)")
    src = assemble_input(encode(args.context, vocab), answer, model.config.max_src_len)
    print(decode(greedy_decode(model, src), vocab))
    if args.manifest:
        man = Manifest("generate", args)
        man.inputs.append(str(args.model))
        man.write(Path(args.manifest))
    return EXIT_OK


def cmd_evaluate(args) -> int:
    model_path, data = Path(args.model), Path(args.data)
    model, sidecar, model_vocab = _load_model(model_path)
    evaluator = _load_frozen_evaluator(Path(args.evaluator))
    vocab = _load_vocab(data / "vocab.txt")
    if vocab.word_of != model_vocab.word_of:
        raise InputError("data vocabulary differs from the model's vocabulary")
    if evaluator.config.vocab_size != vocab.size:
        raise InputError(f"evaluator vocabulary size {evaluator.config.vocab_size} != {vocab.size}")
    tc = TrainConfig(**sidecar["train_config"]) if "train_config" in sidecar else TrainConfig()
    split_path = data / f"{args.split}.json"
    examples = make_examples(_load_triples(split_path)[0], vocab, model.config.max_src_len, tc.max_tgt_len)
    if not examples:
        raise InputError(f"{split_path} has no usable examples")
    man = Manifest("evaluate", args)
    man.seed = tc.seed
    man.inputs += [str(model_path), str(args.evaluator), str(split_path)]

    report = evaluate(model, evaluator, examples, tc)
    report["split"] = args.split
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    write_report(report, out)
    man.outputs.append(str(out))
    man.write(_sibling(out, ".manifest.json"))
    print(f"n={report['n']} corpus_bleu={report['corpus_bleu']:.2f} mean_cosine={report['mean_cosine']:.4f} "
          f"mean_reward={report['mean_reward']:.4f} mean_match_score={report['mean_match_score']:.4f}")
    return EXIT_OK


def cmd_score(args) -> int:
    vocab = _load_vocab(Path(args.vocab))
    evaluator = _load_frozen_evaluator(Path(args.evaluator))
    src = _require(Path(args.input), "records file")
    try:
        records = read_jsonl(src.read_text(encoding="utf-8"))
        scored = score_records(records, vocab, evaluator, args.alpha)
    except (json.JSONDecodeError, ValueError) as exc:
        raise InputError(f"{src}: {exc}") from None
    out = Path(args.out)
    atomic_write_bytes(out, dump_jsonl(scored).encode("utf-8"))
    man = Manifest("score", args)
    man.inputs += [str(src), str(args.evaluator), str(args.vocab)]
    man.outputs.append(str(out))
    man.write(_sibling(out, ".manifest.json"))
    print(f"scored {len(scored)} records")
    return EXIT_OK


def _fmt(x) -> str:
    return "-" if x is None else f"{x:.4f}"


def diff_table(a: dict, b: dict, labels: tuple[str, str]) -> str:
    """Side-by-side comparison of two evaluation reports."""
    la, lb = labels
    lines = [f"{'metric':<20}{la:>14}{lb:>14}{'delta':>10}"]
    for key in SUMMARY_KEYS:
        va, vb = a.get(key), b.get(key)
        delta = None if va is None or vb is None else vb - va
        lines.append(f"{key:<20}{_fmt(va):>14}{_fmt(vb):>14}{_fmt(delta):>10}")
    lines.append("")
    lines.append(f"{'class':<12}{'freq':>8}{la + ' match':>16}{lb + ' match':>16}{'delta':>10}")
    for name, ea in a["classes"].items():
        eb = b["classes"].get(name, {})
        if not ea.get("count") and not eb.get("count"):
            continue
        ma, mb = ea.get("match_score"), eb.get("match_score")
        delta = None if ma is None or mb is None else mb - ma
        lines.append(f"{name:<12}{ea['frequency']:>8.3f}{_fmt(ma):>16}{_fmt(mb):>16}{_fmt(delta):>10}")
    return "\n".join(lines) + "\n"


def cmd_diff(args) -> int:
    paths = [Path(p) for p in (args.a, args.b)]
    for p in paths:
        _require(p, "report")
    try:
        a, b = (read_report(p) for p in paths)
    except json.JSONDecodeError as exc:
        raise InputError(f"unreadable report: {exc}") from None
    labels = tuple(args.labels) if args.labels else (paths[0].stem, paths[1].stem)
    text = diff_table(a, b, labels)
    sys.stdout.write(text)
    if args.out:
        out = Path(args.out)
        atomic_write_bytes(out, text.encode("utf-8"))
        man = Manifest("diff", args)
        man.inputs += [str(p) for p in paths]
        man.outputs.append(str(out))
        man.write(_sibling(out, ".manifest.json"))
    return EXIT_OK


def _tsv(rows: list[list]) -> bytes:
    buf = io.StringIO()
    writer = csv.writer(buf, delimiter="\t", lineterminator="\n")
    for row in rows:
        writer.writerow(["" if v is None else v for v in row])
    return buf.getvalue().encode("utf-8")


def cmd_report(args) -> int:
    from . import plotting

    runs = [Path(r) for r in args.runs]
    labels = [r.name or str(r) for r in runs]
    if len(set(labels)) != len(labels):
        labels = [str(r) for r in runs]
    histories, reports = {}, {}
    for label, run in zip(labels, runs):
        histories[label] = read_history(_require(run / "history.jsonl", "training history"))
        if (run / "report.json").exists():
            reports[label] = read_report(run / "report.json")
    man = Manifest("report", args)
    man.inputs += [str(r) for r in runs]
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)

    outputs = [plotting.learning_curves(histories, out / "learning_curves.png")]
    keys = ["epoch", "steps", "train_loss", "train_l_base", "train_l_rl", "train_mean_reward",
            "dev_loss", "dev_l_base", "dev_corpus_bleu", "dev_mean_reward"]
    rows = [["run", *keys]]
    for label, history in histories.items():
        rows += [[label, *(rec.get(k) for k in keys)] for rec in history]
    atomic_write_bytes(out / "history.tsv", _tsv(rows))
    outputs.append(out / "history.tsv")

    if reports:
        rows = [["run", "n", *SUMMARY_KEYS]]
        rows += [[label, rep["n"], *(rep.get(k) for k in SUMMARY_KEYS)] for label, rep in reports.items()]
        atomic_write_bytes(out / "summary.tsv", _tsv(rows))
        rows = [["run", "class", *CLASS_KEYS]]
        for label, rep in reports.items():
            rows += [[label, name, *(entry.get(k) for k in CLASS_KEYS)] for name, entry in rep["classes"].items()]
        atomic_write_bytes(out / "classes.tsv", _tsv(rows))
        outputs += [out / "summary.tsv", out / "classes.tsv",
                    plotting.class_scores(reports, "bleu", out / "class_bleu.png"),
                    plotting.class_scores(reports, "match_score", out / "class_match_score.png")]
    if args.rtd_history:
        rtd_path = _require(Path(args.rtd_history), "RTD history")
        outputs.append(plotting.rtd_curve(read_history(rtd_path), rtd_entropy_baseline(args.rtd_rate),
                                          out / "rtd_loss.png"))
        man.inputs.append(str(rtd_path))
    man.outputs += [str(p) for p in outputs]
    man.write(out / "manifest.json")
    for p in outputs:
        print(p)
    return EXIT_OK


# ---------------------------------------------------------------------------
# entry point


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="qgen", description="Answer-aware question generation with a frozen evaluator reward.")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("ingest", help="build train/dev/test splits and a vocabulary")
    p.add_argument("--squad", help="SQuAD v1.1 JSON file, or a directory holding train-v1.1.json and dev-v1.1.json")
    p.add_argument("--synthetic", type=int, help="generate this many synthetic triples")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--dev-fraction", type=float, default=0.06)
    p.add_argument("--test-fraction", type=float, default=0.1, help="test cut when no test file is given")
    p.set_defaults(func=cmd_ingest)

    p = sub.add_parser("pretrain-evaluator", help="RTD-pretrain and freeze the evaluator")
    p.add_argument("--data", required=True)
    p.add_argument("--config")
    p.add_argument("--out", required=True, help="checkpoint path, e.g. runs/evaluator.qgf")
    p.set_defaults(func=cmd_pretrain_evaluator)

    p = sub.add_parser("train", help="train the generator")
    p.add_argument("--data", required=True)
    p.add_argument("--evaluator")
    p.add_argument("--config")
    p.add_argument("--reward-mode", choices=sorted(CLI_REWARD_MODES))
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("generate", help="greedy-decode one question")
    p.add_argument("--model", required=True)
    p.add_argument("--context", required=True)
    p.add_argument("--answer", required=True)
    p.add_argument("--manifest", help="also write a run manifest here")
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("evaluate", help="score a checkpoint on a data split")
    p.add_argument("--model", required=True)
    p.add_argument("--evaluator", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--split", choices=("train", "dev", "test"), default="test")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("score", help="score candidate/reference text pairs from a JSON-lines file")
    p.add_argument("--evaluator", required=True)
    p.add_argument("--vocab", required=True)
    p.add_argument("--in", dest="input", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--alpha", type=float, default=0.197)
    p.set_defaults(func=cmd_score)

    p = sub.add_parser("diff", help="compare two evaluation reports")
    p.add_argument("a")
    p.add_argument("b")
    p.add_argument("--labels", nargs=2)
    p.add_argument("--out", help="also write the table to this file")
    p.set_defaults(func=cmd_diff)

    p = sub.add_parser("report", help="figures and TSV tables for one or more training runs")
    p.add_argument("runs", nargs="+", help="training output directories")
    p.add_argument("--out", required=True)
    p.add_argument("--rtd-history", help="evaluator pretraining history to plot")
    p.add_argument("--rtd-rate", type=float, default=0.15)
    p.set_defaults(func=cmd_report)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except CliError as exc:
        print(f"qgen {args.command}: {exc}", file=sys.stderr)
        return exc.code
    except FrozenEvaluatorError as exc:
        print(f"qgen {args.command}: {exc}", file=sys.stderr)
        return EXIT_CONTRACT
    except (ConfigError, CheckpointError, FileNotFoundError, json.JSONDecodeError, KeyError) as exc:
        print(f"qgen {args.command}: invalid input: {exc}", file=sys.stderr)
        return EXIT_INPUT
