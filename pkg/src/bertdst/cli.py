"""Command-line entry point: ``bertdst <command> [flags]``.

Every command validates its inputs before doing any compute, writes JSON
reports (plus a PNG figure where one makes sense) and exits non-zero with a
command-specific code on failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

import torch

from . import bench, data_io, distill, dst, encoder, plotting
from .encoder import PRESETS, EncoderConfig
from .errors import DSTError, InvalidConfig, IoError, MissingField, TooFewTurns
from .tokenizer import DEFAULT_MAX_LEN, Vocab, build_vocab, load_corpus

log = logging.getLogger("bertdst")


def resolve_seed(seed):
    if seed is not None:
        return seed
    env = os.environ.get("DSTD_SEED")
    if env is None:
        return 0
    try:
        return int(env)
    except ValueError as e:
        raise InvalidConfig(f"DSTD_SEED must be an integer, got {env!r}") from e


def load_config(spec: str, vocab_size: int | None = None) -> EncoderConfig:
    """A preset name or a JSON file; a missing or zero V is taken from the vocab."""
    if spec in PRESETS:
        raw = dict(PRESETS[spec])
    else:
        path = Path(spec)
        if not path.exists():
            raise IoError(f"config {spec!r} is neither a preset ({', '.join(PRESETS)}) nor a file")
        try:
            raw = json.loads(path.read_text(encoding="utf-8"))
        except json.JSONDecodeError as e:
            raise InvalidConfig(f"{spec}: {e}") from e
    if not raw.get("V"):
        if vocab_size is None:
            raise InvalidConfig(f"config {spec!r} needs V or a vocabulary")
        raw["V"] = vocab_size
    elif vocab_size is not None and raw["V"] != vocab_size:
        raise InvalidConfig(f"config V={raw['V']} but the vocabulary has {vocab_size} tokens")
    return EncoderConfig.from_dict(raw)


def _require(*paths):
    for p in paths:
        if p is not None and not Path(p).exists():
            raise IoError(f"no such file: {p}")


def _stem(out) -> Path:
    out = Path(out)
    return out.with_suffix("") if out.suffix else out


def _write_manifest(out, manifest):
    path = Path(str(_stem(out)) + ".manifest.json")
    data_io.save_json(manifest, path)
    return path


def _tail_mean(history, n=50):
    tail = history[-n:]
    return sum(tail) / len(tail) if tail else None


# ------------------------------------------------------------------ commands

def cmd_gen_corpus(args):
    sentences = data_io.generate_synthetic_corpus(resolve_seed(args.seed), args.count)
    data_io.save_corpus(sentences, args.out)
    print(f"wrote {len(sentences)} sentences to {args.out}")


def cmd_gen_domain(args):
    spec = data_io.SyntheticDomainSpec(train_dialogs=args.train, dev_dialogs=args.dev, test_dialogs=args.test,
                                       min_turns=args.min_turns, max_turns=args.max_turns,
                                       seed=resolve_seed(args.seed))
    ontology, splits = data_io.generate_synthetic_domain(spec)
    out = Path(args.out_dir)
    data_io.save_ontology(ontology, out / "ontology.json")
    for name, dialogs in splits.items():
        data_io.save_dialogs(dialogs, out / f"{name}.json")
    text = [s for dialogs in splits.values() for d in dialogs for t in d.turns
            for s in (t.system_utterance, t.user_utterance) if s]
    text += [c.text for c in dst.enumerate_candidates(ontology)]
    data_io.save_corpus(text, out / "corpus.txt")
    print(f"wrote ontology and {', '.join(f'{k}={len(v)}' for k, v in splits.items())} dialogs to {out}")


def cmd_build_vocab(args):
    _require(*args.corpus)
    corpus = [line for path in args.corpus for line in load_corpus(path)]
    vocab = build_vocab(corpus, args.size)
    vocab.save(args.out)
    print(f"wrote {len(vocab)} tokens to {args.out}")


def cmd_pretrain(args):
    _require(args.vocab, args.corpus, args.heldout_corpus)
    vocab = Vocab.load(args.vocab)
    config = load_config(args.config, len(vocab))
    hyper = distill.TrainHyper(steps=args.steps, batch_size=args.batch_size, lr=args.lr, max_len=args.max_len,
                               mask_rate=args.mask_rate, seed=resolve_seed(args.seed))
    corpus = load_corpus(args.corpus)
    history = []
    params = distill.pretrain_teacher(config, corpus, vocab, hyper, history)
    data_io.save_checkpoint(params, vocab, args.out)
    manifest = {"command": "pretrain", "config": config.to_dict(), "hyper": vars(hyper).copy(),
                "corpus": Path(args.corpus).name, "final_train_loss": _tail_mean(history),
                "params_sha256": params.checksum()}
    if args.heldout_corpus:
        held = distill.mask_corpus(distill.encode_corpus(load_corpus(args.heldout_corpus), vocab, args.max_len),
                                   hyper.mask_rate, hyper.seed + 1)
        manifest["heldout_masked_accuracy"] = distill.masked_token_accuracy(params, held)
    _write_manifest(args.out, manifest)
    plotting.loss_curve(history, str(_stem(args.out)) + ".loss.png", "masked-LM pretraining")
    print(json.dumps({k: manifest[k] for k in manifest if k not in ("hyper", "config")}))


def cmd_distill(args):
    _require(args.teacher, args.corpus, args.heldout_corpus)
    ckpt = data_io.load_checkpoint(args.teacher)
    teacher, vocab = ckpt.params, ckpt.vocab
    if not teacher.has_mlm_head:
        raise InvalidConfig("teacher checkpoint has no MLM head")
    student_config = load_config(args.student_config, len(vocab))
    config = distill.DistillConfig(steps=args.steps, batch_size=args.batch_size, lr=args.lr, max_len=args.max_len,
                                   mask_rate=args.mask_rate, seed=resolve_seed(args.seed), temperature=args.tau,
                                   loss_positions=args.loss_positions)
    corpus = load_corpus(args.corpus)
    before = teacher.checksum()
    history = []
    student = distill.distill(teacher, student_config, corpus, vocab, config, history)
    assert teacher.checksum() == before, "teacher was modified during distillation"
    data_io.save_checkpoint(student, vocab, args.out)
    manifest = {"command": "distill", "tau": config.temperature, "mask_rate": config.mask_rate,
                "loss_positions": config.loss_positions, "config": config.to_dict(),
                "student_config": student_config.to_dict(), "teacher_sha256": before,
                "student_sha256": student.checksum(), "corpus": Path(args.corpus).name,
                "final_train_loss": _tail_mean(history)}
    if args.heldout_corpus:
        held = distill.mask_corpus(distill.encode_corpus(load_corpus(args.heldout_corpus), vocab, args.max_len),
                                   config.mask_rate, config.seed + 1)
        init = encoder.init_params(student_config, config.seed)
        manifest["heldout"] = {
            "teacher_masked_accuracy": distill.masked_token_accuracy(teacher, held),
            "student_masked_accuracy": distill.masked_token_accuracy(student, held),
            "initial_distill_loss": distill.mean_distill_loss(teacher, init, held, config),
            "final_distill_loss": distill.mean_distill_loss(teacher, student, held, config),
            "teacher_self_loss": distill.mean_distill_loss(teacher, teacher, held, config),
        }
    _write_manifest(args.out, manifest)
    plotting.loss_curve(history, str(_stem(args.out)) + ".loss.png", f"distillation (tau={config.temperature:g})",
                        "sentence distillation loss")
    print(json.dumps({k: manifest[k] for k in ("tau", "mask_rate", "loss_positions", "final_train_loss")}))


def cmd_train(args):
    _require(args.dialogs, args.ontology, args.init, args.vocab)
    if (args.init is None) == (args.config is None):
        raise InvalidConfig("give exactly one of --init (checkpoint) or --config (fresh model)")
    ontology = data_io.load_ontology(args.ontology)
    if args.init:
        ckpt = data_io.load_checkpoint(args.init)
        params, vocab = ckpt.params, ckpt.vocab
    else:
        if args.vocab is None:
            raise InvalidConfig("--config needs --vocab")
        vocab = Vocab.load(args.vocab)
        params = encoder.init_params(load_config(args.config, len(vocab)), resolve_seed(args.seed), mlm_head=False)
    dialogs = data_io.load_dialogs(args.dialogs, ontology)
    hyper = dst.DSTTrainHyper(epochs=args.epochs, steps=args.steps, batch_size=args.batch_size, lr=args.lr,
                              max_len=args.max_len, neg_ratio=None if args.neg_ratio < 0 else args.neg_ratio,
                              seed=resolve_seed(args.seed))
    history = []
    trained = dst.train_dst(params, dialogs, ontology, vocab, hyper, history)
    data_io.save_checkpoint(trained, vocab, args.out)
    manifest = {"command": "train", "config": trained.config.to_dict(), "hyper": vars(hyper).copy(),
                "dialogs": Path(args.dialogs).name, "steps": len(history),
                "final_train_loss": _tail_mean(history), "params_sha256": trained.checksum()}
    _write_manifest(args.out, manifest)
    plotting.loss_curve(history, str(_stem(args.out)) + ".loss.png", "DST fine-tuning", "binary cross-entropy")
    print(json.dumps({k: manifest[k] for k in ("steps", "final_train_loss")}))


def _track_all(args, ontology, dialogs):
    ckpt = data_io.load_checkpoint(args.checkpoint)
    if not ckpt.params.has_scorer_head:
        raise InvalidConfig("checkpoint has no scorer head")
    scorer = dst.ModelScorer(ckpt.params, ckpt.vocab, args.max_len)
    return [dst.track_dialog(scorer, d.turns, ontology, threshold=args.threshold) for d in dialogs]


def cmd_track(args):
    _require(args.checkpoint, args.dialogs, args.ontology)
    ontology = data_io.load_ontology(args.ontology)
    dialogs = data_io.load_dialogs(args.dialogs, ontology)
    states = _track_all(args, ontology, dialogs)
    data_io.save_json(data_io.states_to_json(dialogs, states), args.out)
    print(f"wrote states for {len(dialogs)} dialogs to {args.out}")


def cmd_evaluate(args):
    _require(args.dialogs, args.ontology, args.predictions, args.checkpoint)
    if (args.predictions is None) == (args.checkpoint is None):
        raise InvalidConfig("give exactly one of --predictions or --checkpoint")
    ontology = data_io.load_ontology(args.ontology)
    dialogs = data_io.load_dialogs(args.dialogs, ontology)
    if args.predictions:
        by_id = data_io.load_states(args.predictions)
        missing = [d.dialog_id for d in dialogs if d.dialog_id not in by_id]
        if missing:
            raise MissingField(f"predictions lack dialogs {missing[:5]}")
        predicted = [by_id[d.dialog_id] for d in dialogs]
    else:
        predicted = _track_all(args, ontology, dialogs)
    report = dst.evaluate(predicted, dialogs)
    if args.out:
        data_io.save_json(report, args.out)
        plotting.per_dialog_accuracy(report, str(_stem(args.out)) + ".png")
    print(json.dumps({"joint_goal": report["joint_goal"], "turn_request": report["turn_request"],
                      "turns": report["turns"], "dialogs": report["dialogs"]}))


def size_entry(name: str, config: EncoderConfig, vocab_block_bytes: int | None = None) -> dict:
    heads = encoder.head_param_counts(config)
    if vocab_block_bytes is None:
        # estimate: 4-byte length prefix plus ~8 UTF-8 bytes per token
        vocab_block_bytes = 12 * config.V
    return {
        "name": name,
        "config": config.to_dict(),
        "body_params": encoder.count_params(config),
        "mlm_head_params": heads["mlm"],
        "scorer_head_params": heads["scorer"],
        "projected_bytes_dst": data_io.projected_checkpoint_bytes(config, vocab_block_bytes),
        "projected_bytes_with_mlm": data_io.projected_checkpoint_bytes(config, vocab_block_bytes, mlm_head=True),
    }


def cmd_size_report(args):
    if not args.config and not args.checkpoint:
        raise InvalidConfig("give --config and/or --checkpoint")
    _require(*(args.checkpoint or []))
    entries = []
    for spec in args.config or []:
        entries.append(size_entry(spec if spec in PRESETS else Path(spec).stem, load_config(spec)))
    for path in args.checkpoint or []:
        ckpt = data_io.load_checkpoint(path)
        entry = size_entry(Path(path).stem, ckpt.config, len(data_io._vocab_block(ckpt.vocab)))
        entry["file_bytes"] = Path(path).stat().st_size
        entries.append(entry)
    report = {"models": entries}
    if args.out:
        data_io.save_json(report, args.out)
        plotting.parameter_breakdown(entries, str(_stem(args.out)) + ".png")
    for e in entries:
        print(f"{e['name']}: body {e['body_params']:,} params ({e['body_params'] / 1e6:.1f}M), "
              f"MLM head {e['mlm_head_params']:,}, scorer head {e['scorer_head_params']:,}, "
              f"projected checkpoint {e['projected_bytes_dst'] / 1e6:.0f}MB")


def cmd_bench(args):
    _require(*args.checkpoint, args.ontology, args.dialogs)
    if args.turns < bench.MIN_TURNS:
        raise TooFewTurns(f"need at least {bench.MIN_TURNS} measured turns, got {args.turns}")
    ontology = data_io.load_ontology(args.ontology)
    dialogs = data_io.load_dialogs(args.dialogs, ontology)
    reports = []
    for path in args.checkpoint:
        ckpt = data_io.load_checkpoint(path)
        cfg = ckpt.config
        model_id = f"{Path(path).stem} (N={cfg.N}, d1={cfg.d1}, d2={cfg.d2}, h={cfg.h})"
        report = bench.benchmark(ckpt.params, ckpt.vocab, ontology, dialogs, turns=args.turns, warmup=args.warmup,
                                 threads=args.threads, max_len=args.max_len, model_id=model_id)
        reports.append(report.to_json())
        print(f"{model_id}: mean {report.mean_s * 1e3:.2f} ms, median {report.median_s * 1e3:.2f} ms, "
              f"p95 {report.p95_s * 1e3:.2f} ms over {report.turns} turns ({report.threads} thread)")
    if args.out:
        data_io.save_json({"reports": reports}, args.out)
        plotting.latency_histogram(reports, str(_stem(args.out)) + ".png")


# ------------------------------------------------------------------ parser

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="bertdst", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name, func, help):
        p = sub.add_parser(name, help=help)
        p.set_defaults(func=func)
        p.add_argument("--seed", type=int, default=None, help="random seed (default: $DSTD_SEED or 0)")
        p.add_argument("--threads", type=int, default=1, help="torch intra-op threads (default 1)")
        return p

    p = add("gen-corpus", cmd_gen_corpus, "write a synthetic MLM corpus")
    p.add_argument("--count", type=int, required=True)
    p.add_argument("--out", required=True)

    p = add("gen-domain", cmd_gen_domain, "write a synthetic DST domain (ontology, dialogs, corpus)")
    p.add_argument("--train", type=int, default=300)
    p.add_argument("--dev", type=int, default=50)
    p.add_argument("--test", type=int, default=50)
    p.add_argument("--min-turns", type=int, default=2)
    p.add_argument("--max-turns", type=int, default=5)
    p.add_argument("--out-dir", required=True)

    p = add("build-vocab", cmd_build_vocab, "build a WordPiece vocabulary from corpus files")
    p.add_argument("--corpus", required=True, nargs="+")
    p.add_argument("--size", type=int, required=True)
    p.add_argument("--out", required=True)

    def training_flags(p, steps, lr, max_len):
        p.add_argument("--steps", type=int, default=steps)
        p.add_argument("--batch-size", type=int, default=32)
        p.add_argument("--lr", type=float, default=lr)
        p.add_argument("--max-len", type=int, default=max_len)

    p = add("pretrain", cmd_pretrain, "masked-LM pretraining of a teacher")
    p.add_argument("--config", required=True, help=f"preset ({', '.join(PRESETS)}) or JSON file")
    p.add_argument("--vocab", required=True)
    p.add_argument("--corpus", required=True)
    p.add_argument("--heldout-corpus")
    p.add_argument("--mask-rate", type=float, default=0.15)
    p.add_argument("--out", required=True)
    training_flags(p, 2000, 1e-3, 32)

    p = add("distill", cmd_distill, "distill a student from a teacher checkpoint")
    p.add_argument("--teacher", required=True)
    p.add_argument("--student-config", required=True)
    p.add_argument("--corpus", required=True)
    p.add_argument("--heldout-corpus")
    p.add_argument("--tau", type=float, default=10.0)
    p.add_argument("--mask-rate", type=float, default=0.15)
    p.add_argument("--loss-positions", choices=[distill.ALL_TOKENS, distill.MASKED_ONLY], default=distill.ALL_TOKENS)
    p.add_argument("--out", required=True)
    training_flags(p, 2000, 1e-3, 32)

    p = add("train", cmd_train, "fine-tune a DST scorer")
    p.add_argument("--dialogs", required=True)
    p.add_argument("--ontology", required=True)
    p.add_argument("--init", help="start from this checkpoint")
    p.add_argument("--config", help="or start a fresh model from this preset/JSON config")
    p.add_argument("--vocab", help="vocabulary for --config")
    p.add_argument("--epochs", type=int, default=30)
    p.add_argument("--neg-ratio", type=float, default=-1.0,
                   help="negatives per positive, resampled each epoch (default: keep all)")
    p.add_argument("--out", required=True)
    training_flags(p, None, 1e-3, DEFAULT_MAX_LEN)

    for name, func, help in (("track", cmd_track, "write predicted per-turn states"),
                             ("evaluate", cmd_evaluate, "joint goal / turn request accuracy report")):
        p = add(name, func, help)
        p.add_argument("--dialogs", required=True)
        p.add_argument("--ontology", required=True)
        p.add_argument("--checkpoint", required=name == "track")
        p.add_argument("--threshold", type=float, default=dst.THRESHOLD)
        p.add_argument("--max-len", type=int, default=DEFAULT_MAX_LEN)
        p.add_argument("--out", required=name == "track")
        if name == "evaluate":
            p.add_argument("--predictions", help="states file from `track` (or a gold dialog file)")

    p = add("size-report", cmd_size_report, "parameter counts and projected checkpoint sizes")
    p.add_argument("--config", action="append", help="preset or JSON config (repeatable)")
    p.add_argument("--checkpoint", action="append", help="checkpoint file (repeatable)")
    p.add_argument("--out")

    p = add("bench", cmd_bench, "per-turn CPU latency of full tracking")
    p.add_argument("--checkpoint", action="append", required=True, help="repeatable")
    p.add_argument("--ontology", required=True)
    p.add_argument("--dialogs", required=True)
    p.add_argument("--turns", type=int, default=100)
    p.add_argument("--warmup", type=int, default=5)
    p.add_argument("--max-len", type=int, default=DEFAULT_MAX_LEN)
    p.add_argument("--out")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s", stream=sys.stderr)
    if args.threads < 1:
        print("error: --threads must be at least 1", file=sys.stderr)
        return InvalidConfig.exit_code
    torch.set_num_threads(args.threads)
    try:
        args.func(args)
    except DSTError as e:
        print(f"error: {e}", file=sys.stderr)
        return e.exit_code
    return 0


if __name__ == "__main__":
    sys.exit(main())
