"""Command-line orchestration of corpus synthesis, the training phases,
generation with the fact gate, evaluation, and the feedback service.

Exit codes: 0 success, 1 input error, 2 training divergence. Every
subcommand archives its arguments as run_config.json in its output
directory, and report paths render figures next to the delimited output.
The CGAFT_DATA_DIR environment variable rebases relative paths.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
import time
from pathlib import Path

import numpy as np

from .autodiff import TrainingDivergenceError
from .checkpoint import load_checkpoint, save_checkpoint
from .generator import Generator
from .lm import DecoderStack, ModelConfig, corpus_nll, lm_pretrain, lm_sequence
from .synthetic import build_corpus, load_corpus
from .vision import VisionConfig, VisualEncoder, mim_pretrain
from .vocab import Vocabulary

EXIT_OK = 0
EXIT_INPUT = 1
EXIT_DIVERGED = 2


def _base_dir() -> Path:
    return Path(os.environ.get("CGAFT_DATA_DIR", "."))


def _resolve(path) -> Path:
    p = Path(path)
    return p if p.is_absolute() else _base_dir() / p


def _archive_config(out_dir: Path, args: argparse.Namespace) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    payload = {k: (str(v) if isinstance(v, Path) else v)
               for k, v in sorted(vars(args).items()) if k != "func"}
    (out_dir / "run_config.json").write_text(
        json.dumps(payload, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def _load_corpus_arg(args):
    return load_corpus(_resolve(args.corpus))


def _write_losses(out_dir: Path, losses: list[float], name: str = "losses") -> None:
    with open(out_dir / f"{name}.jsonl", "w", encoding="utf-8") as fh:
        for i, v in enumerate(losses):
            fh.write(json.dumps({"step": i, "loss": round(v, 6)}) + "\n")


# -- subcommands ---------------------------------------------------------------


def cmd_synth(args) -> int:
    out = _resolve(args.out)
    _archive_config(out, args)
    vocab = Vocabulary.default()
    build_corpus(args.n, seed=args.seed, vocab=vocab, rare_rate=args.rare_rate,
                 out_dir=out)
    print(f"wrote {args.n} studies to {out}")
    return EXIT_OK


def cmd_pretrain_lm(args) -> int:
    corpus, vocab = _load_corpus_arg(args)
    out = _resolve(args.out)
    _archive_config(out, args)
    seqs = [lm_sequence(s.report) for s in corpus.split("train")]
    stack, losses = lm_pretrain(seqs, steps=args.steps, seed=args.seed,
                                cfg=ModelConfig(vocab_size=len(vocab)), lr=args.lr)
    heldout = [lm_sequence(s.report) for s in corpus.split("val")]
    save_checkpoint(out / "lm.ckpt", stack.params, tag="lm-pretrain")
    _write_losses(out, losses)
    from .figures import save_loss_curve
    save_loss_curve(losses, out / "loss_curve.png", title="language-model pretraining")
    print(f"final train NLL {losses[-1]:.4f}  heldout NLL {corpus_nll(stack, heldout):.4f}")
    return EXIT_OK


def cmd_pretrain_vision(args) -> int:
    corpus, _ = _load_corpus_arg(args)
    out = _resolve(args.out)
    _archive_config(out, args)
    images = [s.image for s in corpus.split("train")]
    encoder, losses = mim_pretrain(images, mask_ratio=args.mask_ratio,
                                   steps=args.steps, seed=args.seed, lr=args.lr)
    save_checkpoint(out / "vision.ckpt", encoder.params, tag="vision-pretrain")
    _write_losses(out, losses)
    from .figures import save_loss_curve
    save_loss_curve(losses, out / "loss_curve.png", title="masked-patch pretraining")
    print(f"final reconstruction loss {losses[-1]:.4f}")
    return EXIT_OK


def _assemble_generator(args, vocab) -> Generator:
    gen = Generator.init(vocab, seed=args.seed)
    if getattr(args, "lm_ckpt", None):
        params, _ = load_checkpoint(_resolve(args.lm_ckpt))
        for k, p in params.items():
            if k in gen.params:
                gen.params[k].values = p.values
    if getattr(args, "vision_ckpt", None):
        params, _ = load_checkpoint(_resolve(args.vision_ckpt))
        for k, p in params.items():
            if k in gen.params:
                gen.params[k].values = p.values
    return gen


def cmd_train_joint(args) -> int:
    from .metrics import evaluate_reports
    from .trainer import train_joint_mle

    corpus, vocab = _load_corpus_arg(args)
    out = _resolve(args.out)
    _archive_config(out, args)
    gen = _assemble_generator(args, vocab)
    losses = train_joint_mle(gen, corpus.split("train"), steps=args.steps,
                             batch_size=args.batch_size, lr=args.lr, seed=args.seed)
    gen.save(out / "model.ckpt", tag="mle-only")
    _write_losses(out, losses)
    from .figures import save_loss_curve
    save_loss_curve(losses, out / "loss_curve.png", title="joint MLE fine-tuning")
    val = corpus.split("val")[:64]
    reports, _ = gen.generate_batch([s.image for s in val], [s.prompt for s in val],
                                    temperature=None, max_new=56)
    m = evaluate_reports(reports, val, vocab)
    print(f"mle-only checkpoint: val macro F1(14) {m.macro_f1_14:.2f}, "
          f"hallucination {m.hallucination_rate:.2f}%")
    return EXIT_OK


def cmd_train_cgaft(args) -> int:
    from .figures import save_round_log_figure
    from .trainer import CgaftConfig, ClinicianOracle, PPOConfig, run_cgaft

    corpus, vocab = _load_corpus_arg(args)
    out = _resolve(args.out)
    _archive_config(out, args)
    gen, tag = Generator.from_checkpoint(_resolve(args.model), vocab)
    oracle = ClinicianOracle(mode=args.oracle)
    cfg = CgaftConfig(
        ppo=PPOConfig(rollouts=args.rollouts, lr=args.ppo_lr,
                      disc_blend=args.alpha, max_new=56),
        pairs_per_round=args.pairs_per_round,
        ppo_iters_per_round=args.ppo_iters)
    queue_dir = _resolve(args.queue_dir) if args.queue_dir else None
    log_path = _resolve(args.log) if args.log else None
    round_log_path = out / "round_log.jsonl"
    result = run_cgaft(gen, corpus, oracle, rounds=args.rounds, cfg=cfg,
                       seed=args.seed, queue_dir=queue_dir, log_path=log_path,
                       round_log_path=round_log_path)
    gen.save(out / "model.ckpt", tag="cgaft")
    save_checkpoint(out / "reward_model.ckpt", result["rm"].params, tag="reward-model")
    save_checkpoint(out / "discriminator.ckpt", result["disc"].params, tag="discriminator")
    save_round_log_figure(result["round_log"], out / "rounds.png")
    for rec in result["round_log"]:
        print(json.dumps(rec, sort_keys=True))
    return EXIT_OK


def _pick_study(corpus, args):
    if args.study_id:
        return corpus.by_id(args.study_id)
    split = corpus.split(args.split)
    return split[args.index % len(split)]


def cmd_generate(args) -> int:
    corpus, vocab = _load_corpus_arg(args)
    gen, tag = Generator.from_checkpoint(_resolve(args.model), vocab)
    study = _pick_study(corpus, args)
    temperature = None if args.temperature <= 0 else args.temperature
    if args.kgam:
        from .kgam import correction_loop, default_graph, write_audit_trail
        report, audit = correction_loop(study.image, study.prompt, gen,
                                        default_graph(), vocab,
                                        max_retries=args.max_retries,
                                        seed=args.seed)
        if args.out:
            out = _resolve(args.out)
            out.mkdir(parents=True, exist_ok=True)
            write_audit_trail(audit, out / f"{study.study_id}_audit.jsonl")
    else:
        report = gen.generate(study.image, study.prompt, temperature=temperature,
                              seed=args.seed)
    print(f"study {study.study_id}  prompt: {vocab.decode_text(study.prompt.ids)}")
    print(vocab.decode_text(report.ids))
    return EXIT_OK


def cmd_kgam_check(args) -> int:
    from .kgam import consistency, default_graph

    vocab = Vocabulary.default()
    if args.report_file:
        text = Path(_resolve(args.report_file)).read_text(encoding="utf-8")
        text = " ".join(text.split())
    else:
        text = args.report
    try:
        tokens = vocab.encode_text(text)
    except KeyError as e:
        print(f"input error: {e}", file=sys.stderr)
        return EXIT_INPUT
    bit, check = consistency(tokens, default_graph(), vocab)
    for a, v in zip(check.assertions, check.verdicts):
        loc = f" @ {a.location}" if a.location else ""
        sugg = f" -> {v.suggestion}" if v.suggestion else ""
        print(f"  {a.entity}{loc} [{a.polarity}]: {v.kind}{sugg}")
    print(f"consistency: {bit}")
    print(f"standardized: {vocab.decode_text(check.standardized.ids)}")
    return EXIT_OK


def cmd_evaluate(args) -> int:
    from .figures import save_metric_bars, save_robustness_figure
    from .metrics import (DEFAULT_PERTURBATION_GRID, evaluate_reports,
                          robustness_suite)

    corpus, vocab = _load_corpus_arg(args)
    gen, tag = Generator.from_checkpoint(_resolve(args.model), vocab)
    studies = corpus.split(args.split)
    if args.limit:
        studies = studies[: args.limit]
    if not studies:
        print(f"input error: split {args.split!r} is empty", file=sys.stderr)
        return EXIT_INPUT
    t0 = time.perf_counter()
    reports, _ = gen.generate_batch([s.image for s in studies],
                                    [s.prompt for s in studies],
                                    temperature=None, max_new=56)
    mean_time = (time.perf_counter() - t0) / len(studies)
    if args.kgam:
        from .kgam import correction_loop, default_graph
        graph = default_graph()
        reports = [correction_loop(s.image, s.prompt, gen, graph, vocab,
                                   seed=args.seed)[0] for s in studies]
    metric = evaluate_reports(reports, studies, vocab, mean_gen_time=mean_time)
    text = metric.to_table() if args.format == "table" else metric.to_records()
    print(text, end="")
    if args.out:
        out = _resolve(args.out)
        _archive_config(out, args)
        metric.save(out / "metrics.txt", fmt="table")
        metric.save(out / "metrics.jsonl", fmt="records")
        save_metric_bars(metric, out / "metrics.png")
        if args.robustness:
            means = robustness_suite(gen, studies[: args.robustness], vocab,
                                     grid=DEFAULT_PERTURBATION_GRID, seed=args.seed)
            with open(out / "robustness.jsonl", "w", encoding="utf-8") as fh:
                for kind, val in means.items():
                    fh.write(json.dumps({"kind": kind, "mean_rouge_l": round(val, 6)}) + "\n")
            save_robustness_figure(means, out / "robustness.png")
            print(json.dumps(means, sort_keys=True))
    return EXIT_OK


def cmd_serve_feedback(args) -> int:
    from .service import FeedbackService

    host, _, port = args.bind.partition(":")
    service = FeedbackService(_resolve(args.queue_dir), _resolve(args.log),
                              host=host or "127.0.0.1", port=int(port or 8750))
    print(f"feedback service on {service.address} "
          f"(queue {args.queue_dir}, log {args.log})", flush=True)
    try:
        service.serve_forever()
    except KeyboardInterrupt:
        service.stop()
    return EXIT_OK


# -- parser ----------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(
        prog="minicxr",
        description="Synthetic chest-study report generation with adversarial "
                    "fine-tuning and a knowledge-graph fact gate.")
    sub = ap.add_subparsers(dest="command", required=True)

    def common(p, out_required=True):
        p.add_argument("--seed", type=int, default=7)

    p = sub.add_parser("synth", help="generate a synthetic corpus")
    p.add_argument("--n", type=int, required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--rare-rate", type=float, default=0.004)
    common(p)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("pretrain-lm", help="phase 1: language-model pretraining")
    p.add_argument("--corpus", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--steps", type=int, default=300)
    p.add_argument("--lr", type=float, default=1e-3)
    common(p)
    p.set_defaults(func=cmd_pretrain_lm)

    p = sub.add_parser("pretrain-vision", help="phase 2: masked-patch pretraining")
    p.add_argument("--corpus", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--steps", type=int, default=150)
    p.add_argument("--mask-ratio", type=float, default=0.5)
    p.add_argument("--lr", type=float, default=1e-3)
    common(p)
    p.set_defaults(func=cmd_pretrain_vision)

    p = sub.add_parser("train-joint", help="phase 3: joint MLE fine-tuning")
    p.add_argument("--corpus", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--steps", type=int, default=1500)
    p.add_argument("--batch-size", type=int, default=8)
    p.add_argument("--lr", type=float, default=3e-4)
    p.add_argument("--lm-ckpt", help="phase-1 checkpoint (omit for cold start)")
    p.add_argument("--vision-ckpt", help="phase-2 checkpoint (omit for cold start)")
    common(p)
    p.set_defaults(func=cmd_train_joint)

    p = sub.add_parser("train-cgaft", help="phase 4: adversarial fine-tuning")
    p.add_argument("--corpus", required=True)
    p.add_argument("--model", required=True, help="mle-only checkpoint")
    p.add_argument("--out", required=True)
    p.add_argument("--oracle", choices=("simulated", "human-log"), default="simulated")
    p.add_argument("--rounds", type=int, default=5)
    p.add_argument("--rollouts", type=int, default=64)
    p.add_argument("--pairs-per-round", type=int, default=32)
    p.add_argument("--ppo-iters", type=int, default=4)
    p.add_argument("--ppo-lr", type=float, default=1e-4)
    p.add_argument("--alpha", type=float, default=0.7,
                   help="reward blend: alpha*R_M + (1-alpha)*log D")
    p.add_argument("--queue-dir", help="pair queue for human-log mode")
    p.add_argument("--log", help="preference log for human-log mode")
    common(p)
    p.set_defaults(func=cmd_train_cgaft)

    p = sub.add_parser("generate", help="generate one report")
    p.add_argument("--corpus", required=True)
    p.add_argument("--model", required=True)
    p.add_argument("--study-id")
    p.add_argument("--split", default="test")
    p.add_argument("--index", type=int, default=0)
    p.add_argument("--temperature", type=float, default=0.0,
                   help="0 selects greedy decoding")
    p.add_argument("--kgam", action="store_true", help="run the fact-gate loop")
    p.add_argument("--max-retries", type=int, default=3)
    p.add_argument("--out", help="directory for the audit trail")
    common(p)
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("kgam-check", help="fact-check a report against the graph")
    group = p.add_mutually_exclusive_group(required=True)
    group.add_argument("--report", help="report text")
    group.add_argument("--report-file")
    common(p)
    p.set_defaults(func=cmd_kgam_check)

    p = sub.add_parser("evaluate", help="clinical metrics on a corpus split")
    p.add_argument("--corpus", required=True)
    p.add_argument("--model", required=True)
    p.add_argument("--split", default="test")
    p.add_argument("--limit", type=int, default=0)
    p.add_argument("--format", choices=("table", "records"), default="table")
    p.add_argument("--kgam", action="store_true")
    p.add_argument("--robustness", type=int, default=0,
                   help="also run the perturbation suite on N studies")
    p.add_argument("--out")
    common(p)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("serve-feedback", help="run the preference service")
    p.add_argument("--queue-dir", required=True)
    p.add_argument("--log", required=True)
    p.add_argument("--bind", default="127.0.0.1:8750")
    common(p)
    p.set_defaults(func=cmd_serve_feedback)

    return ap


def main(argv: list[str] | None = None) -> int:
    ap = build_parser()
    try:
        args = ap.parse_args(argv)
    except SystemExit as e:
        return EXIT_INPUT if e.code not in (0, None) else EXIT_OK
    try:
        return args.func(args)
    except TrainingDivergenceError as e:
        print(f"training divergence: {e}", file=sys.stderr)
        return EXIT_DIVERGED
    except (FileNotFoundError, KeyError, ValueError) as e:
        print(f"input error: {e}", file=sys.stderr)
        return EXIT_INPUT


if __name__ == "__main__":
    sys.exit(main())
