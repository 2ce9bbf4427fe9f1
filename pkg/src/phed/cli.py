"""Command-line entry point: ``phed datagen | train | generate | evaluate | check``.

Every command exits 0 on success. Failures print one ``phed: error: ...`` line
to stderr and exit with a code naming the failure class (see ``EXIT_CODES``).
"""

from __future__ import annotations

import argparse
import logging
import os
import sys
from pathlib import Path

import torch

from . import config as runcfg
from .checkpoint import CheckpointError, load_checkpoint, read_archive, load_model_state
from .data import CorpusError, SyntheticSpec, generate_synthetic_corpus, load_corpus, save_corpus

log = logging.getLogger("phed")

EXIT_CODES = {
    "usage": 2,
    "config": 3,
    "missing": 4,
    "checkpoint": 5,
    "corpus": 6,
    "training": 7,
    "check": 8,
}


class CliError(Exception):
    def __init__(self, kind: str, message: str):
        super().__init__(message)
        self.kind = kind


def _apply_threads() -> None:
    raw = os.environ.get("PHED_THREADS")
    if raw:
        try:
            n = int(raw)
        except ValueError:
            raise CliError("usage", f"PHED_THREADS must be an integer, got {raw!r}") from None
        torch.set_num_threads(max(1, n))


def _setup_logging(run_dir: Path | None, verbose: bool) -> None:
    handlers: list[logging.Handler] = [logging.StreamHandler(sys.stderr)]
    if run_dir is not None:
        run_dir.mkdir(parents=True, exist_ok=True)
        handlers.append(logging.FileHandler(run_dir / "train.log", encoding="utf-8"))
    logging.basicConfig(
        level=logging.INFO if verbose else logging.WARNING,
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
        handlers=handlers,
        force=True,
    )


def _load_config(path: str | None) -> runcfg.RunConfig:
    if path is None:
        return runcfg.RunConfig()
    if not Path(path).exists():
        raise CliError("missing", f"config file not found: {path}")
    return runcfg.load(path)


def _corpus_for(cfg: runcfg.RunConfig, override: str | None = None):
    path = override or cfg.paths.corpus
    if path:
        if not Path(path).exists():
            raise CliError("missing", f"corpus file not found: {path}")
        return load_corpus(path)
    return generate_synthetic_corpus(cfg.data)


def _build_model(cfg: runcfg.RunConfig, vocab_size: int, labels_per_aspect):
    from .model import ModelConfig, PhedModel
    from .numerics import RngState

    mc = ModelConfig(vocab_size=vocab_size, labels_per_aspect=list(labels_per_aspect), **cfg.model)
    return PhedModel(mc, RngState(cfg.train.seed))


def _vocab_for(cfg: runcfg.RunConfig, corpus):
    return cfg.data.vocabulary() if not cfg.paths.corpus else corpus.vocabulary()


def _labels_for(cfg: runcfg.RunConfig, corpus) -> list[int]:
    if not cfg.paths.corpus:
        return cfg.data.labels_per_aspect
    k = corpus.num_aspects
    return [1 + max(p.attributes[a] for p in corpus.all_pairs()) for a in range(k)]


# -- subcommands ----------------------------------------------------------------


def cmd_datagen(args) -> int:
    cfg = _load_config(args.spec)
    corpus = generate_synthetic_corpus(cfg.data)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    save_corpus(corpus, out)
    print(f"wrote {len(corpus.all_pairs())} pairs to {out}")
    return 0


def cmd_train(args) -> int:
    from .training import Trainer

    cfg = _load_config(args.config)
    run_dir = Path(args.run_dir or cfg.paths.run_dir)
    _setup_logging(run_dir, not args.quiet)
    corpus = _corpus_for(cfg)
    vocab = _vocab_for(cfg, corpus)
    model = _build_model(cfg, len(vocab), _labels_for(cfg, corpus))
    cfg.save(run_dir / "config.cfg")
    trainer = Trainer(model, corpus, vocab, cfg.train, run_dir, extra_meta={"run_config": cfg.dumps()})

    if args.stage == "all":
        if args.resume and not Path(args.resume).exists():
            raise CliError("missing", f"checkpoint not found: {args.resume}")
        reports = trainer.train_all(resume_path=args.resume)
    else:
        try:
            stage = int(args.stage)
        except ValueError:
            raise CliError("usage", f"--stage must be an integer or 'all', got {args.stage!r}") from None
        if not 0 <= stage <= model.num_stages:
            raise CliError("usage", f"--stage {stage} outside 0..{model.num_stages}")
        resume = None
        if args.resume:
            if not Path(args.resume).exists():
                raise CliError("missing", f"checkpoint not found: {args.resume}")
            meta, tensors = read_archive(args.resume)
            load_model_state(model, tensors, args.resume)
            cnt = meta.get("counters", {})
            if cnt.get("phase") == stage and not cnt.get("phase_done"):
                resume = (meta, tensors)
        elif stage >= 1:
            prev = run_dir / "checkpoints" / f"phase{stage - 1}_final.ckpt"
            if stage == 1 and not cfg.train.pretrain_base:
                prev = None
            if prev is not None:
                if not prev.exists():
                    raise CliError("missing", f"stage {stage} needs {prev}; train stage {stage - 1} first")
                _, tensors = read_archive(prev)
                load_model_state(model, tensors, prev)
        reports = [trainer.train_stage(stage, resume)]
    for r in reports:
        print(f"phase {r.stage}: best epoch {r.best_epoch}, val {r.val_losses}, {r.wall_time:.1f}s")
    print(f"run directory: {run_dir}")
    return 0


def _parse_labels(text: str) -> list[int]:
    try:
        labels = [int(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise CliError("usage", f"controls must be comma-separated integers, got {text!r}") from None
    if not labels:
        raise CliError("usage", "at least one control label is required")
    return labels


def _load_ckpt(path: str):
    if not Path(path).exists():
        raise CliError("missing", f"checkpoint not found: {path}")
    return load_checkpoint(path)


def cmd_generate(args) -> int:
    from .decoding import beam_search, generate, step_logprobs
    from .numerics import RngState

    model, vocab, _, _ = _load_ckpt(args.ckpt)
    controls = _parse_labels(args.controls)
    for j, lab in enumerate(controls):
        n = model.config.labels_per_aspect[j] if j < model.num_stages else None
        if n is None:
            raise CliError("usage", f"{len(controls)} controls given but the model has {model.num_stages} stages")
        if not 0 <= lab < n:
            raise CliError("usage", f"control {j + 1} must be in 0..{n - 1}, got {lab}")
    method = "greedy" if args.greedy else "beam"
    text, hyp = generate(
        model, vocab, args.message, controls, seed=args.seed, method=method, width=args.beam,
        max_len=args.max_len, latent_samples=args.latent_samples,
    )
    print(text)
    if args.trace:
        state = model.forward_generate(torch.tensor(vocab.tokenize(args.message)), controls, RngState(args.seed))
        prefix = [2]
        for t, tok in enumerate(hyp.tokens + ([1] if hyp.finished else [])):
            lp = step_logprobs(state, [prefix])[0]
            top = torch.topk(lp, 5)
            cells = ", ".join(f"{vocab.tokens[int(i)]}:{float(v):.3f}" for v, i in zip(top.values, top.indices))
            print(f"step {t}: {cells}")
            prefix.append(tok)
        print(f"score {hyp.score:.4f}")
    return 0


def cmd_evaluate(args) -> int:
    from .evaluation import evaluate

    model, vocab, meta, _ = _load_ckpt(args.ckpt)
    text = meta.get("extra", {}).get("run_config")
    cfg = runcfg.loads(text, f"{args.ckpt}:run_config") if text else runcfg.RunConfig()
    corpus = _corpus_for(cfg, args.corpus)
    if args.split not in ("train", "validation", "test"):
        raise CliError("usage", f"unknown split {args.split!r}")
    pairs = getattr(corpus, args.split)
    if args.limit:
        pairs = pairs[: args.limit]
    if not pairs:
        raise CliError("corpus", f"split {args.split!r} is empty")
    if args.controls == "gold":
        controls = "gold"
    elif args.controls.startswith("fixed:"):
        controls = _parse_labels(args.controls[len("fixed:") :])
    else:
        raise CliError("usage", f"--controls must be 'gold' or 'fixed:<l1,...>', got {args.controls!r}")
    depth = len(controls) if controls != "gold" else model.num_stages
    spec = cfg.data if not (args.corpus or cfg.paths.corpus) else SyntheticSpec()
    report = evaluate(
        model, vocab, pairs, spec, controls=controls, depth=depth,
        method="greedy" if args.greedy else "beam", width=args.beam, seed=args.seed,
    )
    rendered = report.render()
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(rendered, encoding="utf-8")
    print(rendered, end="")
    return 0


def cmd_check(args) -> int:
    from . import acceptance

    only = None
    if args.only:
        only = [int(v) for v in args.only.split(",")]
    results = acceptance.run_all(only=only, work_dir=Path(args.work_dir), include_training=not args.fast)
    failed = [r for r in results if not r.passed]
    print(f"{len(results) - len(failed)}/{len(results)} criteria passed")
    if failed:
        raise CliError("check", f"criteria failed: {', '.join(str(r.number) for r in failed)}")
    return 0


# -- parser -----------------------------------------------------------------------


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise CliError("usage", message)


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="phed", description="Progressive hierarchical CVAE dialogue generation at desk scale.")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    d = sub.add_parser("datagen", help="write the synthetic corpus")
    d.add_argument("--spec", help="config file; only data.* keys matter")
    d.add_argument("--out", required=True)
    d.set_defaults(func=cmd_datagen)

    t = sub.add_parser("train", help="train phases")
    t.add_argument("--config")
    t.add_argument("--stage", default="all", help="0 (base warm-up), 1..K, or 'all'")
    t.add_argument("--resume", help="checkpoint to resume from")
    t.add_argument("--run-dir", help="override paths.run_dir")
    t.add_argument("--quiet", action="store_true")
    t.set_defaults(func=cmd_train)

    g = sub.add_parser("generate", help="generate one response")
    g.add_argument("--ckpt", required=True)
    g.add_argument("--message", required=True)
    g.add_argument("--controls", required=True, help="l1[,l2[,l3]]")
    g.add_argument("--beam", type=int, default=5)
    g.add_argument("--greedy", action="store_true")
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--max-len", type=int)
    g.add_argument("--latent-samples", type=int, default=1)
    g.add_argument("--trace", action="store_true", help="print top-5 tokens per step")
    g.set_defaults(func=cmd_generate)

    e = sub.add_parser("evaluate", help="score a split and write a report")
    e.add_argument("--ckpt", required=True)
    e.add_argument("--split", default="test")
    e.add_argument("--controls", default="gold", help="gold | fixed:<l1,l2,l3>")
    e.add_argument("--out", required=True)
    e.add_argument("--corpus", help="corpus file instead of the run's synthetic corpus")
    e.add_argument("--beam", type=int, default=5)
    e.add_argument("--greedy", action="store_true")
    e.add_argument("--seed", type=int, default=0)
    e.add_argument("--limit", type=int, default=0)
    e.set_defaults(func=cmd_evaluate)

    c = sub.add_parser("check", help="run the acceptance suite")
    c.add_argument("--only", help="comma-separated criterion numbers")
    c.add_argument("--fast", action="store_true", help="skip criteria that need desk training")
    c.add_argument("--work-dir", default="runs/check")
    c.set_defaults(func=cmd_check)
    return p


def run(argv: list[str] | None = None) -> int:
    try:
        _apply_threads()
        args = build_parser().parse_args(argv)
        return args.func(args)
    except CliError as exc:
        kind, msg = exc.kind, str(exc)
    except runcfg.ConfigError as exc:
        kind, msg = "config", f"invalid config: {exc}"
    except CheckpointError as exc:
        kind, msg = "checkpoint", f"bad checkpoint: {exc}"
    except CorpusError as exc:
        kind, msg = "corpus", f"bad corpus: {exc}"
    except FileNotFoundError as exc:
        kind, msg = "missing", f"file not found: {exc.filename}"
    except RuntimeError as exc:
        from .training import TrainingError

        if not isinstance(exc, TrainingError):
            raise
        kind, msg = "training", f"training failed: {exc}"
    print(f"phed: error: {msg}", file=sys.stderr)
    return EXIT_CODES[kind]


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
