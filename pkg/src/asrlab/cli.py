"""Command-line entry point for the two-stage pipeline.

Subcommands follow the pipeline order: synth-corpus, train-tokenizer,
compute-cmvn, pretrain, filter, finetune, decode, score, report. Exit codes:
0 success, 2 usage error, 3 missing input file, 4 configuration/validation
failure. Outputs go under a run directory (``--rundir`` or $ASRLAB_RUNDIR)
with fixed subfolders config/, checkpoints/, logs/, reports/.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path

import numpy as np

from . import conformer as cf
from . import datapipe as dp
from . import evaluate as ev
from . import frontend as fe
from . import tokenizer as tok
from . import training as tr
from .conformer import ModelConfig
from .frontend import AugmentPolicy

EXIT_USAGE = 2
EXIT_MISSING_INPUT = 3
EXIT_CONFIG = 4


class MissingInputError(FileNotFoundError):
    pass


class ConfigError(ValueError):
    pass


# recognised training/model configuration keys and their parsers
CONFIG_SCHEMA = {
    "num_layers": int,
    "d_model": int,
    "num_heads": int,
    "conv_kernel": int,
    "ff_expansion": int,
    "dropout": float,
    "batch_size": int,
    "accum_factor": int,
    "max_steps": int,
    "eval_interval": int,
    "peak_lr": float,
    "warmup_steps": int,
    "weight_decay": float,
    "early_stop_wer": float,
    "augment": lambda s: s.lower() in ("1", "true", "yes"),
}

DEFAULT_CONFIG = {
    "num_layers": 2,
    "d_model": 16,
    "num_heads": 2,
    "conv_kernel": 7,
    "ff_expansion": 4,
    "dropout": 0.1,
    "batch_size": 8,
    "accum_factor": 1,
    "max_steps": 1000,
    "eval_interval": 100,
    "peak_lr": 2e-3,
    "warmup_steps": 10_000,
    "weight_decay": 1e-2,
    "early_stop_wer": 0.0,
    "augment": False,
}


def load_config(path: str | None, overrides: list[str]) -> dict:
    """Merge defaults, an optional key=value file, and CLI overrides.
    Unknown keys are rejected."""
    config = dict(DEFAULT_CONFIG)

    def apply(key: str, raw: str, origin: str):
        key = key.strip()
        if key not in CONFIG_SCHEMA:
            raise ConfigError(f"unknown config key {key!r} ({origin})")
        try:
            config[key] = CONFIG_SCHEMA[key](raw.strip())
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"bad value for {key!r}: {raw!r} ({origin})") from exc

    if path is not None:
        p = Path(path)
        if not p.exists():
            raise MissingInputError(f"config file {path}")
        for lineno, line in enumerate(p.read_text().splitlines(), start=1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"line {lineno} of {path} is not key=value")
            key, raw = line.split("=", 1)
            apply(key, raw, f"{path}:{lineno}")
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not key=value")
        key, raw = item.split("=", 1)
        apply(key, raw, "command line")
    return config


def resolved_config_text(config: dict, seed: int) -> str:
    lines = [f"seed={seed}"] + [f"{k}={config[k]}" for k in sorted(config)]
    return "\n".join(lines) + "\n"


def rundir_from(args) -> Path:
    root = Path(args.rundir or os.environ.get("ASRLAB_RUNDIR", "runs"))
    for sub in ("config", "checkpoints", "logs", "reports"):
        (root / sub).mkdir(parents=True, exist_ok=True)
    return root


def require_file(path, what: str) -> Path:
    p = Path(path)
    if not p.exists():
        raise MissingInputError(f"{what} {path}")
    return p


def model_config_from(config: dict, vocab_out: int) -> ModelConfig:
    try:
        return ModelConfig(
            num_layers=config["num_layers"],
            d_model=config["d_model"],
            num_heads=config["num_heads"],
            conv_kernel=config["conv_kernel"],
            ff_expansion=config["ff_expansion"],
            dropout=config["dropout"],
            vocab_out=vocab_out,
        )
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc


def run_config_from(config: dict, args) -> tr.TrainRunConfig:
    return tr.TrainRunConfig(
        train_manifest=args.manifest,
        dev_manifest=args.dev,
        batch_size=config["batch_size"],
        accum_factor=config["accum_factor"],
        max_steps=config["max_steps"],
        eval_interval=config["eval_interval"],
        seed=args.seed,
        peak_lr=config["peak_lr"],
        warmup_steps=config["warmup_steps"],
        weight_decay=config["weight_decay"],
        augment=AugmentPolicy() if config["augment"] else None,
        early_stop_wer=config["early_stop_wer"],
    )


def save_cmvn(path, stats: fe.CmvnStats) -> None:
    np.savez(path, mean=stats.mean, var=stats.var)


def load_cmvn(path) -> fe.CmvnStats:
    data = np.load(require_file(path, "cmvn file"))
    return fe.CmvnStats(mean=data["mean"], var=data["var"])


# ---------------------------------------------------------------------------
# subcommand implementations


def cmd_synth_corpus(args) -> int:
    out_dir = Path(args.out)
    entries, words = dp.build_toy_corpus(out_dir, num_utterances=args.num_utterances,
                                         seed=args.seed)
    print(f"wrote {len(entries)} utterances and train.jsonl to {out_dir}")
    print(f"word inventory size: {len(words)}")
    return 0


def cmd_train_tokenizer(args) -> int:
    entries = dp.read_manifest(require_file(args.manifest, "manifest"))
    vocab = tok.train_tokenizer(e.text for e in entries)
    tok.save_vocab(args.out, vocab)
    print(f"trained {len(vocab.pieces)} pieces -> {args.out}")
    return 0


def cmd_compute_cmvn(args) -> int:
    entries = dp.read_manifest(require_file(args.manifest, "manifest"))
    features = []
    for e in entries:
        features.append(fe.log_mel(fe.load_wav(require_file(e.audio, "audio file"))))
    stats = fe.compute_cmvn(features)
    save_cmvn(args.out, stats)
    print(f"computed CMVN over {len(entries)} utterances -> {args.out}")
    return 0


def _train_common(args, stage: str) -> int:
    config = load_config(args.config, args.set or [])
    rundir = rundir_from(args)
    (rundir / "config" / f"{stage}.resolved").write_text(
        resolved_config_text(config, args.seed)
    )
    print(resolved_config_text(config, args.seed), end="")

    vocab = tok.load_vocab(require_file(args.vocab, "vocabulary"))
    require_file(args.manifest, "train manifest")
    require_file(args.dev, "dev manifest")
    run = run_config_from(config, args)

    if stage == "pretrain":
        model_cfg = model_config_from(config, vocab.output_dim)
        stats = load_cmvn(args.cmvn)
        init = None
        if args.resume:
            init = tr.load_checkpoint(require_file(args.resume, "checkpoint"))
        result = tr.run_stage(run, "pretrain", vocab, config=model_cfg,
                              cmvn_stats=stats, init=init,
                              log_path=rundir / "logs" / "pretrain.log",
                              ckpt_path=rundir / "checkpoints" / "pretrain.ckpt")
    else:
        init = tr.load_checkpoint(require_file(args.init, "checkpoint"))
        result = tr.run_stage(run, "finetune", vocab, init=init,
                              log_path=rundir / "logs" / "finetune.log",
                              ckpt_path=rundir / "checkpoints" / "finetune.ckpt")
    print(f"{stage} finished at step {result.checkpoint.opt_step}; "
          f"dev WER {result.final_wer:.4f}; "
          f"skipped {result.skipped_utterances} infeasible utterances")
    print(f"checkpoint: {rundir / 'checkpoints' / (stage + '.ckpt')}")
    return 0


def cmd_pretrain(args) -> int:
    return _train_common(args, "pretrain")


def cmd_finetune(args) -> int:
    return _train_common(args, "finetune")


def filter_policy(name: str) -> dp.FilterPolicy:
    """Named filter policies: "default" (Arabic text) or "toy" (the Latin
    toy-corpus alphabet)."""
    if name == "default":
        return dp.FilterPolicy()
    if name == "toy":
        # toy utterances can be well under a second long
        return dp.FilterPolicy(allowed_chars=dp.TOY_LETTERS + " ",
                               min_duration_s=0.1)
    raise ConfigError(f"unknown filter policy {name!r}")


def cmd_filter(args) -> int:
    entries = dp.read_manifest(require_file(args.input, "manifest"))
    policy = filter_policy(args.policy)
    transcriber = None
    if args.ckpt:
        ckpt = tr.load_checkpoint(require_file(args.ckpt, "checkpoint"))
        vocab = tok.load_vocab(require_file(args.vocab, "vocabulary"))
        transcriber = tr.make_transcriber(ckpt, vocab)
    kept, stats = dp.filter_manifest(entries, policy, transcriber)
    dp.write_manifest(args.out, kept)
    rundir = rundir_from(args)
    (rundir / "reports" / "filter_stats.json").write_text(
        json.dumps(stats.as_dict(), indent=2) + "\n"
    )
    print(stats.as_text(), end="")
    return 0


def cmd_decode(args) -> int:
    ckpt = tr.load_checkpoint(require_file(args.ckpt, "checkpoint"))
    vocab = tok.load_vocab(require_file(args.vocab, "vocabulary"))
    transcribe = tr.make_transcriber(ckpt, vocab)
    entries = dp.read_manifest(require_file(args.manifest, "manifest"))
    with open(args.out, "w", encoding="utf-8") as fh:
        for e in entries:
            fh.write(json.dumps({"id": e.id, "text": transcribe(e)},
                                ensure_ascii=False) + "\n")
    print(f"decoded {len(entries)} utterances -> {args.out}")
    return 0


def read_hypotheses(path) -> dict[str, str]:
    hyps: dict[str, str] = {}
    with open(require_file(path, "hypotheses"), encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            record = json.loads(line)
            if "id" not in record or "text" not in record:
                raise ConfigError(f"hypotheses line {lineno}: needs id and text")
            hyps[record["id"]] = record["text"]
    return hyps


def _score_report(args) -> ev.ScoreReport:
    refs = dp.read_manifest(require_file(args.refs, "reference manifest"))
    hyps = read_hypotheses(args.hyps)
    report = ev.score_manifest(refs, hyps)
    for warning in report.warnings:
        print(f"warning: {warning}", file=sys.stderr)
    return report


def cmd_score(args) -> int:
    report = _score_report(args)
    print(ev.render_report(report, format=args.format), end="")
    return 0


def cmd_report(args) -> int:
    report = _score_report(args)
    rundir = rundir_from(args)
    text = ev.render_report(report, format="text")
    (rundir / "reports" / "score.txt").write_text(text)
    (rundir / "reports" / "score.csv").write_text(ev.render_report(report, format="csv"))
    print(text, end="")
    print(f"wrote {rundir / 'reports' / 'score.txt'} and score.csv")
    return 0


# ---------------------------------------------------------------------------
# argument parsing


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="asrlab",
        description="Two-stage (pretrain + fine-tune) Conformer-CTC speech "
                    "recognition pipeline.",
    )
    sub = parser.add_subparsers(dest="subcommand", required=True)

    def common(p, rundir=True):
        p.add_argument("--seed", type=int, default=0)
        if rundir:
            p.add_argument("--rundir", default=None,
                           help="output directory (default $ASRLAB_RUNDIR or ./runs)")

    p = sub.add_parser("synth-corpus", help="synthesize the deterministic toy corpus")
    p.add_argument("--out", required=True)
    p.add_argument("--num-utterances", type=int, default=60)
    common(p, rundir=False)
    p.set_defaults(func=cmd_synth_corpus)

    p = sub.add_parser("train-tokenizer", help="train the 128-piece subword vocabulary")
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True)
    common(p, rundir=False)
    p.set_defaults(func=cmd_train_tokenizer)

    p = sub.add_parser("compute-cmvn", help="estimate global feature statistics")
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True)
    common(p, rundir=False)
    p.set_defaults(func=cmd_compute_cmvn)

    p = sub.add_parser("pretrain", help="stage one: train on weak labels")
    p.add_argument("--manifest", required=True)
    p.add_argument("--dev", required=True)
    p.add_argument("--vocab", required=True)
    p.add_argument("--cmvn", required=True)
    p.add_argument("--config", default=None, help="key=value config file")
    p.add_argument("--set", action="append", metavar="KEY=VALUE")
    p.add_argument("--resume", default=None, help="resume from a checkpoint")
    common(p)
    p.set_defaults(func=cmd_pretrain)

    p = sub.add_parser("filter", help="quality-filter a weakly labeled manifest")
    p.add_argument("--in", dest="input", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--policy", default="default", choices=["default", "toy"])
    p.add_argument("--ckpt", default=None, help="checkpoint for agreement filtering")
    p.add_argument("--vocab", default=None)
    common(p)
    p.set_defaults(func=cmd_filter)

    p = sub.add_parser("finetune", help="stage two: continue from a pretrain checkpoint")
    p.add_argument("--init", required=True, help="pretrain checkpoint")
    p.add_argument("--manifest", required=True)
    p.add_argument("--dev", required=True)
    p.add_argument("--vocab", required=True)
    p.add_argument("--config", default=None)
    p.add_argument("--set", action="append", metavar="KEY=VALUE")
    common(p)
    p.set_defaults(func=cmd_finetune)

    p = sub.add_parser("decode", help="greedy-decode a manifest")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--vocab", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True)
    common(p, rundir=False)
    p.set_defaults(func=cmd_decode)

    p = sub.add_parser("score", help="score hypotheses against references")
    p.add_argument("--refs", required=True)
    p.add_argument("--hyps", required=True)
    p.add_argument("--format", choices=["text", "csv"], default="text")
    common(p, rundir=False)
    p.set_defaults(func=cmd_score)

    p = sub.add_parser("report", help="score and write table files to the run directory")
    p.add_argument("--refs", required=True)
    p.add_argument("--hyps", required=True)
    common(p)
    p.set_defaults(func=cmd_report)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except MissingInputError as exc:
        print(f"error: missing-input: {exc}", file=sys.stderr)
        return EXIT_MISSING_INPUT
    except (ConfigError, dp.ManifestError, tok.VocabularyError,
            tr.CheckpointFormatError, fe.AudioFormatError, ValueError) as exc:
        print(f"error: config: {exc}", file=sys.stderr)
        return EXIT_CONFIG


def console_main() -> None:  # pragma: no cover - thin wrapper
    sys.exit(main())


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
