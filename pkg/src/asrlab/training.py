"""Optimization and the two-stage training runner.

Stage one pretrains on weakly labeled data; stage two resumes from the
stage-one checkpoint and fine-tunes at one tenth of the peak learning rate.
Global-batch semantics are emulated by gradient accumulation in a single
process. All randomness (batch order, dropout, masking) is derived from the
run seed plus deterministic counters, so interrupted runs resume exactly.
"""

from __future__ import annotations

import hashlib
import json
import struct
import zlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import autograd as ag
from . import conformer as cf
from . import ctc as ctc_mod
from . import datapipe as dp
from . import frontend as fe
from . import tokenizer as tok
from .autograd import Tensor
from .conformer import ModelConfig, ParameterSet
from .evaluate import edit_distance
from .frontend import AugmentPolicy, CmvnStats
from .tokenizer import Vocabulary

CKPT_MAGIC = b"CFCK"
CKPT_VERSION = 1

STAGES = ("pretrain", "finetune")


class CheckpointFormatError(ValueError):
    pass


@dataclass(frozen=True)
class ScheduleConfig:
    peak_lr: float
    warmup_steps: int
    stage: str = "pretrain"

    def __post_init__(self):
        if self.warmup_steps < 1:
            raise ValueError("warmup_steps must be >= 1")
        if self.stage not in STAGES:
            raise ValueError(f"stage must be one of {STAGES}")


def noam_lr(step: int, cfg: ScheduleConfig) -> float:
    """Linear warmup then inverse-square-root decay, peaking exactly at the
    warmup step."""
    if step < 1:
        raise ValueError(f"schedule step must be >= 1, got {step}")
    return cfg.peak_lr * min(step / cfg.warmup_steps, (cfg.warmup_steps / step) ** 0.5)


@dataclass
class OptimizerState:
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    step_count: int = 0
    beta1: float = 0.9
    beta2: float = 0.98
    eps: float = 1e-9
    weight_decay: float = 1e-2


def init_optimizer(params: ParameterSet, weight_decay: float = 1e-2) -> OptimizerState:
    return OptimizerState(
        m={k: np.zeros_like(t.data) for k, t in params.items()},
        v={k: np.zeros_like(t.data) for k, t in params.items()},
        weight_decay=weight_decay,
    )


def adamw_step(params: ParameterSet, state: OptimizerState, lr: float) -> None:
    """One AdamW update from the grads stored on the parameters. Decoupled
    decay is applied before the moment step; missing grads count as zero."""
    for path, tensor in params.items():
        g = tensor.grad
        if g is not None and not np.all(np.isfinite(g)):
            raise ValueError(f"non-finite gradient for parameter {path}")
        if g is not None and g.shape != tensor.data.shape:
            raise ValueError(f"gradient shape mismatch for parameter {path}")

    state.step_count += 1
    t = state.step_count
    bc1 = 1.0 - state.beta1**t
    bc2 = 1.0 - state.beta2**t
    for path, tensor in params.items():
        g = tensor.grad if tensor.grad is not None else np.zeros_like(tensor.data)
        if state.weight_decay:
            tensor.data -= lr * state.weight_decay * tensor.data
        state.m[path] = state.beta1 * state.m[path] + (1.0 - state.beta1) * g
        state.v[path] = state.beta2 * state.v[path] + (1.0 - state.beta2) * g * g
        m_hat = state.m[path] / bc1
        v_hat = state.v[path] / bc2
        tensor.data -= lr * m_hat / (np.sqrt(v_hat) + state.eps)


def zero_grads(params: ParameterSet) -> None:
    for t in params.values():
        t.grad = None


# ---------------------------------------------------------------------------
# checkpoints


@dataclass
class Checkpoint:
    config: ModelConfig
    params: dict[str, np.ndarray]
    opt_m: dict[str, np.ndarray]
    opt_v: dict[str, np.ndarray]
    opt_step: int
    micro_step: int
    schedule: ScheduleConfig
    vocab_hash: str
    cmvn_mean: np.ndarray
    cmvn_var: np.ndarray
    stage: str

    def tensors(self) -> ParameterSet:
        return {k: Tensor(v.copy(), requires_grad=True) for k, v in self.params.items()}

    def cmvn(self) -> CmvnStats:
        return CmvnStats(mean=self.cmvn_mean, var=self.cmvn_var)


def vocab_digest(vocab: Vocabulary) -> str:
    return hashlib.sha256("\n".join(vocab.pieces).encode("utf-8")).hexdigest()


def save_checkpoint(ckpt: Checkpoint, path) -> None:
    arrays: dict[str, np.ndarray] = {}
    for k, v in ckpt.params.items():
        arrays[f"param/{k}"] = v
    for k, v in ckpt.opt_m.items():
        arrays[f"opt_m/{k}"] = v
    for k, v in ckpt.opt_v.items():
        arrays[f"opt_v/{k}"] = v
    arrays["cmvn/mean"] = ckpt.cmvn_mean
    arrays["cmvn/var"] = ckpt.cmvn_var

    table = []
    offset = 0
    for name in arrays:
        n = arrays[name].size
        table.append({"name": name, "shape": list(arrays[name].shape),
                      "offset": offset, "count": n})
        offset += n

    header = {
        "config": ckpt.config.__dict__,
        "opt_step": ckpt.opt_step,
        "micro_step": ckpt.micro_step,
        "schedule": {"peak_lr": ckpt.schedule.peak_lr,
                     "warmup_steps": ckpt.schedule.warmup_steps,
                     "stage": ckpt.schedule.stage},
        "vocab_hash": ckpt.vocab_hash,
        "stage": ckpt.stage,
        "arrays": table,
    }
    blob = json.dumps(header).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(CKPT_MAGIC)
        fh.write(struct.pack("<II", CKPT_VERSION, len(blob)))
        fh.write(blob)
        for name in arrays:
            fh.write(np.ascontiguousarray(arrays[name], dtype="<f8").tobytes())


def load_checkpoint(path) -> Checkpoint:
    path = Path(path)
    if not path.exists():
        raise CheckpointFormatError(f"no such checkpoint: {path}")
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != CKPT_MAGIC:
            raise CheckpointFormatError(f"bad checkpoint magic: {magic!r}")
        version, header_len = struct.unpack("<II", fh.read(8))
        if version != CKPT_VERSION:
            raise CheckpointFormatError(f"unsupported checkpoint version {version}")
        try:
            header = json.loads(fh.read(header_len).decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as exc:
            raise CheckpointFormatError(f"corrupt checkpoint header: {exc}") from exc
        payload = fh.read()

    total = sum(entry["count"] for entry in header["arrays"])
    if len(payload) != 8 * total:
        raise CheckpointFormatError(
            f"truncated checkpoint: expected {8 * total} payload bytes, got {len(payload)}"
        )
    flat = np.frombuffer(payload, dtype="<f8")
    arrays: dict[str, np.ndarray] = {}
    for entry in header["arrays"]:
        chunk = flat[entry["offset"] : entry["offset"] + entry["count"]]
        arrays[entry["name"]] = chunk.reshape(entry["shape"]).copy()

    params = {k[len("param/"):]: v for k, v in arrays.items() if k.startswith("param/")}
    opt_m = {k[len("opt_m/"):]: v for k, v in arrays.items() if k.startswith("opt_m/")}
    opt_v = {k[len("opt_v/"):]: v for k, v in arrays.items() if k.startswith("opt_v/")}
    sched = header["schedule"]
    return Checkpoint(
        config=ModelConfig(**header["config"]),
        params=params,
        opt_m=opt_m,
        opt_v=opt_v,
        opt_step=header["opt_step"],
        micro_step=header["micro_step"],
        schedule=ScheduleConfig(**sched),
        vocab_hash=header["vocab_hash"],
        cmvn_mean=arrays["cmvn/mean"],
        cmvn_var=arrays["cmvn/var"],
        stage=header["stage"],
    )


# ---------------------------------------------------------------------------
# featurization and decoding helpers


def featurize_entry(entry: dp.ManifestEntry, stats: CmvnStats) -> fe.FeatureMatrix:
    waveform = fe.load_wav(entry.audio)
    factor = dp.speed_factor_of(entry.id)
    if factor != 1.0:
        waveform = fe.speed_perturb(waveform, factor)
    return fe.cmvn(fe.log_mel(waveform), stats)


def pad_features(feature_list: Sequence[fe.FeatureMatrix]) -> tuple[Tensor, list[int]]:
    lengths = [f.num_frames for f in feature_list]
    t_max = max(lengths)
    batch = np.zeros((len(feature_list), t_max, fe.NUM_MELS))
    for i, f in enumerate(feature_list):
        batch[i, : f.num_frames] = f.frames
    return Tensor(batch), lengths


def transcribe_features(features: fe.FeatureMatrix, params: ParameterSet,
                        config: ModelConfig, vocab: Vocabulary) -> str:
    batch, lengths = pad_features([features])
    out = cf.encoder_forward(batch, lengths, params, config, mode="eval")
    hyp = ctc_mod.greedy_decode(out.log_probs.data[0], out.lengths[0])
    return tok.decode(hyp.ids, vocab)


def make_transcriber(ckpt: Checkpoint, vocab: Vocabulary) -> dp.Transcriber:
    """Greedy transcriber over checkpoint weights, for agreement filtering."""
    if vocab_digest(vocab) != ckpt.vocab_hash:
        raise CheckpointFormatError("vocabulary hash does not match checkpoint")
    params = ckpt.tensors()
    stats = ckpt.cmvn()

    def transcribe(entry: dp.ManifestEntry) -> str:
        return transcribe_features(featurize_entry(entry, stats), params,
                                   ckpt.config, vocab)

    return transcribe


def greedy_wer(entries: Sequence[dp.ManifestEntry], params: ParameterSet,
               config: ModelConfig, vocab: Vocabulary, stats: CmvnStats) -> float:
    """Corpus-level greedy WER over a manifest."""
    errors = 0
    ref_words = 0
    for entry in entries:
        hyp = transcribe_features(featurize_entry(entry, stats), params, config, vocab)
        ref_tokens = entry.text.split()
        s, d, i = edit_distance(ref_tokens, hyp.split())
        errors += s + d + i
        ref_words += len(ref_tokens)
    return errors / max(1, ref_words)


# ---------------------------------------------------------------------------
# training runner


@dataclass
class TrainRunConfig:
    train_manifest: str
    dev_manifest: str
    batch_size: int = 8
    accum_factor: int = 1
    max_steps: int = 1000
    eval_interval: int = 100
    seed: int = 0
    peak_lr: float = 2e-3
    warmup_steps: int = 10_000
    weight_decay: float = 1e-2
    dropout: float = 0.1
    augment: Optional[AugmentPolicy] = None
    early_stop_wer: Optional[float] = None

    @property
    def global_batch(self) -> int:
        return self.batch_size * self.accum_factor


@dataclass
class RunResult:
    checkpoint: Checkpoint
    history: list[dict] = field(default_factory=list)  # step/loss/lr/wer rows
    skipped_utterances: int = 0
    final_wer: Optional[float] = None


def _feasible(num_feature_frames: int, target: Sequence[int]) -> bool:
    t_out = cf.subsampled_length(num_feature_frames)
    repeats = sum(1 for a, b in zip(target, target[1:]) if a == b)
    return t_out >= len(target) + repeats and num_feature_frames >= 4


def run_stage(
    run: TrainRunConfig,
    stage: str,
    vocab: Vocabulary,
    config: Optional[ModelConfig] = None,
    init: Optional[Checkpoint] = None,
    cmvn_stats: Optional[CmvnStats] = None,
    log_path=None,
    ckpt_path=None,
) -> RunResult:
    """Train one stage. Fresh pretraining needs ``config`` and
    ``cmvn_stats``; fine-tuning needs a pretrain ``init`` checkpoint and
    runs at one tenth of its peak learning rate."""
    if stage not in STAGES:
        raise ValueError(f"stage must be one of {STAGES}")

    if stage == "finetune":
        if init is None:
            raise ValueError("finetune requires a pretrain checkpoint")
        if init.stage != "pretrain":
            raise ValueError(f"finetune must start from a pretrain checkpoint, got {init.stage!r}")
        if init.vocab_hash != vocab_digest(vocab):
            raise CheckpointFormatError("vocabulary hash mismatch at fine-tune time")
        config = init.config
        cmvn_stats = init.cmvn()
        schedule = ScheduleConfig(peak_lr=init.schedule.peak_lr / 10.0,
                                  warmup_steps=run.warmup_steps, stage="finetune")
        params = init.tensors()
        opt = init_optimizer(params, run.weight_decay)
        start_opt_step = 0
        start_micro = 0
    elif init is not None:
        # resume an interrupted pretrain run
        if init.stage != stage:
            raise ValueError(f"cannot resume {stage} from a {init.stage} checkpoint")
        config = init.config
        cmvn_stats = init.cmvn()
        schedule = init.schedule
        params = init.tensors()
        opt = init_optimizer(params, run.weight_decay)
        opt.m = {k: v.copy() for k, v in init.opt_m.items()}
        opt.v = {k: v.copy() for k, v in init.opt_v.items()}
        opt.step_count = init.opt_step
        start_opt_step = init.opt_step
        start_micro = init.micro_step
    else:
        if config is None or cmvn_stats is None:
            raise ValueError("fresh pretraining requires config and cmvn_stats")
        schedule = ScheduleConfig(peak_lr=run.peak_lr, warmup_steps=run.warmup_steps,
                                  stage="pretrain")
        params = cf.init_params(config, seed=run.seed)
        opt = init_optimizer(params, run.weight_decay)
        start_opt_step = 0
        start_micro = 0

    if config.vocab_out != vocab.output_dim:
        raise ValueError(
            f"model output dim {config.vocab_out} != vocabulary dim {vocab.output_dim}"
        )

    entries = dp.read_manifest(run.train_manifest)
    dev_entries = dp.read_manifest(run.dev_manifest)
    if run.augment is not None and stage == "finetune":
        entries = dp.expand_augmented(entries, run.augment)

    # features are deterministic per entry; cache them across epochs
    feature_cache: dict[str, fe.FeatureMatrix] = {}

    def features_for(entry: dp.ManifestEntry) -> fe.FeatureMatrix:
        if entry.id not in feature_cache:
            feature_cache[entry.id] = featurize_entry(entry, cmvn_stats)
        return feature_cache[entry.id]

    targets = {e.id: tok.encode(e.text, vocab).ids for e in entries}

    result = RunResult(checkpoint=None)  # type: ignore[arg-type]
    log_lines: list[str] = []

    def evaluate(step: int, loss_val: float, lr: float) -> float:
        dev_wer = greedy_wer(dev_entries, params, config, vocab, cmvn_stats)
        row = {"step": step, "loss": loss_val, "lr": lr, "wer": dev_wer}
        result.history.append(row)
        log_lines.append(f"{step},{loss_val:.6f},{lr:.8f},{dev_wer:.4f}")
        return dev_wer

    opt_step = start_opt_step
    micro_step = 0
    accum_count = 0
    last_loss = float("nan")
    last_lr = 0.0
    zero_grads(params)
    done = False
    epoch = 0
    while not done:
        batches = dp.make_batches(entries, run.batch_size, seed=run.seed + 1000 * epoch)
        if not batches:
            raise ValueError("training manifest produced no batches")
        for batch in batches:
            if done:
                break
            if micro_step < start_micro:
                micro_step += 1
                continue

            usable = []
            for entry in batch:
                feats = features_for(entry)
                if _feasible(feats.num_frames, targets[entry.id]):
                    usable.append((entry, feats))
                else:
                    result.skipped_utterances += 1
            if not usable:
                micro_step += 1
                continue

            feature_list = []
            for entry, feats in usable:
                if run.augment is not None:
                    id_hash = zlib.crc32(entry.id.encode("utf-8"))
                    aug_rng = np.random.default_rng((run.seed, 2, micro_step, id_hash))
                    feats = fe.spec_augment(feats, run.augment, aug_rng)
                feature_list.append(feats)
            batch_tensor, lengths = pad_features(feature_list)

            drop_rng = np.random.default_rng((run.seed, 1, micro_step))
            out = cf.encoder_forward(batch_tensor, lengths, params, config,
                                     mode="train", rng=drop_rng)
            loss = ctc_mod.ctc_loss_batch(out.log_probs, out.lengths,
                                          [targets[e.id] for e, _ in usable])
            loss_val = loss.item()
            if not np.isfinite(loss_val):
                ids = [e.id for e, _ in usable]
                raise FloatingPointError(f"non-finite loss on batch {ids}")
            last_loss = loss_val
            ag.backward(ag.scale(loss, 1.0 / run.accum_factor))
            accum_count += 1
            micro_step += 1

            if accum_count == run.accum_factor:
                opt_step += 1
                last_lr = noam_lr(opt_step, schedule)
                adamw_step(params, opt, last_lr)
                zero_grads(params)
                accum_count = 0

                if opt_step % run.eval_interval == 0 or opt_step >= run.max_steps:
                    dev_wer = evaluate(opt_step, last_loss, last_lr)
                    result.final_wer = dev_wer
                    if run.early_stop_wer is not None and dev_wer <= run.early_stop_wer:
                        done = True
                if opt_step >= run.max_steps:
                    done = True
        epoch += 1

    if result.final_wer is None:
        result.final_wer = evaluate(opt_step, last_loss, last_lr)

    ckpt = Checkpoint(
        config=config,
        params={k: t.data.copy() for k, t in params.items()},
        opt_m={k: v.copy() for k, v in opt.m.items()},
        opt_v={k: v.copy() for k, v in opt.v.items()},
        opt_step=opt_step,
        micro_step=micro_step,
        schedule=schedule,
        vocab_hash=vocab_digest(vocab),
        cmvn_mean=np.asarray(cmvn_stats.mean),
        cmvn_var=np.asarray(cmvn_stats.var),
        stage=stage,
    )
    result.checkpoint = ckpt
    log_lines.append(f"# skipped_infeasible={result.skipped_utterances}")

    if log_path is not None:
        with open(log_path, "a", encoding="utf-8") as fh:
            fh.write("\n".join(log_lines) + "\n")
    if ckpt_path is not None:
        save_checkpoint(ckpt, ckpt_path)
    return result
