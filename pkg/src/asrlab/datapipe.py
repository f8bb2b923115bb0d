"""Manifest ingestion, weak-label filtering, augmentation expansion,
length-bucketed batching, and the synthetic toy-corpus builder.

Manifests are JSON Lines with fields exactly
{id, audio, text, label_kind, duration_s, dialect, source}.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np

from . import frontend
from .evaluate import wer
from .frontend import AugmentPolicy

MANIFEST_FIELDS = ["id", "audio", "text", "label_kind", "duration_s", "dialect", "source"]
LABEL_KINDS = ("verified", "weak")

# rejection reasons, in the order checks are applied
REASONS = ("source", "duration", "charset", "audio", "agreement")

ARABIC_DIGITS_SPACE = (
    "".join(chr(c) for c in range(0x0600, 0x0700)) + "0123456789 "
)


class ManifestError(ValueError):
    pass


@dataclass
class ManifestEntry:
    id: str
    audio: str
    text: str
    label_kind: str
    duration_s: float
    dialect: str
    source: str

    def __post_init__(self):
        if self.label_kind not in LABEL_KINDS:
            raise ManifestError(f"label_kind must be one of {LABEL_KINDS}, got {self.label_kind!r}")
        if self.duration_s <= 0:
            raise ManifestError(f"duration_s must be positive, got {self.duration_s}")


def read_manifest(path) -> list[ManifestEntry]:
    path = Path(path)
    if not path.exists():
        raise ManifestError(f"no such manifest: {path}")
    entries: list[ManifestEntry] = []
    seen_ids: set[str] = set()
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                record = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ManifestError(f"line {lineno}: invalid JSON ({exc.msg})") from exc
            for fieldname in MANIFEST_FIELDS:
                if fieldname not in record:
                    raise ManifestError(f"line {lineno}: {fieldname}")
            try:
                entry = ManifestEntry(**{k: record[k] for k in MANIFEST_FIELDS})
            except ManifestError as exc:
                raise ManifestError(f"line {lineno}: {exc}") from exc
            if entry.id in seen_ids:
                raise ManifestError(f"line {lineno}: duplicate id {entry.id!r}")
            seen_ids.add(entry.id)
            entries.append(entry)
    return entries


def write_manifest(path, entries: Sequence[ManifestEntry]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for e in entries:
            fh.write(json.dumps({k: getattr(e, k) for k in MANIFEST_FIELDS},
                                ensure_ascii=False) + "\n")


@dataclass
class FilterPolicy:
    excluded_sources: frozenset[str] = frozenset({"news"})
    min_duration_s: float = 1.0
    max_duration_s: float = 30.0
    allowed_chars: str = ARABIC_DIGITS_SPACE
    max_hypothesis_wer: float = 0.25

    def __post_init__(self):
        if self.min_duration_s >= self.max_duration_s:
            raise ValueError("min duration must be below max duration")
        if not 0.0 <= self.max_hypothesis_wer <= 1.0:
            raise ValueError("max_hypothesis_wer must be in [0, 1]")


@dataclass
class CorpusStats:
    input_count: int = 0
    retained: int = 0
    rejected: int = 0
    reasons: dict[str, int] = field(default_factory=lambda: {r: 0 for r in REASONS})
    total_hours: float = 0.0
    retained_hours: float = 0.0
    per_dialect_hours: dict[str, float] = field(default_factory=dict)

    def as_text(self) -> str:
        lines = [
            f"input entries: {self.input_count}",
            f"retained: {self.retained} ({self.retained_hours:.3f} h)",
            f"rejected: {self.rejected}",
        ]
        for reason in REASONS:
            lines.append(f"  reason {reason}: {self.reasons[reason]}")
        lines.append(f"input hours: {self.total_hours:.3f}")
        for dialect in sorted(self.per_dialect_hours):
            lines.append(f"  retained {dialect}: {self.per_dialect_hours[dialect]:.3f} h")
        return "\n".join(lines) + "\n"

    def as_dict(self) -> dict:
        return {
            "input_count": self.input_count,
            "retained": self.retained,
            "rejected": self.rejected,
            "reasons": dict(self.reasons),
            "total_hours": self.total_hours,
            "retained_hours": self.retained_hours,
            "per_dialect_hours": dict(self.per_dialect_hours),
        }


Transcriber = Callable[[ManifestEntry], str]


def filter_manifest(
    entries: Sequence[ManifestEntry],
    policy: FilterPolicy,
    transcriber: Optional[Transcriber] = None,
) -> tuple[list[ManifestEntry], CorpusStats]:
    """Keep entries passing source exclusion, duration bounds, character
    whitelist, and (when a transcriber is given) model agreement. Each
    rejected entry is counted once under its first failing check."""
    stats = CorpusStats(input_count=len(entries))
    allowed = set(policy.allowed_chars)
    kept: list[ManifestEntry] = []
    for entry in entries:
        stats.total_hours += entry.duration_s / 3600.0
        reason = None
        if entry.source in policy.excluded_sources:
            reason = "source"
        elif not policy.min_duration_s <= entry.duration_s <= policy.max_duration_s:
            reason = "duration"
        elif any(c not in allowed for c in entry.text):
            reason = "charset"
        elif transcriber is not None:
            try:
                hypothesis = transcriber(entry)
            except Exception:
                reason = "audio"
            else:
                if wer(entry.text, hypothesis) > policy.max_hypothesis_wer:
                    reason = "agreement"
        if reason is None:
            kept.append(entry)
            stats.retained += 1
            stats.retained_hours += entry.duration_s / 3600.0
            hours = stats.per_dialect_hours.setdefault(entry.dialect, 0.0)
            stats.per_dialect_hours[entry.dialect] = hours + entry.duration_s / 3600.0
        else:
            stats.rejected += 1
            stats.reasons[reason] += 1
    return kept, stats


def expand_augmented(
    entries: Sequence[ManifestEntry], policy: AugmentPolicy
) -> list[ManifestEntry]:
    """Add one derived entry per non-unit speed factor; originals unchanged.
    Only verified-label entries may be expanded."""
    for e in entries:
        if e.label_kind != "verified":
            raise ManifestError(f"augmentation requires verified labels, got {e.id!r}")
    if not policy.enabled:
        return list(entries)
    out: list[ManifestEntry] = []
    for e in entries:
        out.append(e)
        for factor in policy.speed_factors:
            if factor == 1.0:
                continue
            out.append(replace(e, id=f"{e.id}#sp{factor}",
                               duration_s=e.duration_s / factor))
    return out


def speed_factor_of(entry_id: str) -> float:
    """Speed factor encoded in a derived entry id ("...#sp0.9"), else 1.0."""
    if "#sp" in entry_id:
        return float(entry_id.rsplit("#sp", 1)[1])
    return 1.0


def make_batches(
    entries: Sequence[ManifestEntry],
    batch_size: int,
    seed: int,
    bucket_width_s: float = 2.0,
) -> list[list[ManifestEntry]]:
    """Duration-bucketed batches: entries fall into buckets of
    ``bucket_width_s``, are shuffled within each bucket, and each bucket is
    chunked into batches (partial batches kept); batch order is then
    shuffled. Deterministic under the seed."""
    if batch_size < 1:
        raise ValueError(f"batch_size {batch_size} must be >= 1")
    if not entries:
        return []
    rng = np.random.default_rng(seed)
    buckets: dict[int, list[ManifestEntry]] = {}
    for e in entries:
        buckets.setdefault(int(e.duration_s // bucket_width_s), []).append(e)
    batches: list[list[ManifestEntry]] = []
    for key in sorted(buckets):
        bucket = buckets[key]
        order = rng.permutation(len(bucket))
        shuffled = [bucket[i] for i in order]
        for start in range(0, len(shuffled), batch_size):
            batches.append(shuffled[start : start + batch_size])
    batch_order = rng.permutation(len(batches))
    return [batches[i] for i in batch_order]


# ---------------------------------------------------------------------------
# synthetic toy corpus


TOY_LETTERS = "abdiknorstu"
TOY_DIALECTS = ["JOR", "EGY", "MOR", "ALG", "YEM", "MAU", "UAE", "PAL"]


def toy_word_list(num_words: int = 36, seed: int = 20250823) -> list[str]:
    """Deterministic word inventory rich enough for a 128-piece vocabulary."""
    rng = np.random.default_rng(seed)
    words: list[str] = []
    seen: set[str] = set()
    letters = list(TOY_LETTERS)
    while len(words) < num_words:
        n = int(rng.integers(5, 8))
        w = "".join(rng.choice(letters) for _ in range(n))
        if w not in seen:
            seen.add(w)
            words.append(w)
    return words


def toy_transcripts(num_utterances: int, words: Sequence[str]) -> list[str]:
    """Round-robin transcripts of 2-4 words covering the whole inventory."""
    out: list[str] = []
    wi = 0
    for i in range(num_utterances):
        k = 2 + i % 3
        out.append(" ".join(words[(wi + j) % len(words)] for j in range(k)))
        wi += k
    return out


def build_toy_corpus(
    out_dir,
    num_utterances: int = 60,
    seed: int = 20250823,
    allowed_chars: str | None = None,
) -> tuple[list[ManifestEntry], list[str]]:
    """Synthesize tone-word utterances into ``out_dir`` (wav files plus a
    train.jsonl manifest); returns the entries and the word inventory."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    words = toy_word_list(seed=seed)
    recipe = frontend.default_recipe(words)
    entries: list[ManifestEntry] = []
    for i, text in enumerate(toy_transcripts(num_utterances, words)):
        utt_id = f"toy{i:04d}"
        waveform, _ = frontend.synth_utterance(recipe, text, seed=seed + i, utt_id=utt_id)
        wav_path = out_dir / f"{utt_id}.wav"
        frontend.save_wav(wav_path, waveform)
        entries.append(
            ManifestEntry(
                id=utt_id,
                audio=str(wav_path),
                text=text,
                label_kind="verified",
                duration_s=waveform.samples.size / frontend.SAMPLE_RATE,
                dialect=TOY_DIALECTS[i % len(TOY_DIALECTS)],
                source="toy",
            )
        )
    write_manifest(out_dir / "train.jsonl", entries)
    return entries, words
