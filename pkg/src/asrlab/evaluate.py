"""WER/CER scoring with configurable text normalization and dialect-wise
report aggregation.

Per-dialect rates are corpus-level: error counts are pooled over the
dialect's utterances before dividing by the pooled reference length. The
macro average is the unweighted mean over dialects present in the report.
Percentages are rounded half-up to two decimals at render time only.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field
from decimal import ROUND_HALF_UP, Decimal
from typing import Mapping, Sequence

from .textnorm import DEFAULT_PROFILE, NormalizationProfile, normalize_text

# column order used by the challenge tables
DIALECT_ORDER = ["JOR", "EGY", "MOR", "ALG", "YEM", "MAU", "UAE", "PAL"]


def edit_distance(ref: Sequence, hyp: Sequence) -> tuple[int, int, int]:
    """Minimal-cost (substitutions, deletions, insertions) between symbol
    sequences; ties resolved preferring substitution, then insertion, then
    deletion."""
    n, m = len(ref), len(hyp)
    dist = [[0] * (m + 1) for _ in range(n + 1)]
    for i in range(1, n + 1):
        dist[i][0] = i
    for j in range(1, m + 1):
        dist[0][j] = j
    for i in range(1, n + 1):
        for j in range(1, m + 1):
            same = ref[i - 1] == hyp[j - 1]
            dist[i][j] = min(
                dist[i - 1][j - 1] + (0 if same else 1),
                dist[i][j - 1] + 1,
                dist[i - 1][j] + 1,
            )

    subs = dels = ins = 0
    i, j = n, m
    while i > 0 or j > 0:
        if i > 0 and j > 0 and dist[i][j] == dist[i - 1][j - 1] and ref[i - 1] == hyp[j - 1]:
            i, j = i - 1, j - 1
        elif i > 0 and j > 0 and dist[i][j] == dist[i - 1][j - 1] + 1:
            subs += 1
            i, j = i - 1, j - 1
        elif j > 0 and dist[i][j] == dist[i][j - 1] + 1:
            ins += 1
            j -= 1
        else:
            dels += 1
            i -= 1
    return subs, dels, ins


def wer(ref: str, hyp: str, profile: NormalizationProfile = DEFAULT_PROFILE) -> float:
    """Word error rate over whitespace tokens; may exceed 1.0."""
    ref_tokens = normalize_text(ref, profile).split()
    hyp_tokens = normalize_text(hyp, profile).split()
    if not ref_tokens:
        raise ValueError("empty reference: WER denominator undefined")
    s, d, i = edit_distance(ref_tokens, hyp_tokens)
    return (s + d + i) / len(ref_tokens)


def cer(ref: str, hyp: str, profile: NormalizationProfile = DEFAULT_PROFILE) -> float:
    """Character error rate; spaces count as characters."""
    ref_chars = list(normalize_text(ref, profile))
    hyp_chars = list(normalize_text(hyp, profile))
    if not ref_chars:
        raise ValueError("empty reference: CER denominator undefined")
    s, d, i = edit_distance(ref_chars, hyp_chars)
    return (s + d + i) / len(ref_chars)


@dataclass
class DialectScore:
    substitutions: int = 0
    deletions: int = 0
    insertions: int = 0
    ref_words: int = 0
    char_substitutions: int = 0
    char_deletions: int = 0
    char_insertions: int = 0
    ref_chars: int = 0

    @property
    def wer(self) -> float:
        return (self.substitutions + self.deletions + self.insertions) / self.ref_words

    @property
    def cer(self) -> float:
        return (
            self.char_substitutions + self.char_deletions + self.char_insertions
        ) / self.ref_chars


@dataclass
class ScoreReport:
    per_dialect: dict[str, DialectScore] = field(default_factory=dict)
    warnings: list[str] = field(default_factory=list)

    @property
    def macro_avg_wer(self) -> float:
        return macro_average({d: s.wer for d, s in self.per_dialect.items()})

    @property
    def macro_avg_cer(self) -> float:
        return macro_average({d: s.cer for d, s in self.per_dialect.items()})


def macro_average(per_dialect: Mapping[str, float]) -> float:
    """Unweighted mean over the dialects present."""
    if not per_dialect:
        raise ValueError("no dialects to average")
    return sum(per_dialect.values()) / len(per_dialect)


def score_manifest(
    refs: Sequence,
    hyps: Mapping[str, str],
    profile: NormalizationProfile = DEFAULT_PROFILE,
) -> ScoreReport:
    """Score hypotheses against reference manifest entries (objects with
    ``id``, ``text``, ``dialect``). Missing ids count as empty hypotheses
    and are flagged."""
    report = ScoreReport()
    for entry in refs:
        hyp_text = hyps.get(entry.id)
        if hyp_text is None:
            hyp_text = ""
            report.warnings.append(f"missing hypothesis for id {entry.id}")
        ref_norm = normalize_text(entry.text, profile)
        hyp_norm = normalize_text(hyp_text, profile)
        score = report.per_dialect.setdefault(entry.dialect, DialectScore())
        s, d, i = edit_distance(ref_norm.split(), hyp_norm.split())
        score.substitutions += s
        score.deletions += d
        score.insertions += i
        score.ref_words += len(ref_norm.split())
        cs, cd, ci = edit_distance(list(ref_norm), list(hyp_norm))
        score.char_substitutions += cs
        score.char_deletions += cd
        score.char_insertions += ci
        score.ref_chars += len(ref_norm)
    return report


def _round2(value: float) -> str:
    return str(Decimal(repr(value)).quantize(Decimal("0.01"), rounding=ROUND_HALF_UP))


def _ordered_dialects(report_dialects) -> list[str]:
    known = [d for d in DIALECT_ORDER if d in report_dialects]
    extra = sorted(d for d in report_dialects if d not in DIALECT_ORDER)
    return known + extra


def render_report(report: ScoreReport, format: str = "text") -> str:
    """Render WER/CER percentages with columns Avg then the table's dialect
    order; values are percentages rounded half-up to two decimals."""
    dialects = _ordered_dialects(report.per_dialect)
    header = ["Metric", "Avg"] + dialects
    rows = []
    if dialects:
        wer_row = ["WER", _round2(100.0 * report.macro_avg_wer)] + [
            _round2(100.0 * report.per_dialect[d].wer) for d in dialects
        ]
        cer_row = ["CER", _round2(100.0 * report.macro_avg_cer)] + [
            _round2(100.0 * report.per_dialect[d].cer) for d in dialects
        ]
        rows = [wer_row, cer_row]

    if format == "csv":
        buf = io.StringIO()
        writer = csv.writer(buf)
        writer.writerow(header)
        writer.writerows(rows)
        return buf.getvalue()
    if format == "text":
        widths = [max(len(str(r[c])) for r in [header] + rows) for c in range(len(header))]
        lines = []
        for r in [header] + rows:
            lines.append("  ".join(str(v).rjust(w) for v, w in zip(r, widths)))
        return "\n".join(lines) + "\n"
    raise ValueError(f"unknown format: {format!r}")
