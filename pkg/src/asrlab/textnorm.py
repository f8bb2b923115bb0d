"""Arabic-aware text normalization shared by the tokenizer and the scorer."""

from __future__ import annotations

import re
from dataclasses import dataclass

# Arabic short vowels / tanween / shadda / sukun
_DIACRITICS = re.compile("[ً-ْ]")
_ALEF_VARIANTS = str.maketrans({"أ": "ا", "إ": "ا", "آ": "ا"})
_WS = re.compile(r"\s+")


def strip_diacritics(text: str) -> str:
    return _DIACRITICS.sub("", text)


def unify_alef(text: str) -> str:
    return text.translate(_ALEF_VARIANTS)


def collapse_whitespace(text: str) -> str:
    return _WS.sub(" ", text).strip()


@dataclass(frozen=True)
class NormalizationProfile:
    name: str = "default"
    strip_diacritics: bool = True
    unify_alef: bool = True
    collapse_space: bool = True

    def apply(self, text: str) -> str:
        if self.strip_diacritics:
            text = strip_diacritics(text)
        if self.unify_alef:
            text = unify_alef(text)
        if self.collapse_space:
            text = collapse_whitespace(text)
        return text


DEFAULT_PROFILE = NormalizationProfile()
RAW_PROFILE = NormalizationProfile(
    name="raw", strip_diacritics=False, unify_alef=False, collapse_space=False
)

PROFILES = {"default": DEFAULT_PROFILE, "raw": RAW_PROFILE}


def normalize_text(raw: str, profile: NormalizationProfile = DEFAULT_PROFILE) -> str:
    return profile.apply(raw)
