"""Caption selection for training: AltText choice, AltText/VeCap mixing, SER.

Randomness is keyed rather than sequential: every draw comes from a
generator seeded by a hash of ``(seed, epoch, record_id[, step])``, so the
choice for a record never depends on iteration order or sharding.
"""
from __future__ import annotations

import enum
import hashlib
import re
from collections.abc import Callable, Sequence
from dataclasses import dataclass

import numpy as np

from .shardio import ImageTextRecord


class SamplerError(ValueError):
    pass


class MissingScores(SamplerError):
    pass


class MissingVeCap(SamplerError):
    pass


class CaptionSource(str, enum.Enum):
    ALTTEXT = "AltText"
    VECAP = "VeCap"
    SER = "SER"


class AltTextMode(str, enum.Enum):
    HCS = "hcs"
    RANDOM = "random"


@dataclass(frozen=True)
class CaptionChoice:
    text: str
    source: CaptionSource
    alt_index: int | None = None

    def __post_init__(self) -> None:
        if not self.text:
            raise ValueError("caption text must be non-empty")
        if self.source is CaptionSource.ALTTEXT and (self.alt_index is None or self.alt_index < 0):
            raise ValueError("AltText choices need a valid alt_index")

    def to_dict(self) -> dict:
        return {"text": self.text, "source": self.source.value, "alt_index": self.alt_index}


@dataclass(frozen=True)
class SamplerConfig:
    alttext_mode: AltTextMode = AltTextMode.HCS
    mixed: bool = True
    ser: bool = False
    seed: int = 0
    # used when not mixed
    fixed_source: CaptionSource = CaptionSource.ALTTEXT
    resample: str = "per-epoch"

    def __post_init__(self) -> None:
        object.__setattr__(self, "alttext_mode", AltTextMode(self.alttext_mode))
        object.__setattr__(self, "fixed_source", CaptionSource(self.fixed_source))
        if self.ser and self.mixed:
            raise ValueError("SER captions are not mixed with AltText")
        if self.fixed_source is CaptionSource.SER:
            raise ValueError("use ser=True for SER captions")
        if self.resample not in ("per-epoch", "per-step"):
            raise ValueError(f"unknown resample mode {self.resample!r}")
        if not 0 <= self.seed < 2**64:
            raise ValueError("seed must fit in 64 bits")


def keyed_rng(seed: int, *parts: object) -> np.random.Generator:
    """Generator determined only by ``seed`` and ``parts``."""
    h = hashlib.blake2b(digest_size=32, person=b"vecap-sampler")
    h.update(str(int(seed)).encode())
    for part in parts:
        h.update(b"\x1f")
        h.update(str(part).encode("utf-8"))
    return np.random.Generator(np.random.PCG64(int.from_bytes(h.digest(), "little")))


def hcs_index(scores: Sequence[float]) -> int:
    """Index of the highest score; ties go to the lowest index."""
    best = 0
    for i, s in enumerate(scores):
        if s > scores[best]:
            best = i
    return best


def select_alttext(
    rec: ImageTextRecord, mode: AltTextMode | str, rng: np.random.Generator | None = None
) -> tuple[str, int]:
    mode = AltTextMode(mode)
    if len(rec.alt_texts) == 1:
        return rec.alt_texts[0], 0
    if mode is AltTextMode.HCS:
        if rec.alt_scores is None:
            raise MissingScores(f"record {rec.record_id} has no alt_scores for HCS selection")
        idx = hcs_index(rec.alt_scores)
    else:
        if rng is None:
            raise ValueError("random AltText selection needs an rng")
        idx = int(rng.integers(len(rec.alt_texts)))
    return rec.alt_texts[idx], idx


def mix(rec: ImageTextRecord, cfg: SamplerConfig, epoch: int, step: int | None = None) -> CaptionChoice:
    """Pick the training caption for ``rec`` at ``epoch``.

    Mixed mode draws AltText or VeCap with probability 1/2 each; records
    without a VeCap fall back to AltText.
    """
    key: tuple = (epoch, rec.record_id)
    if cfg.resample == "per-step":
        if step is None:
            raise ValueError("per-step resampling needs a step")
        key += (step,)
    rng = keyed_rng(cfg.seed, *key)
    coin = int(rng.integers(2))
    if cfg.ser:
        if rec.vecap is None:
            raise MissingVeCap(f"record {rec.record_id} has no vecap for SER")
        return CaptionChoice(ser_transform(rec.vecap), CaptionSource.SER)
    if cfg.mixed:
        source = CaptionSource.VECAP if coin == 1 and rec.vecap else CaptionSource.ALTTEXT
    else:
        source = cfg.fixed_source
    if source is CaptionSource.VECAP:
        if not rec.vecap:
            raise MissingVeCap(f"record {rec.record_id} has no vecap")
        return CaptionChoice(rec.vecap, CaptionSource.VECAP)
    text, idx = select_alttext(rec, cfg.alttext_mode, rng)
    return CaptionChoice(text, CaptionSource.ALTTEXT, idx)


# --- simplified entity representation ---------------------------------------

_WORD = re.compile(r"[A-Za-z][A-Za-z'-]*")

_STOPWORDS = frozenset("""
a an the this that these those some any each every all both either neither no
and or but nor so yet for of in on at by to from with without into onto over
under above below near beside between among through across along around behind
beyond inside outside against toward towards upon up down out off about than as
while during before after like unlike via per
i me my we our you your he him his she her it its they them their there here
who whom whose which what where when why how
is are was were be been being am has have had do does did will would can could
should may might must shall
not very too also just only still even really quite rather almost
one two three four five six seven eight nine ten several many much more most
few less least other another such same own
""".split())

_ADJECTIVES = frozenset("""
red orange yellow green blue purple pink brown black white gray grey golden silver
beige dark light bright pale colorful colourful
big small large little tiny huge giant tall short long wide narrow thick thin
high low deep shallow
old new young modern ancient vintage classic fresh clean dirty empty full open
closed
good bad great nice beautiful pretty cute ugly lovely elegant delicate simple plain
fancy
hot cold warm cool wet dry sunny cloudy snowy rainy foggy windy
round square flat straight curved smooth rough soft hard sharp heavy
busy quiet calm wild happy sad
wooden metal metallic plastic glass leather cotton stone brick concrete paper
various different multiple single double
frozen broken fallen hidden golden
front back side top bottom left right middle upper lower inner outer
""".split())

_VERBS = frozenset("""
sits sit sitting stands stand standing holds hold holding shows show showing
walks walk walking runs run running lies lie lying looks look looking wears wear
wearing rides ride riding plays play playing eats eat eating flies fly flying
rests rest resting hangs hang hanging leans lean leaning displays display
features feature featuring contains contain containing depicts depict depicting
surrounded filled covered made placed parked located set
""".split())

_ADJ_SUFFIXES = ("ful", "ous", "ive", "less", "able", "ible", "ish", "ic")
_ADVERB_SUFFIX = "ly"
_VERBISH_SUFFIXES = ("ing", "ed")
# tokens that may legitimately precede a noun in a noun phrase
_DETERMINERS = frozenset("a an the this that these those some any each every its his her their our my your".split())


def _is_adjective(word: str) -> bool:
    if word in _ADJECTIVES:
        return True
    # compounds like "white-roofed", "hand-made"
    if "-" in word and word.endswith(("ed", "made")):
        return True
    return len(word) > 5 and word.endswith(_ADJ_SUFFIXES)


def heuristic_nouns(text: str) -> list[str]:
    """Dictionary-free noun guesser used as the default SER tagger.

    A token counts as a noun unless it is a stopword, a known or
    suffix-detected adjective or adverb, or a verb. ``-ing``/``-ed`` words
    are nouns only right after a determiner or adjective ("a tall building").
    """
    tokens = [t.lower().strip("'-") for t in _WORD.findall(text)]
    nouns = []
    prev: str | None = None
    for tok in tokens:
        if not tok:
            continue
        is_noun = True
        if tok in _STOPWORDS or tok in _VERBS or _is_adjective(tok):
            is_noun = False
        elif len(tok) > 4 and tok.endswith(_ADVERB_SUFFIX):
            is_noun = False
        elif len(tok) > 4 and tok.endswith(_VERBISH_SUFFIXES):
            is_noun = prev is not None and (prev in _DETERMINERS or _is_adjective(prev))
        if is_noun:
            nouns.append(tok)
        prev = tok
    return nouns


Tagger = Callable[[str], Sequence[str]]


def ser_transform(vecap: str, tagger: Tagger | None = None) -> str:
    """Rewrite a caption as ``"a photo of <noun>, <noun>, ..."``."""
    if not vecap or not vecap.strip():
        raise ValueError("ser_transform needs a non-empty caption")
    tagger = tagger or heuristic_nouns
    entities = list(dict.fromkeys(e for e in tagger(vecap) if e))
    if not entities:
        return "a photo of " + vecap.split()[0]
    return "a photo of " + ", ".join(entities)
