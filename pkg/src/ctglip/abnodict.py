"""Abnormality dictionary and assembly of the per-image text set.

For an image with ``M`` organs of which ``M'`` are abnormal, the text set is
the ``M`` real/templated descriptions followed by ``B = (M - M') * T``
abnormal descriptions looked up for the normal organs (capped at
``max_negatives``).
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .reportproc import (
    ABNORMAL,
    DICTIONARY,
    NORMAL,
    TEMPLATE,
    LexiconError,
    OrganDescription,
    OrganLexicon,
    normal_template,
)

DEFAULT_MAX_NEGATIVES = 512
CAP_STREAM = 1 << 32


class DictionaryError(ValueError):
    pass


@dataclass(frozen=True)
class AbnormalityDictionary:
    entries: Mapping[str, tuple[str, ...]] = field(default_factory=dict)

    def __post_init__(self):
        for organ, items in self.entries.items():
            if not organ:
                raise DictionaryError("empty organ key")
            seen = set()
            for text in items:
                if not isinstance(text, str) or not text:
                    raise DictionaryError(f"{organ}: empty abnormality description")
                if text in seen:
                    raise DictionaryError(f"{organ}: duplicate entry {text!r}")
                seen.add(text)

    @property
    def total_size(self) -> int:
        return sum(len(v) for v in self.entries.values())

    def lookup(self, organ_name: str) -> tuple[str, ...]:
        return tuple(self.entries.get(organ_name, ()))

    def to_json(self) -> dict:
        return {k: list(v) for k, v in self.entries.items()}

    @classmethod
    def from_json(cls, doc) -> "AbnormalityDictionary":
        if not isinstance(doc, dict):
            raise DictionaryError("dictionary must be a JSON object {organ: [descriptions]}")
        entries = {}
        for organ, items in doc.items():
            if not isinstance(items, list):
                raise DictionaryError(f"{organ}: expected a list of strings")
            entries[organ] = tuple(items)
        return cls(entries)


def load_dictionary(path) -> AbnormalityDictionary:
    path = Path(path)
    try:
        doc = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise DictionaryError(f"{path}:{exc.lineno}:{exc.colno}: {exc.msg}") from exc
    try:
        return AbnormalityDictionary.from_json(doc)
    except DictionaryError as exc:
        raise DictionaryError(f"{path}: {exc}") from None


def seed_dictionary() -> AbnormalityDictionary:
    """The shipped dictionary of common abdominal/thoracic abnormalities."""
    text = resources.files("ctglip.data").joinpath("seed_dictionary.json").read_text(encoding="utf-8")
    return AbnormalityDictionary.from_json(json.loads(text))


def _organ_rng(seed: int, organ_id: int) -> np.random.Generator:
    return np.random.default_rng([int(seed) & 0xFFFFFFFFFFFFFFFF, int(organ_id)])


def sample_negatives(
    dictionary: AbnormalityDictionary,
    normal_organ_ids: Sequence[int],
    T: int,
    seed: int,
    lexicon: OrganLexicon,
    exclude: Sequence[str] = (),
) -> list[OrganDescription]:
    """Draw ``min(T, available)`` distinct abnormal descriptions per normal organ."""
    if T < 0:
        raise ValueError("T must be non-negative")
    out: list[OrganDescription] = []
    if T == 0:
        return out
    banned = set(exclude)
    for oid in normal_organ_ids:
        pool = [t for t in dictionary.lookup(lexicon.name(oid)) if t not in banned]
        if not pool:
            continue
        k = min(T, len(pool))
        picks = _organ_rng(seed, oid).choice(len(pool), size=k, replace=False)
        out.extend(OrganDescription(oid, ABNORMAL, pool[int(i)], DICTIONARY) for i in picks)
    return out


@dataclass
class TextBatch:
    descriptions: list[OrganDescription]
    M: int
    M_prime: int
    T: int

    @property
    def B(self) -> int:
        return len(self.descriptions) - self.M

    @property
    def texts(self) -> list[str]:
        return [d.text for d in self.descriptions]

    def __len__(self):
        return len(self.descriptions)


def assemble_text_batch(
    parsed: Sequence[OrganDescription],
    present_organs: Sequence[int],
    dictionary: AbnormalityDictionary | None,
    T: int,
    seed: int,
    lexicon: OrganLexicon,
    max_negatives: int | None = DEFAULT_MAX_NEGATIVES,
) -> TextBatch:
    """Build the ``M + B`` description list for one image.

    ``present_organs`` fixes the order of the first ``M`` entries and must
    match the pooling order of the organ embeddings.
    """
    present = [int(o) for o in present_organs]
    for oid in present:
        if oid not in lexicon:
            raise LexiconError(f"organ id {oid} not in lexicon")
    present_set = set(present)
    abnormal: dict[int, OrganDescription] = {}
    for d in parsed:
        if d.organ_id not in present_set:
            raise ValueError(f"parsed description for organ {d.organ_id} which is not present in the image")
        if d.polarity == ABNORMAL and d.organ_id not in abnormal:
            abnormal[d.organ_id] = d

    head = []
    normal_ids = []
    for oid in present:
        if oid in abnormal:
            head.append(abnormal[oid])
        else:
            head.append(OrganDescription(oid, NORMAL, normal_template(lexicon.name(oid)), TEMPLATE))
            normal_ids.append(oid)

    negatives: list[OrganDescription] = []
    if dictionary is not None and T > 0:
        negatives = sample_negatives(
            dictionary, normal_ids, T, seed, lexicon, exclude=[d.text for d in head]
        )
        if max_negatives is not None and len(negatives) > max_negatives:
            keep = np.sort(_organ_rng(seed, CAP_STREAM).choice(len(negatives), size=max_negatives, replace=False))
            negatives = [negatives[int(i)] for i in keep]
    return TextBatch(head + negatives, M=len(present), M_prime=len(abnormal), T=T)
