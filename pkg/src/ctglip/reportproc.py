"""Rule-based decomposition of radiology reports into per-organ descriptions."""

from __future__ import annotations

import json
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

NORMAL = "normal"
ABNORMAL = "abnormal"

PARSED = "parsed"
TEMPLATE = "template"
DICTIONARY = "dictionary"

DEFAULT_NEGATIONS = ("no evident", "unremarkable", "normal")

_SENTENCE_SPLIT = re.compile(r"(?<=\.) +|\n+")


def mentions(text: str, term: str) -> bool:
    """Case-insensitive whole-word (or whole-phrase) match."""
    return re.search(rf"\b{re.escape(term.lower())}\b", text.lower()) is not None


def organ_template(name: str) -> str:
    if not name:
        raise ValueError("organ name must be non-empty")
    return f"this is a {name} in the CT scan"


def normal_template(name: str) -> str:
    if not name:
        raise ValueError("organ name must be non-empty")
    return f"no evident abnormality in {name}"


@dataclass(frozen=True)
class OrganDescription:
    organ_id: int
    polarity: str
    text: str
    source: str = PARSED

    def __post_init__(self):
        if not self.text:
            raise ValueError("description text must be non-empty")
        if self.polarity not in (NORMAL, ABNORMAL):
            raise ValueError(f"unknown polarity {self.polarity!r}")
        if self.source == DICTIONARY and self.polarity != ABNORMAL:
            raise ValueError("dictionary descriptions are always abnormal")

    def to_json(self) -> dict:
        return {"organ_id": self.organ_id, "polarity": self.polarity, "text": self.text, "source": self.source}


class LexiconError(ValueError):
    pass


class OrganLexicon:
    """Organ id -> (canonical name, synonyms)."""

    def __init__(self, entries: Mapping[int, tuple[str, Sequence[str]]]):
        self.entries: dict[int, tuple[str, tuple[str, ...]]] = {}
        owner: dict[str, int] = {}
        names: set[str] = set()
        for oid, (name, synonyms) in sorted(entries.items()):
            oid = int(oid)
            if not name:
                raise LexiconError(f"organ {oid}: empty canonical name")
            if name in names:
                raise LexiconError(f"duplicate canonical name {name!r}")
            names.add(name)
            syns = tuple(dict.fromkeys([name, *synonyms]))
            for s in syns:
                if not s:
                    raise LexiconError(f"organ {oid}: empty synonym")
                key = s.lower()
                if key in owner and owner[key] != oid:
                    raise LexiconError(f"synonym {s!r} shared by organs {owner[key]} and {oid}")
                owner[key] = oid
            self.entries[oid] = (name, syns)
        self._by_name = {name: oid for oid, (name, _) in self.entries.items()}

    def __len__(self):
        return len(self.entries)

    def __contains__(self, organ_id) -> bool:
        return organ_id in self.entries

    def ids(self) -> list[int]:
        return sorted(self.entries)

    def name(self, organ_id: int) -> str:
        try:
            return self.entries[organ_id][0]
        except KeyError:
            raise LexiconError(f"organ id {organ_id} not in lexicon") from None

    def has_name(self, name: str) -> bool:
        return name in self._by_name

    def id_of(self, name: str) -> int:
        try:
            return self._by_name[name]
        except KeyError:
            raise LexiconError(f"organ {name!r} not in lexicon") from None

    def organs_mentioned(self, sentence: str) -> list[int]:
        return [oid for oid, (_, syns) in self.entries.items() if any(mentions(sentence, s) for s in syns)]

    def to_json(self) -> dict:
        return {str(oid): {"name": n, "synonyms": list(s)} for oid, (n, s) in self.entries.items()}

    @classmethod
    def from_json(cls, doc: Mapping) -> "OrganLexicon":
        return cls({int(k): (v["name"], v.get("synonyms", [])) for k, v in doc.items()})

    @classmethod
    def load(cls, path) -> "OrganLexicon":
        path = Path(path)
        try:
            doc = json.loads(path.read_text(encoding="utf-8"))
        except json.JSONDecodeError as exc:
            raise LexiconError(f"{path}:{exc.lineno}:{exc.colno}: {exc.msg}") from exc
        return cls.from_json(doc)

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_json(), indent=1, sort_keys=True) + "\n", encoding="utf-8")


@dataclass
class ParsedReport:
    descriptions: list[OrganDescription] = field(default_factory=list)
    unassigned: list[str] = field(default_factory=list)

    # behaves as the description list for callers that only need assignments
    def __iter__(self):
        return iter(self.descriptions)

    def __len__(self):
        return len(self.descriptions)

    def __getitem__(self, i):
        return self.descriptions[i]

    def abnormal_organs(self) -> set[int]:
        return {d.organ_id for d in self.descriptions if d.polarity == ABNORMAL}

    def to_json(self) -> dict:
        return {
            "descriptions": [d.to_json() for d in self.descriptions],
            "unassigned": list(self.unassigned),
        }


def split_sentences(report: str) -> list[str]:
    return [s.strip() for s in _SENTENCE_SPLIT.split(report) if s.strip()]


def parse_report(
    report: str, lexicon: OrganLexicon, negations: Iterable[str] = DEFAULT_NEGATIONS
) -> ParsedReport:
    """Assign each sentence to the single organ it mentions.

    A sentence is normal if it matches any negation pattern, abnormal
    otherwise.  Sentences naming no organ, or more than one, are kept in
    ``unassigned``.
    """
    if len(lexicon) == 0:
        raise LexiconError("lexicon is empty")
    negations = tuple(negations)
    result = ParsedReport()
    for sentence in split_sentences(report):
        organs = lexicon.organs_mentioned(sentence)
        if len(organs) != 1:
            result.unassigned.append(sentence)
            continue
        polarity = NORMAL if any(mentions(sentence, n) for n in negations) else ABNORMAL
        result.descriptions.append(OrganDescription(organs[0], polarity, sentence, PARSED))
    return result
