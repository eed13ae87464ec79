"""Concept vocabularies: named concepts, each with a list of concept-words.

Words carry a declared sub-token count so that segment shapes in the
candidate key bank do not depend on which tokenizer is in use. On disk a
vocabulary is a TSV file::

    Color<TAB>red,blue,green
    Plants<TAB>tree,oak tree#2,moss

where ``word#k`` declares ``k`` sub-tokens (default 1).
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass
from importlib import resources
from pathlib import Path
from typing import Iterable, Sequence

from .errors import DataError, PreconditionError, UnknownConceptError


@dataclass(frozen=True)
class Word:
    text: str
    n_tokens: int = 1

    def __post_init__(self):
        if not self.text or not self.text.strip():
            raise PreconditionError("concept-word must be non-empty")
        if "\t" in self.text or "\n" in self.text:
            raise PreconditionError(f"word {self.text!r} contains TAB or newline")
        if self.n_tokens < 1:
            raise PreconditionError(f"word {self.text!r}: sub-token count must be >= 1")

    @classmethod
    def parse(cls, spec: str) -> "Word":
        spec = spec.strip()
        text, sep, count = spec.rpartition("#")
        if sep and count.isdigit() and text:
            return cls(text, int(count))
        return cls(spec, 1)

    def __str__(self):
        return self.text if self.n_tokens == 1 else f"{self.text}#{self.n_tokens}"


@dataclass(frozen=True)
class Concept:
    name: str
    words: tuple[Word, ...]


class ConceptVocabulary:
    """Ordered list of concepts; concept order fixes HRV row order."""

    def __init__(self, entries: Iterable[tuple[str, Sequence[Word | str]]]):
        concepts = []
        for name, words in entries:
            if not name or "\t" in name or "\n" in name:
                raise PreconditionError(f"invalid concept name {name!r}")
            ws = tuple(w if isinstance(w, Word) else Word.parse(w) for w in words)
            if not ws:
                raise PreconditionError(f"concept {name!r} has no words")
            concepts.append(Concept(name, ws))
        names = [c.name for c in concepts]
        if len(set(names)) != len(names):
            raise PreconditionError("concept names must be unique")
        if len(concepts) < 2:
            raise PreconditionError("a vocabulary needs at least 2 concepts")
        self.concepts: tuple[Concept, ...] = tuple(concepts)
        self._index = {n: i for i, n in enumerate(names)}

    def __len__(self):
        return len(self.concepts)

    def __iter__(self):
        return iter(self.concepts)

    def __eq__(self, other):
        return isinstance(other, ConceptVocabulary) and self.concepts == other.concepts

    def __repr__(self):
        return f"ConceptVocabulary(N={len(self)}, fingerprint={self.fingerprint()})"

    @property
    def names(self) -> list[str]:
        return [c.name for c in self.concepts]

    def index(self, name: str) -> int:
        try:
            return self._index[name]
        except KeyError:
            raise UnknownConceptError(name, self.names) from None

    def concept(self, name: str) -> Concept:
        return self.concepts[self.index(name)]

    def all_words(self) -> list[Word]:
        """Distinct words in first-seen order."""
        seen = {}
        for c in self.concepts:
            for w in c.words:
                seen.setdefault(w, None)
        return list(seen)

    def extended(self, name: str, words: Sequence[Word | str]) -> "ConceptVocabulary":
        """Copy with one more concept appended (N+1 re-run)."""
        return ConceptVocabulary([(c.name, c.words) for c in self.concepts] + [(name, words)])

    def to_tsv(self) -> str:
        return "".join(f"{c.name}\t{','.join(str(w) for w in c.words)}\n" for c in self.concepts)

    def fingerprint(self) -> str:
        return hashlib.sha256(self.to_tsv().encode("utf-8")).hexdigest()[:16]

    @classmethod
    def from_tsv(cls, text: str, source: str = "<string>") -> "ConceptVocabulary":
        entries = []
        for lineno, line in enumerate(text.splitlines(), 1):
            if not line.strip() or line.startswith("#"):
                continue
            if "\t" not in line:
                raise DataError(f"{source}:{lineno}: expected 'concept<TAB>word,word,...'")
            name, words = line.split("\t", 1)
            try:
                entries.append((name.strip(), [Word.parse(w) for w in words.split(",") if w.strip()]))
            except PreconditionError as exc:
                raise DataError(f"{source}:{lineno}: {exc}") from None
        try:
            return cls(entries)
        except PreconditionError as exc:
            raise DataError(f"{source}: {exc}") from None

    @classmethod
    def load(cls, path: str | Path) -> "ConceptVocabulary":
        path = Path(path)
        try:
            text = path.read_text(encoding="utf-8")
        except OSError as exc:
            raise DataError(f"cannot read vocabulary {path}: {exc}") from None
        return cls.from_tsv(text, str(path))


def default_vocabulary() -> ConceptVocabulary:
    """The 34-concept, 10-words-each vocabulary shipped with the package."""
    text = resources.files("hrvkit").joinpath("data/concepts.tsv").read_text(encoding="utf-8")
    return ConceptVocabulary.from_tsv(text, "concepts.tsv")


# Polysemous prompts with the (desired, undesired) concept pair that fixes each.
POLYSEMY_CASES = [
    ("A vase in lavender color", "lavender", "Color", "Plants"),
    ("An Apple device on a table", "Apple", "Brand Logos", "Fruits and Vegetables"),
    ("A rose-colored vase", "rose-colored", "Color", "Plants"),
    ("A single orange-colored plate", "orange-colored", "Color", "Fruits and Vegetables"),
    ("A crane flying over a grass field", "crane", "Animals", "Tools"),
    ("A bowl in mint color on a table", "mint", "Color", "Fruits and Vegetables"),
    ("An olive-colored plate on a table", "olive-colored", "Color", "Fruits and Vegetables"),
    ("A plum-colored bowl on a table", "plum-colored", "Color", "Fruits and Vegetables"),
    ("An apricot-colored bowl on a table", "apricot-colored", "Color", "Fruits and Vegetables"),
    ("A single rusted nut", "nut", "Tools", "Food and Beverages"),
]
