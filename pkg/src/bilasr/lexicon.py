"""Grapheme-letter lexicons and bilingual unit inventories.

Words are spelled as letters with position markers::

    president -> _p r e s i d e n t_

``_x`` opens a word, ``x_`` closes it, ``=x`` is a one-letter word and a bare
letter sits inside a word.  Accented letters are folded to their base letter
before spelling so that e.g. "perché" and "perche" share units.
"""

from __future__ import annotations

import enum
import hashlib
from dataclasses import dataclass
from pathlib import Path
from types import MappingProxyType

import numpy as np

from ._romantable import ROMAN_TABLE

SIL = "<sil>"
FOREIGN = "<foreign>"
SIL_ID = 0
FOREIGN_ID = 1

BASE_LETTERS = frozenset("abcdefghijklmnopqrstuvwxyz'")


class LexiconError(ValueError):
    pass


def romanize(word: str) -> str:
    """Lowercase ``word`` and fold accented letters onto a-z.

    >>> romanize("Ñandú")
    'nandu'
    """
    if not word:
        raise LexiconError("cannot romanize an empty word")
    out = []
    for ch in word:
        if ch in BASE_LETTERS:
            out.append(ch)
        elif "A" <= ch <= "Z":
            out.append(ch.lower())
        elif ch in ROMAN_TABLE:
            out.append(ROMAN_TABLE[ch])
        else:
            raise LexiconError(f"unmappable character {ch!r} (U+{ord(ch):04X}) in {word!r}")
    return "".join(out)


class Position(enum.Enum):
    INITIAL = "initial"
    FINAL = "final"
    INTERNAL = "internal"
    SINGLETON = "singleton"


@dataclass(frozen=True)
class UnitToken:
    letter: str
    position: Position

    def render(self) -> str:
        if self.position is Position.INITIAL:
            return "_" + self.letter
        if self.position is Position.FINAL:
            return self.letter + "_"
        if self.position is Position.SINGLETON:
            return "=" + self.letter
        return self.letter

    @classmethod
    def parse(cls, text: str) -> "UnitToken":
        if len(text) == 1 and text in BASE_LETTERS:
            return cls(text, Position.INTERNAL)
        if len(text) == 2:
            head, tail = text
            if head == "_" and tail in BASE_LETTERS:
                return cls(tail, Position.INITIAL)
            if tail == "_" and head in BASE_LETTERS:
                return cls(head, Position.FINAL)
            if head == "=" and tail in BASE_LETTERS:
                return cls(tail, Position.SINGLETON)
        raise LexiconError(f"not a unit token: {text!r}")

    def __str__(self):
        return self.render()


def word_to_units(word: str) -> tuple[UnitToken, ...]:
    """Spell an already-romanized word as boundary-marked letter units."""
    if not word:
        raise LexiconError("cannot spell an empty word")
    bad = [c for c in word if c not in BASE_LETTERS]
    if bad:
        raise LexiconError(f"word {word!r} is not romanized (offending {bad[0]!r})")
    if len(word) == 1:
        return (UnitToken(word, Position.SINGLETON),)
    units = [UnitToken(word[0], Position.INITIAL)]
    units += [UnitToken(c, Position.INTERNAL) for c in word[1:-1]]
    units.append(UnitToken(word[-1], Position.FINAL))
    return tuple(units)


def render_units(units) -> str:
    return " ".join(u.render() for u in units)


def parse_units(text: str) -> tuple[UnitToken, ...]:
    return tuple(UnitToken.parse(t) for t in text.split())


@dataclass(frozen=True)
class GraphemeLexicon:
    locale: str
    entries: MappingProxyType

    def __len__(self):
        return len(self.entries)

    def __contains__(self, word):
        return word in self.entries

    def __getitem__(self, word):
        return self.entries[word]

    def words(self):
        return list(self.entries)

    def units(self) -> set[str]:
        return {u.render() for seq in self.entries.values() for u in seq}

    def to_text(self) -> str:
        return "".join(f"{w}\t{render_units(seq)}\n" for w, seq in self.entries.items())

    @classmethod
    def from_text(cls, text: str, locale: str) -> "GraphemeLexicon":
        entries = {}
        for lineno, line in enumerate(text.splitlines(), 1):
            if not line.strip():
                continue
            try:
                word, units = line.split("\t")
                entries[word] = parse_units(units)
            except ValueError as e:
                raise LexiconError(f"bad lexicon line {lineno}: {line!r} ({e})") from None
            if not entries[word]:
                raise LexiconError(f"empty pronunciation on line {lineno}")
        return cls(locale, MappingProxyType(dict(sorted(entries.items()))))

    def save(self, path):
        Path(path).write_text(self.to_text(), encoding="utf-8")

    @classmethod
    def load(cls, path, locale):
        return cls.from_text(Path(path).read_text(encoding="utf-8"), locale)


def build_lexicon(words, locale: str) -> GraphemeLexicon:
    entries = {}
    for raw in words:
        try:
            w = romanize(raw)
            entries[w] = word_to_units(w)
        except LexiconError as e:
            raise LexiconError(f"word {raw!r}: {e}") from None
    if not entries:
        raise LexiconError("lexicon needs at least one word")
    return GraphemeLexicon(locale, MappingProxyType(dict(sorted(entries.items()))))


class UnitInventory:
    """Dense id <-> rendered-unit table with SIL at id 0.

    Per-locale inventories additionally reserve id 1 for FOREIGN, the label
    for speech that belongs to the other locale.
    """

    def __init__(self, units):
        units = list(units)
        if not units or units[0] != SIL:
            raise LexiconError("inventory must start with the SIL unit")
        if len(set(units)) != len(units):
            raise LexiconError("inventory units must be distinct")
        if FOREIGN in units and units.index(FOREIGN) != FOREIGN_ID:
            raise LexiconError("FOREIGN must have id 1 when present")
        self.units = tuple(units)
        self.index = {u: i for i, u in enumerate(units)}

    @classmethod
    def build(cls, rendered, per_locale=False) -> "UnitInventory":
        head = [SIL, FOREIGN] if per_locale else [SIL]
        return cls(head + sorted(set(rendered) - {SIL, FOREIGN}))

    @property
    def per_locale(self):
        return FOREIGN in self.index

    def __len__(self):
        return len(self.units)

    def __getitem__(self, unit):
        return self.index[unit]

    def __contains__(self, unit):
        return unit in self.index

    def __eq__(self, other):
        return isinstance(other, UnitInventory) and self.units == other.units

    def ids(self, rendered_seq):
        return [self.index[u] for u in rendered_seq]

    def to_text(self) -> str:
        return "".join(f"{i}\t{u}\n" for i, u in enumerate(self.units))

    @classmethod
    def from_text(cls, text: str) -> "UnitInventory":
        units = []
        for lineno, line in enumerate(text.splitlines(), 1):
            if not line.strip():
                continue
            i, u = line.split("\t")
            if int(i) != len(units):
                raise LexiconError(f"inventory ids not dense at line {lineno}")
            units.append(u)
        return cls(units)


@dataclass
class BilingualSpaceMap:
    locales: tuple[str, str]
    bilingual: UnitInventory
    per_locale: dict  # locale -> UnitInventory

    def __post_init__(self):
        self.maps = {}
        for loc in self.locales:
            inv = self.per_locale[loc]
            self.maps[loc] = np.array(
                [inv.index.get(u, FOREIGN_ID) for u in self.bilingual.units], dtype=np.int64
            )
            self.maps[loc][SIL_ID] = SIL_ID

    def to_locale(self, locale, bilingual_ids):
        """Translate bilingual ids into ``locale``'s space (FOREIGN if absent)."""
        return self.maps[locale][np.asarray(bilingual_ids, dtype=np.int64)]

    def shared_units(self):
        a, b = (set(self.per_locale[loc].units[2:]) for loc in self.locales)
        return a & b

    def sharing(self) -> float:
        """Fraction of bilingual (non-SIL) units that both locales use."""
        n = len(self.bilingual) - 1
        return len(self.shared_units()) / n if n else 0.0

    def digest(self) -> str:
        h = hashlib.blake2b(digest_size=8)
        h.update(self.bilingual.to_text().encode())
        for loc in self.locales:
            h.update(loc.encode())
            h.update(self.per_locale[loc].to_text().encode())
        return h.hexdigest()

    def save(self, directory):
        d = Path(directory)
        d.mkdir(parents=True, exist_ok=True)
        (d / "bilingual.inv").write_text(self.bilingual.to_text(), encoding="utf-8")
        for loc in self.locales:
            (d / f"{loc}.inv").write_text(self.per_locale[loc].to_text(), encoding="utf-8")
        (d / "locales.txt").write_text("\n".join(self.locales) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, directory) -> "BilingualSpaceMap":
        d = Path(directory)
        locales = tuple((d / "locales.txt").read_text(encoding="utf-8").split())
        if len(locales) != 2:
            raise LexiconError(f"expected two locales in {d / 'locales.txt'}")
        bil = UnitInventory.from_text((d / "bilingual.inv").read_text(encoding="utf-8"))
        per = {
            loc: UnitInventory.from_text((d / f"{loc}.inv").read_text(encoding="utf-8"))
            for loc in locales
        }
        return cls(locales, bil, per)


def merge_inventories(lex_a: GraphemeLexicon, lex_b: GraphemeLexicon) -> BilingualSpaceMap:
    if lex_a.locale == lex_b.locale:
        raise LexiconError(f"both lexicons claim locale {lex_a.locale!r}")
    ua, ub = lex_a.units(), lex_b.units()
    return BilingualSpaceMap(
        (lex_a.locale, lex_b.locale),
        UnitInventory.build(ua | ub),
        {
            lex_a.locale: UnitInventory.build(ua, per_locale=True),
            lex_b.locale: UnitInventory.build(ub, per_locale=True),
        },
    )
