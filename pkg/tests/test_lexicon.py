import string
import unicodedata

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from bilasr._romantable import ROMAN_TABLE
from bilasr.lexicon import (
    BASE_LETTERS,
    FOREIGN,
    FOREIGN_ID,
    SIL,
    BilingualSpaceMap,
    GraphemeLexicon,
    LexiconError,
    Position,
    UnitInventory,
    UnitToken,
    build_lexicon,
    merge_inventories,
    parse_units,
    render_units,
    romanize,
    word_to_units,
)

# Hand-built table, checked character by character against a printed Latin-1 chart.
HAND_ORACLE = {
    "é": "e", "ê": "e", "ë": "e", "è": "e", "á": "a", "à": "a", "â": "a", "ä": "a",
    "ñ": "n", "ü": "u", "ú": "u", "ù": "u", "ö": "o", "ó": "o", "ç": "c", "í": "i",
    "ï": "i", "Ñ": "n", "É": "e", "Å": "a",
}

ROMANIZABLE = "".join(sorted(BASE_LETTERS)) + string.ascii_uppercase + "".join(ROMAN_TABLE)


def test_romanize_examples():
    assert romanize("café") == "cafe"
    assert romanize("president") == "president"
    assert romanize("Ñandú") == "nandu"


def test_hand_oracle_table():
    assert len(HAND_ORACLE) == 20
    for ch, base in HAND_ORACLE.items():
        assert romanize(ch) == base, ch


def test_table_agrees_with_canonical_decomposition():
    # wherever NFD splits a letter into base + combining marks, the table must
    # give the lowercased base letter
    checked = 0
    for ch, base in ROMAN_TABLE.items():
        decomposed = unicodedata.normalize("NFD", ch)
        stripped = "".join(c for c in decomposed if not unicodedata.combining(c))
        if len(stripped) == 1 and stripped.isascii() and stripped != ch:
            assert base == stripped.lower(), ch
            checked += 1
    assert checked > 150


def test_table_covers_latin1_and_extended_a_letters():
    for cp in list(range(0xC0, 0x100)) + list(range(0x100, 0x180)):
        ch = chr(cp)
        if unicodedata.category(ch).startswith("L"):
            assert ch in ROMAN_TABLE, f"U+{cp:04X}"
    assert all(v in BASE_LETTERS and len(v) == 1 for v in ROMAN_TABLE.values())


@pytest.mark.parametrize("bad", ["x1", "a-b", "naïve!", "日本", "a b", ""])
def test_romanize_rejects(bad):
    with pytest.raises(LexiconError) as e:
        romanize(bad)
    if bad:
        offending = next(c for c in bad if c not in ROMANIZABLE)
        assert repr(offending) in str(e.value)


@given(st.text(alphabet=ROMANIZABLE, min_size=1, max_size=20))
@settings(max_examples=300)
def test_romanize_idempotent_and_in_alphabet(word):
    r = romanize(word)
    assert romanize(r) == r
    assert set(r) <= BASE_LETTERS
    assert len(r) == len(word)


def test_word_to_units_examples():
    assert render_units(word_to_units("president")) == "_p r e s i d e n t_"
    assert len(word_to_units("president")) == 9
    assert word_to_units("a") == (UnitToken("a", Position.SINGLETON),)
    assert render_units(word_to_units("di")) == "_d i_"
    assert render_units(word_to_units("l'amico")) == "_l ' a m i c o_"


@pytest.mark.parametrize("bad", ["", "Caffè", "a1"])
def test_word_to_units_rejects(bad):
    with pytest.raises(LexiconError):
        word_to_units(bad)


@given(st.text(alphabet=sorted(BASE_LETTERS), min_size=1, max_size=15))
def test_units_round_trip_and_spell_word(word):
    units = word_to_units(word)
    assert parse_units(render_units(units)) == units
    assert "".join(u.letter for u in units) == word
    assert units[0].position in (Position.INITIAL, Position.SINGLETON)
    assert units[-1].position in (Position.FINAL, Position.SINGLETON)
    assert (Position.SINGLETON in [u.position for u in units]) == (len(word) == 1)


@pytest.mark.parametrize("bad", ["", "__", "_", "ab", "=", "a=", "_1"])
def test_unit_parse_rejects(bad):
    with pytest.raises(LexiconError):
        UnitToken.parse(bad)


def test_build_lexicon_examples():
    lex = build_lexicon(["di", "la"], "A")
    assert len(lex) == 2
    assert lex.units() == {"_d", "i_", "_l", "a_"}
    assert len(build_lexicon(["a", "a"], "A")) == 1
    assert list(build_lexicon(["Città", "città", "b"], "A").words()) == ["b", "citta"]


def test_build_lexicon_matches_set_oracle():
    rng = np.random.default_rng(3)
    words = ["".join(rng.choice(list("abcde"), size=rng.integers(1, 4))) for _ in range(100)]
    assert len(build_lexicon(words, "A")) == len(set(words))


def test_build_lexicon_errors():
    with pytest.raises(LexiconError):
        build_lexicon([], "A")
    with pytest.raises(LexiconError, match="x2"):
        build_lexicon(["ok", "x2"], "A")


def test_lexicon_text_round_trip(tmp_path):
    lex = build_lexicon(["zeta", "a", "della", "l'uomo"], "A")
    text = lex.to_text()
    assert text.splitlines() == sorted(text.splitlines())
    assert GraphemeLexicon.from_text(text, "A") == lex
    lex.save(tmp_path / "lex.txt")
    assert GraphemeLexicon.load(tmp_path / "lex.txt", "A") == lex


def test_inventory_layout():
    inv = UnitInventory.build(["b_", "_a"], per_locale=True)
    assert inv.units == (SIL, FOREIGN, "_a", "b_")
    assert inv[FOREIGN] == FOREIGN_ID
    assert UnitInventory.from_text(inv.to_text()) == inv
    assert not UnitInventory.build(["_a"]).per_locale
    with pytest.raises(LexiconError):
        UnitInventory(["_a", SIL])
    with pytest.raises(LexiconError):
        UnitInventory.from_text("0\t<sil>\n2\t_a\n")


def test_merge_example():
    lex_a = GraphemeLexicon.from_text("di\t_d i_\n", "A")
    lex_b = GraphemeLexicon.from_text("da\t_d a_\n", "B")
    space = merge_inventories(lex_a, lex_b)
    assert space.bilingual.units == (SIL, "_d", "a_", "i_")
    assert space.to_locale("A", [space.bilingual["a_"]])[0] == FOREIGN_ID
    assert space.to_locale("B", [space.bilingual["a_"]])[0] != FOREIGN_ID
    assert space.to_locale("A", [0])[0] == 0
    assert space.shared_units() == {"_d"}


def test_sharing_extremes():
    lex = build_lexicon(["di", "la"], "A")
    same = GraphemeLexicon("B", lex.entries)
    assert merge_inventories(lex, same).sharing() == 1.0
    disjoint = build_lexicon(["xy", "z"], "B")
    assert merge_inventories(lex, disjoint).sharing() == 0.0
    with pytest.raises(LexiconError):
        merge_inventories(lex, lex)


words_st = st.lists(st.text(alphabet="abcdefgh", min_size=1, max_size=6), min_size=1, max_size=12)


@given(words_st, words_st)
@settings(max_examples=100)
def test_merge_properties(wa, wb):
    la, lb = build_lexicon(wa, "A"), build_lexicon(wb, "B")
    ab, ba = merge_inventories(la, lb), merge_inventories(lb, la)
    assert ab.bilingual == ba.bilingual
    for loc, lex in (("A", la), ("B", lb)):
        ids = ab.maps[loc]
        assert len(ids) == len(ab.bilingual)
        for u in lex.units():
            assert ids[ab.bilingual[u]] == ab.per_locale[loc][u] != FOREIGN_ID
    for u in ab.shared_units():
        assert all(ab.maps[loc][ab.bilingual[u]] != FOREIGN_ID for loc in "AB")


def test_space_save_load_keeps_ids(tmp_path):
    space = merge_inventories(build_lexicon(["della", "di"], "A"), build_lexicon(["the", "di"], "B"))
    space.save(tmp_path / "space")
    back = BilingualSpaceMap.load(tmp_path / "space")
    assert back.digest() == space.digest()
    assert back.bilingual.units == space.bilingual.units
    for loc in "AB":
        assert np.array_equal(back.maps[loc], space.maps[loc])
