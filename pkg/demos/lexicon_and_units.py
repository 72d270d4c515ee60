"""
Grapheme lexicons and the shared unit space
===========================================

Words become letter units tagged with their position in the word, and the
two locale inventories merge into one bilingual space.
"""

from bilasr.lexicon import build_lexicon, merge_inventories, render_units, romanize, word_to_units

# romanization folds accented letters onto the base alphabet
print(romanize("Città"), romanize("café"))

# positions: _x starts a word, x_ ends it, =x is a one-letter word
print(render_units(word_to_units("president")))
print(render_units(word_to_units("a")))

###############################################################################
# Two small lexicons that share a few spellings

lex_a = build_lexicon(["della", "di", "caffè", "presidente"], "A")
lex_b = build_lexicon(["the", "of", "cafe", "president"], "B")
print(lex_a.to_text())

space = merge_inventories(lex_a, lex_b)
print("bilingual units:", len(space.bilingual))
print("per-locale units:", {loc: len(inv) for loc, inv in space.per_locale.items()})
print("shared units:", sorted(space.shared_units()))
print(f"sharing statistic: {space.sharing():.3f}")

###############################################################################
# A unit missing from a locale maps to that locale's FOREIGN label

ids = [space.bilingual[u] for u in ("_t", "h", "e_")]
print("B ids:", space.to_locale("B", ids), "A ids:", space.to_locale("A", ids))
