"""Synthetic bilingual corpora with exact frame alignments.

Each (locale, unit) pair gets a Gaussian prototype in feature space; an
utterance is a run of silence, word units and silence, every unit held for a
few frames.  Words common to both locales are spelled identically but use the
speaking locale's prototypes, so shared material is confusable in the same
way an accent is.  The generating unit of every frame is kept as the
alignment, which stands in for the forced-alignment stage of a real recipe.
"""

from __future__ import annotations

import hashlib
import io
import math
import struct
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .lexicon import SIL, SIL_ID, BilingualSpaceMap, GraphemeLexicon, build_lexicon, merge_inventories
from .numcore import atomic_write_bytes

LETTERS_A = "abcdefghilmnopqrstuvz"
LETTERS_B = "abcdefghijklmnopqrstuvwxyz"
WORD_LENGTHS = (1, 2, 3, 4, 5, 6)
WORD_LENGTH_P = (0.04, 0.16, 0.2, 0.24, 0.2, 0.16)

CONDITIONS = ("mono-A", "mono-B", "code-mixed")
SPLITS = ("train", "dev", "test")


class SynthError(ValueError):
    pass


@dataclass
class SyntheticLocaleSpec:
    locale: str
    words: list
    lexicon: GraphemeLexicon
    space: BilingualSpaceMap
    means: dict  # rendered unit -> [feature_dim]
    variances: dict  # rendered unit -> [feature_dim]
    frames_per_unit: tuple = (2, 5)
    silence_frames: tuple = (1, 3)

    @property
    def feature_dim(self):
        return len(self.means[SIL])

    def digest(self) -> str:
        h = hashlib.blake2b(digest_size=8)
        h.update(self.locale.encode())
        h.update(self.lexicon.to_text().encode())
        for u in sorted(self.means):
            h.update(u.encode())
            h.update(self.means[u].tobytes())
            h.update(self.variances[u].tobytes())
        h.update(repr((self.frames_per_unit, self.silence_frames)).encode())
        return h.hexdigest()


@dataclass
class Utterance:
    id: str
    features: np.ndarray  # [frames, feature_dim]
    alignment: np.ndarray  # [frames] bilingual unit ids
    words: list  # [(word, locale)]
    spans: list  # [(start, end)] frame span per word
    seed: int = 0

    @property
    def frames(self):
        return len(self.alignment)

    @property
    def locales(self):
        return {loc for _, loc in self.words}

    @property
    def transcript(self):
        return [w for w, _ in self.words]

    def frame_locales(self):
        """Per-frame locale tag, None on frames outside any word."""
        out = [None] * self.frames
        for (_, loc), (s, e) in zip(self.words, self.spans):
            out[s:e] = [loc] * (e - s)
        return out

    def check(self):
        if self.features.ndim != 2 or len(self.features) != len(self.alignment):
            raise SynthError(f"{self.id}: features/alignment length mismatch")
        if len(self.words) != len(self.spans):
            raise SynthError(f"{self.id}: one span per word required")
        covered = np.zeros(self.frames, dtype=bool)
        for s, e in self.spans:
            if not 0 <= s < e <= self.frames or covered[s:e].any():
                raise SynthError(f"{self.id}: word spans overlap or fall outside the utterance")
            covered[s:e] = True
        if not np.array_equal(covered, self.alignment != SIL_ID):
            raise SynthError(f"{self.id}: word spans do not partition the non-silence frames")


def _sample_word(rng, letters):
    n = int(rng.choice(WORD_LENGTHS, p=WORD_LENGTH_P))
    return "".join(rng.choice(list(letters), size=n))


def _draw_words(rng, letters, n, taken):
    out = []
    tries = 0
    while len(out) < n:
        w = _sample_word(rng, letters)
        tries += 1
        if tries > 100_000:
            raise SynthError(f"cannot draw {n} distinct words from letters {letters!r}")
        if w not in taken:
            taken.add(w)
            out.append(w)
    return out


def gen_locale_specs(
    seed,
    n_words=50,
    shared_fraction=0.1,
    *,
    feature_dim=16,
    noise_var=0.1,
    proto_scale=0.5,
    min_separation=0.5,
    locales=("A", "B"),
    letters=(LETTERS_A, LETTERS_B),
    frames_per_unit=(2, 5),
    silence_frames=(1, 3),
):
    """Draw two locales' word lists and acoustic prototypes from ``seed``.

    ``floor(shared_fraction * n_words)`` words are common to both lists.
    """
    if n_words < 5:
        raise SynthError("n_words must be at least 5")
    if not 0 <= shared_fraction <= 0.5:
        raise SynthError("shared_fraction must lie in [0, 0.5]")
    rng = np.random.default_rng(seed)
    n_shared = math.floor(shared_fraction * n_words)
    common = "".join(sorted(set(letters[0]) & set(letters[1])))
    taken: set = set()
    shared = _draw_words(rng, common, n_shared, taken)
    own = [_draw_words(rng, lt, n_words - n_shared, taken) for lt in letters]
    lexicons = [build_lexicon(shared + own[i], loc) for i, loc in enumerate(locales)]
    space = merge_inventories(*lexicons)

    placed = []

    def draw_mean():
        for _ in range(1000):
            m = rng.normal(0.0, proto_scale, size=feature_dim)
            if all(np.linalg.norm(m - p) >= min_separation for p in placed):
                placed.append(m)
                return m
        raise SynthError(
            f"could not place a prototype {min_separation} away from the others after 1000 "
            f"draws; use a larger feature_dim (now {feature_dim})"
        )

    sil_mean = draw_mean()
    sil_var = noise_var * rng.uniform(0.5, 1.5, size=feature_dim)
    specs = []
    for i, loc in enumerate(locales):
        means, variances = {SIL: sil_mean}, {SIL: sil_var}
        for u in sorted(lexicons[i].units()):
            means[u] = draw_mean()
            variances[u] = noise_var * rng.uniform(0.5, 1.5, size=feature_dim)
        specs.append(
            SyntheticLocaleSpec(
                loc,
                sorted(shared + own[i]),
                lexicons[i],
                space,
                means,
                variances,
                tuple(frames_per_unit),
                tuple(silence_frames),
            )
        )
    return specs[0], specs[1]


def _silence(spec, rng, n):
    return rng.normal(spec.means[SIL], np.sqrt(spec.variances[SIL]), size=(n, spec.feature_dim))


def synth_utterance(spec: SyntheticLocaleSpec, words, seed, utt_id=None) -> Utterance:
    rng = np.random.default_rng(seed)
    bil = spec.space.bilingual
    feats, align, spans = [], [], []
    t = 0

    def add_silence():
        nonlocal t
        n = int(rng.integers(spec.silence_frames[0], spec.silence_frames[1] + 1))
        feats.append(_silence(spec, rng, n))
        align.extend([SIL_ID] * n)
        t += n

    add_silence()
    for i, w in enumerate(words):
        if w not in spec.lexicon:
            raise SynthError(f"word {w!r} is not in locale {spec.locale} lexicon")
        start = t
        for unit in spec.lexicon[w]:
            r = unit.render()
            k = int(rng.integers(spec.frames_per_unit[0], spec.frames_per_unit[1] + 1))
            feats.append(rng.normal(spec.means[r], np.sqrt(spec.variances[r]), size=(k, spec.feature_dim)))
            align.extend([bil[r]] * k)
            t += k
        spans.append((start, t))
        add_silence()
    utt = Utterance(
        utt_id or f"{spec.locale}-{seed}",
        np.concatenate(feats),
        np.array(align, dtype=np.int64),
        [(w, spec.locale) for w in words],
        spans,
        int(seed),
    )
    utt.check()
    return utt


GAP_FRAMES = 2


def make_code_mixed(utt_a: Utterance, utt_b: Utterance, spec=None, seed=0) -> Utterance:
    """Join two single-locale utterances with a 2-frame silence gap.

    Gap frames are drawn from ``spec``'s silence prototype when given, otherwise
    they repeat the final frame of ``utt_a`` (which is always silence).
    """
    la, lb = utt_a.locales, utt_b.locales
    if len(la) > 1 or len(lb) > 1 or (la and la == lb):
        raise SynthError(f"code-mixing needs two different single-locale utterances, got {la} and {lb}")
    if spec is not None:
        gap = _silence(spec, np.random.default_rng(seed), GAP_FRAMES)
    else:
        gap = np.repeat(utt_a.features[-1:], GAP_FRAMES, axis=0)
    off = utt_a.frames + GAP_FRAMES
    utt = Utterance(
        f"{utt_a.id}+{utt_b.id}",
        np.concatenate([utt_a.features, gap, utt_b.features]),
        np.concatenate([utt_a.alignment, np.full(GAP_FRAMES, SIL_ID), utt_b.alignment]),
        utt_a.words + utt_b.words,
        utt_a.spans + [(s + off, e + off) for s, e in utt_b.spans],
        int(seed),
    )
    utt.check()
    return utt


# ---------------------------------------------------------------- files

UTT_MAGIC = b"BLXUT1"


def utterance_to_bytes(utt: Utterance) -> bytes:
    buf = io.BytesIO()
    buf.write(UTT_MAGIC)
    uid = utt.id.encode("utf-8")
    buf.write(struct.pack("<I", len(uid)))
    buf.write(uid)
    buf.write(struct.pack("<QII", utt.seed, utt.frames, utt.features.shape[1]))
    buf.write(np.ascontiguousarray(utt.features, dtype="<f8").tobytes())
    buf.write(np.ascontiguousarray(utt.alignment, dtype="<i4").tobytes())
    text = "".join(f"{w}\t{loc}\t{s}\t{e}\n" for (w, loc), (s, e) in zip(utt.words, utt.spans))
    tb = text.encode("utf-8")
    buf.write(struct.pack("<I", len(tb)))
    buf.write(tb)
    return buf.getvalue()


def utterance_from_bytes(raw: bytes) -> Utterance:
    if raw[:6] != UTT_MAGIC:
        raise SynthError("not an utterance file")
    buf = io.BytesIO(raw[6:])

    def need(n):
        b = buf.read(n)
        if len(b) != n:
            raise SynthError("utterance file is truncated")
        return b

    (n,) = struct.unpack("<I", need(4))
    uid = need(n).decode("utf-8")
    seed, frames, dim = struct.unpack("<QII", need(16))
    feats = np.frombuffer(need(8 * frames * dim), dtype="<f8").reshape(frames, dim).astype(np.float64)
    align = np.frombuffer(need(4 * frames), dtype="<i4").astype(np.int64)
    (n,) = struct.unpack("<I", need(4))
    words, spans = [], []
    for line in need(n).decode("utf-8").splitlines():
        w, loc, s, e = line.split("\t")
        words.append((w, loc))
        spans.append((int(s), int(e)))
    utt = Utterance(uid, feats, align, words, spans, seed)
    utt.check()
    return utt


# ---------------------------------------------------------------- corpus


def _utt_seed(seed, uid):
    return int(np.random.SeedSequence([int(seed), zlib.crc32(uid.encode())]).generate_state(1)[0])


@dataclass
class CorpusManifest:
    seed: int
    spec_digests: dict
    entries: list = field(default_factory=list)  # (utt id, split, condition)
    utterances: dict = field(default_factory=dict)  # id -> Utterance
    space: BilingualSpaceMap | None = None
    lexicons: dict = field(default_factory=dict)

    def select(self, split, condition=None):
        return [
            self.utterances[uid]
            for uid, sp, cond in self.entries
            if sp == split and (condition is None or cond == condition)
        ]

    def conditions(self, split):
        return sorted({cond for _, sp, cond in self.entries if sp == split})

    def counts(self):
        out = {}
        for _, sp, cond in self.entries:
            out[(sp, cond)] = out.get((sp, cond), 0) + 1
        return out

    def to_text(self) -> str:
        lines = [f"# seed\t{self.seed}"]
        lines += [f"# spec\t{loc}\t{d}" for loc, d in sorted(self.spec_digests.items())]
        if self.space is not None:
            lines.append(f"# inventory\t{self.space.digest()}")
        lines += [f"utts/{uid}.utt\t{sp}\t{cond}" for uid, sp, cond in self.entries]
        return "\n".join(lines) + "\n"

    def write(self, directory):
        d = Path(directory)
        for uid, utt in self.utterances.items():
            atomic_write_bytes(d / "utts" / f"{uid}.utt", utterance_to_bytes(utt))
        if self.space is not None:
            self.space.save(d / "space")
        for loc, lex in self.lexicons.items():
            lex.save(d / f"lexicon.{loc}.txt")
        atomic_write_bytes(d / "manifest.txt", self.to_text().encode("utf-8"))

    @classmethod
    def read(cls, directory) -> "CorpusManifest":
        d = Path(directory)
        seed, digests, entries, inv = 0, {}, [], None
        for line in (d / "manifest.txt").read_text(encoding="utf-8").splitlines():
            parts = line.split("\t")
            if parts[0] == "# seed":
                seed = int(parts[1])
            elif parts[0] == "# spec":
                digests[parts[1]] = parts[2]
            elif parts[0] == "# inventory":
                inv = parts[1]
            elif line.strip():
                path, sp, cond = parts
                entries.append((Path(path).stem, sp, cond))
        space = BilingualSpaceMap.load(d / "space")
        if inv is not None and space.digest() != inv:
            raise SynthError("corpus inventory files do not match the manifest digest")
        lexicons = {loc: GraphemeLexicon.load(d / f"lexicon.{loc}.txt", loc) for loc in space.locales}
        utts = {
            uid: utterance_from_bytes((d / "utts" / f"{uid}.utt").read_bytes()) for uid, _, _ in entries
        }
        return cls(seed, digests, entries, utts, space, lexicons)


DEFAULT_SIZES = {
    "train": {"mono-A": 400, "mono-B": 400, "code-mixed": 0},
    "dev": {"mono-A": 50, "mono-B": 50, "code-mixed": 0},
    "test": {"mono-A": 100, "mono-B": 100, "code-mixed": 100},
}


def build_corpus(specs, sizes=None, seed=0, words_per_utt=(2, 5), mixed_words=(1, 3)) -> CorpusManifest:
    """Generate every split/condition deterministically from ``seed``.

    Code-mixed utterances join two freshly drawn shorter utterances from the
    same split, one per locale.
    """
    sizes = DEFAULT_SIZES if sizes is None else sizes
    spec_a, spec_b = specs
    by_cond = {"mono-A": spec_a, "mono-B": spec_b}
    for spec in specs:
        variety = len(spec.words) ** words_per_utt[0]
        wanted = max(sizes.get(sp, {}).get(c, 0) for sp in sizes for c in by_cond)
        if len(spec.words) < 2 or variety < wanted:
            raise SynthError(f"locale {spec.locale} has too few words for {wanted} distinct utterances")
    man = CorpusManifest(
        int(seed), {s.locale: s.digest() for s in specs}, space=spec_a.space,
        lexicons={s.locale: s.lexicon for s in specs},
    )

    def draw(spec, uid, n_words):
        useed = _utt_seed(seed, uid)
        rng = np.random.default_rng(useed)
        k = int(rng.integers(n_words[0], n_words[1] + 1))
        words = [spec.words[i] for i in rng.integers(0, len(spec.words), size=k)]
        return synth_utterance(spec, words, useed + 1, utt_id=uid)

    for split in SPLITS:
        for cond in CONDITIONS:
            n = sizes.get(split, {}).get(cond, 0)
            for i in range(n):
                uid = f"{split}-{cond}-{i:05d}"
                if cond == "code-mixed":
                    a = draw(spec_a, uid + "-srcA", mixed_words)
                    b = draw(spec_b, uid + "-srcB", mixed_words)
                    utt = make_code_mixed(a, b, spec_a, _utt_seed(seed, uid + "-gap"))
                    utt.id = uid
                else:
                    utt = draw(by_cond[cond], uid, words_per_utt)
                man.entries.append((uid, split, cond))
                man.utterances[uid] = utt
    return man
