"""Frame posteriors -> words, and WER / frame / LID scoring across modes."""

from __future__ import annotations

import hashlib
import json
import math
from collections import Counter
from dataclasses import asdict, dataclass, field

import numpy as np

from .lexicon import FOREIGN, FOREIGN_ID, SIL, SIL_ID, UnitToken, Position
from .model import AcousticModel
from .training import make_frame_targets


class EvalError(ValueError):
    pass


class InvariantError(RuntimeError):
    """An internal consistency check failed (a bug, not bad input)."""


@dataclass
class DecodeConfig:
    mode: str = "bilingual"
    search: str = "greedy"
    beam_width: int = 4
    lm_weight: float = 0.0
    chunk_frames: int | None = 8
    streaming: bool = True

    def __post_init__(self):
        if self.mode not in ("bilingual", "lid-combined") and not self.mode.startswith("mono-"):
            raise EvalError(f"unknown mode {self.mode!r}; use bilingual, lid-combined or mono-<locale>")
        if self.search not in ("greedy", "beam"):
            raise EvalError("search must be 'greedy' or 'beam'")
        if self.beam_width < 1:
            raise EvalError("beam_width must be >= 1")
        if self.lm_weight < 0:
            raise EvalError("lm_weight must be nonnegative")
        if self.chunk_frames is not None and self.chunk_frames < 1:
            raise EvalError("chunk_frames must be >= 1")


# ---------------------------------------------------------------- path collapse


def collapse_path(ids, sil_id=SIL_ID, foreign_id=None):
    """Merge repeated frame labels, then drop silence (and FOREIGN when given).

    Repeats are merged before deletion, so ``[d, sil, d]`` keeps both ``d``.
    """
    drop = {sil_id} if foreign_id is None else {sil_id, foreign_id}
    out = []
    prev = None
    for i in ids:
        i = int(i)
        if i != prev and i not in drop:
            out.append(i)
        prev = i
    return out


def count_runs(ids, label):
    """Number of maximal runs of ``label`` in a frame path."""
    ids = np.asarray(ids)
    hit = ids == label
    return int(hit[0]) + int((hit[1:] & ~hit[:-1]).sum()) if len(ids) else 0


# ---------------------------------------------------------------- units -> words


def _dedup(seq):
    out = []
    for u in seq:
        if not out or out[-1] != u:
            out.append(u)
    return tuple(out)


class WordIndex:
    """Lookup from (repeat-collapsed) unit spellings to lexicon words.

    Greedy decoding merges adjacent identical units, so a word like "della"
    (``_d e l l a_``) is stored under its collapsed key ``_d e l a_``.
    """

    def __init__(self, lexicons):
        self.lexicons = list(lexicons)
        self.key_to_word = {}
        self.word_locales = {}
        for lex in self.lexicons:
            for w, units in lex.entries.items():
                self.word_locales.setdefault(w, []).append(lex.locale)
                key = _dedup(u.render() for u in units)
                if key not in self.key_to_word or w < self.key_to_word[key]:
                    self.key_to_word[key] = w

    def lookup(self, units):
        return self.key_to_word.get(_dedup(units))


@dataclass
class Word:
    text: str
    locales: tuple = ()
    oov: bool = False


def _letters(units):
    return "".join(UnitToken.parse(u).letter if u not in (SIL, FOREIGN) else "" for u in units)


def units_to_words(units, index: WordIndex):
    """Segment rendered units at word boundaries and look each segment up.

    Segments missing from the lexicon come back as their letter string with
    ``oov=True``.
    """
    words = []
    seg = []

    def flush():
        if seg:
            w = index.lookup(seg)
            if w is None:
                words.append(Word(_letters(seg), (), True))
            else:
                words.append(Word(w, tuple(index.word_locales[w])))
            seg.clear()

    for u in units:
        if u in (SIL, FOREIGN):
            continue
        pos = UnitToken.parse(u).position
        if pos in (Position.INITIAL, Position.SINGLETON):
            flush()
        seg.append(u)
        if pos in (Position.FINAL, Position.SINGLETON):
            flush()
    flush()
    return words


@dataclass
class Hypothesis:
    units: list
    words: list  # [Word]
    score: float = 0.0
    foreign_segments: int = 0

    @property
    def text(self):
        return [w.text for w in self.words]


def greedy_decode(logp, inventory, index: WordIndex) -> Hypothesis:
    frame_ids = np.asarray(logp).argmax(-1)
    foreign = FOREIGN_ID if inventory.per_locale else None
    ids = collapse_path(frame_ids, SIL_ID, foreign)
    units = [inventory.units[i] for i in ids]
    score = float(np.asarray(logp)[np.arange(len(frame_ids)), frame_ids].sum()) if len(frame_ids) else 0.0
    n_foreign = count_runs(frame_ids, FOREIGN_ID) if foreign is not None else 0
    return Hypothesis(units, units_to_words(units, index), score, n_foreign)


class BigramLM:
    """Add-k smoothed word bigram model with a sentence-start context."""

    START = "<s>"

    def __init__(self, sentences, vocab, k=0.5):
        self.vocab = sorted(set(vocab))
        self.k = k
        self.uni = Counter()
        self.bi = Counter()
        for s in sentences:
            prev = self.START
            for w in s:
                self.uni[prev] += 1
                self.bi[(prev, w)] += 1
                prev = w

    def logprob(self, prev, word):
        v = len(self.vocab)
        return math.log((self.bi[(prev, word)] + self.k) / (self.uni[prev] + self.k * v))


def beam_decode(logp, inventory, index: WordIndex, beam=4, lm: BigramLM | None = None, lm_weight=0.0):
    """Frame-synchronous lexicon-constrained beam search.

    Hypotheses sit either in a filler state (silence, or FOREIGN in per-locale
    spaces) or inside a word at some unit position; a word may only end on
    its last unit.  Scores add frame log-posteriors plus ``lm_weight`` times
    the bigram log-probability at each word start.
    """
    logp = np.asarray(logp)
    words = []
    for key, w in sorted(index.key_to_word.items(), key=lambda kv: kv[1]):
        if all(u in inventory for u in key):
            words.append((w, [inventory[u] for u in key]))
    per_locale = inventory.per_locale

    def filler(t):
        return max(logp[t, SIL_ID], logp[t, FOREIGN_ID]) if per_locale else logp[t, SIL_ID]

    def lm_score(prev, w):
        if lm is None or lm_weight == 0:
            return 0.0
        return lm_weight * lm.logprob(prev, w)

    # state: (history tuple, word index or -1 for filler, unit position)
    hyps = {((), -1, 0): 0.0}
    for t in range(len(logp)):
        new = {}

        def push(key, score):
            if score > new.get(key, -math.inf):
                new[key] = score

        for (hist, wi, pos), sc in hyps.items():
            prev = hist[-1] if hist else BigramLM.START
            can_start = wi < 0 or pos == len(words[wi][1]) - 1
            if wi < 0:
                push((hist, -1, 0), sc + filler(t))
            else:
                seq = words[wi][1]
                push((hist, wi, pos), sc + logp[t, seq[pos]])
                if pos + 1 < len(seq):
                    push((hist, wi, pos + 1), sc + logp[t, seq[pos + 1]])
                else:
                    push((hist, -1, 0), sc + filler(t))
            if can_start:
                cur = words[wi][1][pos] if wi >= 0 else None
                for nj, (w, seq) in enumerate(words):
                    if seq[0] == cur:
                        continue  # a repeated unit is one unit, as in greedy collapse
                    push((hist + (w,), nj, 0), sc + logp[t, seq[0]] + lm_score(prev, w))
        hyps = dict(sorted(new.items(), key=lambda kv: (-kv[1], kv[0][0], kv[0][1], kv[0][2]))[:beam])
    final = [
        (sc, hist)
        for (hist, wi, pos), sc in hyps.items()
        if wi < 0 or pos == len(words[wi][1]) - 1
    ]
    if not final:
        final = [(sc, hist) for (hist, _, _), sc in hyps.items()]
    sc, hist = max(final, key=lambda x: (x[0], x[1])) if final else (0.0, ())
    out = [Word(w, tuple(index.word_locales[w])) for w in hist]
    spell = {w: key for key, w in index.key_to_word.items()}
    units = [u for w in hist for u in spell[w]]
    return Hypothesis(units, out, float(sc))


# ---------------------------------------------------------------- WER


def align_words(ref, hyp):
    """Levenshtein alignment with unit costs; returns (S, I, D).

    On ties the backtrace prefers substitution/match, then insertion, then
    deletion.
    """
    n, m = len(ref), len(hyp)
    d = np.zeros((n + 1, m + 1), dtype=np.int64)
    d[:, 0] = np.arange(n + 1)
    d[0, :] = np.arange(m + 1)
    for i in range(1, n + 1):
        for j in range(1, m + 1):
            d[i, j] = min(
                d[i - 1, j - 1] + (ref[i - 1] != hyp[j - 1]),
                d[i, j - 1] + 1,
                d[i - 1, j] + 1,
            )
    s = ins = dele = 0
    i, j = n, m
    while i > 0 or j > 0:
        if i > 0 and j > 0 and d[i, j] == d[i - 1, j - 1] + (ref[i - 1] != hyp[j - 1]):
            s += ref[i - 1] != hyp[j - 1]
            i, j = i - 1, j - 1
        elif j > 0 and d[i, j] == d[i, j - 1] + 1:
            ins += 1
            j -= 1
        else:
            dele += 1
            i -= 1
    return int(s), ins, dele


def wer(ref, hyp):
    """(WER %, substitutions, insertions, deletions)."""
    if len(ref) == 0:
        raise EvalError("WER needs a non-empty reference")
    s, i, d = align_words(list(ref), list(hyp))
    return 100.0 * (s + i + d) / len(ref), s, i, d


def werr(base, new):
    """Relative WER reduction (base - new) / base, as a fraction."""
    if base == 0:
        return 0.0 if new == 0 else math.nan
    return (base - new) / base


# ---------------------------------------------------------------- reports


@dataclass
class ReportRow:
    condition: str
    mode: str
    utterances: int = 0
    ref_words: int = 0
    sub: int = 0
    ins: int = 0
    dele: int = 0
    oov: int = 0
    frames: int = 0
    frames_correct: int = 0
    lid_frames: int = 0
    lid_correct: int = 0
    utt_digest: str = ""

    @property
    def errors(self):
        return self.sub + self.ins + self.dele

    @property
    def wer(self):
        return 100.0 * self.errors / self.ref_words if self.ref_words else 0.0

    @property
    def frame_acc(self):
        return 100.0 * self.frames_correct / self.frames if self.frames else 0.0

    @property
    def lid_acc(self):
        return 100.0 * self.lid_correct / self.lid_frames if self.lid_frames else None

    def to_dict(self):
        d = asdict(self)
        d.update(wer=round(self.wer, 2), frame_acc=round(self.frame_acc, 2))
        d["lid_acc"] = None if self.lid_acc is None else round(self.lid_acc, 2)
        return d


@dataclass
class EvalReport:
    system: str
    rows: list = field(default_factory=list)
    utterances: list = field(default_factory=list)  # per-utterance records

    def row(self, condition, mode) -> ReportRow:
        for r in self.rows:
            if r.condition == condition and r.mode == mode:
                return r
        raise KeyError((condition, mode))

    def wer(self, condition, mode):
        return self.row(condition, mode).wer

    def to_text(self) -> str:
        head = f"{'condition':<12} {'mode':<14} {'utts':>5} {'words':>6} {'WER%':>7} {'S':>5} {'I':>5} {'D':>5} {'frame%':>7} {'LID%':>7}"
        lines = [f"# system: {self.system}", head, "-" * len(head)]
        for r in self.rows:
            lid = "-" if r.lid_acc is None else f"{r.lid_acc:.2f}"
            lines.append(
                f"{r.condition:<12} {r.mode:<14} {r.utterances:>5} {r.ref_words:>6} {r.wer:>7.2f} "
                f"{r.sub:>5} {r.ins:>5} {r.dele:>5} {r.frame_acc:>7.2f} {lid:>7}"
            )
        return "\n".join(lines) + "\n"

    def to_jsonl(self) -> str:
        recs = [dict(type="row", system=self.system, **r.to_dict()) for r in self.rows]
        recs += [dict(type="utt", system=self.system, **u) for u in self.utterances]
        return "".join(json.dumps(r, sort_keys=True) + "\n" for r in recs)

    @classmethod
    def from_jsonl(cls, text) -> "EvalReport":
        rep = None
        names = {f for f in ReportRow.__dataclass_fields__}
        for line in text.splitlines():
            if not line.strip():
                continue
            rec = json.loads(line)
            if rep is None:
                rep = cls(rec["system"])
            if rec["type"] == "row":
                rep.rows.append(ReportRow(**{k: v for k, v in rec.items() if k in names}))
            else:
                rep.utterances.append({k: v for k, v in rec.items() if k not in ("type", "system")})
        if rep is None:
            raise EvalError("empty report")
        return rep

    def check(self):
        """Row totals must equal the sums over per-utterance records."""
        for r in self.rows:
            us = [u for u in self.utterances if u["condition"] == r.condition and u["mode"] == r.mode]
            for key, attr in (("sub", "sub"), ("ins", "ins"), ("dele", "dele"), ("ref_words", "ref_words"),
                              ("frames", "frames"), ("frames_correct", "frames_correct")):
                if sum(u[key] for u in us) != getattr(r, attr) or len(us) != r.utterances:
                    raise InvariantError(f"report totals disagree with utterance records for {r.condition}/{r.mode}")
        return True


def _mode_space(model: AcousticModel, mode):
    if mode.startswith("mono-"):
        loc = mode[5:]
        return model.space.per_locale[loc], loc
    return model.space.bilingual, None


def model_outputs(model: AcousticModel, utt, cfg: DecodeConfig):
    """All mode outputs for one utterance, streamed in ``cfg.chunk_frames`` pieces."""
    if not cfg.streaming:
        return model.infer(utt.features)
    step = cfg.chunk_frames or max(utt.frames, 1)
    if model.config.chunk_frames is not None:
        step = min(step, model.config.chunk_frames)
    state = model.new_stream()
    parts = []
    n = utt.frames
    for s in range(0, max(n, 1), step):
        out, state = model.streaming_outputs(utt.features[s:s + step], state, final=s + step >= n)
        parts.append(out)
    return {k: np.concatenate([p[k] for p in parts]) for k in parts[0]}


def evaluate_modes(model: AcousticModel, manifest, cfg: DecodeConfig, modes=None, split="test",
                   conditions=None, system="system", lexicons=None, lm=None) -> EvalReport:
    """Decode every test utterance once and score it under each of ``modes``."""
    if manifest.space is not None and manifest.space.digest() != model.space.digest():
        raise EvalError("model and corpus unit inventories differ (digest mismatch)")
    modes = list(modes or [cfg.mode])
    for m in modes:
        if m not in model.modes():
            raise EvalError(f"mode {m!r} not available for this model; choose from {model.modes()}")
    lexicons = lexicons or manifest.lexicons
    indexes = {}
    for m in modes:
        _, loc = _mode_space(model, m)
        lexs = [lexicons[loc]] if loc else [lexicons[l] for l in model.config.locales]
        indexes[m] = WordIndex(lexs)
    conditions = conditions or manifest.conditions(split)
    report = EvalReport(system)
    rows = {}
    for cond in conditions:
        utts = sorted(manifest.select(split, cond), key=lambda u: u.id)
        digest = hashlib.blake2b("\n".join(u.id for u in utts).encode(), digest_size=8).hexdigest()
        for m in modes:
            rows[(cond, m)] = ReportRow(cond, m, utt_digest=digest)
        for utt in utts:
            outs = model_outputs(model, utt, cfg)
            targets = make_frame_targets(utt, model.space)
            for m in modes:
                inv, loc = _mode_space(model, m)
                logp = outs[m]
                if cfg.search == "beam":
                    hyp = beam_decode(logp, inv, indexes[m], cfg.beam_width, lm, cfg.lm_weight)
                else:
                    hyp = greedy_decode(logp, inv, indexes[m])
                ref = utt.transcript
                _, s, i, d = wer(ref, hyp.text) if ref else (0.0, 0, len(hyp.text), 0)
                tgt = targets.per_locale[loc] if loc else targets.bilingual
                correct = int((logp.argmax(-1) == tgt).sum())
                rec = dict(
                    id=utt.id, condition=cond, mode=m, ref_words=len(ref), sub=s, ins=i, dele=d,
                    oov=sum(w.oov for w in hyp.words), frames=utt.frames, frames_correct=correct,
                    hyp=" ".join(hyp.text),
                )
                row = rows[(cond, m)]
                row.utterances += 1
                row.ref_words += len(ref)
                row.sub += s
                row.ins += i
                row.dele += d
                row.oov += rec["oov"]
                row.frames += utt.frames
                row.frames_correct += correct
                if "lid" in outs:
                    row.lid_frames += utt.frames
                    row.lid_correct += int((outs["lid"].argmax(-1) == targets.lid).sum())
                report.utterances.append(rec)
    report.rows = [rows[(c, m)] for c in conditions for m in modes]
    report.check()
    return report


def evaluate(model: AcousticModel, manifest, cfg: DecodeConfig, **kw) -> EvalReport:
    return evaluate_modes(model, manifest, cfg, [cfg.mode], **kw)


@dataclass
class TrendRow:
    condition: str
    base: str
    new: str
    base_wer: float
    new_wer: float

    @property
    def werr(self):
        return werr(self.base_wer, self.new_wer)


def compare_modes(reports, baseline=None):
    """WERR of every (system, mode) against a baseline, per test condition.

    ``baseline`` is a ``"system/mode"`` label; by default the first row of the
    first report.
    """
    if len(reports) < 2 and sum(len(r.rows) for r in reports) < 2:
        raise EvalError("need at least two systems to compare")
    systems = {}
    digests = {}
    for rep in reports:
        for r in rep.rows:
            systems.setdefault(f"{rep.system}/{r.mode}", {})[r.condition] = r
            if digests.setdefault(r.condition, r.utt_digest) != r.utt_digest:
                raise EvalError(f"reports were scored on different {r.condition} test sets")
    names = list(systems)
    baseline = baseline or names[0]
    if baseline not in systems:
        raise EvalError(f"unknown baseline {baseline!r}")
    conds = [c for c in digests if all(c in systems[s] for s in names)]
    if not conds:
        raise EvalError("reports share no test condition")
    rows = []
    for c in conds:
        b = systems[baseline][c].wer
        for s in names:
            if s != baseline:
                rows.append(TrendRow(c, baseline, s, b, systems[s][c].wer))
    return rows


def trends_text(rows) -> str:
    head = f"{'condition':<12} {'baseline':<28} {'system':<28} {'base%':>7} {'new%':>7} {'WERR%':>7}"
    lines = [head, "-" * len(head)]
    for r in rows:
        w = "n/a" if math.isnan(r.werr) else f"{100 * r.werr:.1f}"
        lines.append(f"{r.condition:<12} {r.base:<28} {r.new:<28} {r.base_wer:>7.2f} {r.new_wer:>7.2f} {w:>7}")
    return "\n".join(lines) + "\n"
