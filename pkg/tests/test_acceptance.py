"""Acceptance criteria 1-7.

Every test prints one ``criterion N (...): PASS|FAIL`` line, visible in
``pytest -v`` output, then asserts.  Criterion 5 trains 4 systems on 3 seeds
of the default synthetic corpus and takes roughly 25 minutes on one core.
"""

import time

import numpy as np
import pytest

from bilasr import cli
from bilasr import numcore as nc
from bilasr import synthdata as sd
from bilasr._romantable import ROMAN_TABLE
from bilasr.decode_eval import DecodeConfig, collapse_path, evaluate_modes, wer
from bilasr.experiments import TrendBudget, accepted_seeds, check_trends, run_seed
from bilasr.lexicon import (
    BASE_LETTERS,
    GraphemeLexicon,
    build_lexicon,
    parse_units,
    render_units,
    romanize,
    word_to_units,
)
from bilasr.model import AcousticModel, ModelConfig, combine_weights, soft_combine
from bilasr.training import (
    TrainingPlan,
    load_checkpoint,
    loss_aux,
    loss_bilingual,
    loss_lid,
    save_checkpoint,
)
from helpers import model_grad_errors, random_frame_targets
from test_decode_eval import dp_oracle, reference_collapse
from test_training import _out


@pytest.fixture
def verdict(capsys):
    def emit(number, name, passed, detail):
        with capsys.disabled():
            print(f"\ncriterion {number} ({name}): {'PASS' if passed else 'FAIL'}: {detail}")
        return passed

    return emit


@pytest.fixture(scope="module")
def default_specs():
    return sd.gen_locale_specs(0)


# ---------------------------------------------------------------- 1


def test_criterion_1_gradient_fidelity(default_specs, verdict):
    start = time.perf_counter()
    space = default_specs[0].space
    rng = np.random.default_rng(0)
    feats = rng.normal(size=(1, 6, 16))

    def aux_loss(model, t):
        return lambda: loss_aux(model.forward(feats), t, TrainingPlan())

    # every element of every parameter, on a reduced-width aux model with all components
    small = AcousticModel(ModelConfig(model_dim=8, heads=2, ff_dim=16, n_shared_layers=2, n_pe_layers=2,
                                      chunk_frames=4), space)
    t_small = random_frame_targets(small, rng, 6)
    full_errs = model_grad_errors(small, aux_loss(small, t_small))
    # default-size model: sampled elements plus random directions in every tensor
    big = AcousticModel(ModelConfig(), space)
    t_big = random_frame_targets(big, rng, 6)
    sampled = model_grad_errors(big, aux_loss(big, t_big), rng=rng, coords=6, directions=2)
    elapsed = time.perf_counter() - start
    worst_full = max(full_errs.values())
    worst_big = max(sampled.values())
    ok = worst_full < 1e-4 and worst_big < 1e-4 and elapsed < 120
    verdict(1, "gradient fidelity", ok,
            f"{len(full_errs)} tensors element-wise max rel err {worst_full:.2e}; "
            f"{len(sampled)} default-size tensors max rel err {worst_big:.2e}; {elapsed:.0f}s")
    assert ok


# ---------------------------------------------------------------- 2


def test_criterion_2_streaming_causality(default_specs, verdict):
    start = time.perf_counter()
    sizes = {"test": {"mono-A": 7, "mono-B": 7, "code-mixed": 6}}
    man = sd.build_corpus(default_specs, sizes, seed=11)
    utts = sorted(man.utterances.values(), key=lambda u: u.id)
    assert len(utts) == 20
    mismatches = 0
    wers = {}
    for mode in ("aux", "lid"):
        model = AcousticModel(ModelConfig(combination_mode=mode, seed=5), default_specs[0].space)
        for utt in utts:
            full = model.infer(utt.features)
            for size in (1, 4, 8):
                st = model.new_stream()
                parts = []
                for s in range(0, utt.frames, size):
                    out, st = model.streaming_outputs(utt.features[s:s + size], st, final=s + size >= utt.frames)
                    parts.append(out)
                for k in full:
                    got = np.concatenate([p[k] for p in parts])
                    mismatches += got.tobytes() != full[k].tobytes()
        modes = model.modes()[:2] if mode == "aux" else ["lid-combined"]
        for chunk in (1, 4, 8, None):
            cfg = DecodeConfig(chunk_frames=chunk, streaming=chunk is not None)
            rep = evaluate_modes(model, man, cfg, modes)
            wers.setdefault(mode, set()).add(tuple((r.sub, r.ins, r.dele) for r in rep.rows))
    elapsed = time.perf_counter() - start
    same_wer = all(len(v) == 1 for v in wers.values())
    ok = mismatches == 0 and same_wer and elapsed < 60
    verdict(2, "streaming causality", ok,
            f"{mismatches} posterior mismatches over 20 utterances x chunks {{1,4,8,full}} x 2 models; "
            f"WER identical: {same_wer}; {elapsed:.0f}s")
    assert ok


# ---------------------------------------------------------------- 3


def test_criterion_3_combination_algebra(verdict):
    rng = np.random.default_rng(3)
    p = rng.dirichlet(np.ones(3), size=10_000)
    p[:100, :2] = 0  # all-silence rows take the equal-weight fallback
    p[:100, 2] = 1
    wa, wb, _, _ = combine_weights(p)
    sum_err = float(np.abs(wa + wb - 1).max())
    ex_a, ex_b, _, _ = combine_weights(np.array([[0.5, 0.3, 0.2]]))
    example = abs(ex_a[0] - 0.625) <= 1e-12 and abs(ex_b[0] - 0.375) <= 1e-12
    ha, hb = rng.normal(size=(10_000, 4)), rng.normal(size=(10_000, 4))
    got = soft_combine(ha, hb, p).data
    denom = p[:, 0] + p[:, 1]
    oracle_a = np.where(denom < 1e-8, 0.5, p[:, 0] / np.where(denom < 1e-8, 1, denom))
    oracle = oracle_a[:, None] * ha + (1 - oracle_a)[:, None] * hb
    mix_err = float(np.abs(got - oracle).max())
    ok = sum_err <= 1e-12 and example and mix_err <= 1e-12
    verdict(3, "combination algebra", ok,
            f"max |wA+wB-1| {sum_err:.1e} over 10^4 rows; (0.5,0.3,0.2) -> ({ex_a[0]:.3f},{ex_b[0]:.3f}); "
            f"combined vs oracle {mix_err:.1e}")
    assert ok


# ---------------------------------------------------------------- 4


def test_criterion_4_lexicon_conformance(verdict):
    units = word_to_units("president")
    president = render_units(units) == "_p r e s i d e n t_" and len(units) == 9
    rng = np.random.default_rng(4)
    alphabet = sorted(BASE_LETTERS) + [c.upper() for c in sorted(BASE_LETTERS) if c.isalpha()] + sorted(ROMAN_TABLE)
    words = ["".join(rng.choice(alphabet, size=rng.integers(1, 13))) for _ in range(10_000)]
    failures = 0
    for w in words:
        r = romanize(w)
        u = word_to_units(r)
        failures += not (romanize(r) == r and parse_units(render_units(u)) == u
                         and "".join(t.letter for t in u) == r and len(r) == len(w))
    lex = build_lexicon(words, "A")
    round_trip = GraphemeLexicon.from_text(lex.to_text(), "A") == lex
    ok = president and failures == 0 and round_trip
    verdict(4, "lexicon conformance", ok,
            f"president -> {render_units(units)} ({len(units)} units); {failures} fuzz failures in 10^4 words; "
            f"lexicon text round trip {round_trip}")
    assert ok


# ---------------------------------------------------------------- 5


def test_criterion_5_trend_suite(verdict, capsys):
    start = time.perf_counter()
    budget = TrendBudget()
    results = []
    for seed, specs in accepted_seeds(3):
        reports = run_seed(seed, specs, budget, log=lambda m: None)
        checks = check_trends(reports)
        results.append((seed, checks))
        with capsys.disabled():
            for c in checks:
                print(f"\n  seed {seed} {c.name}: {'PASS' if c.passed else 'FAIL'}: {c.detail}", end="")
            print(f"\n  seed {seed} done at {time.perf_counter() - start:.0f}s", end="")
    elapsed = time.perf_counter() - start
    failed = [f"seed {s} {c.name}" for s, checks in results for c in checks if not c.passed]
    ok = not failed and elapsed < 30 * 60
    detail = f"3 seeds {[s for s, _ in results]}, {elapsed / 60:.1f} min"
    verdict(5, "trend suite", ok, detail + ("; failed: " + ", ".join(failed) if failed else ""))
    assert ok


# ---------------------------------------------------------------- 6


def test_criterion_6_oracle_equivalences(space, verdict):
    rng = np.random.default_rng(6)
    wer_bad = 0
    for _ in range(500):
        ref = tuple(rng.choice(list("abcd"), size=rng.integers(1, 9)))
        hyp = tuple(rng.choice(list("abcd"), size=rng.integers(0, 9)))
        _, s, i, d = wer(ref, hyp)
        wer_bad += s + i + d != dp_oracle(ref, hyp)
    collapse_bad = 0
    for n in range(1000):
        ids = rng.integers(0, 6, size=rng.integers(0, 40)).tolist()
        foreign = 1 if n % 2 else None
        collapse_bad += collapse_path(ids, 0, foreign) != reference_collapse(ids, 0, foreign)
    model = AcousticModel(ModelConfig(model_dim=8, heads=2, ff_dim=16, n_shared_layers=1, n_pe_layers=1,
                                      n_lid_layers=1, combination_mode="lid"), space)
    loss_err = 0.0
    for _ in range(100):
        out = _out(rng, model, 7)
        t = random_frame_targets(model, rng, 7)
        hand = {k: -np.mean([lp[0, i, ids[0, i]] for i in range(7)])
                for k, lp, ids in [("bil", out.bilingual.data, t.bilingual), ("lid", out.lid_logp.data, t.lid),
                                   ("A", out.per_locale["A"].data, t.per_locale["A"]),
                                   ("B", out.per_locale["B"].data, t.per_locale["B"])]}
        aux = float(loss_aux(out, t, TrainingPlan()).data)
        weighted = float((loss_bilingual(out, t) + nc.scale(loss_lid(out, t), 0.02)).data)
        loss_err = max(loss_err,
                       abs(float(loss_bilingual(out, t).data) - hand["bil"]),
                       abs(float(loss_lid(out, t).data) - hand["lid"]),
                       abs(aux - (hand["bil"] + 0.5 * hand["A"] + 0.5 * hand["B"])),
                       abs(weighted - (hand["bil"] + 0.02 * hand["lid"])))
    ok = wer_bad == 0 and collapse_bad == 0 and loss_err <= 1e-12
    verdict(6, "oracle equivalences", ok,
            f"WER mismatches {wer_bad}/500; collapse mismatches {collapse_bad}/1000; max loss error {loss_err:.1e}")
    assert ok


# ---------------------------------------------------------------- 7


PIPELINE = {
    "seed": 2,
    "corpus": {"sizes": {"train": {"mono-A": 24, "mono-B": 24}, "test": {"mono-A": 8, "mono-B": 8, "code-mixed": 8}}},
    "training": {"epochs": 1, "batch_utterances": 8},
}


def _files(d):
    return {p.relative_to(d).as_posix(): p.read_bytes() for p in sorted(d.rglob("*")) if p.is_file()}


def test_criterion_7_determinism_and_persistence(tmp_path, verdict):
    cfg = cli.RunConfig(PIPELINE)
    quiet = dict(echo=lambda *a: None)
    runs = []
    for tag in ("one", "two"):
        d = tmp_path / tag
        cli.cmd_gen(cfg, d / "corpus", **quiet)
        cli.cmd_train(cfg, "aux-joint", d / "corpus", d / "ckpt", **quiet)
        cli.cmd_eval(cfg, d / "ckpt", d / "corpus", d / "eval", modes=["bilingual", "mono-A"], **quiet)
        runs.append(d)
    differing = [
        f"{sub}/{f}"
        for sub in ("corpus", "ckpt", "eval")
        for f, data in _files(runs[0] / sub).items()
        if f != "timing.jsonl" and _files(runs[1] / sub).get(f) != data
    ]
    model = load_checkpoint(runs[0] / "ckpt")
    save_checkpoint(model, cfg.plan("aux-joint"), tmp_path / "again")
    resaved = all((tmp_path / "again" / f).read_bytes() == (runs[0] / "ckpt" / f).read_bytes()
                  for f in ("params.bin", "model.json"))
    man = sd.CorpusManifest.read(runs[0] / "corpus")
    before = evaluate_modes(model, man, DecodeConfig(), ["bilingual"]).to_jsonl()
    after = evaluate_modes(load_checkpoint(tmp_path / "again"), man, DecodeConfig(), ["bilingual"]).to_jsonl()
    ok = not differing and resaved and before == after
    verdict(7, "determinism and persistence", ok,
            f"{len(differing)} differing files across two seeded runs; checkpoint resave byte-identical {resaved}; "
            f"reload evaluation identical {before == after}")
    assert ok
