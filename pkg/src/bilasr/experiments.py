"""Directional trend suite: mono vs bilingual, aux vs no-aux, LID quality.

Each seed trains four small systems on the same synthetic corpus:

* ``mono``   bilingual-pretrain on locale-A data only, decoded in mono-A mode
* ``aux``    aux-joint with per-locale heads (PE w/ Aux)
* ``noaux``  aux-joint with the shared projection only (PE w/o Aux)
* ``lid``    bilingual-pretrain on both locales, then lid-finetune
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

from . import synthdata as sd
from .decode_eval import DecodeConfig, evaluate_modes, werr
from .model import AcousticModel, ModelConfig
from .training import TrainingPlan, train_stage


@dataclass
class TrendBudget:
    epochs: int = 8
    finetune_epochs: int = 3
    batch_utterances: int = 4
    lr: float = 1e-3
    sizes: dict = field(default_factory=lambda: sd.DEFAULT_SIZES)
    n_words: int = 50
    shared_fraction: float = 0.1
    model: dict = field(default_factory=dict)


def accepted_seeds(count, start=0, **spec_kw):
    """The first ``count`` seeds from ``start`` whose prototypes can be placed."""
    out = []
    seed = start
    while len(out) < count:
        try:
            out.append((seed, sd.gen_locale_specs(seed, **spec_kw)))
        except sd.SynthError:
            pass
        seed += 1
    return out


def _train(model, data, budget, stage, epochs, seed, **kw):
    plan = TrainingPlan(stage=stage, epochs=epochs, batch_utterances=budget.batch_utterances,
                        lr=budget.lr, seed=seed, **kw)
    train_stage(model, data, plan)
    return model


def run_seed(seed, specs=None, budget=None, log=print):
    """Train the four systems for one seed and return their EvalReports."""
    budget = budget or TrendBudget()
    if specs is None:
        specs = sd.gen_locale_specs(seed, budget.n_words, budget.shared_fraction)
    corpus = sd.build_corpus(specs, budget.sizes, seed=seed)
    train = corpus.select("train")
    train_a = corpus.select("train", "mono-A")
    space = specs[0].space
    base = dict(budget.model, seed=seed)
    t0 = time.perf_counter()

    def stamp(name):
        log(f"seed {seed}: {name} trained at {time.perf_counter() - t0:.0f}s")

    # the mono model sees only locale-A data; give it as many updates as the others
    mono_epochs = round(budget.epochs * len(train) / max(len(train_a), 1))
    mono = _train(AcousticModel(ModelConfig(**base), space), train_a, budget, "bilingual-pretrain",
                  mono_epochs, seed)
    stamp("mono-A")
    aux = _train(AcousticModel(ModelConfig(**base), space), train, budget, "aux-joint", budget.epochs, seed)
    stamp("aux")
    noaux = _train(AcousticModel(ModelConfig(**base), space), train, budget, "aux-joint", budget.epochs,
                   seed, monolingual_heads=False)
    stamp("noaux")
    lid = AcousticModel(ModelConfig(**dict(base, combination_mode="lid")), space)
    _train(lid, train, budget, "bilingual-pretrain", budget.epochs, seed)
    _train(lid, train, budget, "lid-finetune", budget.finetune_epochs, seed)
    stamp("lid")

    cfg = DecodeConfig()
    reports = {
        "mono": evaluate_modes(mono, corpus, cfg, ["mono-A"], system="mono"),
        "aux": evaluate_modes(aux, corpus, cfg, ["bilingual", "mono-A"], system="aux"),
        "noaux": evaluate_modes(noaux, corpus, cfg, ["bilingual"], system="noaux"),
        "lid": evaluate_modes(lid, corpus, cfg, ["lid-combined"], system="lid"),
    }
    stamp("evaluation")
    return reports


@dataclass
class TrendCheck:
    name: str
    passed: bool
    detail: str


def check_trends(reports):
    """Evaluate the five directional criteria on one seed's reports."""
    mono, aux, noaux, lid = (reports[k] for k in ("mono", "aux", "noaux", "lid"))
    mix_mono = mono.wer("code-mixed", "mono-A")
    mix_bi = aux.wer("code-mixed", "bilingual")
    a_mono = mono.wer("mono-A", "mono-A")
    a_bi = aux.wer("mono-A", "bilingual")
    a_noaux = noaux.wer("mono-A", "bilingual")
    a_head = aux.wer("mono-A", "mono-A")
    lid_acc = [lid.row(c, "lid-combined") for c in ("mono-A", "mono-B")]
    lid_pct = 100.0 * sum(r.lid_correct for r in lid_acc) / sum(r.lid_frames for r in lid_acc)
    r = werr(mix_mono, mix_bi)
    return [
        TrendCheck("code-mix rescue", r >= 0.40,
                   f"code-mixed WER mono-A {mix_mono:.2f} -> bilingual {mix_bi:.2f} (WERR {100 * r:.1f}%, need >= 40%)"),
        TrendCheck("near parity", a_bi <= 1.15 * a_mono,
                   f"locale-A WER bilingual {a_bi:.2f} vs mono-A {a_mono:.2f} (limit {1.15 * a_mono:.2f})"),
        TrendCheck("aux beats no-aux", a_bi <= a_noaux,
                   f"locale-A WER PE w/ aux {a_bi:.2f} vs w/o aux {a_noaux:.2f}"),
        TrendCheck("locale head", a_head <= 1.05 * a_bi,
                   f"locale-A WER mono-A head {a_head:.2f} vs shared head {a_bi:.2f} (limit {1.05 * a_bi:.2f})"),
        TrendCheck("LID accuracy", lid_pct >= 85.0, f"LID frame accuracy {lid_pct:.2f}% (need >= 85%)"),
    ]
