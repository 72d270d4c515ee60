"""Frame targets, losses and the staged training schedules.

Stages:

``bilingual-pretrain``
    Every utterance goes through the shared stack and then only through its
    own locale's parallel encoder and per-locale head (hard routing).
``lid-finetune``
    Shared stack frozen; parallel encoders, LID head and the combined head
    train on ``CE(combined) + lid_loss_weight * CE(lid)``.
``aux-joint``
    One stage from scratch on ``main * CE(shared head) + sum_l aux_l * CE(head_l)``.
"""

from __future__ import annotations

import json
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import numcore as nc
from .lexicon import FOREIGN_ID, SIL_ID, BilingualSpaceMap
from .model import LID_SIL, AcousticModel, ForwardOutput, ModelConfig
from .numcore import atomic_write_bytes

STAGES = ("bilingual-pretrain", "lid-finetune", "aux-joint")


class TrainingError(ValueError):
    pass


@dataclass
class FrameTargets:
    bilingual: np.ndarray
    per_locale: dict
    lid: np.ndarray
    mask: np.ndarray | None = None  # valid frames, batches only

    def __len__(self):
        return self.bilingual.shape[-1]


def make_frame_targets(utt, space: BilingualSpaceMap) -> FrameTargets:
    if len(utt.alignment) != len(utt.features):
        raise TrainingError(
            f"{utt.id}: alignment has {len(utt.alignment)} frames but features have {len(utt.features)}"
        )
    bil = np.asarray(utt.alignment, dtype=np.int64)
    frame_loc = utt.frame_locales()
    lid = np.full(len(bil), LID_SIL, dtype=np.int64)
    per = {}
    for li, loc in enumerate(space.locales):
        own = np.array([fl == loc for fl in frame_loc], dtype=bool)
        lid[own] = li
        ids = np.full(len(bil), SIL_ID, dtype=np.int64)
        ids[own] = space.to_locale(loc, bil[own])
        other = np.array([fl is not None and fl != loc for fl in frame_loc], dtype=bool)
        ids[other] = FOREIGN_ID
        per[loc] = ids
    lid[bil == SIL_ID] = LID_SIL
    return FrameTargets(bil, per, lid)


@dataclass
class Batch:
    utts: list
    features: np.ndarray  # [B, T, F]
    valid: np.ndarray  # [B, T] bool
    targets: FrameTargets

    @property
    def frames(self):
        return int(self.valid.sum())


def collate(utts, space) -> Batch:
    t_max = max(u.frames for u in utts)
    dim = utts[0].features.shape[1]
    feats = np.zeros((len(utts), t_max, dim))
    valid = np.zeros((len(utts), t_max), dtype=bool)
    bil = np.zeros((len(utts), t_max), dtype=np.int64)
    lid = np.full((len(utts), t_max), LID_SIL, dtype=np.int64)
    per = {loc: np.zeros((len(utts), t_max), dtype=np.int64) for loc in space.locales}
    for i, u in enumerate(utts):
        t = make_frame_targets(u, space)
        n = u.frames
        feats[i, :n] = u.features
        valid[i, :n] = True
        bil[i, :n] = t.bilingual
        lid[i, :n] = t.lid
        for loc in space.locales:
            per[loc][i, :n] = t.per_locale[loc]
    return Batch(list(utts), feats, valid, FrameTargets(bil, per, lid, valid))


# ---------------------------------------------------------------- losses


def loss_bilingual(out: ForwardOutput, t: FrameTargets) -> nc.Tensor:
    if out.bilingual is None:
        raise TrainingError("forward output has no bilingual posteriors")
    return nc.nll_loss(out.bilingual, t.bilingual, mask=t.mask)


def loss_lid(out: ForwardOutput, t: FrameTargets) -> nc.Tensor:
    """Unweighted LID cross-entropy; the plan's weight is applied by the caller."""
    if out.lid_logp is None:
        raise TrainingError("forward output has no LID probabilities")
    return nc.nll_loss(out.lid_logp, t.lid, mask=t.mask)


def loss_aux(out: ForwardOutput, t: FrameTargets, plan: "TrainingPlan", parts=None) -> nc.Tensor:
    total = nc.scale(loss_bilingual(out, t), plan.main_loss_weight)
    if parts is not None:
        parts["bilingual"] = float(total.data) / plan.main_loss_weight if plan.main_loss_weight else 0.0
    for loc, w in plan.aux_weights(tuple(t.per_locale)).items():
        if w == 0:
            continue
        if loc not in out.per_locale:
            raise TrainingError(f"forward output has no {loc} posteriors")
        ce = nc.nll_loss(out.per_locale[loc], t.per_locale[loc], mask=t.mask)
        if parts is not None:
            parts[f"aux.{loc}"] = float(ce.data)
        total = total + nc.scale(ce, w)
    return total


# ---------------------------------------------------------------- plan / log


@dataclass
class TrainingPlan:
    stage: str = "aux-joint"
    lid_loss_weight: float = 0.02
    aux_loss_weight: float | dict = 0.5
    main_loss_weight: float = 1.0
    lr: float = 1e-3
    warmup_steps: int = 100
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    epochs: int = 10
    batch_utterances: int = 16
    seed: int = 0
    freeze_shared_in_finetune: bool = True
    monolingual_heads: bool = True  # False trains the shared projection only
    warm_start_combined: bool = True  # seed the lid-mode head from the locale heads

    def __post_init__(self):
        self.validate()

    def validate(self):
        errs = []
        if self.stage not in STAGES:
            errs.append(f"stage must be one of {STAGES}")
        weights = [self.lid_loss_weight, self.main_loss_weight]
        weights += list(self.aux_loss_weight.values()) if isinstance(self.aux_loss_weight, dict) else [self.aux_loss_weight]
        if any(w < 0 for w in weights):
            errs.append("loss weights must be nonnegative")
        if self.stage != "bilingual-pretrain" and self.main_loss_weight <= 0:
            errs.append("main_loss_weight must be > 0")
        if self.epochs < 0 or self.batch_utterances < 1 or self.lr <= 0:
            errs.append("epochs >= 0, batch_utterances >= 1 and lr > 0 required")
        if errs:
            raise TrainingError("; ".join(errs))

    def aux_weights(self, locales):
        if not self.monolingual_heads:
            return {loc: 0.0 for loc in locales}
        if isinstance(self.aux_loss_weight, dict):
            return {loc: float(self.aux_loss_weight.get(loc, 0.0)) for loc in locales}
        return {loc: float(self.aux_loss_weight) for loc in locales}

    def frozen_prefixes(self, model: AcousticModel):
        locs = model.config.locales
        if self.stage == "bilingual-pretrain":
            # only the shared stack, PEs and per-locale heads are on the routed path
            keep = ("in.", "shared.", "pe.") + tuple(f"head.{l}." for l in locs)
            return tuple(n for n, _ in model.store if not n.startswith(keep))
        if self.stage == "lid-finetune":
            heads = tuple(f"head.{l}." for l in locs)
            return (("in.", "shared.") if self.freeze_shared_in_finetune else ()) + heads
        if not self.monolingual_heads:
            return tuple(f"head.{l}." for l in locs)
        return ()

    def lr_at(self, step):
        if self.warmup_steps <= 0:
            return self.lr
        return self.lr * min(1.0, step / self.warmup_steps)

    def to_dict(self):
        return asdict(self)


@dataclass
class TrainLog:
    records: list = field(default_factory=list)

    def append(self, rec):
        self.records.append(rec)

    def losses(self):
        return [r["loss"] for r in self.records]

    def to_jsonl(self) -> str:
        return "".join(json.dumps(r, sort_keys=True) + "\n" for r in self.records)

    def without_timing(self):
        return [{k: v for k, v in r.items() if k != "wall_time"} for r in self.records]


# ---------------------------------------------------------------- training


def _accuracy(logp, targets, mask):
    hit = (logp.argmax(-1) == targets) & mask
    return float(hit.sum() / max(mask.sum(), 1))


def stage_loss(model: AcousticModel, batch: Batch, plan: TrainingPlan):
    """Total loss tensor, its named components and per-head frame accuracies."""
    t = batch.targets
    parts, acc = {}, {}
    if plan.stage == "bilingual-pretrain":
        hs = model.forward_shared(batch.features, batch.valid)
        routes = {}
        for i, u in enumerate(batch.utts):
            if len(u.locales) != 1:
                raise TrainingError(f"{u.id}: hard-routed pretraining needs single-locale utterances")
            routes.setdefault(next(iter(u.locales)), []).append(i)
        total = None
        n_all = batch.frames
        for loc in model.config.locales:
            idx = routes.get(loc)
            if not idx:
                continue
            valid = batch.valid[idx]
            h = model.forward_pe(loc, nc.take(hs, idx, axis=0), valid)
            logp = model.project_monolingual(loc, h)
            ce = nc.nll_loss(logp, t.per_locale[loc][idx], mask=valid)
            parts[f"route.{loc}"] = float(ce.data)
            acc[f"mono-{loc}"] = _accuracy(logp.data, t.per_locale[loc][idx], valid)
            term = nc.scale(ce, valid.sum() / n_all)
            total = term if total is None else total + term
        return total, parts, acc

    out = model.forward(batch.features, batch.valid, monolingual=plan.stage == "aux-joint")
    if plan.stage == "lid-finetune":
        main = loss_bilingual(out, t)
        lid = loss_lid(out, t)
        parts["combined"] = float(main.data)
        parts["lid"] = float(lid.data)
        acc["lid-combined"] = _accuracy(out.bilingual.data, t.bilingual, t.mask)
        acc["lid"] = _accuracy(out.lid_logp.data, t.lid, t.mask)
        total = nc.scale(main, plan.main_loss_weight) + nc.scale(lid, plan.lid_loss_weight)
        return total, parts, acc

    total = loss_aux(out, t, plan, parts)
    acc["bilingual"] = _accuracy(out.bilingual.data, t.bilingual, t.mask)
    for loc, lp in out.per_locale.items():
        acc[f"mono-{loc}"] = _accuracy(lp.data, t.per_locale[loc], t.mask)
    return total, parts, acc


def _check_stage(model: AcousticModel, plan: TrainingPlan):
    mode = model.config.combination_mode
    if plan.stage == "lid-finetune":
        if mode != "lid":
            raise TrainingError("lid-finetune needs a model built with combination_mode='lid'")
        if "bilingual-pretrain" not in model.history:
            raise TrainingError("lid-finetune needs a bilingual-pretrain checkpoint first")
    if plan.stage == "aux-joint" and mode != "aux":
        raise TrainingError("aux-joint needs a model built with combination_mode='aux'")


def _batches(rng, lengths, size, pool=8):
    """Shuffled batches of similar length (sorted within pools of ``pool`` batches)."""
    order = rng.permutation(len(lengths))
    batches = []
    for p in range(0, len(order), size * pool):
        chunk = sorted(order[p:p + size * pool], key=lambda i: (lengths[i], i))
        batches += [chunk[b:b + size] for b in range(0, len(chunk), size)]
    return [batches[i] for i in rng.permutation(len(batches))]


def train_stage(model: AcousticModel, data, plan: TrainingPlan, log_fn=None) -> TrainLog:
    """Run ``plan.epochs`` epochs of ``plan.stage`` over utterances ``data``."""
    _check_stage(model, plan)
    data = list(data)
    if not data:
        raise TrainingError("no training utterances")
    if model.history[-1:] != [plan.stage]:
        model.store.state.clear()
    if plan.stage == "lid-finetune" and plan.warm_start_combined and plan.stage not in model.history:
        model.warm_start_combined()
    model.store.set_trainable(plan.frozen_prefixes(model))
    log = TrainLog()
    step = model.steps.get(plan.stage, 0)
    bs = plan.batch_utterances
    for epoch in range(plan.epochs):
        t0 = time.perf_counter()
        rng = np.random.default_rng([plan.seed, epoch, len(model.history)])
        sums, frames = {}, 0
        for idx in _batches(rng, [u.frames for u in data], bs):
            batch = collate([data[i] for i in idx], model.space)
            with nc.Tape() as tape:
                model.store.zero_grad()
                total, parts, acc = stage_loss(model, batch, plan)
                nc.backward(tape, total)
            step += 1
            nc.adam_step(model.store, plan.lr_at(step), plan.beta1, plan.beta2, plan.eps)
            n = batch.frames
            frames += n
            for k, v in [("loss", float(total.data))] + [("loss." + k, v) for k, v in parts.items()] + [
                ("acc." + k, v) for k, v in acc.items()
            ]:
                sums[k] = sums.get(k, 0.0) + v * n
        rec = {k: v / frames for k, v in sorted(sums.items())}
        rec.update(
            epoch=epoch,
            stage=plan.stage,
            steps=step,
            wall_time=round(time.perf_counter() - t0, 3),
            checksum=model.store.checksum(),
        )
        log.append(rec)
        if log_fn is not None:
            log_fn(rec)
    model.steps[plan.stage] = step
    if model.history[-1:] != [plan.stage]:
        model.history.append(plan.stage)
    model.store.set_trainable(())
    return log


# ---------------------------------------------------------------- checkpoints


def save_checkpoint(model: AcousticModel, plan: TrainingPlan | None, path):
    """Write ``params.bin`` + ``model.json`` + ``space/`` into directory ``path``."""
    d = Path(path)
    d.mkdir(parents=True, exist_ok=True)
    model.space.save(d / "space")
    header = {
        "format": "BLXAM1",
        "config": model.config.to_dict(),
        "space": "space",
        "inventory_digest": model.space.digest(),
        "history": list(model.history),
        "steps": dict(sorted(model.steps.items())),
        "plan": None if plan is None else plan.to_dict(),
        "params": "params.bin",
    }
    nc.save_store(model.store, d / "params.bin")
    atomic_write_bytes(d / "model.json", (json.dumps(header, indent=2, sort_keys=True) + "\n").encode())


def load_checkpoint(path) -> AcousticModel:
    d = Path(path)
    try:
        header = json.loads((d / "model.json").read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as e:
        raise nc.CheckpointError(f"cannot read checkpoint header in {d}: {e}") from None
    if header.get("format") != "BLXAM1":
        raise nc.CheckpointError(f"unsupported checkpoint format {header.get('format')!r}")
    space = BilingualSpaceMap.load(d / header["space"])
    if space.digest() != header["inventory_digest"]:
        raise nc.CheckpointError("checkpoint inventory files do not match the header digest")
    store = nc.load_store(d / header["params"])
    model = AcousticModel(ModelConfig(**header["config"]), space, store)
    model.history = list(header["history"])
    model.steps = dict(header["steps"])
    return model
