"""Command-line entry point.

::

    bilasr lexicon --words a.txt b.txt --locales A B --out lex/
    bilasr gen     --config run.json --out corpus/
    bilasr train   --config run.json --stage aux-joint --corpus corpus/ --out ckpt/
    bilasr eval    --config run.json --checkpoint ckpt/ --corpus corpus/ --out eval/
    bilasr trends  eval1/report.jsonl eval2/report.jsonl

Exit codes: 0 success, 1 usage or config error, 2 data error (missing or
malformed inputs), 3 internal invariant violation.
"""

from __future__ import annotations

import argparse
import contextlib
import copy
import json
import os
import shutil
import sys
import tempfile
from dataclasses import asdict
from pathlib import Path

import jsonschema

from . import numcore as nc
from . import synthdata as sd
from .decode_eval import (
    DecodeConfig,
    EvalError,
    EvalReport,
    InvariantError,
    compare_modes,
    evaluate_modes,
    trends_text,
)
from .lexicon import LexiconError, build_lexicon, merge_inventories, romanize
from .model import AcousticModel, ModelConfig, ModelError
from .training import STAGES, TrainingError, TrainingPlan, load_checkpoint, save_checkpoint, train_stage

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_INVARIANT = 0, 1, 2, 3


class ConfigError(ValueError):
    pass


class DataError(ValueError):
    pass


# ---------------------------------------------------------------- config

_INT = {"type": "integer"}
_NUM = {"type": "number", "minimum": 0}
_BOOL = {"type": "boolean"}
_OPT_INT = {"type": ["integer", "null"]}
_PAIR = {"type": "array", "items": {"type": "integer", "minimum": 0}, "minItems": 2, "maxItems": 2}


def _section(props):
    return {"type": "object", "properties": props, "additionalProperties": False}


SCHEMA = _section({
    "seed": _INT,
    "output_dir": {"type": ["string", "null"]},
    "corpus": _section({
        "n_words": _INT,
        "shared_fraction": _NUM,
        "feature_dim": _INT,
        "noise_var": _NUM,
        "proto_scale": _NUM,
        "min_separation": _NUM,
        "frames_per_unit": _PAIR,
        "silence_frames": _PAIR,
        "words_per_utt": _PAIR,
        "mixed_words": _PAIR,
        "sizes": {
            "type": "object",
            "additionalProperties": {
                "type": "object",
                "additionalProperties": {"type": "integer", "minimum": 0},
            },
        },
    }),
    "model": _section({
        "feature_dim": _INT,
        "model_dim": _INT,
        "heads": _INT,
        "ff_dim": _INT,
        "n_shared_layers": _INT,
        "n_pe_layers": _INT,
        "n_lid_layers": _INT,
        "chunk_frames": _OPT_INT,
        "left_context_frames": _OPT_INT,
        "locales": {"type": "array", "items": {"type": "string"}, "minItems": 2, "maxItems": 2},
        "combination_mode": {"enum": ["aux", "lid"]},
    }),
    "training": _section({
        "lid_loss_weight": _NUM,
        "aux_loss_weight": {"anyOf": [_NUM, {"type": "object", "additionalProperties": _NUM}]},
        "main_loss_weight": _NUM,
        "lr": _NUM,
        "warmup_steps": _INT,
        "beta1": _NUM,
        "beta2": _NUM,
        "eps": _NUM,
        "epochs": _INT,
        "batch_utterances": _INT,
        "freeze_shared_in_finetune": _BOOL,
        "monolingual_heads": _BOOL,
        "warm_start_combined": _BOOL,
    }),
    "decode": _section({
        "mode": {"type": "string"},
        "search": {"enum": ["greedy", "beam"]},
        "beam_width": _INT,
        "lm_weight": _NUM,
        "chunk_frames": _OPT_INT,
        "streaming": _BOOL,
    }),
})

CORPUS_DEFAULTS = {
    "n_words": 50,
    "shared_fraction": 0.1,
    "feature_dim": 16,
    "noise_var": 0.1,
    "proto_scale": 0.5,
    "min_separation": 0.5,
    "frames_per_unit": [2, 5],
    "silence_frames": [1, 3],
    "words_per_utt": [2, 5],
    "mixed_words": [1, 3],
    "sizes": sd.DEFAULT_SIZES,
}


class RunConfig:
    """Validated run configuration: ``seed`` plus corpus/model/training/decode sections."""

    def __init__(self, raw: dict | None = None):
        raw = {} if raw is None else raw
        errors = [
            f"{'/'.join(map(str, e.absolute_path)) or '<root>'}: {e.message}"
            for e in sorted(jsonschema.Draft202012Validator(SCHEMA).iter_errors(raw), key=lambda e: list(map(str, e.path)))
        ]
        if errors:
            raise ConfigError("invalid config:\n  " + "\n  ".join(errors))
        self.raw = copy.deepcopy(raw)
        self.seed = raw.get("seed", 0)
        self.output_dir = raw.get("output_dir")
        self.corpus = dict(copy.deepcopy(CORPUS_DEFAULTS), **raw.get("corpus", {}))
        self.model = dict(raw.get("model", {}))
        self.training = dict(raw.get("training", {}))
        self.decode = dict(raw.get("decode", {}))
        self._check_semantics()

    def _check_semantics(self):
        errors = []
        for name, build in (("model", self.model_config), ("training", lambda: self.plan("aux-joint")),
                            ("decode", self.decode_config)):
            try:
                build()
            except (ModelError, TrainingError, EvalError) as e:
                errors.append(f"{name}: {e}")
        fd = self.model.get("feature_dim", ModelConfig.feature_dim)
        if fd != self.corpus["feature_dim"]:
            errors.append(f"model/feature_dim {fd} differs from corpus/feature_dim {self.corpus['feature_dim']}")
        if errors:
            raise ConfigError("invalid config:\n  " + "\n  ".join(errors))

    @classmethod
    def load(cls, path, seed=None) -> "RunConfig":
        if path is None:
            raw = {}
        else:
            try:
                raw = json.loads(Path(path).read_text(encoding="utf-8"))
            except OSError as e:
                raise ConfigError(f"cannot read config {path}: {e.strerror}") from None
            except json.JSONDecodeError as e:
                raise ConfigError(f"{path}: not valid JSON ({e})") from None
        if seed is not None and isinstance(raw, dict):
            raw = dict(raw, seed=seed)
        return cls(raw)

    def model_config(self, **override) -> ModelConfig:
        return ModelConfig(**dict(self.model, seed=self.seed, **override))

    def plan(self, stage) -> TrainingPlan:
        return TrainingPlan(stage=stage, seed=self.seed, **self.training)

    def decode_config(self, **override) -> DecodeConfig:
        return DecodeConfig(**dict(self.decode, **override))

    def effective_json(self) -> str:
        """The fully defaulted config, as echoed into output directories."""
        model = self.model_config().to_dict()
        training = self.plan("aux-joint").to_dict()
        del model["seed"], training["seed"], training["stage"]
        eff = {
            "seed": self.seed,
            "output_dir": self.output_dir,
            "corpus": self.corpus,
            "model": model,
            "training": training,
            "decode": asdict(self.decode_config()),
        }
        return json.dumps(eff, indent=2, sort_keys=True) + "\n"


# ---------------------------------------------------------------- output dirs


@contextlib.contextmanager
def staged_output(out):
    """Write into a temp dir next to ``out``; move it into place on success.

    A ``<out>.lock`` file keeps two commands from sharing one output directory.
    """
    out = Path(out)
    out.parent.mkdir(parents=True, exist_ok=True)
    lock = out.parent / (out.name + ".lock")
    try:
        fd = os.open(lock, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
    except FileExistsError:
        raise DataError(f"output directory {out} is in use (lock file {lock})") from None
    os.write(fd, str(os.getpid()).encode())
    os.close(fd)
    tmp = Path(tempfile.mkdtemp(prefix=f".{out.name}.tmp-", dir=out.parent))
    try:
        yield tmp
        if out.exists():
            shutil.rmtree(out)
        os.replace(tmp, out)
    finally:
        if tmp.exists():
            shutil.rmtree(tmp, ignore_errors=True)
        lock.unlink(missing_ok=True)


def _write(path, text):
    Path(path).write_text(text, encoding="utf-8")


def _out_dir(args, cfg=None):
    out = args.out or (cfg.output_dir if cfg is not None else None)
    if not out:
        raise ConfigError("no output directory: pass --out or set output_dir in the config")
    return Path(out)


# ---------------------------------------------------------------- commands


def read_wordlist(path):
    """Words from a one-per-line UTF-8 list; errors carry line numbers."""
    try:
        data = Path(path).read_bytes()
    except OSError as e:
        raise DataError(f"cannot read word list {path}: {e.strerror}") from None
    words, errors = [], []
    for n, line in enumerate(data.splitlines(), 1):
        try:
            text = line.decode("utf-8").strip()
        except UnicodeDecodeError:
            errors.append(f"{path}:{n}: malformed UTF-8")
            continue
        if not text or text.startswith("#"):
            continue
        try:
            romanize(text)
        except LexiconError as e:
            errors.append(f"{path}:{n}: {e}")
            continue
        words.append(text)
    if errors:
        raise DataError("\n".join(errors))
    return words


def cmd_lexicon(word_paths, locales, out, echo=print):
    if len(word_paths) != 2 or len(locales) != 2:
        raise ConfigError("lexicon needs exactly two word lists and two locale ids")
    if locales[0] == locales[1]:
        raise ConfigError("locale ids must differ")
    lists = [read_wordlist(p) for p in word_paths]
    lexs = [build_lexicon(words, loc) for words, loc in zip(lists, locales)]
    space = merge_inventories(*lexs)
    with staged_output(out) as tmp:
        for lex in lexs:
            lex.save(tmp / f"lexicon.{lex.locale}.txt")
        space.save(tmp / "space")
    echo(f"sharing\t{space.sharing():.4f}\tbilingual_units\t{len(space.bilingual)}\t"
         + "\t".join(f"{loc}_units\t{len(space.per_locale[loc])}" for loc in locales))
    return space


def gen_specs(cfg: RunConfig):
    c = cfg.corpus
    return sd.gen_locale_specs(
        cfg.seed, c["n_words"], c["shared_fraction"], feature_dim=c["feature_dim"], noise_var=c["noise_var"],
        proto_scale=c["proto_scale"], min_separation=c["min_separation"],
        locales=tuple(cfg.model_config().locales),
        frames_per_unit=tuple(c["frames_per_unit"]), silence_frames=tuple(c["silence_frames"]),
    )


def cmd_gen(cfg: RunConfig, out, echo=print):
    specs = gen_specs(cfg)
    man = sd.build_corpus(specs, cfg.corpus["sizes"], seed=cfg.seed,
                          words_per_utt=tuple(cfg.corpus["words_per_utt"]),
                          mixed_words=tuple(cfg.corpus["mixed_words"]))
    with staged_output(out) as tmp:
        man.write(tmp)
        _write(tmp / "config.json", cfg.effective_json())
    for (split, cond), n in sorted(man.counts().items()):
        echo(f"{split}\t{cond}\t{n}")
    return man


def _read_corpus(path):
    p = Path(path)
    if not (p / "manifest.txt").is_file():
        raise DataError(f"no corpus at {p} (missing manifest.txt); run `bilasr gen` first")
    return sd.CorpusManifest.read(p)


def _read_checkpoint(path):
    p = Path(path)
    if not (p / "model.json").is_file():
        raise DataError(f"no checkpoint at {p} (missing model.json); run `bilasr train` first")
    return load_checkpoint(p)


def cmd_train(cfg: RunConfig, stage, corpus, out, init=None, conditions=None, echo=print):
    plan = cfg.plan(stage)
    man = _read_corpus(corpus)
    if stage == "lid-finetune" and init is None:
        raise DataError("lid-finetune needs a bilingual-pretrain checkpoint: pass --init")
    if init is not None:
        model = _read_checkpoint(init)
    else:
        model = AcousticModel(cfg.model_config(), man.space)
    if model.space.digest() != man.space.digest():
        raise DataError("checkpoint and corpus unit inventories differ")
    data = [u for c in (conditions or man.conditions("train")) for u in man.select("train", c)]
    if not data:
        raise DataError(f"no training utterances for conditions {conditions or man.conditions('train')}")
    records = []
    with staged_output(out) as tmp:
        train_stage(model, data, plan, log_fn=lambda r: (records.append(r), echo(
            f"{r['stage']} epoch {r['epoch']}: loss {r['loss']:.4f} ({r['wall_time']:.1f}s)")))
        save_checkpoint(model, plan, tmp)
        _write(tmp / "train_log.jsonl", "".join(
            json.dumps({k: v for k, v in r.items() if k != "wall_time"}, sort_keys=True) + "\n" for r in records))
        _write(tmp / "timing.jsonl", "".join(
            json.dumps({"epoch": r["epoch"], "wall_time": r["wall_time"]}) + "\n" for r in records))
        _write(tmp / "config.json", cfg.effective_json())
    return model


def cmd_eval(cfg: RunConfig, checkpoint, corpus, out, modes=None, system=None, echo=print):
    model = _read_checkpoint(checkpoint)
    man = _read_corpus(corpus)
    if modes:
        dc = cfg.decode_config(mode=modes[0])
    elif "mode" in cfg.decode:
        dc = cfg.decode_config()
        modes = [dc.mode]
    else:
        modes = [model.modes()[0]]
        dc = cfg.decode_config(mode=modes[0])
    report = evaluate_modes(model, man, dc, modes, system=system or Path(checkpoint).name)
    with staged_output(out) as tmp:
        _write(tmp / "report.txt", report.to_text())
        _write(tmp / "report.jsonl", report.to_jsonl())
        _write(tmp / "config.json", cfg.effective_json())
    echo(report.to_text().rstrip("\n"))
    return report


def cmd_trends(report_paths, baseline=None, out=None, echo=print):
    reports = []
    for p in report_paths:
        p = Path(p)
        if p.is_dir():
            p = p / "report.jsonl"
        try:
            reports.append(EvalReport.from_jsonl(p.read_text(encoding="utf-8")))
        except OSError as e:
            raise DataError(f"cannot read report {p}: {e.strerror}") from None
        except (ValueError, KeyError, TypeError) as e:
            raise DataError(f"{p}: not an EvalReport ({e})") from None
    rows = compare_modes(reports, baseline)
    text = trends_text(rows)
    if out:
        Path(out).write_text(text, encoding="utf-8")
    echo(text.rstrip("\n"))
    return rows


# ---------------------------------------------------------------- argparse


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def build_parser():
    p = _Parser(prog="bilasr", description="Bilingual hybrid-ASR toolkit on synthetic corpora.")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    lx = sub.add_parser("lexicon", help="build grapheme lexicons and the bilingual unit space")
    lx.add_argument("--words", nargs=2, required=True, metavar="FILE", help="two UTF-8 word lists, one word per line")
    lx.add_argument("--locales", nargs=2, default=["A", "B"], metavar="ID", help="locale ids (default: A B)")
    lx.add_argument("--out", required=True, help="output directory")

    def common(sp):
        sp.add_argument("--config", help="JSON run config (defaults apply to missing keys)")
        sp.add_argument("--seed", type=int, help="override the config seed")
        sp.add_argument("--out", help="output directory (default: config output_dir)")

    g = sub.add_parser("gen", help="generate a synthetic bilingual corpus")
    common(g)

    t = sub.add_parser("train", help="run one training stage")
    common(t)
    t.add_argument("--stage", required=True, choices=STAGES, help="training stage")
    t.add_argument("--corpus", required=True, help="corpus directory from `bilasr gen`")
    t.add_argument("--init", help="checkpoint to continue from (required for lid-finetune)")
    t.add_argument("--condition", action="append", help="restrict training data to this condition (repeatable)")
    t.add_argument("--epochs", type=int, help="override training.epochs")

    e = sub.add_parser("eval", help="decode and score the test split")
    common(e)
    e.add_argument("--checkpoint", required=True, help="checkpoint directory from `bilasr train`")
    e.add_argument("--corpus", required=True, help="corpus directory from `bilasr gen`")
    e.add_argument("--mode", action="append", help="decoding mode (repeatable; default: the model's main mode)")
    e.add_argument("--system", help="system label in the report (default: checkpoint directory name)")

    tr = sub.add_parser("trends", help="WERR table between EvalReports")
    tr.add_argument("reports", nargs="+", help="report.jsonl files or eval directories")
    tr.add_argument("--baseline", help="baseline 'system/mode' (default: first report's first mode)")
    tr.add_argument("--out", help="also write the table to this file")
    return p


def _dispatch(args):
    if args.command == "lexicon":
        cmd_lexicon(args.words, args.locales, Path(args.out))
        return
    if args.command == "trends":
        cmd_trends(args.reports, args.baseline, args.out)
        return
    cfg = RunConfig.load(args.config, args.seed)
    if getattr(args, "epochs", None) is not None:
        raw = copy.deepcopy(cfg.raw)
        raw.setdefault("training", {})["epochs"] = args.epochs
        cfg = RunConfig(raw)
    out = _out_dir(args, cfg)
    if args.command == "gen":
        cmd_gen(cfg, out)
    elif args.command == "train":
        cmd_train(cfg, args.stage, args.corpus, out, args.init, args.condition)
    elif args.command == "eval":
        cmd_eval(cfg, args.checkpoint, args.corpus, out, args.mode, args.system)


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        _dispatch(args)
    except ConfigError as e:
        print(f"bilasr: {e}", file=sys.stderr)
        return EXIT_USAGE
    except InvariantError as e:
        print(f"bilasr: invariant violated: {e}", file=sys.stderr)
        return EXIT_INVARIANT
    except (DataError, LexiconError, sd.SynthError, nc.CheckpointError, EvalError, ModelError, TrainingError,
            OSError) as e:
        print(f"bilasr: {e}", file=sys.stderr)
        return EXIT_DATA
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
