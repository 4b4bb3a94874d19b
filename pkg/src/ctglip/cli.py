"""Command-line entry point: ``ctglip <command> ...``.

Commands: synth, train, eval-organs, eval-abnormality, report-parse.
Exit codes: 0 success, 1 I/O failure, 2 invalid config or missing input,
3 numeric divergence during training.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

import torch

from .abnodict import AbnormalityDictionary, DictionaryError, load_dictionary
from .encoders import EncoderConfig, EncoderConfigError, text_encoder_from_json
from .experiment import BENCHMARK_ORGANS, benchmark_dictionary
from .losses import LossConfig, TrainingDivergence
from .metrics import aggregate_detection, top1_accuracy
from .reportproc import DEFAULT_NEGATIONS, LexiconError, OrganLexicon, parse_report
from .synthdata import CohortConfigError, CohortSpec, OrganSpec, generate_cohort, mix_seed, read_manifest
from .trainer import Checkpoint, TrainConfig, TrainConfigError, fit
from .zeroshot import default_probes, evaluate_abnormality, evaluate_organs, load_probes

log = logging.getLogger("ctglip")

EXIT_OK = 0
EXIT_IO = 1
EXIT_INVALID = 2
EXIT_DIVERGED = 3


class ConfigError(ValueError):
    """Invalid run configuration; the message names the offending field."""


class MissingInput(ValueError):
    def __init__(self, what: str, path):
        super().__init__(f"missing {what}: {path}")
        self.what = what
        self.path = path


# -- run configuration -------------------------------------------------------

_SECTIONS = ("seed", "cohort", "encoder", "train", "loss", "text_encoder", "paths")
_COHORT_KEYS = {f.name for f in fields(CohortSpec)}
_PATH_KEYS = ("lexicon", "dictionary", "probes", "output")


def _check_keys(doc: dict, allowed, where: str) -> None:
    if not isinstance(doc, dict):
        raise ConfigError(f"{where}: expected an object")
    unknown = sorted(set(doc) - set(allowed))
    if unknown:
        raise ConfigError(f"{where}: unknown key(s) {', '.join(unknown)}")


def _organs_from_json(entries) -> tuple[OrganSpec, ...]:
    organs = []
    for k, e in enumerate(entries):
        _check_keys(e, ("id", "name", "synonyms", "abnormalities"), f"cohort.organs[{k}]")
        organs.append(
            OrganSpec(int(e["id"]), e["name"], tuple(e.get("synonyms", ())), tuple(e.get("abnormalities", ())))
        )
    return tuple(organs)


def _build(cls, doc: dict, where: str, **extra):
    """Instantiate a config dataclass, mapping validation errors to ConfigError."""
    _check_keys(doc, {f.name for f in fields(cls)}, where)
    kwargs = {k: tuple(v) if isinstance(v, list) else v for k, v in doc.items()}
    kwargs.update(extra)
    try:
        return cls(**kwargs)
    except (ValueError, TypeError) as exc:
        raise ConfigError(f"{where}: {exc}") from exc


@dataclass(frozen=True)
class RunConfig:
    seed: int = 0
    cohort: CohortSpec = CohortSpec(0, BENCHMARK_ORGANS)
    encoder: EncoderConfig = EncoderConfig()
    train: TrainConfig = TrainConfig()
    loss: LossConfig = LossConfig()
    text_encoder: dict = field(default_factory=lambda: {"kind": "stub", "dim": 128, "seed": 0})
    paths: dict[str, Path | None] = field(default_factory=dict)

    @classmethod
    def from_json(cls, doc: dict, base: Path) -> "RunConfig":
        _check_keys(doc, _SECTIONS, "config")
        seed = doc.get("seed", 0)
        if not isinstance(seed, int) or seed < 0:
            raise ConfigError("seed: must be a non-negative integer")

        cohort_doc = dict(doc.get("cohort", {}))
        _check_keys(cohort_doc, _COHORT_KEYS, "cohort")
        organs = _organs_from_json(cohort_doc.pop("organs")) if "organs" in cohort_doc else BENCHMARK_ORGANS
        cohort_doc.setdefault("n_subjects", 0)
        cohort_doc.setdefault("master_seed", mix_seed(seed, 1))
        try:
            cohort = _build(CohortSpec, cohort_doc, "cohort", organs=organs)
        except CohortConfigError as exc:
            raise ConfigError(f"cohort: {exc}") from exc

        encoder = _build(EncoderConfig, doc.get("encoder", {}), "encoder")
        train_doc = dict(doc.get("train", {}))
        train_doc.setdefault("seed", seed)
        train = _build(TrainConfig, train_doc, "train")
        loss = _build(LossConfig, doc.get("loss", {}), "loss")

        text = dict(doc.get("text_encoder", {}))
        _check_keys(text, ("kind", "dim", "seed", "path"), "text_encoder")
        text.setdefault("kind", "stub")
        if text["kind"] == "stub":
            text.setdefault("dim", encoder.d)
            text.setdefault("seed", seed)
            if text["dim"] != encoder.d:
                raise ConfigError(f"text_encoder.dim: {text['dim']} does not match encoder.d {encoder.d}")
        elif text["kind"] == "precomputed":
            if "path" not in text:
                raise ConfigError("text_encoder.path: required for precomputed encoders")
            text["path"] = str(base / text["path"])
        else:
            raise ConfigError(f"text_encoder.kind: unknown kind {text['kind']!r}")

        paths_doc = doc.get("paths", {})
        _check_keys(paths_doc, _PATH_KEYS, "paths")
        paths = {k: (base / v if v is not None else None) for k, v in paths_doc.items()}
        return cls(seed, cohort, encoder, train, loss, text, paths)

    @classmethod
    def load(cls, path) -> "RunConfig":
        path = Path(path)
        if not path.exists():
            raise MissingInput("config", path)
        try:
            doc = json.loads(path.read_text(encoding="utf-8"))
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}:{exc.lineno}:{exc.colno}: {exc.msg}") from exc
        return cls.from_json(doc, path.resolve().parent)

    def lexicon(self) -> OrganLexicon:
        path = self.paths.get("lexicon")
        if path is None:
            return self.cohort.lexicon()
        if not path.exists():
            raise MissingInput("lexicon", path)
        return OrganLexicon.load(path)

    def dictionary(self) -> AbnormalityDictionary:
        path = self.paths.get("dictionary")
        if path is None:
            return benchmark_dictionary(self.cohort.organs)
        if not path.exists():
            raise MissingInput("dictionary", path)
        return load_dictionary(path)

    def probes(self):
        path = self.paths.get("probes")
        if path is None:
            return default_probes({o.name: o.abnormalities for o in self.cohort.organs})
        if not path.exists():
            raise MissingInput("probes", path)
        return load_probes(path)


# -- helpers -----------------------------------------------------------------

def _threads() -> int | None:
    raw = os.environ.get("CTGLIP_THREADS")
    if not raw:
        return None
    try:
        n = int(raw)
    except ValueError:
        raise ConfigError(f"CTGLIP_THREADS: expected a positive integer, got {raw!r}") from None
    if n < 1:
        raise ConfigError(f"CTGLIP_THREADS: expected a positive integer, got {raw!r}")
    return n


def _load_config(args) -> RunConfig:
    return RunConfig.load(args.config) if getattr(args, "config", None) else RunConfig()


def _manifest(path):
    path = Path(path)
    if not path.exists():
        raise MissingInput("manifest", path)
    return read_manifest(path)


def _checkpoint(path) -> Checkpoint:
    path = Path(path)
    if not path.exists():
        raise MissingInput("checkpoint", path)
    return Checkpoint.load(path)


def _emit(doc: dict, out: Path | None) -> None:
    text = json.dumps(doc, indent=1, sort_keys=True) + "\n"
    if out is None:
        return
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(text, encoding="utf-8")
    print(f"wrote {out}")


def _fmt(x) -> str:
    return "n/a" if x is None else f"{x:.4f}"


def _output_path(args, cfg: RunConfig, default_name: str) -> Path | None:
    if getattr(args, "out", None):
        return Path(args.out)
    base = cfg.paths.get("output")
    return base / default_name if base is not None else None


# -- commands ----------------------------------------------------------------

def cmd_synth(args) -> int:
    cfg = _load_config(args)
    spec = cfg.cohort
    if args.n is not None:
        spec = replace(spec, n_subjects=args.n)
    workers = min(_threads() or 1, os.cpu_count() or 1)
    manifest = generate_cohort(spec, Path(args.out), workers=workers)
    print(manifest.path)
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = _load_config(args)
    train = cfg.train
    if args.mode is not None:
        train = replace(train, vanilla_clip=args.mode == "vanilla")
    if args.no_dict:
        train = replace(train, enable_dict=False)
    if args.no_ot:
        train = replace(train, enable_ot=False)
    if args.epochs is not None:
        train = replace(train, epochs=args.epochs)
    manifest = _manifest(args.data)
    lexicon = cfg.lexicon()
    dictionary = cfg.dictionary() if train.enable_dict and not train.vanilla_clip else None
    text = text_encoder_from_json(cfg.text_encoder)
    out = Path(args.out)
    try:
        ckpt = fit(
            train,
            manifest,
            out,
            lexicon=lexicon,
            text_encoder=text,
            encoder_cfg=cfg.encoder,
            loss_cfg=cfg.loss,
            dictionary=dictionary,
            resume=not args.restart,
        )
    except TrainingDivergence as exc:
        print(f"error: training diverged: {exc}", file=sys.stderr)
        dump = getattr(exc, "dump_path", None)
        if dump is not None:
            print(f"diagnostics: {dump}", file=sys.stderr)
        return EXIT_DIVERGED
    print(f"{train.mode} training: {ckpt.step}/{ckpt.total_steps} steps")
    print(out / "final.ckpt" if ckpt.step == ckpt.total_steps else out / "last.ckpt")
    return EXIT_OK


def _model_and_text(ckpt: Checkpoint, lexicon_path):
    lexicon = ckpt.lexicon
    if lexicon_path is not None:
        if not Path(lexicon_path).exists():
            raise MissingInput("lexicon", lexicon_path)
        lexicon = OrganLexicon.load(lexicon_path)
    return ckpt.build_model(), text_encoder_from_json(ckpt.text_encoder), lexicon


def cmd_eval_organs(args) -> int:
    cfg = _load_config(args)
    ckpt = _checkpoint(args.checkpoint)
    manifest = _manifest(args.data)
    model, text, lexicon = _model_and_text(ckpt, args.lexicon or cfg.paths.get("lexicon"))
    rows = evaluate_organs(model, text, manifest, lexicon)
    top1 = top1_accuracy([r["predicted"] for r in rows], [r["organ"] for r in rows]) if rows else None
    per_organ = {}
    for oid in lexicon.ids():
        sub = [r for r in rows if r["organ"] == oid]
        if sub:
            per_organ[lexicon.name(oid)] = top1_accuracy([r["predicted"] for r in sub], [oid] * len(sub))
    doc = {"top1": top1, "n_regions": len(rows), "per_organ": per_organ, "rows": rows}
    print(f"{'organ':<16}{'top-1':>10}")
    for name, acc in per_organ.items():
        print(f"{name:<16}{acc:>10.4f}")
    print(f"{'overall':<16}{_fmt(top1):>10}  ({len(rows)} regions)")
    _emit(doc, _output_path(args, cfg, "eval_organs.json"))
    return EXIT_OK


def cmd_eval_abnormality(args) -> int:
    cfg = _load_config(args)
    ckpt = _checkpoint(args.checkpoint)
    manifest = _manifest(args.data)
    model, text, lexicon = _model_and_text(ckpt, args.lexicon or cfg.paths.get("lexicon"))
    if args.probes:
        if not Path(args.probes).exists():
            raise MissingInput("probes", args.probes)
        probes = load_probes(args.probes)
    else:
        probes = cfg.probes()
    rows = evaluate_abnormality(model, text, manifest, probes, lexicon, ckpt.loss_config.tau)
    summary = aggregate_detection(rows)
    print(f"{'abnormality':<28}{'PPV':>8}{'Sens':>8}{'F1':>8}{'AUC':>8}")
    for name, m in summary["per_abnormality"].items():
        print(f"{name:<28}{_fmt(m['ppv']):>8}{_fmt(m['sensitivity']):>8}{_fmt(m['f1']):>8}{_fmt(m['auc']):>8}")
    for mode in ("micro", "macro"):
        m = summary[mode]
        print(f"{mode:<28}{_fmt(m['ppv']):>8}{_fmt(m['sensitivity']):>8}{_fmt(m['f1']):>8}{_fmt(m['auc']):>8}")
    _emit({"summary": summary, "rows": rows}, _output_path(args, cfg, "eval_abnormality.json"))
    return EXIT_OK


def _report_files(source: Path):
    """(name, text, ground truth or None) for a report directory or manifest."""
    if source.is_file():
        manifest = read_manifest(source)
        for rec in manifest.records:
            yield rec.subject_id, manifest.resolve(rec.report_path).read_text(encoding="utf-8"), rec.ground_truth
        return
    if not source.is_dir():
        raise MissingInput("reports", source)
    for path in sorted(source.glob("*.txt")):
        yield path.name, path.read_text(encoding="utf-8"), None


def cmd_report_parse(args) -> int:
    cfg = _load_config(args)
    lexicon_path = args.lexicon or cfg.paths.get("lexicon")
    if lexicon_path is not None and not Path(lexicon_path).exists():
        raise MissingInput("lexicon", lexicon_path)
    lexicon = OrganLexicon.load(lexicon_path) if lexicon_path is not None else cfg.lexicon()
    reports = {}
    mismatches = []
    n_abnormal = 0
    for name, text, truth in _report_files(Path(args.reports)):
        parsed = parse_report(text, lexicon, DEFAULT_NEGATIONS)
        reports[name] = parsed.to_json()
        found = parsed.abnormal_organs()
        n_abnormal += len(found)
        if truth is not None:
            expected = {o for o, a in truth.abnormal.items() if a}
            if found != expected:
                mismatches.append({"report": name, "expected": sorted(expected), "parsed": sorted(found)})
    doc = {"reports": reports, "n_reports": len(reports), "n_abnormal": n_abnormal, "mismatches": mismatches}
    print(f"{'reports':<20}{len(reports):>8}")
    print(f"{'abnormal findings':<20}{n_abnormal:>8}")
    print(f"{'mismatches':<20}{len(mismatches):>8}")
    _emit(doc, _output_path(args, cfg, "reports_parsed.json"))
    return EXIT_OK


# -- entry point ---------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="ctglip", description="Grounded vision-language pretraining on CT volumes.")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", help="generate a synthetic cohort")
    s.add_argument("--config", required=True)
    s.add_argument("--out", required=True, help="output directory")
    s.add_argument("--n", type=int, help="override cohort.n_subjects")
    s.set_defaults(func=cmd_synth)

    t = sub.add_parser("train", help="pretrain a model")
    t.add_argument("--config", required=True)
    t.add_argument("--data", required=True, help="training manifest.jsonl")
    t.add_argument("--out", required=True, help="run directory")
    t.add_argument("--mode", choices=("vanilla", "grounded"))
    t.add_argument("--no-dict", action="store_true", help="disable dictionary negatives")
    t.add_argument("--no-ot", action="store_true", help="disable organ-text alignment")
    t.add_argument("--epochs", type=int, help="override train.epochs")
    t.add_argument("--restart", action="store_true", help="ignore an existing last.ckpt")
    t.set_defaults(func=cmd_train)

    for name, func, help_ in (
        ("eval-organs", cmd_eval_organs, "zero-shot organ classification"),
        ("eval-abnormality", cmd_eval_abnormality, "zero-shot abnormality detection"),
    ):
        e = sub.add_parser(name, help=help_)
        e.add_argument("--checkpoint", required=True)
        e.add_argument("--data", required=True, help="evaluation manifest.jsonl")
        e.add_argument("--config")
        e.add_argument("--lexicon", help="override the lexicon stored in the checkpoint")
        e.add_argument("--out", help="results JSON path")
        if name == "eval-abnormality":
            e.add_argument("--probes", help="probe JSON file")
        e.set_defaults(func=func)

    r = sub.add_parser("report-parse", help="split reports into per-organ descriptions")
    r.add_argument("--reports", required=True, help="directory of .txt reports, or a manifest.jsonl")
    r.add_argument("--config")
    r.add_argument("--lexicon")
    r.add_argument("--out", help="results JSON path")
    r.set_defaults(func=cmd_report_parse)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(asctime)s %(name)s %(levelname)s %(message)s",
        stream=sys.stderr,
    )
    try:
        threads = _threads()
        if threads is not None:
            torch.set_num_threads(threads)
        return args.func(args)
    except MissingInput as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except (
        ConfigError,
        CohortConfigError,
        TrainConfigError,
        EncoderConfigError,
        LexiconError,
        DictionaryError,
    ) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID


if __name__ == "__main__":
    sys.exit(main())
