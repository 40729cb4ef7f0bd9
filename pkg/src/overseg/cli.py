"""Command-line pipeline: screen, train, correct, evaluate.

Every command takes a JSON config (``--config``) whose keys mirror the long
flag names; flags given on the command line win. Outputs are written under
``--out`` and depend only on the inputs, the config and the seed.

Exit codes: 0 success, 1 runtime failure, 2 configuration or validation error.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from . import classifier as clf
from .features import VARIANTS, FeatureConfig, feature_length, feature_matrix, screen_candidates, write_candidates_csv
from .interpolate import KEEP, MERGE, CorrectionDecision, CorrectionError, apply_corrections, write_change_log
from .metrics import classification_report, stack_metrics, write_review_csv
from .ot import OTConfig
from .tilted import TiltedConfig, TiltedError, apply_tilted_merges, evaluate_tilted_pair, tilted_candidates
from .testkit import GapRecord
from .volume import VolumeFormatError, build_cell_index, load_volume, write_volume

log = logging.getLogger("overseg")


class ConfigError(ValueError):
    pass


@dataclass
class PipelineConfig:
    input: list[str] = field(default_factory=list)
    gt: list[str] = field(default_factory=list)
    model: str | None = None
    out: str | None = None
    seed: int | None = None
    variant: str = "default"
    max_gap: int = 1
    projections: int = 50
    threshold: float | None = None
    tilted: bool = False
    min_contact: int = 10
    dry_run: bool = False
    n_true: int = 20
    min_height: int = 4
    examples: str | None = None  # training from a feature CSV instead of volumes
    gap_records: list[str] = field(default_factory=list)  # ground truth for classification reports
    changes: list[str] = field(default_factory=list)
    formats: list[str] = field(default_factory=lambda: ["json", "csv"])

    @property
    def feature_config(self) -> FeatureConfig:
        return FeatureConfig(self.max_gap, self.variant, OTConfig(n_projections=self.projections, seed=self.seed))


def _listify(v):
    if v is None:
        return []
    return [v] if isinstance(v, str) else list(v)


def build_config(args: argparse.Namespace) -> PipelineConfig:
    doc: dict = {}
    if args.config:
        p = Path(args.config)
        if not p.is_file():
            raise ConfigError(f"config file not found: {p}")
        try:
            doc = json.loads(p.read_text())
        except json.JSONDecodeError as e:
            raise ConfigError(f"config is not valid JSON: {e}") from e
        if not isinstance(doc, dict):
            raise ConfigError("config must be a JSON object")
        doc = {k.replace("-", "_"): v for k, v in doc.items()}
        known = {f.name for f in fields(PipelineConfig)}
        unknown = sorted(set(doc) - known)
        if unknown:
            raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
    for f in fields(PipelineConfig):
        v = getattr(args, f.name, None)
        if v is None or v is False or v == []:
            continue
        doc[f.name] = v
    for k in ("input", "gt", "gap_records", "changes", "formats"):
        if k in doc:
            doc[k] = _listify(doc[k])
    cfg = PipelineConfig(**doc)
    validate(cfg, args.command)
    return cfg


def validate(cfg: PipelineConfig, command: str) -> None:
    if cfg.seed is None:
        raise ConfigError("a seed is required (--seed or \"seed\" in the config)")
    if not isinstance(cfg.seed, int) or cfg.seed < 0:
        raise ConfigError("seed must be a non-negative integer")
    if cfg.variant not in VARIANTS:
        raise ConfigError(f"variant must be one of {VARIANTS}")
    if cfg.max_gap < 0:
        raise ConfigError("max_gap must be >= 0")
    if cfg.projections < 1:
        raise ConfigError("projections must be >= 1")
    if cfg.threshold is not None and not 0.0 <= cfg.threshold <= 1.0:
        raise ConfigError("threshold must lie in [0, 1]")
    if not cfg.out:
        raise ConfigError("an output directory is required (--out)")
    for p in cfg.input + cfg.gt + cfg.gap_records + cfg.changes:
        if not _volume_exists(p):
            raise ConfigError(f"input not found: {p}")
    if command in ("screen", "correct") and not cfg.input:
        raise ConfigError(f"{command} needs at least one --input volume")
    if command == "correct":
        if not cfg.model or not Path(cfg.model).is_file():
            raise ConfigError(f"model file not found: {cfg.model}")
    if command == "train" and not cfg.input and not cfg.examples:
        raise ConfigError("train needs ground-truth --input volumes or an examples CSV")
    if command == "train" and cfg.examples and not Path(cfg.examples).is_file():
        raise ConfigError(f"examples file not found: {cfg.examples}")
    if command == "evaluate":
        if not cfg.input or len(cfg.input) != len(cfg.gt):
            raise ConfigError("evaluate needs matching numbers of --input and --gt volumes")
        if cfg.changes and len(cfg.changes) != len(cfg.gap_records):
            raise ConfigError("changes and gap_records must pair up")


def _volume_exists(p: str) -> bool:
    path = Path(p)
    return path.is_file() or path.with_name(path.name + ".lbl").is_file()


def _stem(p: str) -> str:
    name = Path(p).name
    for suf in (".lbl", ".json", ".tiff", ".tif"):
        if name.endswith(suf):
            return name[: -len(suf)]
    return name


def _write_json(obj, path: Path) -> None:
    path.write_text(json.dumps(obj, sort_keys=True, indent=1) + "\n")


class _Timer:
    def __init__(self, stage):
        self.stage = stage

    def __enter__(self):
        self.t0 = time.perf_counter()
        return self

    def __exit__(self, *exc):
        log.info("%s: %.2f s", self.stage, time.perf_counter() - self.t0)


# ---------------------------------------------------------------------------
# commands


def cmd_screen(cfg: PipelineConfig) -> int:
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    fcfg = cfg.feature_config
    for path in cfg.input:
        vol = load_volume(path)
        with _Timer(f"screen {path}"):
            index = build_cell_index(vol)
            pairs = screen_candidates(index, fcfg)
        with _Timer(f"features {path}"):
            X = feature_matrix(pairs, index, fcfg)
        write_candidates_csv(out / f"{_stem(path)}.candidates.csv", pairs, X, cfg.variant, Path(path).name)
        log.info("%s: %d candidates", path, len(pairs))
    return 0


def _read_examples(path: str):
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if len(rows) < 2:
        raise ConfigError(f"{path}: no examples")
    header, body = rows[0], rows[1:]
    if header[-1] != "label":
        raise ConfigError(f"{path}: last column must be 'label'")
    arr = np.array(body, dtype=np.float64)
    X, y = arr[:, :-1], arr[:, -1]
    return X, y


def cmd_train(cfg: PipelineConfig) -> int:
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    hp = clf.Hyperparams() if cfg.threshold is None else clf.Hyperparams(threshold=cfg.threshold)
    if cfg.examples:
        X, y = _read_examples(cfg.examples)
        # columns that do not form a pair-feature layout are taken as plain inputs
        variant = cfg.variant if X.shape[1] == feature_length(cfg.variant) else None
        model = clf.train((X, y), hp, seed=cfg.seed, variant=variant)
        sources = [cfg.examples]
    else:
        vols = [load_volume(p) for p in cfg.input]
        scfg = clf.SynthesisConfig(n_true=cfg.n_true, min_height=cfg.min_height, features=cfg.feature_config)
        with _Timer("synthesize training set"):
            examples = clf.synthesize_training_set(vols, scfg, seed=cfg.seed,
                                                   volume_ids=[Path(p).name for p in cfg.input])
        with _Timer("train"):
            model = clf.train(examples, hp, seed=cfg.seed, variant=cfg.variant)
        sources = [Path(p).name for p in cfg.input]
    model_path = Path(cfg.model) if cfg.model else out / "model.json"
    model_path.parent.mkdir(parents=True, exist_ok=True)
    clf.save_model(model, model_path)
    report = dict(model.report)
    report["sources"] = sources
    report["config"] = {k: v for k, v in asdict(cfg).items() if k not in ("input", "gt", "out", "model")}
    _write_json(report, out / "training_report.json")
    log.info("model written to %s (validation accuracy %s)", model_path, report.get("val_accuracy"))
    return 0


def _decisions_for(pairs, probs, threshold) -> list[CorrectionDecision]:
    return [CorrectionDecision(p.label_a, p.label_b, MERGE if pr >= threshold else KEEP, float(pr),
                               p.gap_layers) for p, pr in zip(pairs, probs)]


def _write_decisions_csv(path: Path, decisions) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["label_a", "label_b", "verdict", "probability", "gap_layers"])
        for d in decisions:
            w.writerow([d.label_a, d.label_b, d.verdict, repr(float(d.probability)),
                        " ".join(map(str, d.gap_layers))])


def cmd_correct(cfg: PipelineConfig) -> int:
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    model = clf.load_model(cfg.model)
    if model.variant is None:
        raise ConfigError(f"{cfg.model} was not trained on pair features")
    if cfg.threshold is not None:
        model.threshold = float(cfg.threshold)
    if model.variant != cfg.variant:
        log.info("using the model's feature variant %r", model.variant)
    fcfg = FeatureConfig(cfg.max_gap, model.variant, OTConfig(n_projections=cfg.projections, seed=cfg.seed))
    for path in cfg.input:
        vol = load_volume(path)
        stem = _stem(path)
        if cfg.tilted:
            with _Timer(f"tilted evaluation {path}"):
                tcfg = TiltedConfig(min_contact=cfg.min_contact, features=fcfg)
                decisions = []
                for a, b in tilted_candidates(vol, tcfg):
                    try:
                        decisions.append(evaluate_tilted_pair(vol, a, b, model, tcfg))
                    except TiltedError as e:
                        log.info("pair (%d, %d) skipped: %s", a, b, e)
            if not cfg.dry_run:
                corrected, changes = apply_tilted_merges(vol, decisions)
        else:
            with _Timer(f"screen and featurize {path}"):
                index = build_cell_index(vol)
                pairs = screen_candidates(index, fcfg)
                X = feature_matrix(pairs, index, fcfg)
            probs = clf.predict_proba(model, X) if len(pairs) else np.zeros(0)
            decisions = _decisions_for(pairs, probs, model.threshold)
            if not cfg.dry_run:
                with _Timer(f"interpolate and merge {path}"):
                    corrected, changes = apply_corrections(vol, decisions)
        _write_decisions_csv(out / f"{stem}.decisions.csv", decisions)
        n_merge = sum(d.verdict == MERGE for d in decisions)
        log.info("%s: %d candidates, %d merges", path, len(decisions), n_merge)
        if cfg.dry_run:
            continue
        write_volume(corrected, out / f"{stem}.corrected.lbl")
        write_change_log(changes, out / f"{stem}.changes.json")
        if "csv" in cfg.formats:
            write_review_csv(out / f"{stem}.review.csv", decisions, vol, corrected)
    return 0


def _truth_from_records(path: str) -> dict:
    recs = [GapRecord.from_json(d) for d in json.loads(Path(path).read_text())]
    return {(r.cell, r.fresh_label): True for r in recs}


def _decisions_from_changes(path: str) -> dict:
    return {(int(e["label_a"]), int(e["label_b"])): e["verdict"] == MERGE
            for e in json.loads(Path(path).read_text())}


def cmd_evaluate(cfg: PipelineConfig) -> int:
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    per_stack = {}
    for pred_path, gt_path in zip(cfg.input, cfg.gt):
        pred, gt = load_volume(pred_path), load_volume(gt_path)
        if pred.dims != gt.dims:
            raise ConfigError(f"dimension mismatch: {pred_path} {pred.dims} vs {gt_path} {gt.dims}")
        m = stack_metrics(pred, gt)
        per_stack[Path(pred_path).name] = m
        _write_json(m, out / f"{_stem(pred_path)}.metrics.json")
    summary = {"stacks": per_stack}
    if per_stack:
        for key in ("mAP", "jaccard_matched", "jaccard_penalized"):
            summary[f"mean_{key}"] = float(np.mean([m[key] for m in per_stack.values()]))
    if cfg.changes:
        decisions, truth = {}, {}
        for ch, gr in zip(cfg.changes, cfg.gap_records):
            tag = Path(ch).name
            decisions.update({(tag, *k): v for k, v in _decisions_from_changes(ch).items()})
            truth.update({(tag, *k): v for k, v in _truth_from_records(gr).items()})
        r, p, f1 = classification_report(decisions, truth)
        summary["classification"] = {"recall": r, "precision": p, "f1": f1}
    _write_json(summary, out / "metrics.json")
    return 0


COMMANDS = {"screen": cmd_screen, "train": cmd_train, "correct": cmd_correct, "evaluate": cmd_evaluate}


def make_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="overseg", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config")
        p.add_argument("--input", nargs="+")
        p.add_argument("--gt", nargs="+")
        p.add_argument("--model")
        p.add_argument("--out")
        p.add_argument("--seed", type=int)
        p.add_argument("--variant", choices=VARIANTS)
        p.add_argument("--max-gap", dest="max_gap", type=int)
        p.add_argument("--projections", type=int)
        p.add_argument("--threshold", type=float)
        p.add_argument("--tilted", action="store_true")
        p.add_argument("--min-contact", dest="min_contact", type=int)
        p.add_argument("--dry-run", dest="dry_run", action="store_true")
        p.add_argument("--n-true", dest="n_true", type=int)
        p.add_argument("--examples")
        p.add_argument("--gap-records", dest="gap_records", nargs="+")
        p.add_argument("--changes", nargs="+")
        p.add_argument("-v", "--verbose", action="store_true")
    return parser


VALIDATION_ERRORS = (ConfigError, VolumeFormatError, clf.ModelFormatError, clf.TrainingError, CorrectionError)


def main(argv=None) -> int:
    parser = make_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return 2 if e.code else 0
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        cfg = build_config(args)
        return COMMANDS[args.command](cfg)
    except VALIDATION_ERRORS as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except Exception as e:  # noqa: BLE001 - last-resort exit code
        log.exception("runtime failure")
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
